#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "roboscape/autograd.hpp"

// Physics-informed supervision: keypoint selection by motion magnitude, the
// keypoint feature-consistency loss, the {1,gamma} spatiotemporal attention
// map, and the weighted token cross-entropies they feed.
namespace rs::physics {

// Sum of consecutive Euclidean distances over a pixel trajectory; steps with
// either endpoint invalid contribute 0.
inline double motion_magnitude(const float* xy, const uint8_t* valid, int T) {
  RS_CHECK(T >= 2, "motion_magnitude: need T >= 2");
  double acc = 0;
  for (int t = 0; t + 1 < T; ++t) {
    if (valid && (!valid[t] || !valid[t + 1])) continue;
    const double dx = static_cast<double>(xy[(t + 1) * 2]) - xy[t * 2];
    const double dy = static_cast<double>(xy[(t + 1) * 2 + 1]) - xy[t * 2 + 1];
    acc += std::sqrt(dx * dx + dy * dy);
  }
  return acc;
}

// K trajectories in token-grid coordinates (cell_x = floor(x/alpha), clamped).
struct SampledKeypoints {
  int K = 0, T = 0;
  std::vector<int> cell_x, cell_y;  // K*T
  std::vector<uint8_t> valid;       // K*T
  std::vector<int> source_index;    // K indices into the dense set
  std::vector<double> motion;       // K motion magnitudes, descending
};

// Top-K most active trajectories by motion magnitude (ties -> lower index),
// mapped to token cells.
inline SampledKeypoints select_keypoints(const float* dense_xy, const uint8_t* dense_valid,
                                         int N0, int T, int K, int alpha, int grid_h,
                                         int grid_w) {
  RS_CHECK(K >= 1 && K <= N0, "select_keypoints: K=%d out of range [1,%d]", K, N0);
  std::vector<int> order(static_cast<size_t>(N0));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> mag(static_cast<size_t>(N0));
  for (int i = 0; i < N0; ++i)
    mag[static_cast<size_t>(i)] = motion_magnitude(dense_xy + static_cast<int64_t>(i) * T * 2,
                                                   dense_valid ? dense_valid + static_cast<int64_t>(i) * T : nullptr, T);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (mag[static_cast<size_t>(a)] != mag[static_cast<size_t>(b)])
      return mag[static_cast<size_t>(a)] > mag[static_cast<size_t>(b)];
    return a < b;
  });
  SampledKeypoints out;
  out.K = K;
  out.T = T;
  out.cell_x.resize(static_cast<size_t>(K) * T);
  out.cell_y.resize(static_cast<size_t>(K) * T);
  out.valid.resize(static_cast<size_t>(K) * T);
  for (int r = 0; r < K; ++r) {
    const int i = order[static_cast<size_t>(r)];
    out.source_index.push_back(i);
    out.motion.push_back(mag[static_cast<size_t>(i)]);
    for (int t = 0; t < T; ++t) {
      const float x = dense_xy[(static_cast<int64_t>(i) * T + t) * 2];
      const float y = dense_xy[(static_cast<int64_t>(i) * T + t) * 2 + 1];
      int cx = static_cast<int>(std::floor(x / static_cast<float>(alpha)));
      int cy = static_cast<int>(std::floor(y / static_cast<float>(alpha)));
      cx = std::clamp(cx, 0, grid_w - 1);
      cy = std::clamp(cy, 0, grid_h - 1);
      out.cell_x[static_cast<size_t>(r) * T + t] = cx;
      out.cell_y[static_cast<size_t>(r) * T + t] = cy;
      out.valid[static_cast<size_t>(r) * T + t] =
          dense_valid ? dense_valid[static_cast<int64_t>(i) * T + t] : 1;
    }
  }
  return out;
}

// Per-(frame, cell) loss weights: gamma on cells crossed by any sampled
// trajectory, 1 elsewhere. Frames are the paper's 1..T.
struct AttnMap {
  int T = 0, grid_h = 0, grid_w = 0;
  std::vector<float> a;  // T*grid_h*grid_w, entries in {1, gamma}

  float at(int t, int cy, int cx) const {
    return a[(static_cast<size_t>(t) * grid_h + cy) * grid_w + cx];
  }
};

inline AttnMap attention_map(const SampledKeypoints& kp, int T, int grid_h, int grid_w,
                             float gamma) {
  RS_CHECK(gamma >= 1.0f, "attention_map: gamma must be >= 1");
  RS_CHECK(kp.T == T, "attention_map: trajectory length %d != T %d", kp.T, T);
  AttnMap m;
  m.T = T;
  m.grid_h = grid_h;
  m.grid_w = grid_w;
  m.a.assign(static_cast<size_t>(T) * grid_h * grid_w, 1.0f);
  for (int r = 0; r < kp.K; ++r)
    for (int t = 0; t < T; ++t) {
      if (!kp.valid[static_cast<size_t>(r) * T + t]) continue;
      const int cx = kp.cell_x[static_cast<size_t>(r) * T + t];
      const int cy = kp.cell_y[static_cast<size_t>(r) * T + t];
      m.a[(static_cast<size_t>(t) * grid_h + cy) * grid_w + cx] = gamma;  // set, not multiply
    }
  return m;
}

// Mean token cross-entropy (Eq. 4 with a mean reduction so lambda defaults
// stay scale-free across grid sizes).
template <class T>
int loss_token_ce(Tape<T>& t, int logits, std::vector<int> targets) {
  const int n = t.val(logits).rows();
  RS_CHECK(static_cast<int>(targets.size()) == n, "loss_token_ce: target count mismatch");
  return op_softmax_xent(t, logits, std::move(targets), {}, T(1) / static_cast<T>(n));
}

// Attention-weighted mean cross-entropy; with all-ones weights this is the
// same op (and bit pattern) as loss_token_ce.
template <class T>
int loss_attention(Tape<T>& t, int logits, std::vector<int> targets, std::vector<T> weights) {
  const int n = t.val(logits).rows();
  RS_CHECK(static_cast<int>(targets.size()) == n && static_cast<int>(weights.size()) == n,
           "loss_attention: row count mismatch");
  return op_softmax_xent(t, logits, std::move(targets), std::move(weights),
                         T(1) / static_cast<T>(n));
}

// Row indices into the hidden feature map for the keypoint loss.
//   hidden rows are (b*Tin + slot)*cells + cell, slot = paper frame - 2.
struct KeypointRows {
  std::vector<int> tracked;  // one per (keypoint, frame t=2..T) term kept
  std::vector<int> anchor;   // same length; frame-1 cells
};

inline KeypointRows keypoint_rows(const SampledKeypoints& kp, int b, int Tin, int cells,
                                  int grid_w) {
  KeypointRows rows;
  RS_CHECK(kp.T == Tin + 1, "keypoint_rows: trajectories must span Tin+1 frames");
  for (int r = 0; r < kp.K; ++r) {
    if (!kp.valid[static_cast<size_t>(r) * kp.T]) continue;  // anchor invalid -> drop keypoint
    const int anchor_cell = kp.cell_y[static_cast<size_t>(r) * kp.T] * grid_w +
                            kp.cell_x[static_cast<size_t>(r) * kp.T];
    for (int tp = 2; tp <= kp.T; ++tp) {  // paper frames 2..T
      if (!kp.valid[static_cast<size_t>(r) * kp.T + (tp - 1)]) continue;
      const int cell = kp.cell_y[static_cast<size_t>(r) * kp.T + (tp - 1)] * grid_w +
                       kp.cell_x[static_cast<size_t>(r) * kp.T + (tp - 1)];
      rows.tracked.push_back((b * Tin + (tp - 2)) * cells + cell);
      rows.anchor.push_back((b * Tin + 0) * cells + anchor_cell);
    }
  }
  return rows;
}

// Mean squared feature distance between tracked cells and their frame-1
// anchors. Anchors are gradient-stopped; for finite-difference verification
// pass the anchor features captured at the base point instead.
template <class T>
int loss_keypoint(Tape<T>& t, int hidden, const KeypointRows& rows,
                  const Tensor<T>* frozen_anchors = nullptr) {
  RS_CHECK(rows.tracked.size() == rows.anchor.size(), "loss_keypoint: row list mismatch");
  if (rows.tracked.empty()) return t.constant(Tensor<T>({1}, T(0)));
  const int tracked = op_gather_rows(t, hidden, rows.tracked);
  int anchor;
  if (frozen_anchors) {
    anchor = t.constant(*frozen_anchors);
  } else {
    anchor = op_gather_rows(t, hidden, rows.anchor, /*stop_grad=*/true);
  }
  const int diff = op_sub(t, tracked, anchor);
  return op_sum_sq_scale(t, diff, T(1) / static_cast<T>(rows.tracked.size()));
}

// Eq. 8: L = L_RGB + l1*L_Depth + l2*L_Keypoint + l3*L_Attention.
// Pass -1 for terms absent under an ablation.
template <class T>
int total_loss(Tape<T>& t, int l_rgb, int l_depth, int l_keypoint, int l_attention, T lambda1,
               T lambda2, T lambda3) {
  RS_CHECK(lambda1 >= T(0) && lambda2 >= T(0) && lambda3 >= T(0),
           "total_loss: lambdas must be >= 0");
  std::vector<int> ids = {l_rgb};
  std::vector<T> co = {T(1)};
  if (l_depth >= 0) {
    ids.push_back(l_depth);
    co.push_back(lambda1);
  }
  if (l_keypoint >= 0) {
    ids.push_back(l_keypoint);
    co.push_back(lambda2);
  }
  if (l_attention >= 0) {
    ids.push_back(l_attention);
    co.push_back(lambda3);
  }
  return op_combine_scalars(t, ids, co);
}

}  // namespace rs::physics
