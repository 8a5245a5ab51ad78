#pragma once

#include <functional>

#include "roboscape/autograd.hpp"
#include "roboscape/tensor.hpp"

namespace rs {

// Additive mask sentinel for blocked attention entries (exp underflows to 0).
template <class T>
constexpr T kMaskBlocked = static_cast<T>(-1e30);

// softmax(Q Kᵀ/√d + mask) V with mask entries in {0, blocked}.
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                               const Tensor<T>& mask) {
  RS_CHECK(Q.ndim() == 2 && K.ndim() == 2 && V.ndim() == 2 && mask.ndim() == 2,
           "attention: all inputs must be 2-D");
  const int n = Q.rows(), d = Q.cols(), m = K.rows();
  RS_CHECK(d >= 1, "attention: d must be >= 1");
  RS_CHECK(K.cols() == d, "attention: K dim %d != Q dim %d", K.cols(), d);
  RS_CHECK(V.rows() == m, "attention: V rows %d != K rows %d", V.rows(), m);
  RS_CHECK(mask.rows() == n && mask.cols() == m, "attention: mask must be %dx%d, got %s", n, m,
           shape_str(mask.shape).c_str());
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  const int dv = V.cols();
  Tensor<T> out({n, dv});
  std::vector<T> row(static_cast<size_t>(m));
  for (int i = 0; i < n; ++i) {
    bool any_allowed = false;
    for (int j = 0; j < m; ++j) {
      T s = 0;
      for (int c = 0; c < d; ++c) s += Q.at(i, c) * K.at(j, c);
      const T mv = mask.at(i, j);
      if (mv > kMaskBlocked<T> / 2) any_allowed = true;
      row[static_cast<size_t>(j)] = s * scale + mv;
    }
    RS_CHECK(any_allowed, "attention: row %d is fully masked", i);
    softmax_row(row.data(), m);
    T* o = out.ptr() + static_cast<int64_t>(i) * dv;
    std::memset(o, 0, sizeof(T) * static_cast<size_t>(dv));
    for (int j = 0; j < m; ++j) {
      const T p = row[static_cast<size_t>(j)];
      const T* vj = V.ptr() + static_cast<int64_t>(j) * dv;
      for (int c = 0; c < dv; ++c) o[c] += p * vj[c];
    }
  }
  return out;
}

// (x - mean)/sqrt(var + eps) * gain + bias over the last axis.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const int d = x.cols();
  RS_CHECK(d >= 1 && gain.numel() == d && bias.numel() == d,
           "layer_norm: gain/bias must have %d entries", d);
  RS_CHECK(eps > T(0), "layer_norm: eps must be positive");
  const int n = static_cast<int>(x.numel() / d);
  Tensor<T> out(x.shape);
  for (int i = 0; i < n; ++i) {
    const T* xr = x.ptr() + static_cast<int64_t>(i) * d;
    T mu = 0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    T* o = out.ptr() + static_cast<int64_t>(i) * d;
    for (int j = 0; j < d; ++j) o[j] = (xr[j] - mu) * inv * gain.data[static_cast<size_t>(j)] + bias.data[static_cast<size_t>(j)];
  }
  return out;
}

// -(1/N) sum_i log softmax(logits)[i, target_i].
template <class T>
T softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  RS_CHECK(logits.ndim() == 2, "softmax_cross_entropy: logits must be 2-D");
  const int n = logits.rows(), V = logits.cols();
  RS_CHECK(static_cast<int>(targets.size()) == n, "softmax_cross_entropy: target count mismatch");
  T acc = 0;
  for (int i = 0; i < n; ++i) {
    const int ti = targets[static_cast<size_t>(i)];
    RS_CHECK(ti >= 0 && ti < V, "softmax_cross_entropy: target %d out of range [0,%d)", ti, V);
    const T* row = logits.ptr() + static_cast<int64_t>(i) * V;
    T mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (int j = 0; j < V; ++j) s += std::exp(row[j] - mx);
    acc += mx + std::log(s) - row[ti];
  }
  return acc / static_cast<T>(n);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t n_checked = 0;
};

// Central differences against reverse-mode gradients for every param in the
// store. loss(true) must run a fresh tape and accumulate grads; loss(false)
// must only evaluate. Large tensors are subsampled (coords_per_param > 0)
// with a seeded pick so runs are reproducible.
inline GradCheckReport gradcheck(ParamStore<double>& params,
                                 const std::function<double(bool)>& loss, double h,
                                 int coords_per_param = 0, uint64_t seed = 0) {
  RS_CHECK(h > 0, "gradcheck: h must be positive");
  params.zero_grad();
  const double f0 = loss(true);
  RS_FAIL_IF(!std::isfinite(f0), "gradcheck: f(theta) is not finite");
  std::vector<std::vector<double>> g_ad(params.size());
  for (size_t p = 0; p < params.size(); ++p) g_ad[p] = params[p].grad.data;

  GradCheckReport rep;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  for (size_t p = 0; p < params.size(); ++p) {
    if (!params[p].trainable) continue;
    auto& theta = params[p].value.data;
    const int64_t n = static_cast<int64_t>(theta.size());
    std::vector<int64_t> coords;
    if (coords_per_param <= 0 || n <= coords_per_param) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int c = 0; c < coords_per_param; ++c)
        coords.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));
    }
    for (const int64_t c : coords) {
      const double orig = theta[static_cast<size_t>(c)];
      theta[static_cast<size_t>(c)] = orig + h;
      const double fp = loss(false);
      theta[static_cast<size_t>(c)] = orig - h;
      const double fm = loss(false);
      theta[static_cast<size_t>(c)] = orig;
      RS_FAIL_IF(!std::isfinite(fp) || !std::isfinite(fm), "gradcheck: non-finite f near theta");
      const double g_fd = (fp - fm) / (2.0 * h);
      const double g = g_ad[p][static_cast<size_t>(c)];
      const double rel = std::abs(g - g_fd) / std::max(1e-8, std::abs(g) + std::abs(g_fd));
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.n_checked;
    }
  }
  return rep;
}

// Single-tensor convenience: f is a pure function of theta, g_ad supplied by
// the caller (e.g. from a tape run).
inline GradCheckReport gradcheck_fn(const std::function<double(const Tensor<double>&)>& f,
                                    Tensor<double> theta, const Tensor<double>& g_ad, double h) {
  RS_CHECK(h > 0, "gradcheck: h must be positive");
  RS_CHECK(theta.same_shape(g_ad), "gradcheck: grad shape mismatch");
  RS_FAIL_IF(!std::isfinite(f(theta)), "gradcheck: f(theta) is not finite");
  GradCheckReport rep;
  for (int64_t c = 0; c < theta.numel(); ++c) {
    const double orig = theta.data[static_cast<size_t>(c)];
    theta.data[static_cast<size_t>(c)] = orig + h;
    const double fp = f(theta);
    theta.data[static_cast<size_t>(c)] = orig - h;
    const double fm = f(theta);
    theta.data[static_cast<size_t>(c)] = orig;
    const double g_fd = (fp - fm) / (2.0 * h);
    const double g = g_ad.data[static_cast<size_t>(c)];
    const double rel = std::abs(g - g_fd) / std::max(1e-8, std::abs(g) + std::abs(g_fd));
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
    ++rep.n_checked;
  }
  return rep;
}

}  // namespace rs
