#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "roboscape/autograd.hpp"
#include "roboscape/numerics.hpp"

// Dual-branch co-autoregressive transformer: parallel RGB and depth stacks of
// spatial-temporal blocks (bidirectional attention over cells within a frame,
// causal attention over time per cell), conditioned on shared action and
// position embeddings. After each block the depth features are projected and
// added into the RGB stream; nothing flows back, so depth logits are
// independent of RGB inputs. Logits at input position t predict frame t+1.
namespace rs::dct {

struct ModelConfig {
  int L = 2, D = 64, heads = 4;
  int T_max = 16;
  int grid_h = 8, grid_w = 8;
  int V_rgb = 512, V_depth = 512;
  int k = 3;
  int ffn_mult = 4;
  std::string preset = "nano";
  bool no_depth = false;  // ablation: depth branch and injection absent

  int cells() const { return grid_h * grid_w; }

  nlohmann::json to_json() const {
    return {{"L", L},         {"D", D},       {"heads", heads},   {"T_max", T_max},
            {"grid_h", grid_h}, {"grid_w", grid_w}, {"V_rgb", V_rgb}, {"V_depth", V_depth},
            {"k", k},         {"ffn_mult", ffn_mult}, {"preset", preset}, {"no_depth", no_depth}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.L = j.at("L");
    c.D = j.at("D");
    c.heads = j.at("heads");
    c.T_max = j.at("T_max");
    c.grid_h = j.at("grid_h");
    c.grid_w = j.at("grid_w");
    c.V_rgb = j.at("V_rgb");
    c.V_depth = j.at("V_depth");
    c.k = j.at("k");
    c.ffn_mult = j.at("ffn_mult");
    c.preset = j.at("preset");
    c.no_depth = j.at("no_depth");
    return c;
  }
};

// Desk-scale mirror of the paper's S/M/L variants.
inline ModelConfig preset(const std::string& name) {
  ModelConfig c;
  c.preset = name;
  if (name == "nano") {
    c.L = 2;
    c.D = 64;
    c.heads = 4;
  } else if (name == "micro") {
    c.L = 4;
    c.D = 128;
    c.heads = 8;
  } else if (name == "mini") {
    c.L = 6;
    c.D = 256;
    c.heads = 8;
  } else {
    throw UsageError("unknown preset '" + name + "' (nano|micro|mini)");
  }
  return c;
}

// Closed-form parameter count; kept in sync with init_params by the tests.
inline int64_t param_count(const ModelConfig& c) {
  const int64_t D = c.D;
  const int64_t attn = 2 * D + (D * 3 * D + 3 * D) + (D * D + D);
  const int64_t ffn = 2 * D + (D * c.ffn_mult * D + c.ffn_mult * D) + (c.ffn_mult * D * D + D);
  const int64_t block = 2 * attn + ffn;
  auto branch = [&](int64_t V) { return V * D + c.L * block + 2 * D + (D * V + V); };
  int64_t total = branch(c.V_rgb);
  if (!c.no_depth) total += branch(c.V_depth) + c.L * (D * D + D);  // + injection
  total += (c.k * D + D) + (D * D + D);              // action encoder
  total += static_cast<int64_t>(c.cells()) * D + static_cast<int64_t>(c.T_max) * D;  // positions
  return total;
}

template <class T>
struct WorldModelT {
  ModelConfig cfg;
  ParamStore<T> params;
};

using WorldModel = WorldModelT<float>;

namespace detail {

template <class T>
void add_branch_params(WorldModelT<T>& m, const std::string& br, int V, Rng& rng) {
  const ModelConfig& c = m.cfg;
  const int D = c.D;
  auto winit = [&](const std::string& name, int fan_in, std::vector<int> shape) {
    const T b = T(1) / std::sqrt(static_cast<T>(fan_in));
    m.params.add(name, Tensor<T>::uniform(std::move(shape), rng, -b, b));
  };
  m.params.add(br + ".embed", Tensor<T>::normal({V, D}, rng, T(0), T(0.02)));
  for (int l = 0; l < c.L; ++l) {
    const std::string blk = br + ".blk" + std::to_string(l);
    for (const char* attn : {".sattn", ".tattn"}) {
      m.params.add(blk + attn + ".ln.g", Tensor<T>({D}, T(1)));
      m.params.add(blk + attn + ".ln.b", Tensor<T>({D}, T(0)));
      winit(blk + attn + ".qkv.w", D, {D, 3 * D});
      m.params.add(blk + attn + ".qkv.b", Tensor<T>({3 * D}, T(0)));
      winit(blk + attn + ".out.w", D, {D, D});
      m.params.add(blk + attn + ".out.b", Tensor<T>({D}, T(0)));
    }
    m.params.add(blk + ".ffn.ln.g", Tensor<T>({D}, T(1)));
    m.params.add(blk + ".ffn.ln.b", Tensor<T>({D}, T(0)));
    winit(blk + ".ffn.w1", D, {D, c.ffn_mult * D});
    m.params.add(blk + ".ffn.b1", Tensor<T>({c.ffn_mult * D}, T(0)));
    winit(blk + ".ffn.w2", c.ffn_mult * D, {c.ffn_mult * D, D});
    m.params.add(blk + ".ffn.b2", Tensor<T>({D}, T(0)));
  }
  m.params.add(br + ".final_ln.g", Tensor<T>({D}, T(1)));
  m.params.add(br + ".final_ln.b", Tensor<T>({D}, T(0)));
  winit(br + ".head.w", D, {D, V});
  m.params.add(br + ".head.b", Tensor<T>({V}, T(0)));
}

}  // namespace detail

// Weights ~ uniform(+-1/sqrt(fan_in)), embeddings ~ N(0, 0.02). The action
// encoder's output layer and every depth->RGB projection start at zero, so an
// untrained model ignores actions and matches its depth-ablated twin.
template <class T>
WorldModelT<T> make_model(const ModelConfig& cfg, uint64_t seed) {
  RS_CHECK(cfg.D % cfg.heads == 0, "D=%d not divisible by heads=%d", cfg.D, cfg.heads);
  RS_CHECK(cfg.L >= 1 && cfg.T_max >= 2, "invalid model config");
  WorldModelT<T> m;
  m.cfg = cfg;
  Rng rng = Rng(seed).fork("model-init");
  const int D = cfg.D;
  // shared parameters first so a no_depth model draws an identical prefix
  detail::add_branch_params(m, "rgb", cfg.V_rgb, rng);
  {
    const T b = T(1) / std::sqrt(static_cast<T>(cfg.k));
    m.params.add("act.w1", Tensor<T>::uniform({cfg.k, D}, rng, -b, b));
    m.params.add("act.b1", Tensor<T>({D}, T(0)));
    m.params.add("act.w2", Tensor<T>({D, D}, T(0)));  // zero-init head
    m.params.add("act.b2", Tensor<T>({D}, T(0)));
  }
  m.params.add("pos.spatial", Tensor<T>::normal({cfg.cells(), D}, rng, T(0), T(0.02)));
  m.params.add("pos.temporal", Tensor<T>::normal({cfg.T_max, D}, rng, T(0), T(0.02)));
  if (!cfg.no_depth) {
    detail::add_branch_params(m, "depth", cfg.V_depth, rng);
    for (int l = 0; l < cfg.L; ++l) {
      m.params.add("inj" + std::to_string(l) + ".w", Tensor<T>({D, D}, T(0)));
      m.params.add("inj" + std::to_string(l) + ".b", Tensor<T>({D}, T(0)));
    }
  }
  return m;
}

// Additive causal mask: entry (i,j) is 0 iff j <= i, else blocked.
template <class T = float>
Tensor<T> causal_mask(int T_len) {
  RS_CHECK(T_len >= 1, "causal_mask: T must be >= 1");
  Tensor<T> m({T_len, T_len}, T(0));
  for (int i = 0; i < T_len; ++i)
    for (int j = i + 1; j < T_len; ++j) m.at(i, j) = kMaskBlocked<T>;
  return m;
}

// Teacher-forced inputs: token/action histories for frames 1..Tin.
struct TokenBatch {
  int B = 0, Tin = 0, cells = 0, k = 3;
  std::vector<int> rgb_tokens;    // B*Tin*cells
  std::vector<int> depth_tokens;  // B*Tin*cells (empty when no_depth)
  std::vector<float> actions;     // B*Tin*k, normalized to [-1,1]
};

template <class T>
struct ForwardNodes {
  int rgb_logits = -1;    // [B*Tin*cells, V_rgb]
  int depth_logits = -1;  // [B*Tin*cells, V_depth], -1 when depth ablated
  int rgb_hidden = -1;    // [B*Tin*cells, D], final pre-head features
};

namespace detail {

// Row permutation (b,t,s) -> (b,s,t) for per-cell temporal attention.
inline std::shared_ptr<const std::vector<int>> ts_perm(int B, int Tin, int cells) {
  auto p = std::make_shared<std::vector<int>>(static_cast<size_t>(B) * Tin * cells);
  int dst = 0;
  for (int b = 0; b < B; ++b)
    for (int s = 0; s < cells; ++s)
      for (int t = 0; t < Tin; ++t) (*p)[static_cast<size_t>(dst++)] = (b * Tin + t) * cells + s;
  return p;
}

inline std::shared_ptr<const std::vector<int>> st_perm(int B, int Tin, int cells) {
  auto p = std::make_shared<std::vector<int>>(static_cast<size_t>(B) * Tin * cells);
  int dst = 0;
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < Tin; ++t)
      for (int s = 0; s < cells; ++s) (*p)[static_cast<size_t>(dst++)] = (b * cells + s) * Tin + t;
  return p;
}

template <class T>
int attn_sublayer(Tape<T>& t, WorldModelT<T>& m, const std::string& pre, int h, int groups,
                  int len, bool causal) {
  const int ln = op_layer_norm(t, h, t.leaf(m.params.get(pre + ".ln.g")),
                               t.leaf(m.params.get(pre + ".ln.b")), T(1e-5));
  const int qkv = op_linear(t, ln, t.leaf(m.params.get(pre + ".qkv.w")),
                            t.leaf(m.params.get(pre + ".qkv.b")));
  const int att = op_mha(t, qkv, groups, len, m.cfg.heads, causal);
  return op_linear(t, att, t.leaf(m.params.get(pre + ".out.w")),
                   t.leaf(m.params.get(pre + ".out.b")));
}

// One spatial-temporal block with pre-norm residual sublayers.
template <class T>
int st_block(Tape<T>& t, WorldModelT<T>& m, const std::string& blk, int h, int B, int Tin,
             const std::shared_ptr<const std::vector<int>>& to_ts,
             const std::shared_ptr<const std::vector<int>>& to_st) {
  const int cells = m.cfg.cells();
  h = op_add(t, h, attn_sublayer(t, m, blk + ".sattn", h, B * Tin, cells, /*causal=*/false));
  {
    const int ht = op_permute_rows(t, h, to_ts);
    const int at = attn_sublayer(t, m, blk + ".tattn", ht, B * cells, Tin, /*causal=*/true);
    h = op_add(t, h, op_permute_rows(t, at, to_st));
  }
  {
    const int ln = op_layer_norm(t, h, t.leaf(m.params.get(blk + ".ffn.ln.g")),
                                 t.leaf(m.params.get(blk + ".ffn.ln.b")), T(1e-5));
    const int h1 = op_gelu(t, op_linear(t, ln, t.leaf(m.params.get(blk + ".ffn.w1")),
                                        t.leaf(m.params.get(blk + ".ffn.b1"))));
    h = op_add(t, h, op_linear(t, h1, t.leaf(m.params.get(blk + ".ffn.w2")),
                               t.leaf(m.params.get(blk + ".ffn.b2"))));
  }
  return h;
}

}  // namespace detail

// Two-layer perceptron over normalized actions; one embedding row per frame.
template <class T>
int action_embed(Tape<T>& t, WorldModelT<T>& m, const std::vector<float>& actions, int rows) {
  RS_CHECK(static_cast<int>(actions.size()) == rows * m.cfg.k,
           "action_embed: expected %d x k=%d actions, got %zu", rows, m.cfg.k, actions.size());
  Tensor<T> a({rows, m.cfg.k});
  for (size_t i = 0; i < actions.size(); ++i) a.data[i] = static_cast<T>(actions[i]);
  const int in = t.constant(std::move(a));
  const int h1 = op_gelu(t, op_linear(t, in, t.leaf(m.params.get("act.w1")),
                                      t.leaf(m.params.get("act.b1"))));
  return op_linear(t, h1, t.leaf(m.params.get("act.w2")), t.leaf(m.params.get("act.b2")));
}

template <class T>
ForwardNodes<T> forward(Tape<T>& t, WorldModelT<T>& m, const TokenBatch& batch) {
  const ModelConfig& c = m.cfg;
  const int B = batch.B, Tin = batch.Tin, cells = c.cells();
  RS_CHECK(Tin >= 1 && Tin <= c.T_max, "forward: Tin=%d exceeds T_max=%d", Tin, c.T_max);
  RS_CHECK(batch.cells == cells, "forward: grid mismatch (%d vs %d cells)", batch.cells, cells);
  RS_CHECK(static_cast<int>(batch.rgb_tokens.size()) == B * Tin * cells,
           "forward: rgb token count mismatch");
  RS_CHECK(c.no_depth || static_cast<int>(batch.depth_tokens.size()) == B * Tin * cells,
           "forward: depth token count mismatch");
  RS_CHECK(static_cast<int>(batch.actions.size()) == B * Tin * c.k,
           "forward: action count mismatch");

  const auto to_ts = detail::ts_perm(B, Tin, cells);
  const auto to_st = detail::st_perm(B, Tin, cells);

  // shared conditioning: spatial positions tile over frames, temporal
  // positions and action embeddings broadcast over cells
  std::vector<int> trows(static_cast<size_t>(B) * Tin);
  for (int b = 0; b < B; ++b)
    for (int ti = 0; ti < Tin; ++ti) trows[static_cast<size_t>(b) * Tin + ti] = ti;
  const int tpos = op_gather_rows(t, t.leaf(m.params.get("pos.temporal")), trows);
  const int act = action_embed(t, m, batch.actions, B * Tin);

  auto embed_stream = [&](const std::string& br, const std::vector<int>& tokens) {
    int h = op_embedding(t, t.leaf(m.params.get(br + ".embed")), tokens);
    h = op_add_rows_tiled(t, h, t.leaf(m.params.get("pos.spatial")));
    h = op_add_rows_grouped(t, h, tpos, cells);
    h = op_add_rows_grouped(t, h, act, cells);
    return h;
  };

  int h_rgb = embed_stream("rgb", batch.rgb_tokens);
  int h_depth = -1;
  if (!c.no_depth) h_depth = embed_stream("depth", batch.depth_tokens);

  for (int l = 0; l < c.L; ++l) {
    const std::string ls = std::to_string(l);
    if (!c.no_depth)
      h_depth = detail::st_block(t, m, "depth.blk" + ls, h_depth, B, Tin, to_ts, to_st);
    h_rgb = detail::st_block(t, m, "rgb.blk" + ls, h_rgb, B, Tin, to_ts, to_st);
    if (!c.no_depth) {
      const int inj = op_linear(t, h_depth, t.leaf(m.params.get("inj" + ls + ".w")),
                                t.leaf(m.params.get("inj" + ls + ".b")));
      h_rgb = op_add(t, h_rgb, inj);
    }
  }

  ForwardNodes<T> out;
  out.rgb_hidden = op_layer_norm(t, h_rgb, t.leaf(m.params.get("rgb.final_ln.g")),
                                 t.leaf(m.params.get("rgb.final_ln.b")), T(1e-5));
  out.rgb_logits = op_linear(t, out.rgb_hidden, t.leaf(m.params.get("rgb.head.w")),
                             t.leaf(m.params.get("rgb.head.b")));
  if (!c.no_depth) {
    const int dh = op_layer_norm(t, h_depth, t.leaf(m.params.get("depth.final_ln.g")),
                                 t.leaf(m.params.get("depth.final_ln.b")), T(1e-5));
    out.depth_logits = op_linear(t, dh, t.leaf(m.params.get("depth.head.w")),
                                 t.leaf(m.params.get("depth.head.b")));
  }
  return out;
}

// Normalization helpers shared by the trainer and the eval harness.
inline float normalize_action_component(float v, int dim, float v_max) {
  if (dim == 2) return 2.0f * std::clamp(v, 0.0f, 1.0f) - 1.0f;  // grip in [0,1]
  return std::clamp(v / v_max, -1.0f, 1.0f);
}

inline std::vector<float> normalize_actions(const float* raw, int n_frames, int k, float v_max) {
  std::vector<float> out(static_cast<size_t>(n_frames) * k);
  for (int i = 0; i < n_frames; ++i)
    for (int d = 0; d < k; ++d)
      out[static_cast<size_t>(i) * k + d] =
          normalize_action_component(raw[static_cast<size_t>(i) * k + d], d, v_max);
  return out;
}

}  // namespace rs::dct
