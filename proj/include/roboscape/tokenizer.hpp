#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "roboscape/autograd.hpp"
#include "roboscape/checkpoint.hpp"
#include "roboscape/rng.hpp"

// Small VQ image tokenizer. The encoder is a k=alpha, stride=alpha
// convolution (non-overlapping patch embedding) followed by per-cell MLP
// layers, so each token depends on exactly one alpha x alpha patch and a
// constant frame maps to a constant token grid. Decoding inverts the layout:
// per-cell MLP back to patch pixels. RGB and depth use separate instances.
namespace rs::tokenizer {

struct TokenizerConfig {
  int V = 512;    // vocabulary size
  int Dc = 32;    // code dimension
  int alpha = 8;  // spatial downsampling (three stride-2 stages)
  int C = 3;      // input channels (3 = rgb, 1 = depth)
  int H = 64, W = 64;
  int enc_h = 128, dec_h = 160;  // per-cell MLP widths
  int steps = 2000;
  int batch = 16;
  float lr = 2e-3f;
  float beta_commit = 0.05f;
  float beta_cycle = 0.5f;  // pulls enc(dec(code)) back onto the code
  float ema_decay = 0.99f;

  int grid_h() const { return H / alpha; }
  int grid_w() const { return W / alpha; }

  int patch_dim() const { return alpha * alpha * C; }

  nlohmann::json to_json() const {
    return {{"V", V}, {"Dc", Dc}, {"alpha", alpha}, {"C", C},
            {"H", H}, {"W", W},   {"enc_h", enc_h}, {"dec_h", dec_h}};
  }
  static TokenizerConfig from_json(const nlohmann::json& j) {
    TokenizerConfig c;
    c.V = j.at("V");
    c.Dc = j.at("Dc");
    c.alpha = j.at("alpha");
    c.C = j.at("C");
    c.H = j.at("H");
    c.W = j.at("W");
    c.enc_h = j.at("enc_h");
    c.dec_h = j.at("dec_h");
    return c;
  }
};

struct Codebook {
  int V = 0, Dc = 0;
  Tensor<float> table;                // V x Dc
  std::vector<int64_t> usage_counts;  // cumulative training-time assignments
  std::vector<float> ema_count;       // V
  Tensor<float> ema_sum;              // V x Dc

  void init(int V_, int Dc_) {
    V = V_;
    Dc = Dc_;
    table = Tensor<float>({V, Dc});
    usage_counts.assign(static_cast<size_t>(V), 0);
    ema_count.assign(static_cast<size_t>(V), 0.0f);
    ema_sum = Tensor<float>({V, Dc}, 0.0f);
  }
};

struct Tokenizer {
  TokenizerConfig cfg;
  ParamStore<float> params;
  Codebook codebook;

  uint64_t weights_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < params.size(); ++i) {
      const auto& v = const_cast<ParamStore<float>&>(params)[i].value.data;
      h = fnv1a(v.data(), v.size() * sizeof(float), h);
    }
    h = fnv1a(codebook.table.data.data(), codebook.table.data.size() * sizeof(float), h);
    return h;
  }
};

// A frame token grid plus the encoder's pre-quantization features.
struct EncodeResult {
  std::vector<int> grid;      // grid_h * grid_w indices
  Tensor<float> pre_quant;    // (grid_h*grid_w) x Dc
};

namespace detail {

inline void init_params(Tokenizer& tk, Rng& rng) {
  const TokenizerConfig& c = tk.cfg;
  auto winit = [&](std::string name, int fan_in, std::vector<int> shape) -> Param<float>& {
    const float b = 1.0f / std::sqrt(static_cast<float>(fan_in));
    return tk.params.add(std::move(name), Tensor<float>::uniform(std::move(shape), rng, -b, b));
  };
  const int pd = c.patch_dim();
  winit("enc1.w", pd, {pd, c.Dc});
  tk.params.add("enc1.b", Tensor<float>({c.Dc}, 0.0f));
  winit("dec1.w", c.Dc, {c.Dc, c.dec_h});
  tk.params.add("dec1.b", Tensor<float>({c.dec_h}, 0.0f));
  winit("dec2.w", c.dec_h, {c.dec_h, c.dec_h});
  tk.params.add("dec2.b", Tensor<float>({c.dec_h}, 0.0f));
  winit("dec3.w", c.dec_h, {c.dec_h, pd});
  tk.params.add("dec3.b", Tensor<float>({pd}, 0.0f));
}

// Row permutation taking a {B,H,W,C}-flattened [B*H*W, C] matrix into patch
// order [B*cells*(alpha*alpha), C]; rows of one patch become contiguous.
inline std::shared_ptr<const std::vector<int>> patch_perm(const TokenizerConfig& c, int B) {
  const int gh = c.grid_h(), gw = c.grid_w(), a = c.alpha;
  auto perm = std::make_shared<std::vector<int>>(static_cast<size_t>(B) * c.H * c.W);
  int dst = 0;
  for (int b = 0; b < B; ++b)
    for (int py = 0; py < gh; ++py)
      for (int px = 0; px < gw; ++px)
        for (int iy = 0; iy < a; ++iy)
          for (int ix = 0; ix < a; ++ix)
            (*perm)[static_cast<size_t>(dst++)] = (b * c.H + (py * a + iy)) * c.W + (px * a + ix);
  return perm;
}

inline std::shared_ptr<const std::vector<int>> inverse_perm(
    const std::shared_ptr<const std::vector<int>>& p) {
  auto inv = std::make_shared<std::vector<int>>(p->size());
  for (size_t i = 0; i < p->size(); ++i) (*inv)[static_cast<size_t>((*p)[i])] = static_cast<int>(i);
  return inv;
}

// Encoder stack on a tape; input node must be {B,H,W,C}. Returns pre-quant
// node [B*cells, Dc].
inline int encoder_net(Tape<float>& t, Tokenizer& tk, int input, int B) {
  const TokenizerConfig& c = tk.cfg;
  const int cells = c.grid_h() * c.grid_w();
  int h = op_reshape(t, input, {B * c.H * c.W, c.C});
  h = op_permute_rows(t, h, patch_perm(c, B));
  h = op_reshape(t, h, {B * cells, c.patch_dim()});
  return op_linear(t, h, t.leaf(tk.params.get("enc1.w")), t.leaf(tk.params.get("enc1.b")));
}

// Decoder stack; input node [B*cells, Dc]; returns {B,H,W,C} (unclamped).
inline int decoder_net(Tape<float>& t, Tokenizer& tk, int codes, int B) {
  const TokenizerConfig& c = tk.cfg;
  int h = op_gelu(t, op_linear(t, codes, t.leaf(tk.params.get("dec1.w")), t.leaf(tk.params.get("dec1.b"))));
  h = op_gelu(t, op_linear(t, h, t.leaf(tk.params.get("dec2.w")), t.leaf(tk.params.get("dec2.b"))));
  h = op_linear(t, h, t.leaf(tk.params.get("dec3.w")), t.leaf(tk.params.get("dec3.b")));
  h = op_reshape(t, h, {B * c.H * c.W, c.C});
  h = op_permute_rows(t, h, inverse_perm(patch_perm(c, B)));
  return op_reshape(t, h, {B, c.H, c.W, c.C});
}

inline void check_input_range(const Tensor<float>& frame) {
  for (const float v : frame.data)
    RS_CHECK(v >= -1e-6f && v <= 1.0f + 1e-6f,
             "encode_frame: input must be normalized to [0,1], found %g", static_cast<double>(v));
}

}  // namespace detail

inline Tokenizer make_tokenizer(const TokenizerConfig& cfg, uint64_t seed) {
  RS_CHECK(cfg.H % cfg.alpha == 0 && cfg.W % cfg.alpha == 0, "frame size not divisible by alpha");
  RS_CHECK(cfg.alpha >= 2, "alpha must be >= 2");
  RS_CHECK(cfg.V >= 2, "codebook needs V >= 2");
  Tokenizer tk;
  tk.cfg = cfg;
  Rng rng = Rng(seed).fork("tokenizer-init");
  detail::init_params(tk, rng);
  tk.codebook.init(cfg.V, cfg.Dc);
  // codebook rows are re-seeded from data at the start of training; this
  // spread keeps untrained encode/decode well-defined
  tk.codebook.table = Tensor<float>::normal({cfg.V, cfg.Dc}, rng, 0.0f, 0.05f);
  return tk;
}

// frame: {H,W,C} floats in [0,1] (depth maps min-max normalized upstream).
inline EncodeResult encode_frame(Tokenizer& tk, const Tensor<float>& frame) {
  const TokenizerConfig& c = tk.cfg;
  RS_CHECK(frame.numel() == static_cast<int64_t>(c.H) * c.W * c.C, "encode_frame: bad frame size");
  detail::check_input_range(frame);
  Tape<float> t(/*grad_enabled=*/false);
  Tensor<float> in({1, c.H, c.W, c.C}, frame.data);
  const int pre = detail::encoder_net(t, tk, t.constant(std::move(in)), 1);
  EncodeResult r;
  r.pre_quant = t.val(pre);
  r.grid.resize(static_cast<size_t>(c.grid_h()) * c.grid_w());
  // nearest codebook row per cell, ties to the lowest index
  const int n = r.pre_quant.rows();
  for (int i = 0; i < n; ++i) {
    const float* row = r.pre_quant.ptr() + static_cast<int64_t>(i) * c.Dc;
    int best = 0;
    float best_d = std::numeric_limits<float>::max();
    for (int j = 0; j < c.V; ++j) {
      const float* cj = tk.codebook.table.ptr() + static_cast<int64_t>(j) * c.Dc;
      float d = 0;
      for (int k = 0; k < c.Dc; ++k) d += (row[k] - cj[k]) * (row[k] - cj[k]);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    r.grid[static_cast<size_t>(i)] = best;
  }
  return r;
}

// grid: grid_h*grid_w indices in [0,V). Output clamped to [0,1].
inline Tensor<float> decode_frame(Tokenizer& tk, const std::vector<int>& grid) {
  const TokenizerConfig& c = tk.cfg;
  RS_CHECK(static_cast<int>(grid.size()) == c.grid_h() * c.grid_w(), "decode_frame: bad grid size");
  Tensor<float> codes({static_cast<int>(grid.size()), c.Dc});
  for (size_t i = 0; i < grid.size(); ++i) {
    RS_CHECK(grid[i] >= 0 && grid[i] < c.V, "decode_frame: index %d out of range [0,%d)", grid[i],
             c.V);
    std::memcpy(codes.ptr() + i * c.Dc, tk.codebook.table.ptr() + static_cast<int64_t>(grid[i]) * c.Dc,
                sizeof(float) * static_cast<size_t>(c.Dc));
  }
  Tape<float> t(/*grad_enabled=*/false);
  const int out = detail::decoder_net(t, tk, t.constant(std::move(codes)), 1);
  Tensor<float> frame({c.H, c.W, c.C}, t.val(out).data);
  for (auto& v : frame.data) v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return frame;
}

inline std::vector<int64_t> codebook_usage(const std::vector<std::vector<int>>& grids, int V) {
  std::vector<int64_t> hist(static_cast<size_t>(V), 0);
  for (const auto& g : grids)
    for (const int idx : g) {
      RS_CHECK(idx >= 0 && idx < V, "codebook_usage: index out of range");
      ++hist[static_cast<size_t>(idx)];
    }
  return hist;
}

struct TrainStats {
  std::vector<float> mse_curve;     // per logged step
  std::vector<int> logged_steps;
  float final_mse = 0, initial_mse = 0;
};

// Reconstruction MSE + beta*||pre - sg(code)||^2 with straight-through
// gradients and EMA codebook updates; dead codes are re-seeded from batch
// vectors. Deterministic in (frames, cfg, seed).
inline TrainStats train_tokenizer(Tokenizer& tk, const std::vector<Tensor<float>>& frames,
                                  uint64_t seed) {
  RS_CHECK(!frames.empty(), "train_tokenizer: empty dataset");
  const TokenizerConfig& c = tk.cfg;
  const int B = std::min<int>(c.batch, static_cast<int>(frames.size()));
  const int cells = c.grid_h() * c.grid_w();
  Rng rng = Rng(seed).fork("tokenizer-train");
  TrainStats stats;

  // adam state
  for (size_t i = 0; i < tk.params.size(); ++i) {
    tk.params[i].m = Tensor<float>(tk.params[i].value.shape, 0.0f);
    tk.params[i].v = Tensor<float>(tk.params[i].value.shape, 0.0f);
  }

  auto gather_batch = [&](std::vector<int>& ids) {
    Tensor<float> batch({B, c.H, c.W, c.C});
    ids.resize(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      const int i = rng.index(static_cast<int>(frames.size()));
      ids[static_cast<size_t>(b)] = i;
      detail::check_input_range(frames[static_cast<size_t>(i)]);
      std::memcpy(batch.ptr() + static_cast<int64_t>(b) * c.H * c.W * c.C,
                  frames[static_cast<size_t>(i)].ptr(),
                  sizeof(float) * static_cast<size_t>(c.H) * c.W * c.C);
    }
    return batch;
  };

  // seed the codebook from the first batch's pre-quant vectors
  {
    std::vector<int> ids;
    Tensor<float> batch = gather_batch(ids);
    Tape<float> t(/*grad_enabled=*/false);
    const int pre = detail::encoder_net(t, tk, t.constant(std::move(batch)), B);
    const Tensor<float>& pv = t.val(pre);
    for (int j = 0; j < c.V; ++j) {
      const int src = rng.index(pv.rows());
      for (int k = 0; k < c.Dc; ++k)
        tk.codebook.table.at(j, k) =
            pv.at(src, k) + static_cast<float>(rng.normal(0.0, 0.01));
      tk.codebook.ema_count[static_cast<size_t>(j)] = 1.0f;
      std::memcpy(tk.codebook.ema_sum.ptr() + static_cast<int64_t>(j) * c.Dc,
                  tk.codebook.table.ptr() + static_cast<int64_t>(j) * c.Dc,
                  sizeof(float) * static_cast<size_t>(c.Dc));
    }
  }

  int adam_t = 0;
  for (int step = 0; step < c.steps; ++step) {
    std::vector<int> ids;
    Tensor<float> batch = gather_batch(ids);
    const Tensor<float> batch_copy = batch;

    Tape<float> t;
    tk.params.zero_grad();
    const int input = t.constant(std::move(batch));
    const int pre = detail::encoder_net(t, tk, input, B);
    std::vector<int> assigned;
    const int quant = op_st_quantize(t, pre, tk.codebook.table, &assigned);
    const Tensor<float> quant_values = t.val(quant);
    const Tensor<float> pre_values = t.val(pre);
    const int commit_diff = op_sub(t, pre, t.constant(quant_values));
    const int commit = op_sum_sq_scale(t, commit_diff, c.beta_commit / static_cast<float>(B * cells));
    const int recon = detail::decoder_net(t, tk, quant, B);
    const int err = op_sub(t, recon, t.constant(batch_copy));
    const int mse = op_sum_sq_scale(t, err, 1.0f / static_cast<float>(batch_copy.numel()));
    // cycle consistency: re-encoding the reconstruction should land on the
    // same code rows, which keeps token grids stable under decode+encode
    const int re_pre = detail::encoder_net(t, tk, recon, B);
    const int cyc_diff = op_sub(t, re_pre, t.constant(quant_values));
    const int cycle = op_sum_sq_scale(t, cyc_diff, c.beta_cycle / static_cast<float>(B * cells));
    const int loss = op_combine_scalars<float>(t, {mse, commit, cycle}, {1.0f, 1.0f, 1.0f});
    const float mse_v = t.val(mse).at(0);
    const float loss_v = t.val(loss).at(0);
    RS_FAIL_IF(!std::isfinite(loss_v), "tokenizer training diverged (NaN/Inf) at step %d", step);
    t.backward(loss);

    // adam, cosine lr decay to 10% of peak
    ++adam_t;
    const float prog = static_cast<float>(step) / static_cast<float>(std::max(1, c.steps - 1));
    const float lr_t = c.lr * (0.1f + 0.9f * 0.5f * (1.0f + std::cos(3.14159265f * prog)));
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    const float bc1 = 1.0f - std::pow(b1, static_cast<float>(adam_t));
    const float bc2 = 1.0f - std::pow(b2, static_cast<float>(adam_t));
    for (size_t p = 0; p < tk.params.size(); ++p) {
      auto& pr = tk.params[p];
      for (int64_t i = 0; i < pr.value.numel(); ++i) {
        const float g = pr.grad.data[i];
        pr.m.data[i] = b1 * pr.m.data[i] + (1 - b1) * g;
        pr.v.data[i] = b2 * pr.v.data[i] + (1 - b2) * g * g;
        pr.value.data[i] -= lr_t * (pr.m.data[i] / bc1) / (std::sqrt(pr.v.data[i] / bc2) + eps);
      }
    }

    // EMA codebook update from this batch's assignments
    std::vector<float> count(static_cast<size_t>(c.V), 0.0f);
    Tensor<float> sum({c.V, c.Dc}, 0.0f);
    for (size_t i = 0; i < assigned.size(); ++i) {
      const int j = assigned[i];
      ++count[static_cast<size_t>(j)];
      ++tk.codebook.usage_counts[static_cast<size_t>(j)];
      for (int k = 0; k < c.Dc; ++k)
        sum.at(j, k) += pre_values.at(static_cast<int>(i), k);
    }
    const float rho = c.ema_decay;
    for (int j = 0; j < c.V; ++j) {
      tk.codebook.ema_count[static_cast<size_t>(j)] =
          rho * tk.codebook.ema_count[static_cast<size_t>(j)] + (1 - rho) * count[static_cast<size_t>(j)];
      for (int k = 0; k < c.Dc; ++k) {
        tk.codebook.ema_sum.at(j, k) = rho * tk.codebook.ema_sum.at(j, k) + (1 - rho) * sum.at(j, k);
        if (tk.codebook.ema_count[static_cast<size_t>(j)] > 1e-3f)
          tk.codebook.table.at(j, k) =
              tk.codebook.ema_sum.at(j, k) / tk.codebook.ema_count[static_cast<size_t>(j)];
      }
    }
    // revive dead codes onto the worst-quantized batch vectors, so rare
    // patch types claim codes instead of the majority background
    if (step % 25 == 24) {
      std::vector<std::pair<float, int>> err;
      err.reserve(assigned.size());
      for (size_t i = 0; i < assigned.size(); ++i) {
        float d = 0;
        const float* pv = pre_values.ptr() + static_cast<int64_t>(i) * c.Dc;
        const float* cv = tk.codebook.table.ptr() + static_cast<int64_t>(assigned[i]) * c.Dc;
        for (int k = 0; k < c.Dc; ++k) d += (pv[k] - cv[k]) * (pv[k] - cv[k]);
        err.emplace_back(-d, static_cast<int>(i));  // sort descending by error
      }
      std::sort(err.begin(), err.end());
      size_t cursor = 0;
      for (int j = 0; j < c.V && cursor < err.size(); ++j) {
        if (tk.codebook.ema_count[static_cast<size_t>(j)] < 0.01f) {
          const int src = err[cursor++].second;
          for (int k = 0; k < c.Dc; ++k) {
            tk.codebook.table.at(j, k) = pre_values.at(src, k);
            tk.codebook.ema_sum.at(j, k) = pre_values.at(src, k);
          }
          tk.codebook.ema_count[static_cast<size_t>(j)] = 1.0f;
        }
      }
    }

    if (step == 0) stats.initial_mse = mse_v;
    if (step % 25 == 0 || step == c.steps - 1) {
      stats.mse_curve.push_back(mse_v);
      stats.logged_steps.push_back(step);
    }
    stats.final_mse = mse_v;
  }
  return stats;
}

inline void save(const Tokenizer& tk, const std::string& path) {
  auto& mut = const_cast<Tokenizer&>(tk);
  ckpt::save_params(path, "tokenizer", tk.cfg.to_json(), mut.params,
                    {{"codebook.table", &tk.codebook.table}});
}

inline Tokenizer load(const std::string& path) {
  const ckpt::Loaded l = ckpt::load(path);
  RS_FAIL_IF(l.kind != "tokenizer", "checkpoint %s is not a tokenizer (kind '%s')", path.c_str(),
             l.kind.c_str());
  Tokenizer tk = make_tokenizer(TokenizerConfig::from_json(l.config), 0);
  ckpt::restore_params(l, tk.params);
  const auto it = l.tensors.find("codebook.table");
  RS_FAIL_IF(it == l.tensors.end(), "tokenizer checkpoint missing codebook");
  RS_FAIL_IF(it->second.shape != tk.codebook.table.shape, "codebook shape mismatch");
  tk.codebook.table = it->second;
  return tk;
}

// ---------------------------------------------------------------------------
// Frame extraction helpers (shared by training and eval)
// ---------------------------------------------------------------------------

inline Tensor<float> rgb_frame_to_float(const uint8_t* rgb, int H, int W) {
  Tensor<float> f({H, W, 3});
  for (int64_t i = 0; i < f.numel(); ++i) f.data[i] = static_cast<float>(rgb[i]) / 255.0f;
  return f;
}

inline Tensor<float> depth_frame_to_float(const float* depth, int H, int W, float dmin, float dmax) {
  Tensor<float> f({H, W, 1});
  const float range = dmax - dmin;
  for (int64_t i = 0; i < f.numel(); ++i)
    f.data[i] = range > 0 ? (depth[i] - dmin) / range : 0.0f;
  return f;
}

}  // namespace rs::tokenizer
