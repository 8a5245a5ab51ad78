#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "roboscape/tokenizer.hpp"
#include "roboscape/worldgen.hpp"

using namespace rs::tokenizer;
using rs::Rng;
using rs::Tape;
using rs::Tensor;

namespace {

TokenizerConfig tiny_cfg() {
  TokenizerConfig c;
  c.H = c.W = 16;  // 2x2 token grid
  c.V = 8;
  c.Dc = 4;
  c.enc_h = 32;
  c.dec_h = 32;
  c.batch = 2;
  c.steps = 250;
  return c;
}

Tensor<float> const_frame(int H, int W, int C, float v) { return Tensor<float>({H, W, C}, v); }

}  // namespace

TEST(Quantize, NearestNeighborAndTieBreak) {
  Tensor<float> codebook({2, 2}, {0.0f, 0.0f, 1.0f, 1.0f});
  rs::ParamStore<float> ps;
  ps.add("pre", Tensor<float>({2, 2}, {0.1f, 0.1f, 0.5f, 0.5f}));
  Tape<float> t;
  std::vector<int> idx;
  rs::op_st_quantize(t, t.leaf(ps.get("pre")), codebook, &idx);
  EXPECT_EQ(idx[0], 0);  // nearest
  EXPECT_EQ(idx[1], 0);  // exactly equidistant -> lowest index
}

TEST(Quantize, BruteForceNearestNeighborInvariant) {
  Rng rng(5);
  const int V = 17, Dc = 6, n = 40;
  const auto codebook = Tensor<float>::normal({V, Dc}, rng, 0.0f, 1.0f);
  rs::ParamStore<float> ps;
  ps.add("pre", Tensor<float>::normal({n, Dc}, rng, 0.0f, 1.0f));
  Tape<float> t;
  std::vector<int> idx;
  rs::op_st_quantize(t, t.leaf(ps.get("pre")), codebook, &idx);
  for (int i = 0; i < n; ++i) {
    double dj = 0;
    for (int k = 0; k < Dc; ++k) {
      const double d = ps.get("pre").value.at(i, k) - codebook.at(idx[static_cast<size_t>(i)], k);
      dj += d * d;
    }
    for (int j = 0; j < V; ++j) {
      double di = 0;
      for (int k = 0; k < Dc; ++k) {
        const double d = ps.get("pre").value.at(i, k) - codebook.at(j, k);
        di += d * d;
      }
      EXPECT_LE(dj, di + 1e-12);
    }
  }
}

TEST(Quantize, StraightThroughCopiesGradient) {
  // 1-cell toy: loss = 0.5*||q||^2 with q = nearest code; d(loss)/d(pre)
  // must equal the gradient at q copied through unchanged.
  Tensor<float> codebook({3, 2}, {0.0f, 0.0f, 1.0f, 0.5f, -1.0f, 2.0f});
  rs::ParamStore<float> ps;
  ps.add("pre", Tensor<float>({1, 2}, {0.9f, 0.6f}));
  ps.zero_grad();
  Tape<float> t;
  std::vector<int> idx;
  const int q = rs::op_st_quantize(t, t.leaf(ps.get("pre")), codebook, &idx);
  const Tensor<float> qv = t.val(q);
  const int loss = rs::op_sum_sq_scale(t, q, 0.5f);
  t.backward(loss);
  EXPECT_EQ(idx[0], 1);
  EXPECT_FLOAT_EQ(ps.get("pre").grad.at(0, 0), qv.at(0, 0));
  EXPECT_FLOAT_EQ(ps.get("pre").grad.at(0, 1), qv.at(0, 1));
}

TEST(CodebookUsage, CountsAdditivityAndEmpty) {
  std::vector<std::vector<int>> a = {{3, 3, 3, 3}};
  const auto ha = codebook_usage(a, 4);
  EXPECT_EQ(ha, (std::vector<int64_t>{0, 0, 0, 4}));
  EXPECT_EQ(codebook_usage({}, 4), (std::vector<int64_t>{0, 0, 0, 0}));
  std::vector<std::vector<int>> b = {{0, 1}, {1, 2}};
  const auto hb = codebook_usage(b, 4);
  std::vector<std::vector<int>> both = a;
  both.insert(both.end(), b.begin(), b.end());
  const auto hboth = codebook_usage(both, 4);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(hboth[static_cast<size_t>(i)], ha[static_cast<size_t>(i)] + hb[static_cast<size_t>(i)]);
}

TEST(EncodeDecode, InputRangeAndIndexErrors) {
  Tokenizer tk = make_tokenizer(tiny_cfg(), 1);
  auto bad = const_frame(16, 16, 3, 0.5f);
  bad.data[7] = 2.0f;
  EXPECT_THROW(encode_frame(tk, bad), rs::UsageError);
  EXPECT_THROW(decode_frame(tk, {0, 1, 2, 8}), rs::UsageError);  // V=8
}

TEST(EncodeDecode, ConstantFrameYieldsUniformGridEvenUntrained) {
  Tokenizer tk = make_tokenizer(tiny_cfg(), 3);
  const auto r = encode_frame(tk, const_frame(16, 16, 3, 0.42f));
  for (const int idx : r.grid) EXPECT_EQ(idx, r.grid[0]);
}

TEST(EncodeDecode, DeterministicDecode) {
  Tokenizer tk = make_tokenizer(tiny_cfg(), 4);
  const std::vector<int> grid = {1, 3, 5, 7};
  const auto a = decode_frame(tk, grid), b = decode_frame(tk, grid);
  EXPECT_EQ(a.data, b.data);
}

TEST(Training, ConvergesOnConstantFramesWithZeroCommit) {
  TokenizerConfig cfg = tiny_cfg();
  cfg.beta_commit = 0.0f;
  cfg.steps = 400;
  cfg.batch = 4;
  Tokenizer tk = make_tokenizer(cfg, 7);
  std::vector<Tensor<float>> frames;
  for (float v : {0.2f, 0.5f, 0.8f, 0.35f}) frames.push_back(const_frame(16, 16, 3, v));
  const auto stats = train_tokenizer(tk, frames, 11);
  EXPECT_LT(stats.final_mse, 1e-3f);
}

TEST(Training, ReconstructionImprovesOnSimFrames) {
  rs::worldgen::WorldSpec ws;
  TokenizerConfig cfg;  // full 64x64 geometry
  cfg.V = 64;
  cfg.Dc = 16;
  cfg.steps = 250;
  cfg.batch = 4;
  std::vector<Tensor<float>> frames;
  for (uint64_t s = 0; s < 10; ++s) {
    const auto c = rs::worldgen::gen_clip(ws, 100 + s, rs::worldgen::Script::push, 4);
    for (int t = 0; t < c.T; ++t)
      frames.push_back(rgb_frame_to_float(c.rgb.data() + static_cast<size_t>(t) * 64 * 64 * 3, 64, 64));
  }
  Tokenizer tk = make_tokenizer(cfg, 21);
  const auto stats = train_tokenizer(tk, frames, 22);
  EXPECT_LT(stats.final_mse, stats.initial_mse / 4.0f);
  // usage histogram over encoded frames
  std::vector<std::vector<int>> grids;
  for (int i = 0; i < 40; ++i) grids.push_back(encode_frame(tk, frames[static_cast<size_t>(i)]).grid);
  const auto hist = codebook_usage(grids, cfg.V);
  int used = 0;
  for (const auto v : hist) used += v > 0 ? 1 : 0;
  EXPECT_GE(used, cfg.V / 10);
}

TEST(Training, EmptyDatasetRejected) {
  Tokenizer tk = make_tokenizer(tiny_cfg(), 1);
  EXPECT_THROW(train_tokenizer(tk, {}, 0), rs::UsageError);
}

TEST(Checkpoint, RoundTripBitExact) {
  namespace fs = std::filesystem;
  TokenizerConfig cfg = tiny_cfg();
  Tokenizer tk = make_tokenizer(cfg, 9);
  std::vector<Tensor<float>> frames = {const_frame(16, 16, 3, 0.3f), const_frame(16, 16, 3, 0.7f)};
  train_tokenizer(tk, frames, 10);
  const std::string path = (fs::temp_directory_path() / "rs_tok.ckpt").string();
  save(tk, path);
  Tokenizer tl = load(path);
  for (size_t i = 0; i < tk.params.size(); ++i)
    EXPECT_EQ(tk.params[i].value.data, tl.params[i].value.data) << tk.params[i].name;
  EXPECT_EQ(tk.codebook.table.data, tl.codebook.table.data);
  EXPECT_EQ(tk.weights_hash(), tl.weights_hash());
  const auto f = const_frame(16, 16, 3, 0.55f);
  EXPECT_EQ(encode_frame(tk, f).grid, encode_frame(tl, f).grid);
  fs::remove(path);
}

TEST(Checkpoint, CorruptionAndKindErrors) {
  namespace fs = std::filesystem;
  Tokenizer tk = make_tokenizer(tiny_cfg(), 2);
  const std::string path = (fs::temp_directory_path() / "rs_tok2.ckpt").string();
  save(tk, path);
  // flip one blob byte -> hash mismatch
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-5, std::ios::end);
    char c;
    f.seekg(-5, std::ios::end);
    f.get(c);
    f.seekp(-5, std::ios::end);
    c = static_cast<char>(c ^ 0x40);
    f.put(c);
  }
  EXPECT_THROW(load(path), rs::RuntimeFailure);
  // truncated file
  save(tk, path);
  const auto full = fs::file_size(path);
  fs::resize_file(path, full - 64);
  EXPECT_THROW(load(path), rs::RuntimeFailure);
  // wrong kind
  rs::ckpt::save(path, "worldmodel", {{"V", 1}}, {});
  EXPECT_THROW(load(path), rs::RuntimeFailure);
  fs::remove(path);
}
