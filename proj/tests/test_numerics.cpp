#include <gtest/gtest.h>

#include <cmath>

#include "roboscape/autograd.hpp"
#include "roboscape/numerics.hpp"
#include "roboscape/tensor.hpp"

using rs::GradCheckReport;
using rs::Param;
using rs::ParamStore;
using rs::Rng;
using rs::Tape;
using rs::Tensor;

namespace {

// Straight-line float64 re-evaluation of softmax(QK^T/sqrt(d)+mask)V,
// independent of the library kernels.
Tensor<double> attention_oracle(const Tensor<double>& Q, const Tensor<double>& K,
                                const Tensor<double>& V, const Tensor<double>& mask) {
  const int n = Q.rows(), d = Q.cols(), m = K.rows(), dv = V.cols();
  Tensor<double> out({n, dv}, 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<double> s(m);
    for (int j = 0; j < m; ++j) {
      double dot = 0;
      for (int c = 0; c < d; ++c) dot += Q.at(i, c) * K.at(j, c);
      s[j] = dot / std::sqrt(double(d)) + mask.at(i, j);
    }
    double mx = s[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, s[j]);
    double z = 0;
    for (int j = 0; j < m; ++j) z += std::exp(s[j] - mx);
    for (int j = 0; j < m; ++j) {
      const double p = std::exp(s[j] - mx) / z;
      for (int c = 0; c < dv; ++c) out.at(i, c) += p * V.at(j, c);
    }
  }
  return out;
}

Tensor<double> randn(std::vector<int> shape, Rng& rng, double std = 1.0) {
  return Tensor<double>::normal(std::move(shape), rng, 0.0, std);
}

}  // namespace

TEST(ScaledDotAttention, SingleElementSoftmaxIsOne) {
  Tensor<double> q({1, 1}, {1.0}), k({1, 1}, {1.0}), v({1, 1}, {1.0}), m({1, 1}, {0.0});
  const auto out = rs::scaled_dot_attention(q, k, v, m);
  EXPECT_DOUBLE_EQ(out.at(0, 0), 1.0);
}

TEST(ScaledDotAttention, OrthogonalQueryAveragesValues) {
  // QK^T = 0 -> uniform attention over m=2 values 0 and 2 -> 1.
  Tensor<double> q({1, 2}, {1.0, 0.0});
  Tensor<double> k({2, 2}, {0.0, 1.0, 0.0, -1.0});
  Tensor<double> v({2, 1}, {0.0, 2.0});
  Tensor<double> m({1, 2}, 0.0);
  const auto out = rs::scaled_dot_attention(q, k, v, m);
  EXPECT_NEAR(out.at(0, 0), 1.0, 1e-15);
}

TEST(ScaledDotAttention, MatchesStraightLineOracleUnderCausalMask) {
  Rng rng(7);
  const auto Q = randn({3, 4}, rng), K = randn({3, 4}, rng), V = randn({3, 4}, rng);
  Tensor<double> mask({3, 3}, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) mask.at(i, j) = rs::kMaskBlocked<double>;
  const auto got = rs::scaled_dot_attention(Q, K, V, mask);
  const auto want = attention_oracle(Q, K, V, mask);
  for (int64_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got.data[i], want.data[i], 1e-12);
}

TEST(ScaledDotAttention, BlockedColumnsNeverContribute) {
  Rng rng(11);
  auto Q = randn({4, 3}, rng), K = randn({5, 3}, rng), V = randn({5, 2}, rng);
  Tensor<double> mask({4, 5}, 0.0);
  mask.at(0, 3) = rs::kMaskBlocked<double>;
  mask.at(2, 0) = rs::kMaskBlocked<double>;
  mask.at(2, 4) = rs::kMaskBlocked<double>;
  const auto a = rs::scaled_dot_attention(Q, K, V, mask);
  // per query row, zero the V rows blocked for that row; that row's output
  // must be bit-identical because blocked weights are exactly zero
  for (int i = 0; i < 4; ++i) {
    auto Vz = V;
    for (int j = 0; j < 5; ++j)
      if (mask.at(i, j) <= rs::kMaskBlocked<double>)
        for (int c = 0; c < 2; ++c) Vz.at(j, c) = 0.0;
    const auto b0 = rs::scaled_dot_attention(Q, K, Vz, mask);
    for (int c = 0; c < 2; ++c) EXPECT_EQ(a.at(i, c), b0.at(i, c));
  }
}

TEST(ScaledDotAttention, ErrorsOnShapeMismatchAndFullyMaskedRow) {
  Tensor<double> q({2, 3}, 0.0), k({2, 2}, 0.0), v({2, 2}, 0.0), m({2, 2}, 0.0);
  EXPECT_THROW(rs::scaled_dot_attention(q, k, v, m), rs::UsageError);
  Tensor<double> q2({2, 2}, 0.0);
  Tensor<double> bad = m;
  bad.at(1, 0) = rs::kMaskBlocked<double>;
  bad.at(1, 1) = rs::kMaskBlocked<double>;
  EXPECT_THROW(rs::scaled_dot_attention(q2, k, v, bad), rs::UsageError);
}

TEST(LayerNorm, ConstantInputNormalizesToZero) {
  Tensor<double> x({1, 3}, {1.0, 1.0, 1.0});
  Tensor<double> g({3}, 1.0), b({3}, 0.0);
  const auto out = rs::layer_norm(x, g, b, 1e-5);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(out.at(0, j), 0.0, 1e-12);
}

TEST(LayerNorm, SymmetricPairMapsToUnitPair) {
  const double a = 3.7;
  Tensor<double> x({1, 2}, {-a, a});
  Tensor<double> g({2}, 1.0), b({2}, 0.0);
  const auto out = rs::layer_norm(x, g, b, 1e-12);
  EXPECT_NEAR(out.at(0, 0), -1.0, 1e-9);
  EXPECT_NEAR(out.at(0, 1), 1.0, 1e-9);
}

TEST(LayerNorm, MatchesDirectMeanVarComputation) {
  Tensor<double> x({1, 3}, {1.0, 2.0, 3.0});
  Tensor<double> g({3}, 1.0), b({3}, 0.0);
  const double eps = 1e-5;
  const auto out = rs::layer_norm(x, g, b, eps);
  const double mu = 2.0, var = 2.0 / 3.0;
  for (int j = 0; j < 3; ++j)
    EXPECT_NEAR(out.at(0, j), (x.at(0, j) - mu) / std::sqrt(var + eps), 1e-14);
}

TEST(LayerNorm, ErrorsOnDimMismatch) {
  Tensor<double> x({2, 3}, 0.0), g({2}, 1.0), b({3}, 0.0);
  EXPECT_THROW(rs::layer_norm(x, g, b, 1e-5), rs::UsageError);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogV) {
  Tensor<double> logits({2, 4}, 0.5);
  const double ce = rs::softmax_cross_entropy(logits, {0, 3});
  EXPECT_NEAR(ce, std::log(4.0), 1e-6);
}

TEST(SoftmaxCrossEntropy, SaturatedTargetApproachesZero) {
  Tensor<double> logits({1, 3}, 0.0);
  logits.at(0, 1) = 30.0;
  EXPECT_LT(rs::softmax_cross_entropy(logits, {1}), 1e-12);
}

TEST(SoftmaxCrossEntropy, ClosedFormTwoLogits) {
  Tensor<double> logits({1, 2}, {1.0, 2.0});
  // -log softmax: ln(1+e) for the logit-1 entry, ln(1+e)-1 for the logit-2 one
  EXPECT_NEAR(rs::softmax_cross_entropy(logits, {0}), std::log(1.0 + std::exp(1.0)), 1e-12);
  EXPECT_NEAR(rs::softmax_cross_entropy(logits, {1}), std::log(1.0 + std::exp(1.0)) - 1.0, 1e-12);
  EXPECT_NEAR(rs::softmax_cross_entropy(logits, {1}), 0.313261687518223, 1e-9);
}

TEST(SoftmaxCrossEntropy, NonNegativeAndErrorsOnBadTarget) {
  Rng rng(3);
  const auto logits = randn({5, 7}, rng, 2.0);
  std::vector<int> tg = {0, 1, 2, 3, 4};
  EXPECT_GE(rs::softmax_cross_entropy(logits, tg), 0.0);
  EXPECT_THROW(rs::softmax_cross_entropy(logits, {0, 1, 2, 3, 7}), rs::UsageError);
}

// ---------------------------------------------------------------------------
// Tape / backward
// ---------------------------------------------------------------------------

TEST(Backward, SumHasUnitGradient) {
  ParamStore<double> ps;
  auto& theta = ps.add("theta", Tensor<double>({3}, {1.0, -2.0, 0.5}));
  ps.zero_grad();
  Tape<double> t;
  const int x = t.leaf(theta);
  const int loss = rs::op_sum_scale(t, x, 1.0);
  t.backward(loss);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(theta.grad.at(i), 1.0);
}

TEST(Backward, QuadraticGradientIsTheta) {
  ParamStore<double> ps;
  auto& theta = ps.add("theta", Tensor<double>({4}, {1.0, -2.0, 0.5, 3.0}));
  ps.zero_grad();
  Tape<double> t;
  const int x = t.leaf(theta);
  const int loss = rs::op_sum_sq_scale(t, x, 0.5);  // ||theta||^2 / 2
  t.backward(loss);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(theta.grad.at(i), theta.value.at(i));
}

TEST(Backward, UnusedParamsKeepZeroGradient) {
  ParamStore<double> ps;
  auto& a = ps.add("a", Tensor<double>({2}, {1.0, 2.0}));
  auto& b = ps.add("b", Tensor<double>({2}, {3.0, 4.0}));
  ps.zero_grad();
  Tape<double> t;
  const int x = t.leaf(a);
  (void)t.leaf(b);  // registered but unused by the loss
  const int loss = rs::op_sum_sq_scale(t, x, 1.0);
  t.backward(loss);
  EXPECT_DOUBLE_EQ(b.grad.at(0), 0.0);
  EXPECT_DOUBLE_EQ(b.grad.at(1), 0.0);
  EXPECT_DOUBLE_EQ(a.grad.at(0), 2.0);
}

TEST(Backward, RejectsNonScalarLossAndDoubleConsume) {
  ParamStore<double> ps;
  auto& a = ps.add("a", Tensor<double>({2, 2}, 1.0));
  Tape<double> t;
  const int x = t.leaf(a);
  EXPECT_THROW(t.backward(x), rs::UsageError);
  Tape<double> t2;
  const int x2 = t2.leaf(a);
  const int loss = rs::op_sum_sq_scale(t2, x2, 1.0);
  t2.backward(loss);
  EXPECT_THROW(t2.backward(loss), rs::UsageError);
}

TEST(Gradcheck, ExactForQuadratic) {
  ParamStore<double> ps;
  ps.add("theta", Tensor<double>({5}, {0.3, -1.2, 2.0, 0.0, 4.5}));
  auto loss = [&](bool grad) {
    Tape<double> t;
    const int x = t.leaf(ps.get("theta"));
    const int l = rs::op_sum_sq_scale(t, x, 0.5);
    const double v = t.val(l).at(0);
    if (grad) t.backward(l);
    return v;
  };
  const auto rep = rs::gradcheck(ps, loss, 1e-4);
  EXPECT_EQ(rep.n_checked, 5);
  EXPECT_LT(rep.max_rel_err, 1e-8);
}

// Every tape op against central finite differences on a random small case.
TEST(Gradcheck, CompositeOpsMatchFiniteDifferences) {
  Rng rng(17);
  ParamStore<double> ps;
  ps.add("x", randn({6, 8}, rng, 0.5));
  ps.add("W", randn({4, 5}, rng, 0.3));
  ps.add("b", randn({5}, rng, 0.1));
  ps.add("gain", Tensor<double>({8}, 1.0));
  ps.add("bias", randn({8}, rng, 0.05));
  ps.add("qkv_w", randn({8, 12}, rng, 0.4));  // D=4 -> 3D=12
  auto loss = [&](bool grad) {
    Tape<double> t;
    const int x = t.leaf(ps.get("x"));
    const int ln = rs::op_layer_norm(t, x, t.leaf(ps.get("gain")), t.leaf(ps.get("bias")), 1e-5);
    const int qkv = rs::op_linear(t, ln, t.leaf(ps.get("qkv_w")));
    const int att = rs::op_mha(t, qkv, /*groups=*/2, /*len=*/3, /*heads=*/2, /*causal=*/true);
    const int act = rs::op_gelu(t, att);
    const int y = rs::op_linear(t, act, t.leaf(ps.get("W")), t.leaf(ps.get("b")));
    const int sm = rs::op_softmax_xent(t, y, {0, 3, 1, 4, 0, 2}, {}, 1.0 / 6.0);
    const int l2 = rs::op_sum_sq_scale(t, y, 0.01);
    const int loss_id = rs::op_combine_scalars(t, {sm, l2}, {1.0, 1.0});
    const double v = t.val(loss_id).at(0);
    if (grad) t.backward(loss_id);
    return v;
  };
  const auto rep = rs::gradcheck(ps, loss, 1e-5);
  EXPECT_LT(rep.max_rel_err, 1e-6) << "checked " << rep.n_checked;
}

TEST(Gradcheck, ConvAndUpsampleMatchFiniteDifferences) {
  Rng rng(23);
  ParamStore<double> ps;
  ps.add("img", randn({1, 6, 6, 2}, rng, 0.5));
  ps.add("wc", randn({2 * 3 * 3, 3}, rng, 0.3));
  ps.add("bc", randn({3}, rng, 0.1));
  rs::ConvGeom geom{.B = 1, .H = 6, .W = 6, .Cin = 2, .Cout = 3, .k = 3, .stride = 2, .pad = 1};
  auto loss = [&](bool grad) {
    Tape<double> t;
    const int x = t.leaf(ps.get("img"));
    const int c = rs::op_conv2d(t, x, t.leaf(ps.get("wc")), t.leaf(ps.get("bc")), geom);
    const int u = rs::op_upsample2x(t, c, 1, geom.out_h(), geom.out_w(), 3);
    const int l = rs::op_sum_sq_scale(t, u, 0.5);
    const double v = t.val(l).at(0);
    if (grad) t.backward(l);
    return v;
  };
  const auto rep = rs::gradcheck(ps, loss, 1e-5);
  EXPECT_LT(rep.max_rel_err, 1e-7);
}

TEST(Gradcheck, BroadcastAddsAndGatherMatchFiniteDifferences) {
  Rng rng(31);
  ParamStore<double> ps;
  ps.add("x", randn({12, 3}, rng));   // 2 frames x 6 cells
  ps.add("pf", randn({2, 3}, rng));   // per-frame
  ps.add("sp", randn({6, 3}, rng));   // tiled spatial
  ps.add("emb", randn({5, 3}, rng));  // embedding table
  auto loss = [&](bool grad) {
    Tape<double> t;
    const int x = t.leaf(ps.get("x"));
    const int e = rs::op_embedding(t, t.leaf(ps.get("emb")), {0, 1, 4, 2, 3, 0, 1, 1, 2, 4, 0, 3});
    const int s = rs::op_add(t, x, e);
    const int a = rs::op_add_rows_grouped(t, s, t.leaf(ps.get("pf")), 6);
    const int b = rs::op_add_rows_tiled(t, a, t.leaf(ps.get("sp")));
    auto perm = std::make_shared<std::vector<int>>(std::vector<int>{3, 1, 0, 2, 5, 4, 7, 6, 9, 11, 10, 8});
    const int p = rs::op_permute_rows(t, b, perm);
    const int gathered = rs::op_gather_rows(t, p, {0, 5, 11, 3});
    const int anchor = t.constant(Tensor<double>({4, 3}, 0.3));
    const int diff = rs::op_sub(t, gathered, anchor);
    const int l = rs::op_sum_sq_scale(t, diff, 0.25);
    const double v = t.val(l).at(0);
    if (grad) t.backward(l);
    return v;
  };
  const auto rep = rs::gradcheck(ps, loss, 1e-5);
  EXPECT_LT(rep.max_rel_err, 1e-7);
}

TEST(Backward, GatherStopGradBlocksAnchorPath) {
  // ||x_row0 - sg(x_row1)||^2: gradient reaches row 0 only.
  ParamStore<double> ps;
  auto& x = ps.add("x", Tensor<double>({2, 3}, {1.0, 2.0, 3.0, 0.5, 0.5, 0.5}));
  ps.zero_grad();
  Tape<double> t;
  const int xl = t.leaf(x);
  const int tracked = rs::op_gather_rows(t, xl, {0});
  const int anchor = rs::op_gather_rows(t, xl, {1}, /*stop_grad=*/true);
  const int diff = rs::op_sub(t, tracked, anchor);
  const int loss = rs::op_sum_sq_scale(t, diff, 1.0);
  t.backward(loss);
  for (int j = 0; j < 3; ++j) {
    EXPECT_DOUBLE_EQ(x.grad.at(0, j), 2.0 * (x.value.at(0, j) - x.value.at(1, j)));
    EXPECT_DOUBLE_EQ(x.grad.at(1, j), 0.0);
  }
}

TEST(Determinism, ForwardBackwardBitIdenticalAcrossRuns) {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    ParamStore<float> ps;
    ps.add("x", Tensor<float>::normal({16, 8}, rng, 0.f, 1.f));
    ps.add("w", Tensor<float>::normal({8, 24}, rng, 0.f, 0.2f));
    ps.zero_grad();
    Tape<float> t;
    const int x = t.leaf(ps.get("x"));
    const int qkv = rs::op_linear(t, x, t.leaf(ps.get("w")));
    const int att = rs::op_mha(t, qkv, 4, 4, 2, true);
    const int l = rs::op_sum_sq_scale(t, att, 0.5f);
    const float v = t.val(l).at(0);
    t.backward(l);
    std::vector<float> out = {v};
    for (auto g : ps.get("w").grad.data) out.push_back(g);
    return out;
  };
  const auto a = run(42), b = run(42);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(MatmulKernels, MatchNaiveTripleLoop) {
  Rng rng(5);
  const int n = 7, k = 9, m = 11;
  const auto A = randn({n, k}, rng), B = randn({k, m}, rng);
  const auto C = rs::matmul(A, B);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double s = 0;
      for (int p = 0; p < k; ++p) s += A.at(i, p) * B.at(p, j);
      EXPECT_NEAR(C.at(i, j), s, 1e-12);
    }
  // A^T * B kernel
  const auto At = randn({n, k}, rng), Bt = randn({n, m}, rng);
  Tensor<double> D({k, m});
  rs::matmul_tn(At.ptr(), Bt.ptr(), D.ptr(), n, k, m);
  for (int p = 0; p < k; ++p)
    for (int j = 0; j < m; ++j) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += At.at(i, p) * Bt.at(i, j);
      EXPECT_NEAR(D.at(p, j), s, 1e-12);
    }
}
