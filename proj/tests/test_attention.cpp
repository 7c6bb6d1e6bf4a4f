#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "thm/attention.hpp"
#include "thm/errors.hpp"
#include "thm/gradcheck.hpp"

using namespace thm;
using thm::testing::project_scalar;
using thm::testing::random_tensor;

namespace {

std::vector<double> row_times(std::span<const double> v, const Tensor& w) {
  std::vector<double> out(w.cols(), 0.0);
  for (std::size_t k = 0; k < v.size(); ++k)
    for (std::size_t c = 0; c < w.cols(); ++c) out[c] += v[k] * w(k, c);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

// The dot-product instantiation of the non-local operation:
// f = exp((qW^Q)·(kW^K)), g = vW^V, C = sum_j f.
Tensor nonlocal_dot_product(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionHeadParams& p) {
  auto f = [&](std::span<const double> qi, std::span<const double> kj) {
    return std::exp(dot(row_times(qi, p.w_q), row_times(kj, p.w_k)));
  };
  auto g = [&](std::span<const double> vj) { return row_times(vj, p.w_v); };
  auto c = [&](std::span<const double> qi, const Tensor& keys) {
    double s = 0.0;
    for (std::size_t j = 0; j < keys.rows(); ++j) s += f(qi, keys.row(j));
    return s;
  };
  return nonlocal_op(q, k, v, f, g, c);
}

AttentionHeadParams random_head(std::size_t d, std::size_t dk, Rng& rng) {
  return {random_tensor({d, dk}, rng), random_tensor({d, dk}, rng), random_tensor({d, dk}, rng)};
}

}  // namespace

TEST(NonLocal, UniformWeightsGiveMean) {
  Rng rng(1);
  const Tensor q = random_tensor({3, 2}, rng);
  const Tensor v = Tensor::matrix({{1, 2}, {3, 4}, {5, 9}});
  const Tensor y = nonlocal_op(
      q, v, v, [](auto, auto) { return 1.0; },
      [](std::span<const double> x) { return std::vector<double>(x.begin(), x.end()); },
      [](auto, const Tensor& keys) { return double(keys.rows()); });
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(y(i, 0), 3.0, 1e-15);
    EXPECT_NEAR(y(i, 1), 5.0, 1e-15);
  }
}

TEST(NonLocal, SingleKeyReturnsItsValue) {
  Rng rng(2);
  const Tensor q = random_tensor({4, 3}, rng);
  const Tensor k = random_tensor({1, 3}, rng);
  const Tensor v = random_tensor({1, 3}, rng);
  const auto p = random_head(3, 3, rng);
  const Tensor y = nonlocal_dot_product(q, k, v, p);
  const auto expected = row_times(v.row(0), p.w_v);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y(i, c), expected[c], 1e-12);
}

TEST(NonLocal, DotProductInstantiationIsUnscaledAttention) {
  Rng rng(3);
  const Tensor q = random_tensor({4, 5}, rng);
  const Tensor k = random_tensor({3, 5}, rng);
  const Tensor v = random_tensor({3, 5}, rng);
  const auto p = random_head(5, 2, rng);
  const Tensor direct = matmul(softmax_rows(matmul_nt(matmul(q, p.w_q), matmul(k, p.w_k))),
                               matmul(v, p.w_v));
  EXPECT_LT(max_abs_diff(nonlocal_dot_product(q, k, v, p), direct), 1e-10);
  EXPECT_LT(max_abs_diff(scaled_dot_attention(q, k, v, p, nullptr, false), direct), 1e-10);
}

TEST(NonLocal, ZeroNormalizerNamesRow) {
  const Tensor x = Tensor::matrix({{1}, {0}});
  auto id = [](std::span<const double> v) { return std::vector<double>(v.begin(), v.end()); };
  try {
    nonlocal_op(
        x, x, x, [](auto, auto) { return 1.0; }, id,
        [](std::span<const double> q, const Tensor&) { return q[0]; });
    FAIL();
  } catch (const NormalizerError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
  EXPECT_THROW(nonlocal_op(x, x, Tensor({3, 1}), [](auto, auto) { return 1.0; }, id,
                           [](auto, const Tensor&) { return 1.0; }),
               ShapeError);
}

TEST(ScaledDotAttention, IdenticalKeysGiveMeanValue) {
  Rng rng(4);
  const Tensor q = random_tensor({3, 4}, rng);
  Tensor k({5, 4});
  const Tensor key_row = random_tensor({1, 4}, rng);
  for (std::size_t j = 0; j < 5; ++j)
    std::copy(key_row.row(0).begin(), key_row.row(0).end(), k.row(j).begin());
  const Tensor v = random_tensor({5, 4}, rng);
  const auto p = random_head(4, 4, rng);
  const Tensor y = scaled_dot_attention(q, k, v, p, nullptr, true);
  const Tensor vw = matmul(v, p.w_v);
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 5; ++j) mean += vw(j, c) / 5.0;
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y(i, c), mean, 1e-12);
  }
}

TEST(ScaledDotAttention, SingleKey) {
  Rng rng(5);
  const Tensor q = random_tensor({3, 4}, rng);
  const Tensor k = random_tensor({1, 4}, rng);
  const Tensor v = random_tensor({1, 4}, rng);
  const auto p = random_head(4, 2, rng);
  const Tensor y = scaled_dot_attention(q, k, v, p, nullptr, true);
  const Tensor vw = matmul(v, p.w_v);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(y(i, c), vw(0, c), 1e-14);
}

TEST(ScaledDotAttention, EqualsNonLocalOracleWithScaleFolded) {
  Rng rng(6);
  const Tensor q = random_tensor({3, 4}, rng);
  const Tensor k = random_tensor({3, 4}, rng);
  const Tensor v = random_tensor({3, 4}, rng);
  const auto p = random_head(4, 2, rng);
  AttentionHeadParams folded = p;
  for (double& w : folded.w_q.values()) w /= std::sqrt(2.0);
  EXPECT_LT(max_abs_diff(scaled_dot_attention(q, k, v, p, nullptr, true),
                         nonlocal_dot_product(q, k, v, folded)),
            1e-10);
}

TEST(ScaledDotAttention, MaskedWeightsAreExactlyZero) {
  // With V = I and W^V = I the output rows are the attention weights.
  Rng rng(7);
  const std::size_t n = 5;
  const Tensor x = random_tensor({n, n}, rng, 3.0);
  AttentionHeadParams p{random_tensor({n, n}, rng), random_tensor({n, n}, rng),
                        Tensor::identity(n)};
  const AttentionMask mask = causal_mask(n);
  const Tensor w = scaled_dot_attention(x, x, Tensor::identity(n), p, &mask, true);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j > i) EXPECT_EQ(w(i, j), 0.0);
      s += w(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(ScaledDotAttention, FullyMaskedRowIsRejected) {
  AttentionMask mask(2, 2);
  mask.disallow(1, 0);
  mask.disallow(1, 1);
  const Tensor x = Tensor::identity(2);
  const AttentionHeadParams p{x, x, x};
  EXPECT_THROW(scaled_dot_attention(x, x, x, p, &mask, true), MaskError);
}

TEST(CausalMask, Counts) {
  EXPECT_EQ(causal_mask(1).count_disallowed(), 0u);
  const auto m2 = causal_mask(2);
  EXPECT_EQ(m2.count_disallowed(), 1u);
  EXPECT_TRUE(m2.disallowed(0, 1));
  EXPECT_EQ(causal_mask(4).count_disallowed(), 6u);
}

TEST(MultiHead, OneHeadWithIdentityOutputIsSingleHead) {
  Rng rng(8);
  const Tensor q = random_tensor({3, 4}, rng);
  const Tensor kv = random_tensor({5, 4}, rng);
  const std::vector<AttentionHeadParams> heads{random_head(4, 4, rng)};
  EXPECT_LT(max_abs_diff(multi_head(q, kv, kv, heads, Tensor::identity(4), nullptr),
                         scaled_dot_attention(q, kv, kv, heads[0], nullptr, true)),
            1e-14);
}

TEST(MultiHead, ShapeContractAndHeadSplit) {
  Rng rng(9);
  const Tensor q = random_tensor({3, 8}, rng);
  const Tensor kv = random_tensor({6, 8}, rng);
  for (std::size_t h : {1u, 2u, 4u, 8u}) {
    std::vector<AttentionHeadParams> heads;
    for (std::size_t i = 0; i < h; ++i) heads.push_back(random_head(8, 8 / h, rng));
    const Tensor w_o = random_tensor({8, 8}, rng);
    const Tensor y = multi_head(q, kv, kv, heads, w_o, nullptr);
    EXPECT_EQ(y.shape(), (Shape{3, 8}));

    // Reference: concatenate single-head outputs, project by w_o.
    Tensor concat({3, 8});
    for (std::size_t i = 0; i < h; ++i) {
      const Tensor yi = scaled_dot_attention(q, kv, kv, heads[i], nullptr, true);
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 8 / h; ++c) concat(r, i * (8 / h) + c) = yi(r, c);
    }
    EXPECT_LT(max_abs_diff(y, matmul(concat, w_o)), 1e-12);

    const auto params = MultiHeadParams::from_heads(heads, w_o);
    for (std::size_t i = 0; i < h; ++i) EXPECT_EQ(params.head(i).w_q, heads[i].w_q);
  }
}

TEST(MultiHead, HeadWidthMismatch) {
  Rng rng(10);
  std::vector<AttentionHeadParams> heads{random_head(4, 2, rng), random_head(4, 3, rng)};
  EXPECT_THROW(MultiHeadParams::from_heads(heads, Tensor({4, 4})), ShapeError);
  std::vector<AttentionHeadParams> ok{random_head(4, 2, rng), random_head(4, 2, rng)};
  EXPECT_THROW(MultiHeadParams::from_heads(ok, Tensor({3, 4})), ShapeError);
}

TEST(MultiHead, KeyValuePermutationInvariance) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(5);
    const Tensor q = random_tensor({3, 4}, rng);
    const Tensor k = random_tensor({n, 4}, rng);
    const Tensor v = random_tensor({n, 4}, rng);
    const std::vector<AttentionHeadParams> heads{random_head(4, 2, rng), random_head(4, 2, rng)};
    const Tensor w_o = random_tensor({4, 4}, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    Tensor kp({n, 4}), vp({n, 4});
    for (std::size_t j = 0; j < n; ++j) {
      std::copy(k.row(perm[j]).begin(), k.row(perm[j]).end(), kp.row(j).begin());
      std::copy(v.row(perm[j]).begin(), v.row(perm[j]).end(), vp.row(j).begin());
    }
    EXPECT_LT(max_abs_diff(multi_head(q, k, v, heads, w_o, nullptr),
                           multi_head(q, kp, vp, heads, w_o, nullptr)),
              1e-12);
  }
}

TEST(Routing, CrossedAssignments) {
  const auto [alpha, beta] = crossed_routing();
  EXPECT_EQ(alpha.v_source, Channel::Left);
  EXPECT_EQ(alpha.k_source, Channel::Left);
  EXPECT_EQ(alpha.q_source, Channel::Right);
  EXPECT_EQ(beta.v_source, Channel::Right);
  EXPECT_EQ(beta.k_source, Channel::Right);
  EXPECT_EQ(beta.q_source, Channel::Left);
  EXPECT_NE(alpha, beta);
}

namespace {

MultiHeadParams random_mh(std::size_t d, std::size_t h, Rng& rng) {
  return {Var::leaf(random_tensor({d, d}, rng)), Var::leaf(random_tensor({d, d}, rng)),
          Var::leaf(random_tensor({d, d}, rng)), Var::leaf(random_tensor({d, d}, rng)), h};
}

}  // namespace

TEST(CoAttention, DegradesToTwoSelfAttentions) {
  Rng rng(12);
  const Var xl = Var::constant(random_tensor({4, 6}, rng));
  const Var xr = Var::constant(random_tensor({3, 6}, rng));
  const auto pl = random_mh(6, 2, rng);
  const auto pr = random_mh(6, 3, rng);
  const auto [yl, yr] = coattention({xl, xr, 4, 3, 1}, GateRouting::all(Channel::Left),
                                    GateRouting::all(Channel::Right), pl, pr);
  EXPECT_LT(max_abs_diff(yl.value(), multi_head(xl, xl, xl, pl, 1, {}).value()), 1e-10);
  EXPECT_LT(max_abs_diff(yr.value(), multi_head(xr, xr, xr, pr, 1, {}).value()), 1e-10);
}

TEST(CoAttention, CrossedWithSharedParamsAndEqualInputsIsSymmetric) {
  Rng rng(13);
  const Var x = Var::constant(random_tensor({5, 4}, rng));
  const auto p = random_mh(4, 2, rng);
  const auto [alpha, beta] = crossed_routing();
  const auto [yl, yr] = coattention({x, x, 5, 5, 1}, alpha, beta, p, p);
  EXPECT_EQ(yl.value(), yr.value());
  EXPECT_LT(max_abs_diff(yl.value(), multi_head(x, x, x, p, 1, {}).value()), 1e-14);
}

TEST(CoAttention, SinglePositionIsWeightless) {
  Rng rng(14);
  const Var xl = Var::constant(random_tensor({1, 4}, rng));
  const Var xr = Var::constant(random_tensor({1, 4}, rng));
  const auto pl = random_mh(4, 2, rng);
  const auto pr = random_mh(4, 2, rng);
  const auto [alpha, beta] = crossed_routing();
  const auto [yl, yr] = coattention({xl, xr, 1, 1, 1}, alpha, beta, pl, pr);
  const Tensor el = matmul(matmul(xl.value(), pl.w_v.value()), pl.w_o.value());
  const Tensor er = matmul(matmul(xr.value(), pr.w_v.value()), pr.w_o.value());
  EXPECT_LT(max_abs_diff(yl.value(), el), 1e-13);
  EXPECT_LT(max_abs_diff(yr.value(), er), 1e-13);
}

TEST(CoAttention, OutputLengthFollowsQuerySource) {
  Rng rng(15);
  const Var xl = Var::constant(random_tensor({4, 4}, rng));
  const Var xr = Var::constant(random_tensor({2, 4}, rng));
  const auto p = random_mh(4, 1, rng);
  const auto [alpha, beta] = crossed_routing();
  const auto [yl, yr] = coattention({xl, xr, 4, 2, 1}, alpha, beta, p, p);
  EXPECT_EQ(yl.shape(), (Shape{2, 4}));
  EXPECT_EQ(yr.shape(), (Shape{4, 4}));
}

TEST(CoAttention, KeyValueLengthMismatchIsShapeError) {
  Rng rng(16);
  const Var xl = Var::constant(random_tensor({4, 4}, rng));
  const Var xr = Var::constant(random_tensor({2, 4}, rng));
  const auto p = random_mh(4, 1, rng);
  const GateRouting mixed{Channel::Left, Channel::Right, Channel::Left};
  EXPECT_THROW(coattention({xl, xr, 4, 2, 1}, mixed, GateRouting::all(Channel::Right), p, p),
               ShapeError);
}

TEST(CoAttention, RowSpaceOfValues) {
  // g = identity: every output row is a convex combination of V's rows.
  Rng rng(17);
  const std::size_t n = 3;
  const std::size_t d = 6;
  const Tensor x = random_tensor({5, d}, rng);
  const Tensor v = random_tensor({n, d}, rng);
  const AttentionHeadParams p{random_tensor({d, d}, rng), random_tensor({d, d}, rng),
                              Tensor::identity(d)};
  const Tensor y = scaled_dot_attention(x, v, v, p, nullptr, true);
  // Least-squares residual of each output row against V's rows via normal equations.
  const Tensor gram = matmul_nt(v, v);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    Tensor rhs({n, 1});
    for (std::size_t j = 0; j < n; ++j) rhs[j] = dot(v.row(j), y.row(i));
    // Solve 3×3 by Cramer's rule.
    auto det3 = [](const Tensor& m) {
      return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
             m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
             m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    };
    const double det = det3(gram);
    std::vector<double> coef(n);
    for (std::size_t c = 0; c < n; ++c) {
      Tensor m = gram;
      for (std::size_t r = 0; r < n; ++r) m(r, c) = rhs[r];
      coef[c] = det3(m) / det;
    }
    double residual = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double proj = 0.0;
      for (std::size_t j = 0; j < n; ++j) proj += coef[j] * v(j, c);
      residual += (y(i, c) - proj) * (y(i, c) - proj);
    }
    EXPECT_LT(std::sqrt(residual), 1e-8);
  }
}

TEST(CoAttention, GradientsMatchFiniteDifferences) {
  Rng rng(18);
  const std::size_t d = 4;
  const std::size_t batch = 2;
  const std::size_t n = 3;
  ParameterList params{
      {"x_left", Var::leaf(random_tensor({batch * n, d}, rng))},
      {"x_right", Var::leaf(random_tensor({batch * n, d}, rng))},
  };
  auto pl = random_mh(d, 2, rng);
  auto pr = random_mh(d, 2, rng);
  for (auto* p : {&pl, &pr}) {
    const std::string side = p == &pl ? "left." : "right.";
    params.push_back({side + "w_q", p->w_q});
    params.push_back({side + "w_k", p->w_k});
    params.push_back({side + "w_v", p->w_v});
    params.push_back({side + "w_o", p->w_o});
  }
  const std::vector<AttentionMask> masks{AttentionMask::key_padding(n, n, 3),
                                         AttentionMask::key_padding(n, n, 2)};
  const auto [alpha, beta] = crossed_routing();
  auto f = [&] {
    auto [yl, yr] = coattention({params[0].var, params[1].var, n, n, batch}, alpha, beta, pl, pr,
                                {masks, masks});
    return add(project_scalar(yl, 1), project_scalar(yr, 2));
  };
  const auto report = finite_diff_check(f, params, {});
  for (const auto& p : report.parameters) EXPECT_LT(p.max_rel_error, 1e-5) << p.name;
}

TEST(Attend, BatchedEqualsPerSequence) {
  Rng rng(19);
  const std::size_t d = 4;
  const Var q = Var::constant(random_tensor({6, d}, rng));
  const Var kv = Var::constant(random_tensor({8, d}, rng));
  const auto p = random_mh(d, 2, rng);
  const std::vector<AttentionMask> masks{AttentionMask::key_padding(3, 4, 4),
                                         AttentionMask::key_padding(3, 4, 2)};
  const Tensor batched = multi_head(q, kv, kv, p, 2, masks).value();
  for (std::size_t b = 0; b < 2; ++b) {
    const std::size_t valid = b == 0 ? 4 : 2;
    const Var qb = slice_rows(q, 3 * b, 3);
    const Var kb = slice_rows(kv, 4 * b, valid);
    const Tensor single = multi_head(qb, kb, kb, p, 1, {}).value();
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(batched(3 * b + r, c), single(r, c), 1e-14);
  }
}
