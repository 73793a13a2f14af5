// Pointwise / depthwise convolution factorization, shuffles, group-count
// selection, block-rank structure, and the channel/connectivity tradeoff.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <vector>

#include "micronet/factorized.hpp"
#include "micronet/shift_max.hpp"
#include "micronet/tensor.hpp"
#include "micronet/verify.hpp"

using namespace micronet;

namespace {

Tensor<float> random_tensor(int n, int c, int h, int w, Rng& rng) {
  Tensor<float> t(n, c, h, w);
  t.fill_normal(rng, 0.0, 1.0);
  return t;
}

/// (c_out, c_in, 1, 1) matrix product a * b with double accumulation.
Tensor<float> matmul_1x1(const Tensor<float>& a, const Tensor<float>& b) {
  REQUIRE(a.c() == b.n());
  Tensor<float> out(a.n(), b.c(), 1, 1);
  for (int o = 0; o < a.n(); ++o) {
    for (int i = 0; i < b.c(); ++i) {
      double acc = 0.0;
      for (int m = 0; m < a.c(); ++m) {
        acc += static_cast<double>(a.at(o, m, 0, 0)) * b.at(m, i, 0, 0);
      }
      out.at(o, i, 0, 0) = static_cast<float>(acc);
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Group count selection
// ---------------------------------------------------------------------------

TEST_CASE("adaptive group count is sqrt(C/R) scaled by lambda") {
  CHECK(adaptive_group_count(18, 2) == doctest::Approx(3.0));
  CHECK(adaptive_group_count(4, 4) == doctest::Approx(1.0));
  CHECK(adaptive_group_count(288, 6) ==
        doctest::Approx(std::sqrt(48.0)).epsilon(1e-12));
  CHECK(adaptive_group_count(18, 2, 2.0) == doctest::Approx(6.0));
  CHECK_THROWS_AS(adaptive_group_count(10, 4), ConfigError);  // 4 ∤ 10
  CHECK_THROWS_AS(adaptive_group_count(0, 1), ConfigError);
}

TEST_CASE("group pair relaxation picks the closest valid divisor pair") {
  CHECK(relax_group_pair(64, 24, 144) == GroupPair{4, 6});
  CHECK(relax_group_pair(9, 9, 9) == GroupPair{3, 3});
  CHECK(relax_group_pair(192, 48, 192) == GroupPair{6, 8});
}

TEST_CASE("group pair ties resolve toward the smaller first factor") {
  // Divisor pairs of 12: (3,4) and (4,3) tie at |G1-G2| = 1.
  CHECK(relax_group_pair(12, 12, 12) == GroupPair{3, 4});
}

TEST_CASE("group pair relaxation checks divisibility of both endpoints") {
  // Every factor pair of 4 needs G1 | 3 and G2 | 3; none qualifies.
  CHECK_THROWS_AS(relax_group_pair(3, 4, 3), ConfigError);
  CHECK_THROWS_AS(relax_group_pair(0, 4, 4), ConfigError);
}

TEST_CASE("relaxed pairs always multiply back to the bottleneck width") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int g1 = 1 + static_cast<int>(rng.below(6));
    const int g2 = 1 + static_cast<int>(rng.below(6));
    const int c_mid = g1 * g2;
    const int c_in = g1 * (1 + static_cast<int>(rng.below(8)));
    const int c_out = g2 * (1 + static_cast<int>(rng.below(8)));
    const GroupPair p = relax_group_pair(c_in, c_mid, c_out);
    CHECK(p.g1 * p.g2 == c_mid);
    CHECK(c_in % p.g1 == 0);
    CHECK(c_out % p.g2 == 0);
  }
}

// ---------------------------------------------------------------------------
// Permutations
// ---------------------------------------------------------------------------

TEST_CASE("channel shuffle is the grid transpose") {
  CHECK(channel_shuffle_perm(6, 3) == std::vector<int>{0, 2, 4, 1, 3, 5});
  const std::vector<int> id = {0, 1, 2, 3, 4};
  CHECK(channel_shuffle_perm(5, 1) == id);
  CHECK_THROWS_AS(channel_shuffle_perm(6, 4), ConfigError);
}

TEST_CASE("shuffle composed with its inverse is the identity") {
  const auto perm = channel_shuffle_perm(24, 4);
  const auto inv = inverse_perm(perm);
  for (int i = 0; i < 24; ++i) {
    CHECK(inv[perm[i]] == i);
    CHECK(perm[inv[i]] == i);
  }
}

TEST_CASE("group shift rotates channels by j * C/G") {
  const auto id = group_shift_perm(6, 3, 0);
  for (int i = 0; i < 6; ++i) CHECK(id[i] == i);

  const auto p1 = group_shift_perm(6, 3, 1);
  CHECK(p1[0] == 2);
  CHECK(p1[5] == 1);

  // Applying the shift G times wraps all the way around.
  const auto pg = group_shift_perm(6, 3, 3);
  for (int i = 0; i < 6; ++i) CHECK(pg[i] == i);

  CHECK_THROWS_AS(group_shift_perm(7, 3, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// Pointwise factorization
// ---------------------------------------------------------------------------

TEST_CASE("identity factors give the identity pointwise map") {
  // Q = I (G1=1), shuffle = identity, P = I (G2=1).
  PointwiseFactorization<float> f;
  f.c_in = f.c_mid = f.c_out = 4;
  f.q = Tensor<float>(4, 4, 1, 1);
  f.p = Tensor<float>(4, 4, 1, 1);
  for (int i = 0; i < 4; ++i) {
    f.q.at(i, i, 0, 0) = 1.0f;
    f.p.at(i, i, 0, 0) = 1.0f;
  }
  f.shuffle = {0, 1, 2, 3};

  Rng rng(2);
  Tensor<float> x = random_tensor(2, 4, 3, 3, rng);
  CHECK(mf_pointwise_forward(x, f).max_abs_diff(x) == 0.0);

  Tensor<float> w = compose_dense(f);
  for (int o = 0; o < 4; ++o) {
    for (int i = 0; i < 4; ++i) {
      CHECK(w.at(o, i, 0, 0) == (o == i ? 1.0f : 0.0f));
    }
  }
}

TEST_CASE("factorized forward equals the composed dense 1x1 conv") {
  Rng rng(3);
  auto f = make_random_factorization<float>(18, 9, 18, 3, 3, rng);
  Tensor<float> x = random_tensor(2, 18, 4, 4, rng);

  Tensor<float> direct = mf_pointwise_forward(x, f);
  Conv2dSpec dense;
  dense.out_channels = 18;
  Tensor<float> composed = conv2d_forward(x, compose_dense(f), dense);
  CHECK(direct.max_abs_diff(composed) < 1e-5);
}

TEST_CASE("composed forward equivalence holds across random configs") {
  Rng rng(4);
  for (int trial = 0; trial < 25; ++trial) {
    const int g1 = 1 + static_cast<int>(rng.below(4));
    const int g2 = 1 + static_cast<int>(rng.below(4));
    const int c_mid = g1 * g2 * (1 + static_cast<int>(rng.below(3)));
    const int c_in = g1 * (1 + static_cast<int>(rng.below(5)));
    const int c_out = g2 * (1 + static_cast<int>(rng.below(5)));
    auto f = make_random_factorization<float>(c_in, c_mid, c_out, g1, g2, rng);
    Tensor<float> x = random_tensor(1, c_in, 3, 3, rng);
    Conv2dSpec dense;
    dense.out_channels = c_out;
    const double d = mf_pointwise_forward(x, f).max_abs_diff(
        conv2d_forward(x, compose_dense(f), dense));
    CHECK(d < 1e-5);
  }
}

TEST_CASE("square factorization cost collapses to 2C^2/(RG) per position") {
  // C=18, R=2 (C_mid=9), G=3: 18*9/3 + 9*18/3 = 54 + 54 = 108.
  CHECK(mf_pointwise_madds(18, 9, 18, 3, 3, 1, 1) == 108u);
  CHECK(108u == 2u * 18 * 18 / (2 * 3));
  // The two instrumented convs count exactly that.
  Rng rng(5);
  auto f = make_random_factorization<float>(18, 9, 18, 3, 3, rng);
  Tensor<float> x = random_tensor(1, 18, 1, 1, rng);
  MaddsProbe probe;
  mf_pointwise_forward(x, f, &probe);
  CHECK(probe.conv == 108u);
  // And over a feature map the cost scales by H*W.
  CHECK(mf_pointwise_madds(18, 9, 18, 3, 3, 14, 14) == 108u * 14 * 14);
  CHECK(dense_pointwise_madds(18, 18, 1, 1) == 324u);
}

TEST_CASE("composed dense weight of a square factorization is fully dense") {
  Rng rng(6);
  auto f = make_random_factorization<float>(18, 9, 18, 3, 3, rng);
  Tensor<float> w = compose_dense(f);
  int zero_entries = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == 0.0f) ++zero_entries;
  }
  CHECK(zero_entries == 0);  // every output reads every input
}

TEST_CASE("factorization validation rejects inconsistent configs") {
  Rng rng(7);
  auto f = make_random_factorization<float>(18, 9, 18, 3, 3, rng);
  f.g1 = 4;  // 4 does not divide 18 or 9
  CHECK_THROWS_AS(f.validate(), ConfigError);
  f.g1 = 3;
  f.shuffle.pop_back();
  CHECK_THROWS_AS(f.validate(), DimensionError);
  f.shuffle.push_back(8);
  Tensor<float> x = random_tensor(1, 12, 2, 2, rng);
  CHECK_THROWS_AS(mf_pointwise_forward(x, f), DimensionError);
}

// ---------------------------------------------------------------------------
// Block-rank structure of the composed weight
// ---------------------------------------------------------------------------

TEST_CASE("every G x G block of a composed weight has rank one") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    auto f = make_random_factorization<float>(18, 9, 18, 3, 3, rng);
    const auto grid = block_rank_map(compose_dense(f), 3, 3);
    for (const auto& row : grid) {
      for (int r : row) CHECK(r == 1);
    }
  }
}

TEST_CASE("zero matrix has rank zero blocks") {
  Tensor<float> w(8, 8, 1, 1);
  const auto grid = block_rank_map(w, 2, 2);
  for (const auto& row : grid) {
    for (int r : row) CHECK(r == 0);
  }
}

TEST_CASE("a static two-term shift between the factors doubles block rank") {
  Rng rng(9);
  const int C = 18, G = 3;
  auto f = make_random_factorization<float>(C, 9, C, G, G, rng);
  Tensor<float> w = compose_dense(f);

  // Mixing map on the output side: diag(a0) + diag(a1) * one-group shift.
  std::vector<float> a0(C), a1(C);
  for (int i = 0; i < C; ++i) {
    a0[i] = static_cast<float>(rng.normal(1.0, 0.3));
    a1[i] = static_cast<float>(rng.normal(0.5, 0.3));
  }
  Tensor<float> mix = static_shift_matrix(a0, a1, C, G);
  Tensor<float> w2 = matmul_1x1(mix, w);

  const auto before = block_rank_map(w, G, G);
  const auto after = block_rank_map(w2, G, G);
  for (int r = 0; r < G; ++r) {
    for (int c = 0; c < G; ++c) {
      CHECK(before[r][c] == 1);
      CHECK(after[r][c] == 2);
    }
  }
}

TEST_CASE("block rank map requires the grid to divide the matrix") {
  Tensor<float> w(6, 6, 1, 1);
  CHECK_THROWS_AS(block_rank_map(w, 4, 2), DimensionError);
}

// ---------------------------------------------------------------------------
// Depthwise factorization
// ---------------------------------------------------------------------------

TEST_CASE("unit 1x1 depthwise factorization is the identity") {
  Rng rng(10);
  DepthwiseFactorization<float> d;
  d.k = 1;
  d.channels = 5;
  d.vertical = Tensor<float>(5, 1, 1, 1, 1.0f);
  d.horizontal = Tensor<float>(5, 1, 1, 1, 1.0f);
  Tensor<float> x = random_tensor(1, 5, 4, 4, rng);
  CHECK(mf_depthwise_forward(x, d).max_abs_diff(x) == 0.0);
}

TEST_CASE("separable pair reproduces a rank-one full kernel exactly") {
  Rng rng(11);
  const int k = 5, C = 6;
  auto d = make_random_depthwise<float>(k, C, 1, 1, 1, rng);

  // Full k x k depthwise kernel = outer product of the two 1-D kernels.
  Tensor<float> full(C, 1, k, k);
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        full.at(c, 0, ky, kx) =
            d.vertical.at(c, 0, ky, 0) * d.horizontal.at(c, 0, 0, kx);
      }
    }
  }
  Conv2dSpec s;
  s.out_channels = C;
  s.groups = C;
  s.kernel_h = s.kernel_w = k;
  s.pad_h = s.pad_w = (k - 1) / 2;

  Tensor<float> x = random_tensor(2, C, 9, 7, rng);
  const double diff =
      mf_depthwise_forward(x, d).max_abs_diff(conv2d_forward(x, full, s));
  CHECK(diff < 1e-5);
}

TEST_CASE("separable pair matches the rank-one kernel under stride two") {
  Rng rng(12);
  const int k = 3, C = 4;
  auto d = make_random_depthwise<float>(k, C, 1, 2, 2, rng);
  Tensor<float> full(C, 1, k, k);
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        full.at(c, 0, ky, kx) =
            d.vertical.at(c, 0, ky, 0) * d.horizontal.at(c, 0, 0, kx);
      }
    }
  }
  Conv2dSpec s;
  s.out_channels = C;
  s.groups = C;
  s.kernel_h = s.kernel_w = k;
  s.stride_h = s.stride_w = 2;
  s.pad_h = s.pad_w = 1;
  Tensor<float> x = random_tensor(1, C, 8, 8, rng);
  Tensor<float> a = mf_depthwise_forward(x, d);
  Tensor<float> b = conv2d_forward(x, full, s);
  CHECK(a.shape() == b.shape());
  CHECK(a.max_abs_diff(b) < 1e-5);
}

TEST_CASE("depthwise expansion fans each channel into t outputs") {
  Rng rng(13);
  auto d = make_random_depthwise<float>(3, 16, 4, 1, 1, rng);
  Tensor<float> x = random_tensor(1, 16, 6, 6, rng);
  CHECK(mf_depthwise_forward(x, d).c() == 64);
}

TEST_CASE("separable depthwise costs (kh + kw) / (kh * kw) of the full conv") {
  // k=5, C=64, stride 1, 14x14 map: 125,440 vs 313,600 for the square kernel.
  const Shape4 in{1, 64, 14, 14};
  Conv2dSpec vert;
  vert.out_channels = 64;
  vert.groups = 64;
  vert.kernel_h = 5;
  vert.pad_h = 2;
  Conv2dSpec horiz;
  horiz.out_channels = 64;
  horiz.groups = 64;
  horiz.kernel_w = 5;
  horiz.pad_w = 2;
  const std::uint64_t pair =
      conv2d_madds(in, vert) + conv2d_madds(conv2d_out_shape(in, vert), horiz);
  CHECK(pair == 125440u);

  Conv2dSpec full;
  full.out_channels = 64;
  full.groups = 64;
  full.kernel_h = full.kernel_w = 5;
  full.pad_h = full.pad_w = 2;
  CHECK(conv2d_madds(in, full) == 313600u);

  // Exact (kh + kw) / (kh * kw) ratio at stride 1.
  CHECK(pair * 25u == 313600u * 10u);
}

// ---------------------------------------------------------------------------
// Channel / connectivity tradeoff
// ---------------------------------------------------------------------------

TEST_CASE("tradeoff curve evaluates channels and connectivity per group") {
  const auto pts = tradeoff_curve(324.0, 2.0, {1.0, 3.0});
  REQUIRE(pts.size() == 2u);
  CHECK(pts[0].g == 1.0);
  CHECK(pts[0].e == doctest::Approx(162.0));  // O/2 at G=1
  CHECK(pts[1].c == doctest::Approx(std::sqrt(972.0)).epsilon(1e-12));
  CHECK(pts[1].e == doctest::Approx(54.0));
  CHECK_THROWS_AS(tradeoff_curve(0.0, 2.0, {1.0}), ConfigError);
}

TEST_CASE("channel and connectivity curves cross at G = cbrt(O / 2R)") {
  // O = 2*R*G^3 with R=2, G=3 gives O=108 and C = E = 18 at the crossing.
  const double g_star = tradeoff_intercept_g(108.0, 2.0);
  CHECK(g_star == doctest::Approx(3.0).epsilon(1e-12));
  const auto pts = tradeoff_curve(108.0, 2.0, {2.0, 3.0, 4.0});
  CHECK(!pts[0].intercept);
  CHECK(pts[1].intercept);
  CHECK(!pts[2].intercept);
  CHECK(pts[1].c == doctest::Approx(18.0));
  CHECK(pts[1].e == doctest::Approx(18.0));
  // At the crossing the group count obeys G = sqrt(C/R).
  CHECK(g_star == doctest::Approx(std::sqrt(pts[1].c / 2.0)).epsilon(1e-12));
}

TEST_CASE("intercept matches the curve crossing for sampled budgets") {
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const double budget = 10.0 + 500.0 * rng.uniform();
    const double ratio = 1.0 + 5.0 * rng.uniform();
    const double g_star = tradeoff_intercept_g(budget, ratio);
    const auto pts = tradeoff_curve(budget, ratio, {g_star});
    CHECK(pts[0].c == doctest::Approx(pts[0].e).epsilon(1e-9));
    CHECK(g_star ==
          doctest::Approx(std::sqrt(pts[0].c / ratio)).epsilon(1e-9));
  }
}
