// Suite drivers behind `verify {rank, oracle, grad, shiftmax, all}`. The
// shared helpers (block rank maps, the finite-difference machinery) are
// templates and stay in the header; the drivers themselves are plain
// functions, compiled once here instead of in every consumer.

#include "micronet/verify.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace micronet {

// ---------------------------------------------------------------------------
// Suite: rank
// ---------------------------------------------------------------------------

VerifyReport verify_rank(int seeds) {
  VerifyReport rep;
  rep.suite = "rank";

  // (C_in, C_mid, C_out, G1, G2) with G1*G2 == C_mid: square cases from the
  // adaptive rule plus published non-square pairs.
  struct Cfg {
    int c_in, c_mid, c_out, g1, g2;
  };
  const std::vector<Cfg> cfgs = {
      {18, 9, 18, 3, 3},    {8, 4, 8, 2, 2},      {32, 16, 32, 4, 4},
      {50, 25, 50, 5, 5},   {64, 24, 144, 4, 6},  {192, 48, 192, 6, 8},
      {96, 32, 192, 4, 8},  {48, 16, 48, 4, 4},
  };

  int base_bad = 0, base_total = 0;
  int shift_bad = 0, shift_total = 0;
  std::string first_fail;
  for (int s = 0; s < seeds; ++s) {
    const Cfg& c = cfgs[static_cast<std::size_t>(s) % cfgs.size()];
    Rng rng(9000 + static_cast<std::uint64_t>(s));
    auto f = make_random_factorization<double>(c.c_in, c.c_mid, c.c_out, c.g1,
                                               c.g2, rng);
    const Eigen::MatrixXd w = weight_matrix(compose_dense(f));
    const auto base = block_rank_map(w, c.g1, c.g2);
    for (const auto& row : base) {
      for (int r : row) {
        ++base_total;
        if (r != 1) ++base_bad;
      }
    }

    std::vector<double> a0(c.c_out), a1(c.c_out);
    for (int i = 0; i < c.c_out; ++i) {
      a0[i] = rng.normal();
      a1[i] = rng.normal();
    }
    const Eigen::MatrixXd m =
        weight_matrix(static_shift_matrix(a0, a1, c.c_out, c.g2));
    const auto shifted = block_rank_map(Eigen::MatrixXd(m * w), c.g1, c.g2);
    for (const auto& row : shifted) {
      for (int r : row) {
        ++shift_total;
        if (r != 2) ++shift_bad;
      }
    }
    if (shift_bad && first_fail.empty()) {
      first_fail = " first failing grid seed " + std::to_string(s) + ": " +
                   detail::grid_to_string(shifted);
    }
  }

  {
    VerifyCheck c;
    c.name = "composed pointwise W: every block has rank 1";
    c.pass = base_bad == 0;
    c.detail = std::to_string(base_total - base_bad) + "/" +
               std::to_string(base_total) + " blocks rank 1 across " +
               std::to_string(seeds) + " seeds";
    rep.checks.push_back(c);
  }
  {
    VerifyCheck c;
    c.name = "static group shift on output channels: every block rank 2";
    c.pass = shift_bad == 0;
    c.detail = std::to_string(shift_total - shift_bad) + "/" +
               std::to_string(shift_total) + " blocks rank 2 across " +
               std::to_string(seeds) + " seeds" + first_fail;
    rep.checks.push_back(c);
  }
  {
    VerifyCheck c;
    c.name = "zero matrix: every block rank 0";
    const Eigen::MatrixXd z = Eigen::MatrixXd::Zero(12, 8);
    const auto g = block_rank_map(z, 2, 3);
    bool ok = true;
    for (const auto& row : g) {
      for (int r : row) ok = ok && r == 0;
    }
    c.pass = ok;
    c.detail = detail::grid_to_string(g);
    rep.checks.push_back(c);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Suite: oracle
// ---------------------------------------------------------------------------

VerifyReport verify_oracle(int pointwise_configs, int shift_max_seeds,
                           int depthwise_seeds) {
  VerifyReport rep;
  rep.suite = "oracle";

  {  // Factorized pointwise forward vs composed dense 1x1 conv.
    double worst = 0.0;
    int bad = 0;
    for (int i = 0; i < pointwise_configs; ++i) {
      Rng rng(11000 + static_cast<std::uint64_t>(i));
      const int g1 = 1 + static_cast<int>(rng.below(5));
      const int g2 = 1 + static_cast<int>(rng.below(5));
      const int lcm = g1 / std::gcd(g1, g2) * g2;
      const int c_mid = lcm * (1 + static_cast<int>(rng.below(3)));
      const int c_in = g1 * (1 + static_cast<int>(rng.below(6)));
      const int c_out = g2 * (1 + static_cast<int>(rng.below(6)));
      auto f =
          make_random_factorization<float>(c_in, c_mid, c_out, g1, g2, rng);
      Tensor<float> x(1 + static_cast<int>(rng.below(2)), c_in,
                      1 + static_cast<int>(rng.below(4)),
                      1 + static_cast<int>(rng.below(4)));
      x.fill_normal(rng, 0.0, 1.0);
      const Tensor<float> direct = mf_pointwise_forward(x, f);
      Conv2dSpec dense;
      dense.out_channels = c_out;
      const Tensor<float> composed =
          conv2d_forward(x, compose_dense(f), dense);
      const double d = direct.max_abs_diff(composed);
      worst = std::max(worst, d);
      if (d >= 1e-5) ++bad;
    }
    VerifyCheck c;
    c.name = "pointwise factorization == composed dense 1x1 conv (< 1e-5)";
    c.pass = bad == 0;
    std::ostringstream os;
    os << pointwise_configs - bad << "/" << pointwise_configs
       << " configs, max abs diff " << worst;
    c.detail = os.str();
    rep.checks.push_back(c);
  }

  {  // Shift-max kernel vs naive max-of-sums reference, exact.
    int bad = 0;
    for (int s = 0; s < shift_max_seeds; ++s) {
      Rng rng(12000 + static_cast<std::uint64_t>(s));
      ShiftMaxConfig cfg;
      cfg.groups = 2 + static_cast<int>(rng.below(3));
      cfg.channels = cfg.groups * (1 + static_cast<int>(rng.below(4)));
      cfg.j_terms = 1 + static_cast<int>(rng.below(
                            static_cast<std::uint64_t>(cfg.groups)));
      cfg.k_branches = 1 + static_cast<int>(rng.below(3));
      cfg.hidden = 2 + static_cast<int>(rng.below(6));
      cfg.theta.assign(
          static_cast<std::size_t>(cfg.k_branches) * cfg.j_terms, 0.0);
      for (auto& t : cfg.theta) t = rng.normal();
      auto h = make_hyper_function<float>(cfg, rng);
      h.fc2_w.fill_normal(rng, 0.0, 0.5);  // engage the dynamic path
      h.fc2_b.fill_normal(rng, 0.0, 0.5);
      Tensor<float> x(1 + static_cast<int>(rng.below(2)), cfg.channels,
                      1 + static_cast<int>(rng.below(3)),
                      1 + static_cast<int>(rng.below(3)));
      x.fill_normal(rng, 0.0, 1.0);
      if (dynamic_shift_max(x, h, cfg).max_abs_diff(
              shift_max_reference(x, h, cfg)) != 0.0) {
        ++bad;
      }
    }
    VerifyCheck c;
    c.name = "shift-max kernel == naive max-of-sums reference (exact)";
    c.pass = bad == 0;
    c.detail = std::to_string(shift_max_seeds - bad) + "/" +
               std::to_string(shift_max_seeds) + " seeds exact";
    rep.checks.push_back(c);
  }

  {  // Separable depthwise pair == full k x k depthwise on rank-1 kernels.
    double worst = 0.0;
    int bad = 0;
    for (int s = 0; s < depthwise_seeds; ++s) {
      Rng rng(13000 + static_cast<std::uint64_t>(s));
      const int k = 1 + 2 * static_cast<int>(rng.below(3));  // 1, 3, 5
      const int channels = 1 + static_cast<int>(rng.below(6));
      const int stride = 1 + static_cast<int>(rng.below(2));
      DepthwiseFactorization<float> d;
      d.k = k;
      d.channels = channels;
      d.t = 1;
      d.stride_h = d.stride_w = stride;
      d.vertical = Tensor<float>(channels, 1, k, 1);
      d.horizontal = Tensor<float>(channels, 1, 1, k);
      d.vertical.fill_normal(rng, 0.0, 1.0);
      d.horizontal.fill_normal(rng, 0.0, 1.0);
      Tensor<float> full(channels, 1, k, k);
      for (int ch = 0; ch < channels; ++ch) {
        for (int r = 0; r < k; ++r) {
          for (int cc = 0; cc < k; ++cc) {
            full.at(ch, 0, r, cc) =
                d.vertical.at(ch, 0, r, 0) * d.horizontal.at(ch, 0, 0, cc);
          }
        }
      }
      Tensor<float> x(1 + static_cast<int>(rng.below(2)), channels,
                      k + static_cast<int>(rng.below(5)),
                      k + static_cast<int>(rng.below(5)));
      x.fill_normal(rng, 0.0, 1.0);
      Conv2dSpec spec;
      spec.out_channels = channels;
      spec.groups = channels;
      spec.kernel_h = spec.kernel_w = k;
      spec.stride_h = spec.stride_w = stride;
      spec.pad_h = spec.pad_w = (k - 1) / 2;
      const double diff = mf_depthwise_forward(x, d).max_abs_diff(
          conv2d_forward(x, full, spec));
      worst = std::max(worst, diff);
      if (diff >= 1e-5) ++bad;
    }
    VerifyCheck c;
    c.name =
        "separable depthwise pair == full kxk depthwise on outer-product "
        "kernels (< 1e-5)";
    c.pass = bad == 0;
    std::ostringstream os;
    os << depthwise_seeds - bad << "/" << depthwise_seeds
       << " seeds, max abs diff " << worst;
    c.detail = os.str();
    rep.checks.push_back(c);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Suite: shiftmax (special-case reductions)
// ---------------------------------------------------------------------------

VerifyReport verify_shiftmax() {
  VerifyReport rep;
  rep.suite = "shiftmax";
  Rng rng(14000);

  auto exact = [&](const std::string& name, double diff) {
    VerifyCheck c;
    c.name = name;
    c.pass = diff == 0.0;
    std::ostringstream os;
    os << "max abs diff " << diff;
    c.detail = os.str();
    rep.checks.push_back(c);
  };

  {  // J=1, K=1, a == 1: identity.
    ShiftMaxConfig cfg;
    cfg.channels = 6;
    cfg.groups = 3;
    cfg.j_terms = 1;
    cfg.k_branches = 1;
    cfg.theta = {1.0};
    auto h = make_hyper_function<double>(cfg, rng);  // fc2 zero -> a == theta
    Tensor<double> x(2, 6, 3, 3);
    x.fill_normal(rng, 0.0, 1.0);
    exact("J=1, K=1, unit coefficients: identity",
          dynamic_shift_max(x, h, cfg).max_abs_diff(x));
  }
  {  // J=1, K=2, coefficients {1, 0}: ReLU.
    ShiftMaxConfig cfg;
    cfg.channels = 6;
    cfg.groups = 3;
    cfg.j_terms = 1;
    cfg.k_branches = 2;
    cfg.theta = {1.0, 0.0};
    auto h = make_hyper_function<double>(cfg, rng);
    Tensor<double> x(2, 6, 3, 3);
    x.fill_normal(rng, 0.0, 1.0);
    exact("J=1, K=2, coefficients {1,0}: ReLU",
          dynamic_shift_max(x, h, cfg).max_abs_diff(relu_forward(x)));
  }
  {  // J=1 with a dynamic hyper function: per-channel max of K scalings.
    ShiftMaxConfig cfg;
    cfg.channels = 8;
    cfg.groups = 4;
    cfg.j_terms = 1;
    cfg.k_branches = 3;
    cfg.hidden = 4;
    cfg.theta = {1.0, -0.5, 0.25};
    auto h = make_hyper_function<double>(cfg, rng);
    h.fc2_w.fill_normal(rng, 0.0, 0.7);
    h.fc2_b.fill_normal(rng, 0.0, 0.7);
    Tensor<double> x(2, 8, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<double> a = hyper_coeffs(x, h, cfg);
    Tensor<double> want(x.shape());
    for (int n = 0; n < x.n(); ++n) {
      for (int i = 0; i < 8; ++i) {
        for (int hh = 0; hh < 2; ++hh) {
          for (int ww = 0; ww < 2; ++ww) {
            double best = a.at(n, i, 0, 0) * x.at(n, i, hh, ww);
            for (int k = 1; k < 3; ++k) {
              best = std::max(best, a.at(n, k * 8 + i, 0, 0) *
                                        x.at(n, i, hh, ww));
            }
            want.at(n, i, hh, ww) = best;
          }
        }
      }
    }
    exact("J=1 dynamic: per-channel max of K input-dependent scalings",
          dynamic_shift_max(x, h, cfg).max_abs_diff(want));
  }
  {  // Group shift is a bijection with period G.
    Tensor<double> x(1, 12, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    const int G = 4;
    Tensor<double> y = x;
    for (int reps = 0; reps < G; ++reps) y = group_shift(y, 1, G);
    exact("group shift applied G times: identity (period G)",
          y.max_abs_diff(x));
  }
  {  // Zero generator output weights: coefficients equal theta exactly.
    ShiftMaxConfig cfg;
    cfg.channels = 6;
    cfg.groups = 2;
    cfg.j_terms = 2;
    cfg.k_branches = 2;
    cfg.theta = {0.7, -0.3, 0.1, 1.2};
    auto h = make_hyper_function<double>(cfg, rng);  // fc2 zero
    Tensor<double> x(2, 6, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<double> a = hyper_coeffs(x, h, cfg);
    double diff = 0.0;
    for (int n = 0; n < a.n(); ++n) {
      for (int c = 0; c < a.c(); ++c) {
        diff = std::max(diff, std::abs(a.at(n, c, 0, 0) -
                                       cfg.theta[static_cast<std::size_t>(
                                           c / cfg.channels)]));
      }
    }
    exact("zero generator weights: coefficients == theta", diff);
  }
  {  // Coefficients stay inside [theta - gamma, theta + gamma].
    ShiftMaxConfig cfg;
    cfg.channels = 8;
    cfg.groups = 4;
    cfg.j_terms = 2;
    cfg.k_branches = 2;
    cfg.hidden = 6;
    cfg.gamma = 0.5;
    cfg.theta = {1.0, 0.0, -0.2, 0.4};
    auto h = make_hyper_function<float>(cfg, rng);
    h.fc2_w.fill_normal(rng, 0.0, 3.0);
    h.fc2_b.fill_normal(rng, 0.0, 3.0);
    bool ok = true;
    for (int s = 0; s < 20; ++s) {
      Tensor<float> x(2, 8, 2, 2);
      x.fill_normal(rng, 0.0, 2.0);
      const Tensor<float> a = hyper_coeffs(x, h, cfg);
      // Slack of one part in 1e6 absorbs the float cast of an exact-math
      // double result; the bound itself is tight in exact arithmetic.
      const double slack = 1e-6;
      for (int n = 0; n < a.n(); ++n) {
        for (int c = 0; c < a.c(); ++c) {
          const double th = cfg.theta[static_cast<std::size_t>(c / 8)];
          const double v = a.at(n, c, 0, 0);
          ok = ok && v >= th - cfg.gamma - slack && v <= th + cfg.gamma + slack;
        }
      }
    }
    VerifyCheck c;
    c.name = "coefficients bounded in [theta - gamma, theta + gamma]";
    c.pass = ok;
    c.detail = "20 random inputs, float-rounding slack 1e-6";
    rep.checks.push_back(c);
  }
  {  // Permuting the K branches leaves the output unchanged.
    ShiftMaxConfig cfg;
    cfg.channels = 6;
    cfg.groups = 3;
    cfg.j_terms = 2;
    cfg.k_branches = 3;
    cfg.hidden = 5;
    cfg.theta = {0.9, -0.1, 0.3, 0.8, -0.6, 0.2};
    auto h = make_hyper_function<double>(cfg, rng);
    h.fc2_w.fill_normal(rng, 0.0, 0.8);
    h.fc2_b.fill_normal(rng, 0.0, 0.8);
    Tensor<double> x(2, 6, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<double> base = dynamic_shift_max(x, h, cfg);

    const std::vector<int> brperm = {2, 0, 1};
    ShiftMaxConfig cfg2 = cfg;
    HyperFunction<double> h2 = h;
    const int cjk_per_branch = cfg.channels * cfg.j_terms;
    for (int k = 0; k < cfg.k_branches; ++k) {
      const int src = brperm[static_cast<std::size_t>(k)];
      for (int j = 0; j < cfg.j_terms; ++j) {
        cfg2.theta[static_cast<std::size_t>(k * cfg.j_terms + j)] =
            cfg.theta[static_cast<std::size_t>(src * cfg.j_terms + j)];
      }
      for (int row = 0; row < cjk_per_branch; ++row) {
        for (int col = 0; col < cfg.hidden; ++col) {
          h2.fc2_w.at(k * cjk_per_branch + row, col, 0, 0) =
              h.fc2_w.at(src * cjk_per_branch + row, col, 0, 0);
        }
        h2.fc2_b.at(0, k * cjk_per_branch + row, 0, 0) =
            h.fc2_b.at(0, src * cjk_per_branch + row, 0, 0);
      }
    }
    exact("branch permutation invariance (max is symmetric in k)",
          dynamic_shift_max(x, h2, cfg2).max_abs_diff(base));
  }
  {  // Static shift equals the K=1, J=2 special case and its matrix form.
    const int C = 9, G = 3;
    std::vector<double> a0(C), a1(C);
    for (int i = 0; i < C; ++i) {
      a0[i] = rng.normal();
      a1[i] = rng.normal();
    }
    Tensor<double> x(2, C, 2, 3);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<double> y = static_group_shift(x, a0, a1, G);

    Conv2dSpec dense;
    dense.out_channels = C;
    const Tensor<double> via_matrix =
        conv2d_forward(x, static_shift_matrix(a0, a1, C, G), dense);
    exact("static shift == diagonal + shifted-diagonal matrix",
          y.max_abs_diff(via_matrix));

    std::vector<double> id(C, 1.0), zero(C, 0.0);
    exact("static shift with a0=1, a1=0: identity",
          static_group_shift(x, id, zero, G).max_abs_diff(x));
  }
  {  // Frozen cost arithmetic: the three cost terms at C=64, r=4, J=K=2.
    ShiftMaxConfig cfg;
    cfg.channels = 64;
    cfg.groups = 4;
    cfg.j_terms = 2;
    cfg.k_branches = 2;
    cfg.hidden = hyper_hidden_width(64, 4);
    cfg.theta = ShiftMaxConfig::default_theta(2, 2);
    const ShiftMaxCost parts = shift_max_cost_parts(cfg, 14, 14);
    VerifyCheck c;
    c.name = "cost formula: C=64, r=4, J=K=2 at 14x14 totals 67,840";
    c.pass = parts.pool_adds == 12544 && parts.gen_madds == 1024 + 4096 &&
             parts.apply_madds == 50176 &&
             shift_max_cost(cfg, 14, 14) == 67840;
    c.detail = std::to_string(parts.pool_adds) + " + " +
               std::to_string(parts.gen_madds) + " + " +
               std::to_string(parts.apply_madds) + " = " +
               std::to_string(parts.total());
    rep.checks.push_back(c);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Suite: grad (drivers; the FD machinery lives in the header's detail ns)
// ---------------------------------------------------------------------------

VerifyReport verify_grad() {
  VerifyReport rep;
  rep.suite = "grad";
  detail::append_grad_checks<double>(rep, "double", 1e-4, 1e-6);
  detail::append_grad_checks<float>(rep, "single", 1e-2, 1e-3);
  detail::append_network_grad_check<double>(rep, "double", 1e-4, 1e-6);
  detail::append_network_grad_check<float>(rep, "single", 1e-2, 1e-3);
  return rep;
}

std::vector<VerifyReport> verify_all() {
  return {verify_rank(), verify_oracle(), verify_grad(), verify_shiftmax()};
}

}  // namespace micronet
