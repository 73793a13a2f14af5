#pragma once

// Property-verification suites behind `verify {rank, oracle, grad, shiftmax}`.
//
//   rank     The composed matrix W of a pointwise factorization, viewed as a
//            G2 x G1 block grid, has rank 1 in every block; composing a
//            static group shift on the output channel space (G2 groups, so
//            the shifted diagonal mixes vertically adjacent block rows)
//            raises every block to rank exactly 2. Note the shift must act on
//            the factorization's outer interface: a group shift on the mid
//            channels, on either side of the shuffle, provably keeps every
//            block at rank 1 because the shift cycle aligns with the shuffle
//            orbits (the shifted tap reads the next channel of the same
//            squeeze group).
//   oracle   Factorized forward paths match their dense oracles: pointwise
//            squeeze/shuffle/expand vs a single composed 1x1 conv; the
//            shift-max kernel vs a naive max-of-sums loop (exact); the
//            separable depthwise pair vs a full k x k depthwise conv on
//            rank-1 (outer product) kernels.
//   grad     Central finite differences vs reverse-mode gradients for every
//            differentiable op and for a small end-to-end network containing
//            all three block kinds, in double and single precision. Max-only
//            kinks are excluded by construction (inputs are sampled or
//            re-drawn so every max has a margin wider than the FD step).
//   shiftmax Special-case reductions of the activation: identity, ReLU,
//            per-channel dynamic ReLU (J=1), shift periodicity, coefficient
//            bounds, branch-permutation invariance, and the static-shift
//            matrix form.
//
// Each suite returns named checks the CLI renders; tests assert on them too.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "micronet/arch.hpp"
#include "micronet/autograd.hpp"
#include "micronet/common.hpp"
#include "micronet/factorized.hpp"
#include "micronet/kernels.hpp"
#include "micronet/network.hpp"
#include "micronet/rng.hpp"
#include "micronet/shift_max.hpp"
#include "micronet/tensor.hpp"

namespace micronet {

struct VerifyCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct VerifyReport {
  std::string suite;
  std::vector<VerifyCheck> checks;

  bool pass() const {
    for (const auto& c : checks) {
      if (!c.pass) return false;
    }
    return true;
  }
  int passed() const {
    int n = 0;
    for (const auto& c : checks) n += c.pass ? 1 : 0;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Numerical rank
// ---------------------------------------------------------------------------

/// Count of singular values above rel_tol * sigma_max.
inline int matrix_rank(const Eigen::MatrixXd& m, double rel_tol = 1e-6) {
  if (m.rows() == 0 || m.cols() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) <= 0.0) return 0;
  const double cut = rel_tol * sv(0);
  int r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > cut) ++r;
  }
  return r;
}

/// (OC, IC, 1, 1) weight tensor as a dense OC x IC matrix.
template <typename T>
Eigen::MatrixXd weight_matrix(const Tensor<T>& w) {
  if (w.h() != 1 || w.w() != 1) {
    throw DimensionError("weight_matrix wants a 1x1-kernel tensor, got " +
                         w.shape().str());
  }
  Eigen::MatrixXd m(w.n(), w.c());
  for (int r = 0; r < w.n(); ++r) {
    for (int c = 0; c < w.c(); ++c) {
      m(r, c) = static_cast<double>(w.at(r, c, 0, 0));
    }
  }
  return m;
}

/// Per-block numerical ranks of W cut into a G2 x G1 grid (rows split by G2,
/// columns by G1, matching output/input channel groups).
inline std::vector<std::vector<int>> block_rank_map(const Eigen::MatrixXd& w,
                                                    int g1, int g2,
                                                    double rel_tol = 1e-6) {
  if (g1 < 1 || g2 < 1 || w.rows() % g2 != 0 || w.cols() % g1 != 0) {
    throw DimensionError("block grid " + std::to_string(g2) + "x" +
                         std::to_string(g1) + " does not divide a " +
                         std::to_string(w.rows()) + "x" +
                         std::to_string(w.cols()) + " matrix");
  }
  const Eigen::Index bh = w.rows() / g2;
  const Eigen::Index bw = w.cols() / g1;
  std::vector<std::vector<int>> grid(g2, std::vector<int>(g1, 0));
  for (int r = 0; r < g2; ++r) {
    for (int c = 0; c < g1; ++c) {
      grid[r][c] = matrix_rank(w.block(r * bh, c * bw, bh, bw), rel_tol);
    }
  }
  return grid;
}

template <typename T>
std::vector<std::vector<int>> block_rank_map(const Tensor<T>& w, int g1,
                                             int g2, double rel_tol = 1e-6) {
  return block_rank_map(weight_matrix(w), g1, g2, rel_tol);
}

// ---------------------------------------------------------------------------
// Reference implementations (oracles)
// ---------------------------------------------------------------------------

/// Naive max-of-sums evaluation of the shift-max definition; arithmetic
/// mirrors the kernel (double accumulator, ascending k and j) so agreement is
/// exact, while the loop structure stays independent of the kernel's.
template <typename T>
Tensor<T> shift_max_reference(const Tensor<T>& x, const HyperFunction<T>& h,
                              const ShiftMaxConfig& cfg) {
  Tensor<T> a = hyper_coeffs(x, h, cfg);
  const int C = cfg.channels;
  const int step = C / cfg.groups;
  Tensor<T> y(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int hh = 0; hh < x.h(); ++hh) {
      for (int ww = 0; ww < x.w(); ++ww) {
        for (int i = 0; i < C; ++i) {
          double best = 0.0;
          bool first = true;
          for (int k = 0; k < cfg.k_branches; ++k) {
            double acc = 0.0;
            for (int j = 0; j < cfg.j_terms; ++j) {
              acc += static_cast<double>(
                         a.at(n, (k * cfg.j_terms + j) * C + i, 0, 0)) *
                     x.at(n, (i + j * step) % C, hh, ww);
            }
            if (first || acc > best) best = acc;
            first = false;
          }
          y.at(n, i, hh, ww) = static_cast<T>(best);
        }
      }
    }
  }
  return y;
}

namespace detail {

inline std::string grid_to_string(const std::vector<std::vector<int>>& g) {
  std::ostringstream os;
  os << "[";
  for (std::size_t r = 0; r < g.size(); ++r) {
    os << (r ? " [" : "[");
    for (std::size_t c = 0; c < g[r].size(); ++c) {
      os << (c ? " " : "") << g[r][c];
    }
    os << "]";
  }
  os << "]";
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Suite entry points (definitions in src/verify.cpp)
// ---------------------------------------------------------------------------

/// Block-rank laws of the composed pointwise matrix, with and without a
/// static group shift composed on the output channels.
VerifyReport verify_rank(int seeds = 50);

/// Factorized forward paths vs their dense oracles: pointwise
/// squeeze/shuffle/expand, the shift-max kernel, the separable depthwise pair.
VerifyReport verify_oracle(int pointwise_configs = 200,
                           int shift_max_seeds = 50,
                           int depthwise_seeds = 50);

/// Special-case reductions and invariances of the shift-max activation.
VerifyReport verify_shiftmax();

// ---------------------------------------------------------------------------
// Suite: grad (central finite differences vs reverse mode)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct FdOutcome {
  double max_rel = 0.0;
  int compared = 0;
  int excluded = 0;
};

struct FdProbe {
  double rel = 0.0;
  bool kink = false;
};

/// One central-difference probe, hardened for float evaluation:
///  - Richardson extrapolation of the h and h/2 stencils removes the h^2
///    truncation term that dominates single-precision comparisons;
///  - coordinates where the two stencils disagree beyond smooth-truncation
///    scale straddle a kink or max-branch crossing, where the analytic
///    derivative is legitimately one-sided — they are excluded, not failed;
///  - the comparison denominator is floored at the roundoff scale of the
///    difference quotient (eps * |f| / h widened by 1/tol) so coordinates
///    whose gradient sits below what finite differences can resolve at the
///    requested tolerance pass vacuously instead of reporting noise.
inline FdProbe fd_probe(const std::function<double(double)>& eval,
                        double analytic, double h, double tol,
                        double floor_abs, double f0, double eps_t) {
  const double fp = eval(h), fm = eval(-h);
  const double fp2 = eval(0.5 * h), fm2 = eval(-0.5 * h);
  FdProbe out;
  // Callers signal a flipped activation selection (a tie point straddled by
  // the stencil) by returning NaN from eval.
  if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(fp2) ||
      !std::isfinite(fm2)) {
    out.kink = true;
    return out;
  }
  const double fd_h = (fp - fm) / (2.0 * h);
  const double fd_half = (fp2 - fm2) / h;
  const double noise = 8.0 * eps_t * std::max(std::abs(f0), 1.0) / h;
  const double scale =
      std::max({std::abs(fd_h), std::abs(fd_half), std::abs(analytic),
                floor_abs, noise / tol});
  if (std::abs(fd_h - fd_half) >
      std::max(0.75 * tol * scale, 16.0 * noise)) {
    out.kink = true;
    return out;
  }
  const double fd = (4.0 * fd_half - fd_h) / 3.0;
  const double denom =
      std::max({std::abs(analytic), std::abs(fd), floor_abs, noise / tol});
  out.rel = std::abs(analytic - fd) / denom;
  return out;
}

/// Concatenated branch selections of every piecewise op reachable from
/// `root`: the sign mask of each relu input, the argument choice of each
/// max2 element. Nodes are visited in creation order (ids are monotone), so
/// two identically-constructed graphs yield comparable patterns.
template <typename T>
std::vector<std::uint8_t> activation_pattern(const ag::NodePtr<T>& root) {
  std::vector<ag::Node<T>*> nodes;
  std::unordered_set<const ag::Node<T>*> seen;
  std::vector<ag::Node<T>*> stack = {root.get()};
  while (!stack.empty()) {
    ag::Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const ag::Node<T>* a, const ag::Node<T>* b) {
              return a->id < b->id;
            });
  std::vector<std::uint8_t> bits;
  for (const ag::Node<T>* n : nodes) {
    if (std::strcmp(n->op, "relu") == 0) {
      const Tensor<T>& x = n->parents[0]->value;
      for (std::size_t i = 0; i < x.size(); ++i) {
        bits.push_back(x[i] > T(0) ? 1 : 0);
      }
    } else if (std::strcmp(n->op, "max2") == 0) {
      const Tensor<T>& a = n->parents[0]->value;
      const Tensor<T>& b = n->parents[1]->value;
      for (std::size_t i = 0; i < a.size(); ++i) {
        bits.push_back(a[i] >= b[i] ? 1 : 0);
      }
    }
  }
  return bits;
}

/// Builds the graph once for gradients, then probes sampled coordinates of
/// each leaf with central differences. Indices are drawn half from the
/// largest-|grad| entries (well-conditioned comparisons) and half at random.
template <typename T>
FdOutcome<T> fd_check(
    const std::function<ag::NodePtr<T>(const std::vector<ag::NodePtr<T>>&)>&
        build,
    const std::vector<Tensor<T>>& base, double h, double tol, Rng& pick,
    int samples_per_tensor = 6) {
  std::vector<ag::NodePtr<T>> leaves;
  leaves.reserve(base.size());
  for (const auto& t : base) leaves.push_back(ag::leaf(t, true));
  auto root = build(leaves);
  if (root->value.size() != 1) {
    throw DimensionError("fd_check wants a scalar root");
  }
  ag::backward(root);

  const std::vector<std::uint8_t> base_pattern = activation_pattern(root);
  auto eval = [&](std::size_t which, std::size_t flat, double delta) {
    std::vector<ag::NodePtr<T>> probe;
    probe.reserve(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      Tensor<T> t = base[i];
      if (i == which) t[flat] = static_cast<T>(t[flat] + delta);
      probe.push_back(ag::leaf(std::move(t), false));
    }
    auto displaced = build(probe);
    if (activation_pattern(displaced) != base_pattern) {
      return std::numeric_limits<double>::quiet_NaN();
    }
    return static_cast<double>(displaced->value[0]);
  };

  FdOutcome<T> out;
  for (std::size_t which = 0; which < base.size(); ++which) {
    const auto& g = leaves[which]->grad;
    if (g.size() == 0) continue;
    double gmax = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      gmax = std::max(gmax, std::abs(static_cast<double>(g[i])));
    }
    // Candidate indices: top-|grad| half, random half (deduplicated).
    std::vector<std::size_t> order(g.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(static_cast<double>(g[a])) >
             std::abs(static_cast<double>(g[b]));
    });
    std::vector<std::size_t> idx;
    const std::size_t top = std::min<std::size_t>(
        static_cast<std::size_t>((samples_per_tensor + 1) / 2), g.size());
    for (std::size_t i = 0; i < top; ++i) idx.push_back(order[i]);
    while (idx.size() < std::min<std::size_t>(
                            static_cast<std::size_t>(samples_per_tensor),
                            g.size())) {
      const std::size_t cand = pick.below(g.size());
      if (std::find(idx.begin(), idx.end(), cand) == idx.end()) {
        idx.push_back(cand);
      }
    }
    const double floor_abs = std::max(1e-3 * gmax, 1e-12);
    const double f0 = static_cast<double>(root->value[0]);
    const double eps_t = std::numeric_limits<T>::epsilon();
    for (std::size_t flat : idx) {
      const double gv = static_cast<double>(g[flat]);
      const FdProbe p = fd_probe(
          [&](double d) { return eval(which, flat, d); }, gv, h, tol,
          floor_abs, f0, eps_t);
      if (p.kink) {
        ++out.excluded;
        continue;
      }
      out.max_rel = std::max(out.max_rel, p.rel);
      ++out.compared;
    }
  }
  return out;
}

/// Fills a tensor with values bounded away from zero (for kinked ops).
template <typename T>
void fill_off_kink(Tensor<T>& t, Rng& rng, double margin) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double u = margin + rng.uniform();
    t[i] = static_cast<T>(rng.below(2) == 0 ? u : -u);
  }
}

template <typename T>
void append_grad_checks(VerifyReport& rep, const std::string& tag, double h,
                        double tol) {
  Rng rng(15000);
  Rng pick(15001);
  const ag::ExecContext ctx;  // eval mode, single thread

  auto run = [&](const std::string& name,
                 const std::function<ag::NodePtr<T>(
                     const std::vector<ag::NodePtr<T>>&)>& build,
                 const std::vector<Tensor<T>>& base, int samples = 6) {
    const auto res = fd_check<T>(build, base, h, tol, pick, samples);
    VerifyCheck c;
    c.name = name + " (" + tag + ")";
    c.pass = res.max_rel < tol && res.compared > 0;
    std::ostringstream os;
    os << "max rel err " << res.max_rel << " over " << res.compared
       << " probes";
    if (res.excluded > 0) os << " (" << res.excluded << " near kinks excluded)";
    c.detail = os.str();
    rep.checks.push_back(c);
  };

  // A fixed random target makes every scalarized loss sensitive to all
  // coordinates of the intermediate output.
  auto make_target = [&](Shape4 s) {
    Tensor<T> t(s);
    t.fill_normal(rng, 0.0, 1.0);
    return t;
  };

  {  // mse scalarizer itself
    Tensor<T> x(2, 3, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> tgt = make_target(x.shape());
    run("mse loss", [=](const auto& L) { return ag::mse_to_fixed(L[0], tgt); },
        {x});
  }
  {  // conv: groups, rectangular kernel, stride, padding; x and w
    Tensor<T> x(2, 4, 5, 4);
    x.fill_normal(rng, 0.0, 1.0);
    Conv2dSpec s;
    s.out_channels = 6;
    s.groups = 2;
    s.kernel_h = 3;
    s.kernel_w = 2;
    s.stride_h = 2;
    s.pad_h = 1;
    Tensor<T> w(6, 2, 3, 2);
    w.fill_normal(rng, 0.0, 0.5);
    const Tensor<T> tgt = make_target(conv2d_out_shape(x.shape(), s));
    run("conv2d (grouped, strided, padded)",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::conv2d(L[0], L[1], s, ctx), tgt);
        },
        {x, w});
  }
  {  // fully connected: x, w, b
    Tensor<T> x(3, 5, 1, 1);
    x.fill_normal(rng, 0.0, 1.0);
    Tensor<T> w(4, 5, 1, 1);
    w.fill_normal(rng, 0.0, 0.5);
    Tensor<T> b(1, 4, 1, 1);
    b.fill_normal(rng, 0.0, 0.5);
    const Tensor<T> tgt = make_target({3, 4, 1, 1});
    run("fully connected",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::fully_connected(L[0], L[1], L[2], ctx),
                                  tgt);
        },
        {x, w, b});
  }
  {  // batch norm, training mode: x, gamma, beta
    Tensor<T> x(3, 4, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    Tensor<T> gamma(1, 4, 1, 1, static_cast<T>(1));
    Tensor<T> beta(1, 4, 1, 1);
    gamma.fill_normal(rng, 1.0, 0.2);
    beta.fill_normal(rng, 0.0, 0.2);
    const Tensor<T> tgt = make_target(x.shape());
    ag::ExecContext train;
    train.training = true;
    run("batch norm (training)",
        [=](const auto& L) {
          Tensor<T> rm(1, 4, 1, 1), rv(1, 4, 1, 1, static_cast<T>(1));
          return ag::mse_to_fixed(
              ag::batch_norm(L[0], L[1], L[2], rm, rv, train), tgt);
        },
        {x, gamma, beta});
  }
  {  // batch norm, eval mode (frozen affine)
    Tensor<T> x(2, 4, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    Tensor<T> gamma(1, 4, 1, 1);
    gamma.fill_normal(rng, 1.0, 0.2);
    Tensor<T> beta(1, 4, 1, 1);
    beta.fill_normal(rng, 0.0, 0.2);
    Tensor<T> rm(1, 4, 1, 1);
    rm.fill_normal(rng, 0.0, 0.5);
    Tensor<T> rv(1, 4, 1, 1);
    for (std::size_t i = 0; i < rv.size(); ++i) {
      rv[i] = static_cast<T>(0.5 + rng.uniform());
    }
    const Tensor<T> tgt = make_target(x.shape());
    run("batch norm (inference affine)",
        [=](const auto& L) {
          Tensor<T> rmc = rm, rvc = rv;
          return ag::mse_to_fixed(
              ag::batch_norm(L[0], L[1], L[2], rmc, rvc, ctx), tgt);
        },
        {x, gamma, beta});
  }
  {  // relu, off the kink
    Tensor<T> x(2, 3, 3, 3);
    fill_off_kink(x, rng, 0.3);
    const Tensor<T> tgt = make_target(x.shape());
    run("relu (off kink)",
        [=](const auto& L) { return ag::mse_to_fixed(ag::relu(L[0]), tgt); },
        {x});
  }
  {  // sigmoid
    Tensor<T> x(2, 3, 2, 2);
    x.fill_normal(rng, 0.0, 1.5);
    const Tensor<T> tgt = make_target(x.shape());
    run("sigmoid",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::sigmoid(L[0]), tgt);
        },
        {x});
  }
  {  // softmax
    Tensor<T> x(2, 5, 1, 1);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> tgt = make_target(x.shape());
    run("softmax",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::softmax(L[0]), tgt);
        },
        {x});
  }
  {  // global average pool
    Tensor<T> x(2, 3, 4, 5);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> tgt = make_target({2, 3, 1, 1});
    run("global average pool",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::global_avg_pool(L[0]), tgt);
        },
        {x});
  }
  {  // bilinear upsample
    Tensor<T> x(1, 3, 3, 4);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> tgt = make_target({1, 3, 6, 8});
    run("bilinear upsample x2",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::upsample2x(L[0]), tgt);
        },
        {x});
  }
  {  // add
    Tensor<T> a(2, 3, 2, 2), b(2, 3, 2, 2);
    a.fill_normal(rng, 0.0, 1.0);
    b.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> tgt = make_target(a.shape());
    run("elementwise add",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::add(L[0], L[1]), tgt);
        },
        {a, b});
  }
  {  // max2 with a margin between the operands (ties excluded)
    Tensor<T> a(2, 3, 2, 2);
    a.fill_normal(rng, 0.0, 1.0);
    Tensor<T> b = a;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double off = 0.5 + rng.uniform();
      b[i] = static_cast<T>(b[i] + (rng.below(2) == 0 ? off : -off));
    }
    const Tensor<T> tgt = make_target(a.shape());
    run("elementwise max (off ties)",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::max2(L[0], L[1]), tgt);
        },
        {a, b});
  }
  {  // channel gather (fixed permutation)
    Tensor<T> x(2, 6, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    const Tensor<T> tgt = make_target(x.shape());
    run("channel gather",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::channel_gather(L[0], perm), tgt);
        },
        {x});
  }
  {  // channel slice
    Tensor<T> x(2, 6, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> tgt = make_target({2, 3, 2, 2});
    run("channel slice",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::slice_channels(L[0], 2, 3), tgt);
        },
        {x});
  }
  {  // per-channel scaling: both inputs
    Tensor<T> x(2, 4, 3, 3);
    x.fill_normal(rng, 0.0, 1.0);
    Tensor<T> s(2, 4, 1, 1);
    s.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> tgt = make_target(x.shape());
    run("per-channel scale",
        [=](const auto& L) {
          return ag::mse_to_fixed(ag::scale_channels(L[0], L[1]), tgt);
        },
        {x, s});
  }
  {  // constant-affine channels and learnable channel bias
    Tensor<T> x(2, 4, 2, 2);
    x.fill_normal(rng, 0.0, 1.0);
    std::vector<T> cb(4);
    for (auto& v : cb) v = static_cast<T>(rng.normal());
    Tensor<T> b(1, 4, 1, 1);
    b.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> tgt = make_target(x.shape());
    run("channel affine + bias",
        [=](const auto& L) {
          return ag::mse_to_fixed(
              ag::bias_channels(
                  ag::affine_channels(L[0], static_cast<T>(0.8), cb), L[1]),
              tgt);
        },
        {x, b});
  }
  {  // dropout in training mode (mask fixed by reseeding per evaluation)
    Tensor<T> x(2, 3, 4, 4);
    x.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> tgt = make_target(x.shape());
    run("dropout (training, fixed mask)",
        [=](const auto& L) {
          Rng drop_rng(777);
          ag::ExecContext train;
          train.training = true;
          train.rng = &drop_rng;
          return ag::mse_to_fixed(ag::dropout(L[0], 0.3, train), tgt);
        },
        {x});
  }
  {  // label-smoothed cross entropy on logits
    Tensor<T> logits(3, 5, 1, 1);
    logits.fill_normal(rng, 0.0, 1.0);
    const std::vector<int> labels = {1, 4, 0};
    run("label-smoothed cross entropy",
        [=](const auto& L) {
          return ag::smoothed_cross_entropy(L[0], labels, 0.1);
        },
        {logits});
  }
  {  // KL against a fixed teacher distribution
    Tensor<T> logits(3, 5, 1, 1);
    logits.fill_normal(rng, 0.0, 1.0);
    Tensor<T> traw(3, 5, 1, 1);
    traw.fill_normal(rng, 0.0, 1.0);
    const Tensor<T> teacher = softmax_forward(traw);
    run("KL to fixed teacher",
        [=](const auto& L) { return ag::kl_to_fixed(L[0], teacher); },
        {logits});
  }
  {  // full shift-max graph: x and all four generator tensors, off ties
    ShiftMaxConfig cfg;
    cfg.channels = 6;
    cfg.groups = 3;
    cfg.j_terms = 2;
    cfg.k_branches = 2;
    cfg.hidden = 4;
    cfg.theta = {1.1, 0.4, -0.9, 0.3};  // branches far apart
    auto hy = make_hyper_function<T>(cfg, rng);
    hy.fc2_w.fill_normal(rng, 0.0, 0.4);
    hy.fc2_b.fill_normal(rng, 0.0, 0.4);
    // Redraw the input until every element's branch gap clears the FD step.
    Tensor<T> x(2, 6, 2, 2);
    double gap = 0.0;
    for (int attempt = 0; attempt < 64 && gap < 64.0 * h; ++attempt) {
      x.fill_normal(rng, 0.0, 1.0);
      const Tensor<T> a = hyper_coeffs(x, hy, cfg);
      gap = 1e30;
      for (int n = 0; n < x.n(); ++n) {
        for (int i = 0; i < 6; ++i) {
          for (int hh = 0; hh < 2; ++hh) {
            for (int ww = 0; ww < 2; ++ww) {
              double v[2];
              for (int k = 0; k < 2; ++k) {
                v[k] = 0.0;
                for (int j = 0; j < 2; ++j) {
                  v[k] += static_cast<double>(a.at(n, (k * 2 + j) * 6 + i, 0,
                                                   0)) *
                          x.at(n, (i + j * 2) % 6, hh, ww);
                }
              }
              gap = std::min(gap, std::abs(v[0] - v[1]));
            }
          }
        }
      }
    }
    const Tensor<T> tgt = make_target(x.shape());
    run("dynamic shift-max graph (off ties)",
        [=](const auto& L) {
          return ag::mse_to_fixed(
              dynamic_shift_max_graph(L[0], L[1], L[2], L[3], L[4], cfg, ctx),
              tgt);
        },
        {x, hy.fc1_w, hy.fc1_b, hy.fc2_w, hy.fc2_b});
  }
}

/// End-to-end check through a small network containing every block kind.
/// Shift-max thetas and generator weights are randomized so no two branches
/// coincide anywhere (kinks have generic margins).
template <typename T>
void append_network_grad_check(VerifyReport& rep, const std::string& tag,
                               double h, double tol) {
  static const char* kGradArch =
      "name grad-tiny\n"
      "input 16x16\n"
      "classes 4\n"
      "hidden 16\n"
      "dropout 0.0\n"
      "activation shift-max\n"
      "hyper-reduction 4\n"
      "stem k=3 c=8 cmid=4 g=1,4 s=2\n"
      "micro-a k=3 c=16 cmid=8 g=2,- s=2\n"
      "micro-b k=3 c=24 cmid=12 g=2,2 s=1\n"
      "micro-c k=3 c=24 cmid=8 g=4,2 s=1\n"
      "classifier\n";
  const ArchSpec arch = parse_arch_config(kGradArch);
  Network<T> net(arch, 4242);
  Rng rng(16000 + static_cast<std::uint64_t>(tag.size()));
  Rng pick(16001);
  for (std::size_t i = 0; i < net.plan.layers.size(); ++i) {
    if (net.plan.layers[i].kind == PrimKind::ShiftMax) {
      for (auto& t : net.plan.layers[i].smax.theta) t = rng.normal();
      net.vars[i].sm_fc2_w->value.fill_normal(rng, 0.0, 0.4);
      net.vars[i].sm_fc2_b->value.fill_normal(rng, 0.0, 0.4);
    }
  }
  Tensor<T> x(2, 3, 16, 16);
  x.fill_normal(rng, 0.0, 1.0);
  const std::vector<int> labels = {1, 3};
  ag::ExecContext train;
  train.training = true;

  auto loss_value = [&]() {
    auto logits = net.forward(x, train);
    return ag::smoothed_cross_entropy(logits, labels, 0.1);
  };

  // Reverse-mode gradients once.
  net.zero_grads();
  auto root = loss_value();
  ag::backward(root);
  const std::vector<std::uint8_t> base_pattern = activation_pattern(root);

  // Representative parameters: one from each layer family.
  const std::vector<std::string> names = {
      "stem.conv_kx1.w", "blk1.dw_1xk.w",      "blk2.squeeze.w",
      "blk3.expand.w",   "blk3.bn_ex.gamma",   "blk2.act1.hyper_fc1.w",
      "blk3.act2.hyper_fc2.w", "classifier.fc1.w", "classifier.fc2.b",
  };
  auto params = net.params();
  double max_rel = 0.0;
  int compared = 0;
  int excluded = 0;
  for (const auto& want : names) {
    ag::NodePtr<T> p;
    for (auto& pr : params) {
      if (pr.name == want) p = pr.node;
    }
    if (!p) {
      VerifyCheck c;
      c.name = "network gradient (" + tag + ")";
      c.pass = false;
      c.detail = "missing parameter " + want;
      rep.checks.push_back(c);
      return;
    }
    const auto& g = p->grad;
    double gmax = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      gmax = std::max(gmax, std::abs(static_cast<double>(g[i])));
    }
    std::vector<std::size_t> order(g.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(static_cast<double>(g[a])) >
             std::abs(static_cast<double>(g[b]));
    });
    const std::size_t probes = std::min<std::size_t>(3, g.size());
    const double floor_abs = std::max(1e-3 * gmax, 1e-12);
    const double f0 = static_cast<double>(root->value[0]);
    const double eps_t = std::numeric_limits<T>::epsilon();
    for (std::size_t q = 0; q < probes; ++q) {
      const std::size_t flat = order[q];
      const T saved = p->value[flat];
      auto eval = [&](double d) {
        p->value[flat] = static_cast<T>(static_cast<double>(saved) + d);
        auto displaced = loss_value();
        p->value[flat] = saved;
        if (activation_pattern(displaced) != base_pattern) {
          return std::numeric_limits<double>::quiet_NaN();
        }
        return static_cast<double>(displaced->value[0]);
      };
      const double gv = static_cast<double>(g[flat]);
      const FdProbe probe = fd_probe(eval, gv, h, tol, floor_abs, f0, eps_t);
      if (probe.kink) {
        ++excluded;
        continue;
      }
      max_rel = std::max(max_rel, probe.rel);
      ++compared;
    }
  }
  (void)pick;
  VerifyCheck c;
  c.name = "network with all block kinds, end to end (" + tag + ")";
  c.pass = max_rel < tol && compared > 0;
  std::ostringstream os;
  os << "max rel err " << max_rel << " over " << compared << " probes";
  if (excluded > 0) os << " (" << excluded << " near kinks excluded)";
  c.detail = os.str();
  rep.checks.push_back(c);
}

}  // namespace detail

/// Central finite differences vs reverse-mode gradients, double and single.
VerifyReport verify_grad();

/// Every suite at its default size, in CLI order.
std::vector<VerifyReport> verify_all();

}  // namespace micronet
