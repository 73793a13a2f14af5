#pragma once

// Dynamic shift-max activation. Channels are viewed as G groups of C/G; the
// j-th "shift" reads channel (i + j*C/G) mod C. The activation outputs, per
// channel i and spatial position,
//     y_i = max_{k < K} sum_{j < J} a[k][i][j](x) * x_shift_j[i]
// where the coefficients a are produced per batch item by a small
// squeeze-style hyper network (global average pool -> FC -> ReLU -> FC) and
// bounded via a = theta + gamma * (2*sigmoid(z) - 1). With zero hyper weights
// the activation collapses to the static map defined by theta; the default
// theta (1 for k=0,j=0, else 0) makes it ReLU-like for K=2.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "micronet/autograd.hpp"
#include "micronet/common.hpp"
#include "micronet/factorized.hpp"
#include "micronet/kernels.hpp"
#include "micronet/probe.hpp"
#include "micronet/tensor.hpp"

namespace micronet {

/// Hidden width of the coefficient generator: C/r rounded, floored at 8 so
/// narrow layers keep a usable bottleneck.
inline int hyper_hidden_width(int channels, int reduction) {
  if (channels < 1 || reduction < 1) {
    throw ConfigError("hyper_hidden_width wants positive C and r");
  }
  const int h = static_cast<int>(
      std::llround(static_cast<double>(channels) / reduction));
  return std::max(8, h);
}

struct ShiftMaxConfig {
  int channels = 0;
  int groups = 1;
  int j_terms = 2;    // fusion terms per branch
  int k_branches = 2; // branches under the max
  int hidden = 8;     // hyper-network bottleneck width
  double gamma = 0.5; // residual range of the dynamic part
  std::vector<double> theta;  // base coefficient per (k, j), size K*J

  static std::vector<double> default_theta(int k_branches, int j_terms) {
    std::vector<double> t(static_cast<std::size_t>(k_branches) * j_terms, 0.0);
    t[0] = 1.0;  // k=0, j=0: identity-vs-zero start for K=2
    return t;
  }

  void validate() const {
    if (channels < 1 || groups < 1 || channels % groups != 0) {
      throw ConfigError("shift-max wants G | C, got C=" +
                        std::to_string(channels) + ", G=" +
                        std::to_string(groups));
    }
    if (j_terms < 1 || j_terms > groups) {
      throw ConfigError("shift-max wants 1 <= J <= G, got J=" +
                        std::to_string(j_terms) + ", G=" +
                        std::to_string(groups));
    }
    if (k_branches < 1) throw ConfigError("shift-max wants K >= 1");
    if (hidden < 1) throw ConfigError("shift-max wants hidden >= 1");
    if (theta.size() !=
        static_cast<std::size_t>(k_branches) * j_terms) {
      throw ConfigError("shift-max theta must have K*J entries");
    }
  }

  int coeff_channels() const { return channels * j_terms * k_branches; }
};

/// Coefficient-generator weights: pooled x -> fc1 -> ReLU -> fc2.
template <typename T>
struct HyperFunction {
  Tensor<T> fc1_w, fc1_b;  // (hidden, C, 1, 1), (1, hidden, 1, 1)
  Tensor<T> fc2_w, fc2_b;  // (C*J*K, hidden, 1, 1), (1, C*J*K, 1, 1)

  void validate(const ShiftMaxConfig& cfg) const {
    if (fc1_w.n() != cfg.hidden || fc1_w.c() != cfg.channels ||
        fc1_b.c() != cfg.hidden || fc2_w.n() != cfg.coeff_channels() ||
        fc2_w.c() != cfg.hidden || fc2_b.c() != cfg.coeff_channels()) {
      throw DimensionError("hyper-function weight shapes do not match config");
    }
  }
};

/// fc1 random, fc2 zero: the activation starts exactly at its theta map.
template <typename T>
HyperFunction<T> make_hyper_function(const ShiftMaxConfig& cfg, Rng& rng) {
  cfg.validate();
  HyperFunction<T> h;
  h.fc1_w = Tensor<T>(cfg.hidden, cfg.channels, 1, 1);
  h.fc1_w.fill_normal(rng, 0.0, std::sqrt(2.0 / cfg.channels));
  h.fc1_b = Tensor<T>(1, cfg.hidden, 1, 1);
  h.fc2_w = Tensor<T>(cfg.coeff_channels(), cfg.hidden, 1, 1);
  h.fc2_b = Tensor<T>(1, cfg.coeff_channels(), 1, 1);
  return h;
}

/// Channel gather for shift j: y[i] = x[(i + j*C/G) mod C].
template <typename T>
Tensor<T> group_shift(const Tensor<T>& x, int j, int groups) {
  return channel_gather_forward(x, group_shift_perm(x.c(), groups, j));
}

/// Coefficients a[n, (k*J + j)*C + i] for every batch item; spatially shared.
template <typename T>
Tensor<T> hyper_coeffs(const Tensor<T>& x, const HyperFunction<T>& h,
                       const ShiftMaxConfig& cfg,
                       MaddsProbe* probe = nullptr) {
  cfg.validate();
  h.validate(cfg);
  if (x.c() != cfg.channels) {
    throw DimensionError("shift-max input C=" + std::to_string(x.c()) +
                         " != config C=" + std::to_string(cfg.channels));
  }
  Tensor<T> pooled = global_avg_pool_forward(x);
  Tensor<T> t1 = relu_forward(fc_forward(pooled, h.fc1_w, h.fc1_b, probe));
  Tensor<T> z = fc_forward(t1, h.fc2_w, h.fc2_b, probe);
  Tensor<T> a(z.shape());
  const int C = cfg.channels;
  for (int n = 0; n < z.n(); ++n) {
    for (int c = 0; c < z.c(); ++c) {
      const int kj = c / C;
      const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(
                                  z.at(n, c, 0, 0))));
      a.at(n, c, 0, 0) =
          static_cast<T>(cfg.theta[kj] + cfg.gamma * (2.0 * s - 1.0));
    }
  }
  return a;
}

/// Plain-tensor forward (no graph): direct evaluation of the max-of-sums.
template <typename T>
Tensor<T> dynamic_shift_max(const Tensor<T>& x, const HyperFunction<T>& h,
                            const ShiftMaxConfig& cfg,
                            MaddsProbe* probe = nullptr) {
  Tensor<T> a = hyper_coeffs(x, h, cfg, probe);
  const int C = cfg.channels;
  const int step = C / cfg.groups;
  Tensor<T> y(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int i = 0; i < C; ++i) {
      for (int hh = 0; hh < x.h(); ++hh) {
        for (int ww = 0; ww < x.w(); ++ww) {
          double best = 0.0;
          for (int k = 0; k < cfg.k_branches; ++k) {
            double acc = 0.0;
            for (int j = 0; j < cfg.j_terms; ++j) {
              const int src = (i + j * step) % C;
              acc += static_cast<double>(
                         a.at(n, (k * cfg.j_terms + j) * C + i, 0, 0)) *
                     x.at(n, src, hh, ww);
            }
            if (k == 0 || acc > best) best = acc;
          }
          y.at(n, i, hh, ww) = static_cast<T>(best);
        }
      }
    }
  }
  return y;
}

/// Static special case (K=1, J=2, constant coefficients):
/// y_i = a0[i] * x_i + a1[i] * x_{(i + C/G) mod C}.
template <typename T>
Tensor<T> static_group_shift(const Tensor<T>& x, const std::vector<T>& a0,
                             const std::vector<T>& a1, int groups) {
  const int C = x.c();
  if (static_cast<int>(a0.size()) != C ||
      static_cast<int>(a1.size()) != C) {
    throw DimensionError("static shift coefficient size != C");
  }
  const auto perm = group_shift_perm(C, groups, 1);
  Tensor<T> y(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int i = 0; i < C; ++i) {
      for (int hh = 0; hh < x.h(); ++hh) {
        for (int ww = 0; ww < x.w(); ++ww) {
          y.at(n, i, hh, ww) =
              a0[i] * x.at(n, i, hh, ww) + a1[i] * x.at(n, perm[i], hh, ww);
        }
      }
    }
  }
  return y;
}

/// The same static map as an explicit C x C channel matrix:
/// diagonal a0 plus a1 on the shifted diagonal.
template <typename T>
Tensor<T> static_shift_matrix(const std::vector<T>& a0,
                              const std::vector<T>& a1, int channels,
                              int groups) {
  if (static_cast<int>(a0.size()) != channels ||
      static_cast<int>(a1.size()) != channels) {
    throw DimensionError("static shift coefficient size != C");
  }
  const auto perm = group_shift_perm(channels, groups, 1);
  Tensor<T> m(channels, channels, 1, 1);
  for (int i = 0; i < channels; ++i) {
    m.at(i, i, 0, 0) += a0[i];
    m.at(i, perm[i], 0, 0) += a1[i];
  }
  return m;
}

struct ShiftMaxCost {
  std::uint64_t pool_adds = 0;   // global average pool, additions only
  std::uint64_t gen_madds = 0;   // the two coefficient-generator FCs
  std::uint64_t apply_madds = 0; // per-position fused multiply-adds
  std::uint64_t total() const { return pool_adds + gen_madds + apply_madds; }
};

/// H*W*C (pool) + C*hidden + hidden*C*J*K (generator) + H*W*C*J*K (apply).
inline ShiftMaxCost shift_max_cost_parts(const ShiftMaxConfig& cfg, int h,
                                         int w) {
  cfg.validate();
  ShiftMaxCost c;
  const std::uint64_t hw = static_cast<std::uint64_t>(h) * w;
  c.pool_adds = hw * cfg.channels;
  c.gen_madds = static_cast<std::uint64_t>(cfg.channels) * cfg.hidden +
                static_cast<std::uint64_t>(cfg.hidden) * cfg.coeff_channels();
  c.apply_madds = hw * cfg.coeff_channels();
  return c;
}

inline std::uint64_t shift_max_cost(const ShiftMaxConfig& cfg, int h, int w) {
  return shift_max_cost_parts(cfg, h, w).total();
}

/// Autograd-graph version built from primitives, for training and gradient
/// checks. Weight nodes are owned by the caller.
template <typename T>
ag::NodePtr<T> dynamic_shift_max_graph(
    const ag::NodePtr<T>& x, const ag::NodePtr<T>& fc1_w,
    const ag::NodePtr<T>& fc1_b, const ag::NodePtr<T>& fc2_w,
    const ag::NodePtr<T>& fc2_b, const ShiftMaxConfig& cfg,
    const ag::ExecContext& ctx) {
  cfg.validate();
  if (x->value.c() != cfg.channels) {
    throw DimensionError("shift-max input C=" + std::to_string(x->value.c()) +
                         " != config C=" + std::to_string(cfg.channels));
  }
  const int C = cfg.channels;
  auto pooled = ag::global_avg_pool(x);
  auto t1 = ag::relu(ag::fully_connected(pooled, fc1_w, fc1_b, ctx));
  auto z = ag::fully_connected(t1, fc2_w, fc2_b, ctx);
  std::vector<T> bias(cfg.coeff_channels());
  for (int c = 0; c < cfg.coeff_channels(); ++c) {
    bias[c] = static_cast<T>(cfg.theta[c / C] - cfg.gamma);
  }
  auto a = ag::affine_channels(ag::sigmoid(z), static_cast<T>(2.0 * cfg.gamma),
                               bias);
  std::vector<ag::NodePtr<T>> shifted;
  shifted.reserve(cfg.j_terms);
  for (int j = 0; j < cfg.j_terms; ++j) {
    shifted.push_back(
        j == 0 ? x : ag::channel_gather(x, group_shift_perm(C, cfg.groups, j)));
  }
  ag::NodePtr<T> out;
  for (int k = 0; k < cfg.k_branches; ++k) {
    ag::NodePtr<T> branch;
    for (int j = 0; j < cfg.j_terms; ++j) {
      auto coeff = ag::slice_channels(a, (k * cfg.j_terms + j) * C, C);
      auto term = ag::scale_channels(shifted[j], coeff);
      branch = j == 0 ? term : ag::add(branch, term);
    }
    // Left-fold keeps the lowest branch index on ties.
    out = k == 0 ? branch : ag::max2(out, branch);
  }
  return out;
}

}  // namespace micronet
