#pragma once

// Low-rank factorization of pointwise and depthwise convolutions:
//   * pointwise: dense 1x1 conv W (C_out x C_in) replaced by
//     group conv Q (G1 groups) -> channel shuffle -> group conv P (G2 groups),
//     so W = P * Phi * Q^T with Phi the shuffle permutation matrix;
//   * depthwise: k x k kernel replaced by a k x 1 then 1 x k pair, optionally
//     expanding each channel into t outputs on the second conv.
// Alongside the forward paths this header carries the analytic helpers the
// design is built on: adaptive group counts, the divisor-pair relaxation,
// channel/connectivity tradeoff curves, and dense-matrix composition used as
// an oracle by the tests.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "micronet/common.hpp"
#include "micronet/kernels.hpp"
#include "micronet/rng.hpp"
#include "micronet/tensor.hpp"

namespace micronet {

struct GroupPair {
  int g1 = 1, g2 = 1;
  bool operator==(const GroupPair& o) const {
    return g1 == o.g1 && g2 == o.g2;
  }
};

/// Real-valued adaptive group count lambda * sqrt(C / R).
inline double adaptive_group_count(int channels, int ratio,
                                   double lambda = 1.0) {
  if (channels <= 0 || ratio < 1) {
    throw ConfigError("adaptive_group_count wants C > 0, R >= 1");
  }
  if (channels % ratio != 0) {
    throw ConfigError("adaptive_group_count: R=" + std::to_string(ratio) +
                      " does not divide C=" + std::to_string(channels));
  }
  return lambda * std::sqrt(static_cast<double>(channels) / ratio);
}

/// Divisor pair (G1, G2) of C_mid with G1 | C_in and G2 | C_out, minimizing
/// |G1 - G2|; ties resolve to the smaller G1. Architecture tables that pin
/// (G1, G2) explicitly bypass this.
inline GroupPair relax_group_pair(int c_in, int c_mid, int c_out) {
  if (c_in < 1 || c_mid < 1 || c_out < 1) {
    throw ConfigError("relax_group_pair wants positive channel counts");
  }
  GroupPair best;
  int best_diff = -1;
  for (int g1 = 1; g1 <= c_mid; ++g1) {
    if (c_mid % g1 != 0 || c_in % g1 != 0) continue;
    const int g2 = c_mid / g1;
    if (c_out % g2 != 0) continue;
    const int diff = std::abs(g1 - g2);
    if (best_diff < 0 || diff < best_diff ||
        (diff == best_diff && g1 < best.g1)) {
      best = {g1, g2};
      best_diff = diff;
    }
  }
  if (best_diff < 0) {
    throw ConfigError("no divisor pair of C_mid=" + std::to_string(c_mid) +
                      " divides C_in=" + std::to_string(c_in) + " / C_out=" +
                      std::to_string(c_out));
  }
  return best;
}

/// Shuffle after a G1-group conv: view channels as a (G1, C_mid/G1) grid,
/// transpose, flatten. Gather convention: y[i] = x[perm[i]].
inline std::vector<int> channel_shuffle_perm(int c_mid, int g1) {
  if (g1 < 1 || c_mid % g1 != 0) {
    throw ConfigError("shuffle wants G1 | C_mid, got C_mid=" +
                      std::to_string(c_mid) + ", G1=" + std::to_string(g1));
  }
  const int per = c_mid / g1;
  std::vector<int> perm(c_mid);
  for (int i = 0; i < c_mid; ++i) perm[i] = (i % g1) * per + i / g1;
  return perm;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (int i = 0; i < static_cast<int>(perm.size()); ++i) inv[perm[i]] = i;
  return inv;
}

/// Circular shift within the whole channel vector by j * (C / G) positions:
/// y[i] = x[(i + j * C/G) mod C], expressed as a gather permutation.
inline std::vector<int> group_shift_perm(int channels, int groups, int j) {
  if (groups < 1 || channels % groups != 0) {
    throw ConfigError("group shift wants G | C, got C=" +
                      std::to_string(channels) + ", G=" +
                      std::to_string(groups));
  }
  const int step = channels / groups;
  std::vector<int> perm(channels);
  for (int i = 0; i < channels; ++i) {
    perm[i] = (i + static_cast<long long>(j) * step) % channels;
  }
  return perm;
}

// ---------------------------------------------------------------------------
// Pointwise factorization
// ---------------------------------------------------------------------------

template <typename T>
struct PointwiseFactorization {
  int c_in = 0, c_mid = 0, c_out = 0;
  int g1 = 1, g2 = 1;
  Tensor<T> q;                // (c_mid, c_in/g1, 1, 1)
  std::vector<int> shuffle;   // gather permutation over c_mid
  Tensor<T> p;                // (c_out, c_mid/g2, 1, 1)

  void validate() const {
    if (g1 < 1 || g2 < 1 || c_in % g1 != 0 || c_mid % g1 != 0 ||
        c_mid % g2 != 0 || c_out % g2 != 0) {
      throw ConfigError("pointwise factorization: G1=" + std::to_string(g1) +
                        " must divide C_in=" + std::to_string(c_in) +
                        " and C_mid=" + std::to_string(c_mid) + "; G2=" +
                        std::to_string(g2) + " must divide C_mid and C_out=" +
                        std::to_string(c_out));
    }
    if (q.n() != c_mid || q.c() != c_in / g1 || q.h() != 1 || q.w() != 1) {
      throw DimensionError("factorization Q shape " + q.shape().str());
    }
    if (p.n() != c_out || p.c() != c_mid / g2 || p.h() != 1 || p.w() != 1) {
      throw DimensionError("factorization P shape " + p.shape().str());
    }
    if (static_cast<int>(shuffle.size()) != c_mid) {
      throw DimensionError("factorization shuffle size");
    }
  }
};

template <typename T>
PointwiseFactorization<T> make_random_factorization(int c_in, int c_mid,
                                                    int c_out, int g1, int g2,
                                                    Rng& rng) {
  PointwiseFactorization<T> f;
  f.c_in = c_in;
  f.c_mid = c_mid;
  f.c_out = c_out;
  f.g1 = g1;
  f.g2 = g2;
  f.q = Tensor<T>(c_mid, c_in / g1, 1, 1);
  f.p = Tensor<T>(c_out, c_mid / g2, 1, 1);
  f.q.fill_normal(rng, 0.0, 1.0);
  f.p.fill_normal(rng, 0.0, 1.0);
  f.shuffle = channel_shuffle_perm(c_mid, g1);
  f.validate();
  return f;
}

/// Group conv Q -> channel shuffle -> group conv P, all 1x1 stride 1.
template <typename T>
Tensor<T> mf_pointwise_forward(const Tensor<T>& x,
                               const PointwiseFactorization<T>& f,
                               MaddsProbe* probe = nullptr, int threads = 1) {
  f.validate();
  if (x.c() != f.c_in) {
    throw DimensionError("pointwise factorization input C=" +
                         std::to_string(x.c()) + " != C_in=" +
                         std::to_string(f.c_in));
  }
  Conv2dSpec sq;
  sq.out_channels = f.c_mid;
  sq.groups = f.g1;
  Tensor<T> mid = conv2d_forward(x, f.q, sq, probe, threads);
  Tensor<T> shuffled = channel_gather_forward(mid, f.shuffle);
  Conv2dSpec sp;
  sp.out_channels = f.c_out;
  sp.groups = f.g2;
  return conv2d_forward(shuffled, f.p, sp, probe, threads);
}

/// Dense (C_out, C_in, 1, 1) weight computing the same map as
/// mf_pointwise_forward, with an optional extra gather permutation applied
/// after the shuffle (used to study static shifts inserted between factors).
template <typename T>
Tensor<T> compose_dense(const PointwiseFactorization<T>& f,
                        const std::vector<int>& post_shuffle_perm = {}) {
  f.validate();
  // Dense Q as (c_mid, c_in).
  std::vector<double> qd(static_cast<std::size_t>(f.c_mid) * f.c_in, 0.0);
  const int in_per_g1 = f.c_in / f.g1;
  const int mid_per_g1 = f.c_mid / f.g1;
  for (int m = 0; m < f.c_mid; ++m) {
    const int g = m / mid_per_g1;
    for (int j = 0; j < in_per_g1; ++j) {
      qd[static_cast<std::size_t>(m) * f.c_in + g * in_per_g1 + j] =
          f.q.at(m, j, 0, 0);
    }
  }
  // Total permutation seen by P: channel i of P's input is
  // shuffled[perm-of-perm...] — gathers compose as perm_total = shuffle ∘ post.
  std::vector<int> total(f.c_mid);
  for (int i = 0; i < f.c_mid; ++i) {
    total[i] = post_shuffle_perm.empty() ? f.shuffle[i]
                                         : f.shuffle[post_shuffle_perm[i]];
  }
  Tensor<T> w(f.c_out, f.c_in, 1, 1);
  const int mid_per_g2 = f.c_mid / f.g2;
  for (int o = 0; o < f.c_out; ++o) {
    const int g = o / (f.c_out / f.g2);
    for (int ml = 0; ml < mid_per_g2; ++ml) {
      const int m_perm = g * mid_per_g2 + ml;  // channel index after gathers
      const int m_src = total[m_perm];         // producing Q output channel
      const double pw = f.p.at(o, ml, 0, 0);
      for (int i = 0; i < f.c_in; ++i) {
        w.at(o, i, 0, 0) += static_cast<T>(
            pw * qd[static_cast<std::size_t>(m_src) * f.c_in + i]);
      }
    }
  }
  return w;
}

/// MAdds of the factorized pointwise pair over an H x W feature map.
inline std::uint64_t mf_pointwise_madds(int c_in, int c_mid, int c_out, int g1,
                                        int g2, int h, int w) {
  return static_cast<std::uint64_t>(h) * w *
         (static_cast<std::uint64_t>(c_in) * c_mid / g1 +
          static_cast<std::uint64_t>(c_mid) * c_out / g2);
}

inline std::uint64_t dense_pointwise_madds(int c_in, int c_out, int h, int w) {
  return static_cast<std::uint64_t>(h) * w * c_in * c_out;
}

// ---------------------------------------------------------------------------
// Depthwise factorization
// ---------------------------------------------------------------------------

template <typename T>
struct DepthwiseFactorization {
  int k = 1;
  int channels = 0;
  int t = 1;  // expansion multiplier carried by the horizontal conv
  int stride_h = 1, stride_w = 1;
  Tensor<T> vertical;    // (channels, 1, k, 1), one k x 1 kernel per channel
  Tensor<T> horizontal;  // (channels * t, 1, 1, k), t outputs per channel

  void validate() const {
    if (k < 1 || channels < 1 || t < 1) {
      throw ConfigError("depthwise factorization wants k, channels, t >= 1");
    }
    if (vertical.n() != channels || vertical.c() != 1 || vertical.h() != k ||
        vertical.w() != 1) {
      throw DimensionError("vertical kernel shape " + vertical.shape().str());
    }
    if (horizontal.n() != channels * t || horizontal.c() != 1 ||
        horizontal.h() != 1 || horizontal.w() != k) {
      throw DimensionError("horizontal kernel shape " +
                           horizontal.shape().str());
    }
  }
};

template <typename T>
DepthwiseFactorization<T> make_random_depthwise(int k, int channels, int t,
                                                int stride_h, int stride_w,
                                                Rng& rng) {
  DepthwiseFactorization<T> d;
  d.k = k;
  d.channels = channels;
  d.t = t;
  d.stride_h = stride_h;
  d.stride_w = stride_w;
  d.vertical = Tensor<T>(channels, 1, k, 1);
  d.horizontal = Tensor<T>(channels * t, 1, 1, k);
  d.vertical.fill_normal(rng, 0.0, 1.0);
  d.horizontal.fill_normal(rng, 0.0, 1.0);
  d.validate();
  return d;
}

/// k x 1 depthwise (vertical stride) then 1 x k depthwise (horizontal stride);
/// the second conv fans each channel out into t outputs.
template <typename T>
Tensor<T> mf_depthwise_forward(const Tensor<T>& x,
                               const DepthwiseFactorization<T>& d,
                               MaddsProbe* probe = nullptr, int threads = 1) {
  d.validate();
  if (x.c() != d.channels) {
    throw DimensionError("depthwise factorization input C=" +
                         std::to_string(x.c()) + " != channels=" +
                         std::to_string(d.channels));
  }
  Conv2dSpec sv;
  sv.out_channels = d.channels;
  sv.groups = d.channels;
  sv.kernel_h = d.k;
  sv.stride_h = d.stride_h;
  sv.pad_h = (d.k - 1) / 2;
  Tensor<T> mid = conv2d_forward(x, d.vertical, sv, probe, threads);
  Conv2dSpec sh;
  sh.out_channels = d.channels * d.t;
  sh.groups = d.channels;
  sh.kernel_w = d.k;
  sh.stride_w = d.stride_w;
  sh.pad_w = (d.k - 1) / 2;
  return conv2d_forward(mid, d.horizontal, sh, probe, threads);
}

// ---------------------------------------------------------------------------
// Channel / connectivity tradeoff under a fixed MAdds budget
// ---------------------------------------------------------------------------

struct TradeoffPoint {
  double g = 0;  // group count
  double c = 0;  // channel count sustainable at the budget: sqrt(O*R*G/2)
  double e = 0;  // input connections per output channel: O / (2G)
  bool intercept = false;  // C == E here (within tolerance)
};

/// For a per-position MAdds budget O and reduction R, the factorized pair
/// with G1 = G2 = G supports C = sqrt(O*R*G/2) channels while each output
/// sees E = O/(2G) inputs; the curves cross where G = sqrt(C/R).
inline std::vector<TradeoffPoint> tradeoff_curve(
    double budget, double ratio, const std::vector<double>& g_values) {
  if (budget <= 0 || ratio <= 0) {
    throw ConfigError("tradeoff_curve wants positive budget and ratio");
  }
  std::vector<TradeoffPoint> pts;
  pts.reserve(g_values.size());
  for (double g : g_values) {
    TradeoffPoint p;
    p.g = g;
    p.c = std::sqrt(budget * ratio * g / 2.0);
    p.e = budget / (2.0 * g);
    p.intercept = std::abs(p.c - p.e) <= 1e-9 * std::max(p.c, p.e);
    pts.push_back(p);
  }
  return pts;
}

/// Group count at which channel and connectivity curves meet: O = 2*R*G^3.
inline double tradeoff_intercept_g(double budget, double ratio) {
  return std::cbrt(budget / (2.0 * ratio));
}

}  // namespace micronet
