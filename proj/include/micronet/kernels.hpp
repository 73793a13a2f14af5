#pragma once

#include <cmath>
#include <cstdint>
#include <thread>
#include <vector>

#include "micronet/common.hpp"
#include "micronet/probe.hpp"
#include "micronet/tensor.hpp"

namespace micronet {

struct Conv2dSpec {
  int out_channels = 0;
  int groups = 1;
  int kernel_h = 1, kernel_w = 1;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
};

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline Shape4 conv2d_out_shape(const Shape4& x, const Conv2dSpec& s) {
  if (s.groups < 1 || x.c % s.groups != 0 || s.out_channels % s.groups != 0) {
    throw DimensionError("conv groups=" + std::to_string(s.groups) +
                         " must divide in=" + std::to_string(x.c) +
                         " and out=" + std::to_string(s.out_channels));
  }
  if (s.stride_h < 1 || s.stride_w < 1) {
    throw DimensionError("conv stride must be >= 1");
  }
  const int ho = conv_out_dim(x.h, s.kernel_h, s.stride_h, s.pad_h);
  const int wo = conv_out_dim(x.w, s.kernel_w, s.stride_w, s.pad_w);
  if (ho < 1 || wo < 1) {
    throw DimensionError("conv input " + x.str() +
                         " too small for kernel/stride/padding");
  }
  return {x.n, s.out_channels, ho, wo};
}

/// Analytic multiply-accumulate count for one conv invocation (batch n).
inline std::uint64_t conv2d_madds(const Shape4& x, const Conv2dSpec& s) {
  const Shape4 y = conv2d_out_shape(x, s);
  const std::uint64_t per_out = static_cast<std::uint64_t>(x.c / s.groups) *
                                s.kernel_h * s.kernel_w;
  return static_cast<std::uint64_t>(y.n) * y.c * y.h * y.w * per_out;
}

inline std::uint64_t conv2d_param_count(const Shape4& x, const Conv2dSpec& s) {
  return static_cast<std::uint64_t>(s.out_channels) * (x.c / s.groups) *
         s.kernel_h * s.kernel_w;
}

namespace detail {

/// Runs fn(i) for i in [0, count) across up to `threads` std::threads.
/// Work items must write disjoint outputs; results do not depend on the
/// thread count.
template <typename Fn>
void parallel_for(std::int64_t count, int threads, Fn fn) {
  if (threads <= 1 || count < 2) {
    for (std::int64_t i = 0; i < count; ++i) fn(i);
    return;
  }
  const int nt = static_cast<int>(
      std::min<std::int64_t>(threads, count));
  std::vector<std::thread> pool;
  pool.reserve(nt);
  const std::int64_t chunk = (count + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    const std::int64_t lo = t * chunk;
    const std::int64_t hi = std::min<std::int64_t>(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Direct grouped convolution, zero padding, no bias. Weight layout is
/// (out_channels, in_channels/groups, kh, kw). Out-of-bounds taps are
/// executed as multiplies by zero so the executed MAdd count equals the
/// analytic formula.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w,
                         const Conv2dSpec& s, MaddsProbe* probe = nullptr,
                         int threads = 1) {
  const Shape4 ys = conv2d_out_shape(x.shape(), s);
  const int icpg = x.c() / s.groups;
  const int ocpg = s.out_channels / s.groups;
  if (w.n() != s.out_channels || w.c() != icpg || w.h() != s.kernel_h ||
      w.w() != s.kernel_w) {
    throw DimensionError("conv weight shape " + w.shape().str() +
                         " does not match spec (oc=" +
                         std::to_string(s.out_channels) + ", icpg=" +
                         std::to_string(icpg) + ", k=" +
                         std::to_string(s.kernel_h) + "x" +
                         std::to_string(s.kernel_w) + ")");
  }
  Tensor<T> y(ys);
  const std::int64_t jobs = static_cast<std::int64_t>(ys.n) * s.out_channels;
  detail::parallel_for(jobs, threads, [&](std::int64_t job) {
    const int n = static_cast<int>(job / s.out_channels);
    const int oc = static_cast<int>(job % s.out_channels);
    const int g = oc / ocpg;
    for (int oy = 0; oy < ys.h; ++oy) {
      const int iy0 = oy * s.stride_h - s.pad_h;
      for (int ox = 0; ox < ys.w; ++ox) {
        const int ix0 = ox * s.stride_w - s.pad_w;
        T acc = T(0);
        for (int icl = 0; icl < icpg; ++icl) {
          const int ic = g * icpg + icl;
          for (int ky = 0; ky < s.kernel_h; ++ky) {
            const int iy = iy0 + ky;
            for (int kx = 0; kx < s.kernel_w; ++kx) {
              const int ix = ix0 + kx;
              const T v = (iy >= 0 && iy < x.h() && ix >= 0 && ix < x.w())
                              ? x.at(n, ic, iy, ix)
                              : T(0);
              acc += w.at(oc, icl, ky, kx) * v;
            }
          }
        }
        y.at(n, oc, oy, ox) = acc;
      }
    }
  });
  if (probe) {
    probe->conv += static_cast<std::uint64_t>(ys.n) * ys.c * ys.h * ys.w *
                   icpg * s.kernel_h * s.kernel_w;
  }
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                     const Conv2dSpec& s, const Tensor<T>& gy, Tensor<T>* gx,
                     Tensor<T>* gw) {
  const Shape4 ys = conv2d_out_shape(x.shape(), s);
  if (gy.shape() != ys) {
    throw DimensionError("conv grad shape " + gy.shape().str() +
                         " != forward output " + ys.str());
  }
  const int icpg = x.c() / s.groups;
  const int ocpg = s.out_channels / s.groups;
  for (int n = 0; n < ys.n; ++n) {
    for (int oc = 0; oc < s.out_channels; ++oc) {
      const int g = oc / ocpg;
      for (int oy = 0; oy < ys.h; ++oy) {
        const int iy0 = oy * s.stride_h - s.pad_h;
        for (int ox = 0; ox < ys.w; ++ox) {
          const int ix0 = ox * s.stride_w - s.pad_w;
          const T go = gy.at(n, oc, oy, ox);
          for (int icl = 0; icl < icpg; ++icl) {
            const int ic = g * icpg + icl;
            for (int ky = 0; ky < s.kernel_h; ++ky) {
              const int iy = iy0 + ky;
              if (iy < 0 || iy >= x.h()) continue;
              for (int kx = 0; kx < s.kernel_w; ++kx) {
                const int ix = ix0 + kx;
                if (ix < 0 || ix >= x.w()) continue;
                if (gx) gx->at(n, ic, iy, ix) += w.at(oc, icl, ky, kx) * go;
                if (gw) gw->at(oc, icl, ky, kx) += x.at(n, ic, iy, ix) * go;
              }
            }
          }
        }
      }
    }
  }
}

/// Fully connected layer on (N, C, 1, 1) tensors. Weight (OC, IC, 1, 1),
/// bias (1, OC, 1, 1). MAdd convention counts C_in*C_out per row (bias free).
template <typename T>
Tensor<T> fc_forward(const Tensor<T>& x, const Tensor<T>& w,
                     const Tensor<T>& b, MaddsProbe* probe = nullptr) {
  if (x.h() != 1 || x.w() != 1) {
    throw DimensionError("fc input must be (N,C,1,1), got " + x.shape().str());
  }
  if (w.c() != x.c() || w.h() != 1 || w.w() != 1 || b.c() != w.n()) {
    throw DimensionError("fc weight/bias shape mismatch");
  }
  Tensor<T> y(x.n(), w.n(), 1, 1);
  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < w.n(); ++o) {
      T acc = b.at(0, o, 0, 0);
      for (int i = 0; i < x.c(); ++i) {
        acc += w.at(o, i, 0, 0) * x.at(n, i, 0, 0);
      }
      y.at(n, o, 0, 0) = acc;
    }
  }
  if (probe) {
    probe->fc += static_cast<std::uint64_t>(x.n()) * w.n() * x.c();
  }
  return y;
}

template <typename T>
void fc_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy,
                 Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < w.n(); ++o) {
      const T go = gy.at(n, o, 0, 0);
      if (gb) gb->at(0, o, 0, 0) += go;
      for (int i = 0; i < x.c(); ++i) {
        if (gx) gx->at(n, i, 0, 0) += w.at(o, i, 0, 0) * go;
        if (gw) gw->at(o, i, 0, 0) += x.at(n, i, 0, 0) * go;
      }
    }
  }
}

struct BatchNormCache {
  std::vector<double> mean, inv_std;  // per channel
};

/// Training-mode batch norm: biased batch statistics over (N,H,W) per channel;
/// updates running stats in place with the given momentum.
template <typename T>
Tensor<T> batch_norm_train_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                   const Tensor<T>& beta,
                                   Tensor<T>& running_mean,
                                   Tensor<T>& running_var, double momentum,
                                   double eps, BatchNormCache* cache) {
  const int C = x.c();
  const double m = static_cast<double>(x.n()) * x.h() * x.w();
  Tensor<T> y(x.shape());
  if (cache) {
    cache->mean.assign(C, 0.0);
    cache->inv_std.assign(C, 0.0);
  }
  for (int c = 0; c < C; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      for (int h = 0; h < x.h(); ++h) {
        for (int w = 0; w < x.w(); ++w) {
          const double v = x.at(n, c, h, w);
          sum += v;
          sq += v * v;
        }
      }
    }
    const double mean = sum / m;
    const double var = std::max(0.0, sq / m - mean * mean);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    running_mean.at(0, c, 0, 0) = static_cast<T>(
        (1.0 - momentum) * running_mean.at(0, c, 0, 0) + momentum * mean);
    running_var.at(0, c, 0, 0) = static_cast<T>(
        (1.0 - momentum) * running_var.at(0, c, 0, 0) + momentum * var);
    if (cache) {
      cache->mean[c] = mean;
      cache->inv_std[c] = inv_std;
    }
    const double g = gamma.at(0, c, 0, 0);
    const double b = beta.at(0, c, 0, 0);
    for (int n = 0; n < x.n(); ++n) {
      for (int h = 0; h < x.h(); ++h) {
        for (int w = 0; w < x.w(); ++w) {
          y.at(n, c, h, w) =
              static_cast<T>((x.at(n, c, h, w) - mean) * inv_std * g + b);
        }
      }
    }
  }
  return y;
}

template <typename T>
void batch_norm_train_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                               const BatchNormCache& cache,
                               const Tensor<T>& gy, Tensor<T>* gx,
                               Tensor<T>* ggamma, Tensor<T>* gbeta) {
  const int C = x.c();
  const double m = static_cast<double>(x.n()) * x.h() * x.w();
  for (int c = 0; c < C; ++c) {
    const double mean = cache.mean[c];
    const double inv_std = cache.inv_std[c];
    double sum_g = 0.0, sum_gx = 0.0;  // sum(gy), sum(gy * xhat)
    for (int n = 0; n < x.n(); ++n) {
      for (int h = 0; h < x.h(); ++h) {
        for (int w = 0; w < x.w(); ++w) {
          const double xhat = (x.at(n, c, h, w) - mean) * inv_std;
          const double g = gy.at(n, c, h, w);
          sum_g += g;
          sum_gx += g * xhat;
        }
      }
    }
    if (gbeta) gbeta->at(0, c, 0, 0) += static_cast<T>(sum_g);
    if (ggamma) ggamma->at(0, c, 0, 0) += static_cast<T>(sum_gx);
    if (gx) {
      const double gam = gamma.at(0, c, 0, 0);
      for (int n = 0; n < x.n(); ++n) {
        for (int h = 0; h < x.h(); ++h) {
          for (int w = 0; w < x.w(); ++w) {
            const double xhat = (x.at(n, c, h, w) - mean) * inv_std;
            const double g = gy.at(n, c, h, w);
            gx->at(n, c, h, w) += static_cast<T>(
                gam * inv_std * (g - sum_g / m - xhat * sum_gx / m));
          }
        }
      }
    }
  }
}

/// Inference-mode batch norm: pure per-channel affine from running stats.
template <typename T>
Tensor<T> batch_norm_eval_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta,
                                  const Tensor<T>& running_mean,
                                  const Tensor<T>& running_var, double eps) {
  Tensor<T> y(x.shape());
  for (int c = 0; c < x.c(); ++c) {
    const double inv_std =
        1.0 / std::sqrt(static_cast<double>(running_var.at(0, c, 0, 0)) + eps);
    const double scale = gamma.at(0, c, 0, 0) * inv_std;
    const double shift =
        beta.at(0, c, 0, 0) - running_mean.at(0, c, 0, 0) * scale;
    for (int n = 0; n < x.n(); ++n) {
      for (int h = 0; h < x.h(); ++h) {
        for (int w = 0; w < x.w(); ++w) {
          y.at(n, c, h, w) = static_cast<T>(x.at(n, c, h, w) * scale + shift);
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x[i]))));
  }
  return y;
}

/// Softmax across the channel axis for every (n, h, w) location.
template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int h = 0; h < x.h(); ++h) {
      for (int w = 0; w < x.w(); ++w) {
        double mx = -1e300;
        for (int c = 0; c < x.c(); ++c) {
          mx = std::max(mx, static_cast<double>(x.at(n, c, h, w)));
        }
        double z = 0.0;
        for (int c = 0; c < x.c(); ++c) {
          z += std::exp(static_cast<double>(x.at(n, c, h, w)) - mx);
        }
        for (int c = 0; c < x.c(); ++c) {
          y.at(n, c, h, w) = static_cast<T>(
              std::exp(static_cast<double>(x.at(n, c, h, w)) - mx) / z);
        }
      }
    }
  }
  return y;
}

template <typename T>
void softmax_backward(const Tensor<T>& y, const Tensor<T>& gy, Tensor<T>* gx) {
  for (int n = 0; n < y.n(); ++n) {
    for (int h = 0; h < y.h(); ++h) {
      for (int w = 0; w < y.w(); ++w) {
        double dot = 0.0;
        for (int c = 0; c < y.c(); ++c) {
          dot += static_cast<double>(gy.at(n, c, h, w)) * y.at(n, c, h, w);
        }
        for (int c = 0; c < y.c(); ++c) {
          gx->at(n, c, h, w) += static_cast<T>(
              y.at(n, c, h, w) * (static_cast<double>(gy.at(n, c, h, w)) - dot));
        }
      }
    }
  }
}

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), 1, 1);
  const double m = static_cast<double>(x.h()) * x.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      double s = 0.0;
      for (int h = 0; h < x.h(); ++h) {
        for (int w = 0; w < x.w(); ++w) s += x.at(n, c, h, w);
      }
      y.at(n, c, 0, 0) = static_cast<T>(s / m);
    }
  }
  return y;
}

template <typename T>
void global_avg_pool_backward(const Shape4& xs, const Tensor<T>& gy,
                              Tensor<T>* gx) {
  const T inv = static_cast<T>(1.0 / (static_cast<double>(xs.h) * xs.w));
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const T g = gy.at(n, c, 0, 0) * inv;
      for (int h = 0; h < xs.h; ++h) {
        for (int w = 0; w < xs.w; ++w) gx->at(n, c, h, w) += g;
      }
    }
  }
}

/// y[n,c,h,w] = x[n,c,h,w] * s[n,c,0,0]
template <typename T>
Tensor<T> scale_channels_forward(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.n() != x.n() || s.c() != x.c() || s.h() != 1 || s.w() != 1) {
    throw DimensionError("scale_channels wants (N,C,1,1) scales, got " +
                         s.shape().str() + " for input " + x.shape().str());
  }
  Tensor<T> y(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T f = s.at(n, c, 0, 0);
      for (int h = 0; h < x.h(); ++h) {
        for (int w = 0; w < x.w(); ++w) y.at(n, c, h, w) = x.at(n, c, h, w) * f;
      }
    }
  }
  return y;
}

/// Gather permutation on channels: y[:, i] = x[:, perm[i]].
template <typename T>
Tensor<T> channel_gather_forward(const Tensor<T>& x,
                                 const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != x.c()) {
    throw DimensionError("channel permutation size " +
                         std::to_string(perm.size()) + " != C " +
                         std::to_string(x.c()));
  }
  Tensor<T> y(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const int src = perm[c];
      for (int h = 0; h < x.h(); ++h) {
        for (int w = 0; w < x.w(); ++w) y.at(n, c, h, w) = x.at(n, src, h, w);
      }
    }
  }
  return y;
}

/// Bilinear 2x upsampling with half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> upsample2x_forward(const Tensor<T>& x) {
  const int Ho = x.h() * 2, Wo = x.w() * 2;
  Tensor<T> y(x.n(), x.c(), Ho, Wo);
  auto src = [](int o) { return (o + 0.5) / 2.0 - 0.5; };
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      for (int oy = 0; oy < Ho; ++oy) {
        const double sy = src(oy);
        int y0 = static_cast<int>(std::floor(sy));
        double wy = sy - y0;
        int y1 = y0 + 1;
        y0 = std::min(std::max(y0, 0), x.h() - 1);
        y1 = std::min(std::max(y1, 0), x.h() - 1);
        for (int ox = 0; ox < Wo; ++ox) {
          const double sx = src(ox);
          int x0 = static_cast<int>(std::floor(sx));
          double wx = sx - x0;
          int x1 = x0 + 1;
          x0 = std::min(std::max(x0, 0), x.w() - 1);
          x1 = std::min(std::max(x1, 0), x.w() - 1);
          const double v = (1 - wy) * ((1 - wx) * x.at(n, c, y0, x0) +
                                       wx * x.at(n, c, y0, x1)) +
                           wy * ((1 - wx) * x.at(n, c, y1, x0) +
                                 wx * x.at(n, c, y1, x1));
          y.at(n, c, oy, ox) = static_cast<T>(v);
        }
      }
    }
  }
  return y;
}

template <typename T>
void upsample2x_backward(const Shape4& xs, const Tensor<T>& gy, Tensor<T>* gx) {
  auto src = [](int o) { return (o + 0.5) / 2.0 - 0.5; };
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      for (int oy = 0; oy < gy.h(); ++oy) {
        const double sy = src(oy);
        int y0 = static_cast<int>(std::floor(sy));
        double wy = sy - y0;
        int y1 = y0 + 1;
        y0 = std::min(std::max(y0, 0), xs.h - 1);
        y1 = std::min(std::max(y1, 0), xs.h - 1);
        for (int ox = 0; ox < gy.w(); ++ox) {
          const double sx = src(ox);
          int x0 = static_cast<int>(std::floor(sx));
          double wx = sx - x0;
          int x1 = x0 + 1;
          x0 = std::min(std::max(x0, 0), xs.w - 1);
          x1 = std::min(std::max(x1, 0), xs.w - 1);
          const double g = gy.at(n, c, oy, ox);
          gx->at(n, c, y0, x0) += static_cast<T>((1 - wy) * (1 - wx) * g);
          gx->at(n, c, y0, x1) += static_cast<T>((1 - wy) * wx * g);
          gx->at(n, c, y1, x0) += static_cast<T>(wy * (1 - wx) * g);
          gx->at(n, c, y1, x1) += static_cast<T>(wy * wx * g);
        }
      }
    }
  }
}

}  // namespace micronet
