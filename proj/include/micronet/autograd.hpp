#pragma once

// Define-by-run reverse-mode automatic differentiation over Tensor<T>.
// Every op records a Node holding the forward value plus a closure that
// accumulates gradients into its parents. Nodes carry strictly increasing
// ids; backward visits them in descending id order, which is a valid
// reverse-topological order because parents are always created before
// children.

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "micronet/common.hpp"
#include "micronet/kernels.hpp"
#include "micronet/probe.hpp"
#include "micronet/rng.hpp"
#include "micronet/tensor.hpp"

namespace micronet::ag {

/// Per-run knobs shared by every op in one forward pass.
struct ExecContext {
  bool training = false;
  int threads = 1;
  MaddsProbe* probe = nullptr;
  Rng* rng = nullptr;
};

inline std::int64_t next_node_id() {
  static std::int64_t counter = 0;
  return ++counter;
}

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::int64_t id = 0;
  // Set by ops whose output is only piecewise smooth in their inputs
  // ("relu", "max2"); lets verification walk a graph and read off which
  // piece each element selected.
  const char* op = "";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  explicit Node(Tensor<T> v) : value(std::move(v)), id(next_node_id()) {}

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> leaf(Tensor<T> v, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>(std::move(v));
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
NodePtr<T> make_node(Tensor<T> value, std::vector<NodePtr<T>> parents,
                     std::function<void()> backward_fn) {
  auto n = std::make_shared<Node<T>>(std::move(value));
  for (const auto& p : parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  // Parents are kept even on gradient-free graphs so verification can walk
  // the structure; only the backward closure is gradient-conditional.
  n->parents = std::move(parents);
  if (n->requires_grad) {
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

/// Runs reverse-mode accumulation from `root`, seeding with d(root)/d(root)=1.
/// Gradients sum into each node's `grad`; call zero_grad on leaves between
/// steps (backward itself allocates fresh grads for interior nodes).
template <typename T>
void backward(const NodePtr<T>& root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });
  root->ensure_grad().fill(T(1));
  for (Node<T>* n : order) {
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn();
  }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> conv2d(const NodePtr<T>& x, const NodePtr<T>& w,
                  const Conv2dSpec& spec, const ExecContext& ctx) {
  Tensor<T> y = conv2d_forward(x->value, w->value, spec, ctx.probe,
                               ctx.threads);
  Node<T>* xp = x.get();
  Node<T>* wp = w.get();
  auto out = make_node<T>(std::move(y), {x, w}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, wp, op, spec] {
      Tensor<T>* gx = xp->requires_grad ? &xp->ensure_grad() : nullptr;
      Tensor<T>* gw = wp->requires_grad ? &wp->ensure_grad() : nullptr;
      conv2d_backward(xp->value, wp->value, spec, op->grad, gx, gw);
    };
  }
  return out;
}

template <typename T>
NodePtr<T> fully_connected(const NodePtr<T>& x, const NodePtr<T>& w,
                           const NodePtr<T>& b, const ExecContext& ctx) {
  Tensor<T> y = fc_forward(x->value, w->value, b->value, ctx.probe);
  Node<T>* xp = x.get();
  Node<T>* wp = w.get();
  Node<T>* bp = b.get();
  auto out = make_node<T>(std::move(y), {x, w, b}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, wp, bp, op] {
      Tensor<T>* gx = xp->requires_grad ? &xp->ensure_grad() : nullptr;
      Tensor<T>* gw = wp->requires_grad ? &wp->ensure_grad() : nullptr;
      Tensor<T>* gb = bp->requires_grad ? &bp->ensure_grad() : nullptr;
      fc_backward(xp->value, wp->value, op->grad, gx, gw, gb);
    };
  }
  return out;
}

/// Batch norm. Running stats live outside the graph and are updated in place
/// during training forward; inference reads them as a frozen affine.
template <typename T>
NodePtr<T> batch_norm(const NodePtr<T>& x, const NodePtr<T>& gamma,
                      const NodePtr<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, const ExecContext& ctx,
                      double momentum = 0.1, double eps = 1e-5) {
  if (!ctx.training) {
    Tensor<T> y = batch_norm_eval_forward(x->value, gamma->value, beta->value,
                                          running_mean, running_var, eps);
    Node<T>* xp = x.get();
    Node<T>* gp = gamma.get();
    auto out = make_node<T>(std::move(y), {x, gamma, beta}, nullptr);
    if (out->requires_grad) {
      Node<T>* op = out.get();
      // Eval-mode backward treats the normalization as the frozen affine it
      // is: dy/dx = gamma / sqrt(running_var + eps).
      Tensor<T> rv = running_var;
      out->backward_fn = [xp, gp, op, rv, eps] {
        if (!xp->requires_grad) return;
        Tensor<T>& gx = xp->ensure_grad();
        for (int c = 0; c < op->value.c(); ++c) {
          const double scale =
              gp->value.at(0, c, 0, 0) /
              std::sqrt(static_cast<double>(rv.at(0, c, 0, 0)) + eps);
          for (int n = 0; n < op->value.n(); ++n) {
            for (int h = 0; h < op->value.h(); ++h) {
              for (int w = 0; w < op->value.w(); ++w) {
                gx.at(n, c, h, w) +=
                    static_cast<T>(op->grad.at(n, c, h, w) * scale);
              }
            }
          }
        }
      };
    }
    return out;
  }
  auto cache = std::make_shared<BatchNormCache>();
  Tensor<T> y =
      batch_norm_train_forward(x->value, gamma->value, beta->value,
                               running_mean, running_var, momentum, eps,
                               cache.get());
  Node<T>* xp = x.get();
  Node<T>* gp = gamma.get();
  Node<T>* bp = beta.get();
  auto out = make_node<T>(std::move(y), {x, gamma, beta}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, gp, bp, op, cache] {
      Tensor<T>* gx = xp->requires_grad ? &xp->ensure_grad() : nullptr;
      Tensor<T>* gg = gp->requires_grad ? &gp->ensure_grad() : nullptr;
      Tensor<T>* gb = bp->requires_grad ? &bp->ensure_grad() : nullptr;
      batch_norm_train_backward(xp->value, gp->value, *cache, op->grad, gx, gg,
                                gb);
    };
  }
  return out;
}

template <typename T>
NodePtr<T> relu(const NodePtr<T>& x) {
  Tensor<T> y = relu_forward(x->value);
  Node<T>* xp = x.get();
  auto out = make_node<T>(std::move(y), {x}, nullptr);
  out->op = "relu";
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, op] {
      Tensor<T>& gx = xp->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (xp->value[i] > T(0)) gx[i] += op->grad[i];
      }
    };
  }
  return out;
}

template <typename T>
NodePtr<T> sigmoid(const NodePtr<T>& x) {
  Tensor<T> y = sigmoid_forward(x->value);
  Node<T>* xp = x.get();
  auto out = make_node<T>(std::move(y), {x}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, op] {
      Tensor<T>& gx = xp->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T s = op->value[i];
        gx[i] += op->grad[i] * s * (T(1) - s);
      }
    };
  }
  return out;
}

/// y[n,c,h,w] = scale * x[n,c,h,w] + bias[c]; bias is a fixed per-channel
/// constant (not a learnable node).
template <typename T>
NodePtr<T> affine_channels(const NodePtr<T>& x, T scale,
                           const std::vector<T>& bias) {
  if (static_cast<int>(bias.size()) != x->value.c()) {
    throw DimensionError("affine_channels bias size mismatch");
  }
  Tensor<T> y(x->value.shape());
  const int chw = x->value.h() * x->value.w();
  for (int n = 0; n < x->value.n(); ++n) {
    for (int c = 0; c < x->value.c(); ++c) {
      const std::size_t base = x->value.index(n, c, 0, 0);
      for (int i = 0; i < chw; ++i) {
        y[base + i] = scale * x->value[base + i] + bias[c];
      }
    }
  }
  Node<T>* xp = x.get();
  auto out = make_node<T>(std::move(y), {x}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, op, scale] {
      Tensor<T>& gx = xp->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += scale * op->grad[i];
      }
    };
  }
  return out;
}

/// y[n,c,h,w] = x[n,c,h,w] + b[0,c,0,0] with a learnable per-channel bias.
template <typename T>
NodePtr<T> bias_channels(const NodePtr<T>& x, const NodePtr<T>& b) {
  if (b->value.n() != 1 || b->value.c() != x->value.c() ||
      b->value.h() != 1 || b->value.w() != 1) {
    throw DimensionError("bias_channels wants (1,C,1,1) bias, got " +
                         b->value.shape().str());
  }
  Tensor<T> y(x->value.shape());
  const int hw = x->value.h() * x->value.w();
  for (int n = 0; n < x->value.n(); ++n) {
    for (int c = 0; c < x->value.c(); ++c) {
      const T add = b->value.at(0, c, 0, 0);
      const std::size_t base = x->value.index(n, c, 0, 0);
      for (int i = 0; i < hw; ++i) y[base + i] = x->value[base + i] + add;
    }
  }
  Node<T>* xp = x.get();
  Node<T>* bp = b.get();
  auto out = make_node<T>(std::move(y), {x, b}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, bp, op] {
      const int hw = op->grad.h() * op->grad.w();
      if (xp->requires_grad) {
        Tensor<T>& gx = xp->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += op->grad[i];
      }
      if (bp->requires_grad) {
        Tensor<T>& gb = bp->ensure_grad();
        for (int n = 0; n < op->grad.n(); ++n) {
          for (int c = 0; c < op->grad.c(); ++c) {
            const std::size_t base = op->grad.index(n, c, 0, 0);
            double acc = 0.0;
            for (int i = 0; i < hw; ++i) acc += op->grad[base + i];
            gb.at(0, c, 0, 0) += static_cast<T>(acc);
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
NodePtr<T> softmax(const NodePtr<T>& x) {
  Tensor<T> y = softmax_forward(x->value);
  Node<T>* xp = x.get();
  auto out = make_node<T>(std::move(y), {x}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, op] {
      softmax_backward(op->value, op->grad, &xp->ensure_grad());
    };
  }
  return out;
}

template <typename T>
NodePtr<T> global_avg_pool(const NodePtr<T>& x) {
  Tensor<T> y = global_avg_pool_forward(x->value);
  Node<T>* xp = x.get();
  auto out = make_node<T>(std::move(y), {x}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, op] {
      global_avg_pool_backward(xp->value.shape(), op->grad, &xp->ensure_grad());
    };
  }
  return out;
}

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
  if (a->value.shape() != b->value.shape()) {
    throw DimensionError("add shape mismatch " + a->value.shape().str() +
                         " vs " + b->value.shape().str());
  }
  Tensor<T> y(a->value.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->value[i] + b->value[i];
  Node<T>* apn = a.get();
  Node<T>* bpn = b.get();
  auto out = make_node<T>(std::move(y), {a, b}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [apn, bpn, op] {
      if (apn->requires_grad) {
        Tensor<T>& ga = apn->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += op->grad[i];
      }
      if (bpn->requires_grad) {
        Tensor<T>& gb = bpn->ensure_grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += op->grad[i];
      }
    };
  }
  return out;
}

/// Elementwise max of two same-shape tensors; ties propagate the gradient to
/// the first argument only, so folding max over a list keeps exactly one path.
template <typename T>
NodePtr<T> max2(const NodePtr<T>& a, const NodePtr<T>& b) {
  if (a->value.shape() != b->value.shape()) {
    throw DimensionError("max2 shape mismatch");
  }
  Tensor<T> y(a->value.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = a->value[i] >= b->value[i] ? a->value[i] : b->value[i];
  }
  Node<T>* apn = a.get();
  Node<T>* bpn = b.get();
  auto out = make_node<T>(std::move(y), {a, b}, nullptr);
  out->op = "max2";
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [apn, bpn, op] {
      for (std::size_t i = 0; i < op->grad.size(); ++i) {
        if (apn->value[i] >= bpn->value[i]) {
          if (apn->requires_grad) apn->ensure_grad()[i] += op->grad[i];
        } else if (bpn->requires_grad) {
          bpn->ensure_grad()[i] += op->grad[i];
        }
      }
    };
  }
  return out;
}

template <typename T>
NodePtr<T> scale_channels(const NodePtr<T>& x, const NodePtr<T>& s) {
  Tensor<T> y = scale_channels_forward(x->value, s->value);
  Node<T>* xp = x.get();
  Node<T>* sp = s.get();
  auto out = make_node<T>(std::move(y), {x, s}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, sp, op] {
      const Tensor<T>& xv = xp->value;
      for (int n = 0; n < xv.n(); ++n) {
        for (int c = 0; c < xv.c(); ++c) {
          const T f = sp->value.at(n, c, 0, 0);
          double acc = 0.0;
          for (int h = 0; h < xv.h(); ++h) {
            for (int w = 0; w < xv.w(); ++w) {
              const T g = op->grad.at(n, c, h, w);
              if (xp->requires_grad) xp->ensure_grad().at(n, c, h, w) += g * f;
              acc += static_cast<double>(g) * xv.at(n, c, h, w);
            }
          }
          if (sp->requires_grad) {
            sp->ensure_grad().at(n, c, 0, 0) += static_cast<T>(acc);
          }
        }
      }
    };
  }
  return out;
}

/// y[:, i] = x[:, perm[i]]; backward scatters gy[:, i] into gx[:, perm[i]].
template <typename T>
NodePtr<T> channel_gather(const NodePtr<T>& x, std::vector<int> perm) {
  Tensor<T> y = channel_gather_forward(x->value, perm);
  Node<T>* xp = x.get();
  auto out = make_node<T>(std::move(y), {x}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    auto pm = std::make_shared<std::vector<int>>(std::move(perm));
    out->backward_fn = [xp, op, pm] {
      Tensor<T>& gx = xp->ensure_grad();
      const int hw = gx.h() * gx.w();
      for (int n = 0; n < gx.n(); ++n) {
        for (int c = 0; c < gx.c(); ++c) {
          const std::size_t dst = gx.index(n, (*pm)[c], 0, 0);
          const std::size_t src = op->grad.index(n, c, 0, 0);
          for (int i = 0; i < hw; ++i) gx[dst + i] += op->grad[src + i];
        }
      }
    };
  }
  return out;
}

/// Channels [c0, c0 + len) of x, all spatial positions kept.
template <typename T>
NodePtr<T> slice_channels(const NodePtr<T>& x, int c0, int len) {
  if (c0 < 0 || len < 1 || c0 + len > x->value.c()) {
    throw DimensionError("slice_channels [" + std::to_string(c0) + ", " +
                         std::to_string(c0 + len) + ") out of range for C=" +
                         std::to_string(x->value.c()));
  }
  Tensor<T> y(x->value.n(), len, x->value.h(), x->value.w());
  const int hw = x->value.h() * x->value.w();
  for (int n = 0; n < x->value.n(); ++n) {
    for (int c = 0; c < len; ++c) {
      const std::size_t src = x->value.index(n, c0 + c, 0, 0);
      const std::size_t dst = y.index(n, c, 0, 0);
      for (int i = 0; i < hw; ++i) y[dst + i] = x->value[src + i];
    }
  }
  Node<T>* xp = x.get();
  auto out = make_node<T>(std::move(y), {x}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, op, c0, len, hw] {
      Tensor<T>& gx = xp->ensure_grad();
      for (int n = 0; n < gx.n(); ++n) {
        for (int c = 0; c < len; ++c) {
          const std::size_t dst = gx.index(n, c0 + c, 0, 0);
          const std::size_t src = op->grad.index(n, c, 0, 0);
          for (int i = 0; i < hw; ++i) gx[dst + i] += op->grad[src + i];
        }
      }
    };
  }
  return out;
}

template <typename T>
NodePtr<T> upsample2x(const NodePtr<T>& x) {
  Tensor<T> y = upsample2x_forward(x->value);
  Node<T>* xp = x.get();
  auto out = make_node<T>(std::move(y), {x}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, op] {
      upsample2x_backward(xp->value.shape(), op->grad, &xp->ensure_grad());
    };
  }
  return out;
}

/// Inverted dropout: scales kept activations by 1/(1-p) during training,
/// identity in inference mode. Mask order comes from ctx.rng.
template <typename T>
NodePtr<T> dropout(const NodePtr<T>& x, double p, const ExecContext& ctx) {
  if (!ctx.training || p <= 0.0) return x;
  if (!ctx.rng) throw ConfigError("dropout in training mode needs an rng");
  auto mask = std::make_shared<std::vector<char>>(x->value.size());
  const T inv_keep = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> y(x->value.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool keep = ctx.rng->uniform() >= p;
    (*mask)[i] = keep ? 1 : 0;
    y[i] = keep ? x->value[i] * inv_keep : T(0);
  }
  Node<T>* xp = x.get();
  auto out = make_node<T>(std::move(y), {x}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    out->backward_fn = [xp, op, mask, inv_keep] {
      Tensor<T>& gx = xp->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if ((*mask)[i]) gx[i] += op->grad[i] * inv_keep;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses (scalar-valued nodes of shape (1,1,1,1))
// ---------------------------------------------------------------------------

/// Mean label-smoothed cross entropy over the batch. Targets mix the one-hot
/// label with the uniform distribution: t = (1-eps)*onehot + eps/K.
template <typename T>
NodePtr<T> smoothed_cross_entropy(const NodePtr<T>& logits,
                                  const std::vector<int>& labels,
                                  double smoothing) {
  const int N = logits->value.n();
  const int K = logits->value.c();
  if (logits->value.h() != 1 || logits->value.w() != 1) {
    throw DimensionError("loss expects (N,K,1,1) logits, got " +
                         logits->value.shape().str());
  }
  if (static_cast<int>(labels.size()) != N) {
    throw DimensionError("labels size != batch");
  }
  for (int lbl : labels) {
    if (lbl < 0 || lbl >= K) throw ConfigError("label out of range");
  }
  Tensor<T> probs = softmax_forward(logits->value);
  double total = 0.0;
  const double u = smoothing / K;
  for (int n = 0; n < N; ++n) {
    double mx = -1e300;
    for (int c = 0; c < K; ++c) {
      mx = std::max(mx, static_cast<double>(logits->value.at(n, c, 0, 0)));
    }
    double z = 0.0;
    for (int c = 0; c < K; ++c) {
      z += std::exp(static_cast<double>(logits->value.at(n, c, 0, 0)) - mx);
    }
    const double log_z = std::log(z) + mx;
    for (int c = 0; c < K; ++c) {
      const double t = u + (c == labels[n] ? 1.0 - smoothing : 0.0);
      total -= t * (static_cast<double>(logits->value.at(n, c, 0, 0)) - log_z);
    }
  }
  Tensor<T> val(1, 1, 1, 1);
  val[0] = static_cast<T>(total / N);
  Node<T>* lp = logits.get();
  auto out = make_node<T>(std::move(val), {logits}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    auto pr = std::make_shared<Tensor<T>>(std::move(probs));
    auto lb = std::make_shared<std::vector<int>>(labels);
    out->backward_fn = [lp, op, pr, lb, smoothing, N, K, u] {
      Tensor<T>& gx = lp->ensure_grad();
      const double seed = op->grad[0];
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < K; ++c) {
          const double t = u + (c == (*lb)[n] ? 1.0 - smoothing : 0.0);
          gx.at(n, c, 0, 0) += static_cast<T>(
              seed * (static_cast<double>(pr->at(n, c, 0, 0)) - t) / N);
        }
      }
    };
  }
  return out;
}

/// Mean over the batch of KL(teacher || softmax(logits)) where the teacher
/// distribution is a fixed probability tensor (already detached).
template <typename T>
NodePtr<T> kl_to_fixed(const NodePtr<T>& logits, const Tensor<T>& teacher) {
  const int N = logits->value.n();
  const int K = logits->value.c();
  if (teacher.shape() != logits->value.shape()) {
    throw DimensionError("teacher probs shape mismatch");
  }
  Tensor<T> probs = softmax_forward(logits->value);
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < K; ++c) {
      const double p = teacher.at(n, c, 0, 0);
      if (p <= 0.0) continue;
      const double q = std::max(1e-30, static_cast<double>(probs.at(n, c, 0, 0)));
      total += p * (std::log(p) - std::log(q));
    }
  }
  Tensor<T> val(1, 1, 1, 1);
  val[0] = static_cast<T>(total / N);
  Node<T>* lp = logits.get();
  auto out = make_node<T>(std::move(val), {logits}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    auto pr = std::make_shared<Tensor<T>>(std::move(probs));
    auto tc = std::make_shared<Tensor<T>>(teacher);
    out->backward_fn = [lp, op, pr, tc, N, K] {
      Tensor<T>& gx = lp->ensure_grad();
      const double seed = op->grad[0];
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < K; ++c) {
          gx.at(n, c, 0, 0) += static_cast<T>(
              seed *
              (static_cast<double>(pr->at(n, c, 0, 0)) - tc->at(n, c, 0, 0)) /
              N);
        }
      }
    };
  }
  return out;
}

/// Mean squared error against a fixed target, averaged over every element.
template <typename T>
NodePtr<T> mse_to_fixed(const NodePtr<T>& pred, const Tensor<T>& target) {
  if (target.shape() != pred->value.shape()) {
    throw DimensionError("mse target shape mismatch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(pred->value[i]) - target[i];
    total += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(target.size());
  Tensor<T> val(1, 1, 1, 1);
  val[0] = static_cast<T>(total * inv_n);
  Node<T>* pp = pred.get();
  auto out = make_node<T>(std::move(val), {pred}, nullptr);
  if (out->requires_grad) {
    Node<T>* op = out.get();
    auto tg = std::make_shared<Tensor<T>>(target);
    out->backward_fn = [pp, op, tg, inv_n] {
      Tensor<T>& gx = pp->ensure_grad();
      const double seed = op->grad[0];
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += static_cast<T>(seed * 2.0 * inv_n *
                                (static_cast<double>(pp->value[i]) - (*tg)[i]));
      }
    };
  }
  return out;
}

}  // namespace micronet::ag
