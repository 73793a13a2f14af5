#pragma once

// Executable network: owns one parameter/state set per plan layer and runs
// the define-by-run forward over the autograd graph. Construction order is
// fixed by the plan, so a given seed always produces the same weights.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "micronet/arch.hpp"
#include "micronet/autograd.hpp"
#include "micronet/common.hpp"
#include "micronet/rng.hpp"
#include "micronet/tensor.hpp"

namespace micronet {

template <typename T>
struct Param {
  std::string name;
  ag::NodePtr<T> node;
};

template <typename T>
struct StateRef {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
class Network {
 public:
  // One slot per plan layer; unused members stay null.
  struct LayerVars {
    ag::NodePtr<T> w, b;           // conv / fc weight and bias
    ag::NodePtr<T> gamma, beta;    // batch norm affine
    Tensor<T> running_mean, running_var;
    ag::NodePtr<T> sm_fc1_w, sm_fc1_b, sm_fc2_w, sm_fc2_b;  // shift-max hyper
  };

  ArchSpec arch;
  LayerPlan plan;
  bool full_rank = false;
  std::vector<LayerVars> vars;

  Network(const ArchSpec& a, std::uint64_t seed, bool full_rank_twin = false)
      : arch(a),
        plan(build_plan(a, a.input_h, a.input_w, 1, full_rank_twin)),
        full_rank(full_rank_twin) {
    Rng rng(seed);
    vars.resize(plan.layers.size());
    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
      const PrimLayer& l = plan.layers[i];
      LayerVars& v = vars[i];
      switch (l.kind) {
        case PrimKind::Conv: {
          const int icpg = l.in_shape.c / l.conv.groups;
          Tensor<T> w(l.conv.out_channels, icpg, l.conv.kernel_h,
                      l.conv.kernel_w);
          const double fan_in =
              static_cast<double>(icpg) * l.conv.kernel_h * l.conv.kernel_w;
          w.fill_normal(rng, 0.0, std::sqrt(2.0 / fan_in));
          v.w = ag::leaf(std::move(w), true);
          if (l.conv_bias) {
            v.b = ag::leaf(Tensor<T>(1, l.conv.out_channels, 1, 1), true);
          }
          break;
        }
        case PrimKind::BatchNorm: {
          v.gamma = ag::leaf(Tensor<T>(1, l.in_shape.c, 1, 1, T(1)), true);
          v.beta = ag::leaf(Tensor<T>(1, l.in_shape.c, 1, 1), true);
          v.running_mean = Tensor<T>(1, l.in_shape.c, 1, 1);
          v.running_var = Tensor<T>(1, l.in_shape.c, 1, 1, T(1));
          break;
        }
        case PrimKind::ShiftMax: {
          HyperFunction<T> h = make_hyper_function<T>(l.smax, rng);
          v.sm_fc1_w = ag::leaf(std::move(h.fc1_w), true);
          v.sm_fc1_b = ag::leaf(std::move(h.fc1_b), true);
          v.sm_fc2_w = ag::leaf(std::move(h.fc2_w), true);
          v.sm_fc2_b = ag::leaf(std::move(h.fc2_b), true);
          break;
        }
        case PrimKind::FullyConnected: {
          Tensor<T> w(l.fc_out, l.fc_in, 1, 1);
          w.fill_normal(rng, 0.0, std::sqrt(2.0 / l.fc_in));
          v.w = ag::leaf(std::move(w), true);
          v.b = ag::leaf(Tensor<T>(1, l.fc_out, 1, 1), true);
          break;
        }
        default:
          break;
      }
    }
  }

  /// Forward to logits / heatmaps. When `outputs` is given it receives every
  /// plan layer's node, index-aligned with plan.layers (useful for taps).
  ag::NodePtr<T> forward(const Tensor<T>& input, const ag::ExecContext& ctx,
                         std::vector<ag::NodePtr<T>>* outputs = nullptr) {
    return forward(ag::leaf(input, false), ctx, outputs);
  }

  ag::NodePtr<T> forward(ag::NodePtr<T> x, const ag::ExecContext& ctx,
                         std::vector<ag::NodePtr<T>>* outputs = nullptr) {
    if (x->value.c() != plan.input_shape.c) {
      throw DimensionError("network expects " +
                           std::to_string(plan.input_shape.c) +
                           " input channels, got " + x->value.shape().str());
    }
    std::vector<ag::NodePtr<T>> outs(plan.layers.size());
    ag::NodePtr<T> input_node = x;
    ag::NodePtr<T> cur = x;
    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
      const PrimLayer& l = plan.layers[i];
      LayerVars& v = vars[i];
      switch (l.kind) {
        case PrimKind::Conv:
          cur = ag::conv2d(cur, v.w, l.conv, ctx);
          if (v.b) cur = ag::bias_channels(cur, v.b);
          break;
        case PrimKind::BatchNorm:
          cur = ag::batch_norm(cur, v.gamma, v.beta, v.running_mean,
                               v.running_var, ctx);
          break;
        case PrimKind::ReLU:
          cur = ag::relu(cur);
          break;
        case PrimKind::ShiftMax:
          cur = dynamic_shift_max_graph(cur, v.sm_fc1_w, v.sm_fc1_b,
                                        v.sm_fc2_w, v.sm_fc2_b, l.smax, ctx);
          break;
        case PrimKind::Shuffle:
          cur = ag::channel_gather(cur, l.perm);
          break;
        case PrimKind::GlobalPool:
          cur = ag::global_avg_pool(cur);
          break;
        case PrimKind::FullyConnected:
          cur = ag::fully_connected(cur, v.w, v.b, ctx);
          break;
        case PrimKind::Dropout:
          cur = ag::dropout(cur, l.drop_p, ctx);
          break;
        case PrimKind::Upsample:
          cur = ag::upsample2x(cur);
          break;
        case PrimKind::SkipAdd:
          cur = ag::add(cur, l.skip_src < 0 ? input_node : outs[l.skip_src]);
          break;
        case PrimKind::AttentionPassthrough:
          break;  // identity
      }
      outs[i] = cur;
    }
    if (outputs) *outputs = std::move(outs);
    return cur;
  }

  /// Trainable parameters in deterministic plan order.
  std::vector<Param<T>> params() {
    std::vector<Param<T>> out;
    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
      const std::string& n = plan.layers[i].name;
      LayerVars& v = vars[i];
      if (v.w) out.push_back({n + ".w", v.w});
      if (v.b) out.push_back({n + ".b", v.b});
      if (v.gamma) out.push_back({n + ".gamma", v.gamma});
      if (v.beta) out.push_back({n + ".beta", v.beta});
      if (v.sm_fc1_w) {
        out.push_back({n + ".hyper_fc1.w", v.sm_fc1_w});
        out.push_back({n + ".hyper_fc1.b", v.sm_fc1_b});
        out.push_back({n + ".hyper_fc2.w", v.sm_fc2_w});
        out.push_back({n + ".hyper_fc2.b", v.sm_fc2_b});
      }
    }
    return out;
  }

  /// Non-trainable state (batch-norm running statistics), plan order.
  std::vector<StateRef<T>> state() {
    std::vector<StateRef<T>> out;
    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
      if (plan.layers[i].kind != PrimKind::BatchNorm) continue;
      out.push_back({plan.layers[i].name + ".running_mean",
                     &vars[i].running_mean});
      out.push_back({plan.layers[i].name + ".running_var",
                     &vars[i].running_var});
    }
    return out;
  }

  void zero_grads() {
    for (auto& p : params()) {
      if (p.node->grad.size() == p.node->value.size()) p.node->grad.fill(T(0));
    }
  }
};

}  // namespace micronet
