#pragma once

// Analytic multiply-accumulate and parameter accounting over a layer plan.
// Conventions (MobileNet lineage): one MAdd = one multiply + one add, so a
// conv costs H_out*W_out*k_h*k_w*(C_in/groups)*C_out and an FC costs
// C_in*C_out. Norms, activations-by-table (ReLU), shuffles, upsampling, and
// skip-adds cost 0; pooling is counted as H*W*C and flagged as additions-only
// so the convention stays auditable. Shift-max layers cost pool + generator
// + application exactly as shift_max_cost computes. Counts use batch 1.

#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "micronet/arch.hpp"
#include "micronet/common.hpp"
#include "micronet/probe.hpp"
#include "micronet/shift_max.hpp"

namespace micronet {

struct CostEntry {
  std::string name;
  std::string kind;
  Shape4 out_shape{0, 0, 0, 0};
  std::uint64_t madds = 0;         // total cost attributed to the layer
  std::uint64_t adds_only = 0;     // subset of madds that are pure additions
  std::uint64_t conv_fc_madds = 0; // subset the instrumented kernels count
  std::uint64_t params = 0;
  bool classifier_part = false;
  bool attention_passthrough = false;
};

inline const char* prim_kind_name(PrimKind k) {
  switch (k) {
    case PrimKind::Conv: return "conv";
    case PrimKind::BatchNorm: return "batchnorm";
    case PrimKind::ReLU: return "relu";
    case PrimKind::ShiftMax: return "shift-max";
    case PrimKind::Shuffle: return "shuffle";
    case PrimKind::GlobalPool: return "avgpool";
    case PrimKind::FullyConnected: return "fc";
    case PrimKind::Dropout: return "dropout";
    case PrimKind::Upsample: return "upsample";
    case PrimKind::SkipAdd: return "skip-add";
    case PrimKind::AttentionPassthrough: return "attention(excluded)";
  }
  return "?";
}

inline CostEntry count_layer(const PrimLayer& l) {
  CostEntry e;
  e.name = l.name;
  e.kind = prim_kind_name(l.kind);
  e.out_shape = l.out_shape;
  e.classifier_part = l.classifier_part;
  switch (l.kind) {
    case PrimKind::Conv: {
      e.madds = conv2d_madds(l.in_shape, l.conv);
      e.conv_fc_madds = e.madds;
      e.params = conv2d_param_count(l.in_shape, l.conv) +
                 (l.conv_bias ? l.conv.out_channels : 0);
      break;
    }
    case PrimKind::BatchNorm:
      e.params = 2ull * l.in_shape.c;
      break;
    case PrimKind::ShiftMax: {
      const ShiftMaxCost c =
          shift_max_cost_parts(l.smax, l.in_shape.h, l.in_shape.w);
      e.madds = c.total();
      e.adds_only = c.pool_adds;
      e.conv_fc_madds = c.gen_madds;
      const std::uint64_t cjk = l.smax.coeff_channels();
      e.params = static_cast<std::uint64_t>(l.smax.channels) * l.smax.hidden +
                 l.smax.hidden + static_cast<std::uint64_t>(l.smax.hidden) * cjk +
                 cjk;
      break;
    }
    case PrimKind::GlobalPool:
      e.madds = static_cast<std::uint64_t>(l.in_shape.c) * l.in_shape.h *
                l.in_shape.w;
      e.adds_only = e.madds;
      break;
    case PrimKind::FullyConnected:
      e.madds = static_cast<std::uint64_t>(l.fc_in) * l.fc_out;
      e.conv_fc_madds = e.madds;
      e.params = static_cast<std::uint64_t>(l.fc_in) * l.fc_out + l.fc_out;
      break;
    case PrimKind::AttentionPassthrough:
      e.attention_passthrough = true;
      break;
    default:
      break;  // relu / shuffle / dropout / upsample / skip: zero cost
  }
  return e;
}

struct CostReport {
  std::string arch_name;
  Shape4 input_shape{0, 0, 0, 0};
  std::vector<CostEntry> entries;

  std::uint64_t total_madds(bool include_classifier = true) const {
    std::uint64_t s = 0;
    for (const auto& e : entries) {
      if (!include_classifier && e.classifier_part) continue;
      s += e.madds;
    }
    return s;
  }
  std::uint64_t total_params(bool include_classifier = true) const {
    std::uint64_t s = 0;
    for (const auto& e : entries) {
      if (!include_classifier && e.classifier_part) continue;
      s += e.params;
    }
    return s;
  }
  std::uint64_t conv_fc_madds() const {
    std::uint64_t s = 0;
    for (const auto& e : entries) s += e.conv_fc_madds;
    return s;
  }
  std::uint64_t adds_only_madds() const {
    std::uint64_t s = 0;
    for (const auto& e : entries) s += e.adds_only;
    return s;
  }
};

inline CostReport count_model(const ArchSpec& arch, int input_h, int input_w) {
  CostReport r;
  r.arch_name = arch.name;
  const LayerPlan plan = build_plan(arch, input_h, input_w, 1);
  r.input_shape = plan.input_shape;
  r.entries.reserve(plan.layers.size());
  for (const auto& l : plan.layers) r.entries.push_back(count_layer(l));
  return r;
}

inline CostReport count_model(const ArchSpec& arch) {
  return count_model(arch, arch.input_h, arch.input_w);
}

// ---------------------------------------------------------------------------
// Published budget footers
// ---------------------------------------------------------------------------

struct Budget {
  double madds = 0;
  double params = 0;
};

inline const std::map<std::string, Budget>& published_budgets() {
  static const std::map<std::string, Budget> table = {
      {"M0", {6.0e6, 1.8e6}},        {"M1", {12.0e6, 2.4e6}},
      {"M2", {21.0e6, 3.3e6}},       {"M3", {44.0e6, 4.5e6}},
      {"M0-kp", {77.7e6, 1.0e6}},    {"M1-kp", {116.8e6, 1.8e6}},
      {"M2-kp", {163.2e6, 2.2e6}},   {"M3-kp", {263.2e6, 4.0e6}},
  };
  return table;
}

struct BudgetCheck {
  bool known = false;
  bool pass = false;
  double budget_madds = 0, budget_params = 0;
  double madds_ratio = 0, params_ratio = 0;  // measured / budget
};

/// Compares full-model totals against the published footer within +/- tol.
inline BudgetCheck check_budget(const std::string& name, const CostReport& r,
                                double tol = 0.20) {
  BudgetCheck c;
  const auto it = published_budgets().find(name);
  if (it == published_budgets().end()) return c;
  c.known = true;
  c.budget_madds = it->second.madds;
  c.budget_params = it->second.params;
  c.madds_ratio = static_cast<double>(r.total_madds()) / c.budget_madds;
  c.params_ratio = static_cast<double>(r.total_params()) / c.budget_params;
  c.pass = c.madds_ratio >= 1.0 - tol && c.madds_ratio <= 1.0 + tol &&
           c.params_ratio >= 1.0 - tol && c.params_ratio <= 1.0 + tol;
  return c;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

inline std::string render_cost_table(const CostReport& r,
                                     bool include_classifier = true) {
  std::ostringstream os;
  os << "arch " << r.arch_name << "  input " << r.input_shape.str() << "\n";
  os << std::left << std::setw(28) << "layer" << std::setw(20) << "kind"
     << std::setw(18) << "output" << std::right << std::setw(14) << "MAdds"
     << std::setw(12) << "params" << "\n";
  for (const auto& e : r.entries) {
    if (!include_classifier && e.classifier_part) continue;
    std::string out = "(" + std::to_string(e.out_shape.c) + "," +
                      std::to_string(e.out_shape.h) + "," +
                      std::to_string(e.out_shape.w) + ")";
    os << std::left << std::setw(28) << e.name << std::setw(20) << e.kind
       << std::setw(18) << out << std::right << std::setw(14) << e.madds
       << std::setw(12) << e.params;
    if (e.adds_only > 0) os << "  [" << e.adds_only << " adds-only]";
    os << "\n";
  }
  os << "total MAdds " << r.total_madds(include_classifier) << " ("
     << r.adds_only_madds() << " adds-only), params "
     << r.total_params(include_classifier);
  if (!include_classifier) os << "  [classifier excluded]";
  os << "\n";
  os << "conv+fc MAdds (probe-comparable subtotal): " << r.conv_fc_madds()
     << "\n";
  return os.str();
}

inline nlohmann::json cost_report_json(const CostReport& r,
                                       bool include_classifier = true) {
  nlohmann::json j;
  j["arch"] = r.arch_name;
  j["input"] = {r.input_shape.n, r.input_shape.c, r.input_shape.h,
                r.input_shape.w};
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& e : r.entries) {
    if (!include_classifier && e.classifier_part) continue;
    layers[e.name] = {
        {"kind", e.kind},
        {"output", {e.out_shape.c, e.out_shape.h, e.out_shape.w}},
        {"madds", e.madds},
        {"adds_only", e.adds_only},
        {"conv_fc_madds", e.conv_fc_madds},
        {"params", e.params},
        {"classifier_part", e.classifier_part},
        {"attention_passthrough", e.attention_passthrough},
    };
  }
  j["layers"] = layers;
  j["total_madds"] = r.total_madds(include_classifier);
  j["total_params"] = r.total_params(include_classifier);
  j["conv_fc_madds"] = r.conv_fc_madds();
  j["adds_only_madds"] = r.adds_only_madds();
  j["classifier_included"] = include_classifier;
  return j;
}

}  // namespace micronet
