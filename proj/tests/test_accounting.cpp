// Analytic cost ledger: per-layer formulas, ledger additivity, agreement
// with the instrumented kernels, and the published budget footers.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "micronet/accounting.hpp"
#include "micronet/builtin_configs.hpp"
#include "micronet/network.hpp"

using namespace micronet;

namespace {

ArchSpec builtin_arch(const std::string& key) {
  return parse_arch_config(builtin_configs().at(key));
}

const CostEntry& entry(const CostReport& r, const std::string& name) {
  for (const auto& e : r.entries) {
    if (e.name == name) return e;
  }
  REQUIRE_MESSAGE(false, "missing ledger entry: " << name);
  static CostEntry dummy;
  return dummy;
}

}  // namespace

// ---------------------------------------------------------------------------
// Per-layer formulas
// ---------------------------------------------------------------------------

TEST_CASE("a dense pointwise conv costs C squared per position") {
  PrimLayer l;
  l.kind = PrimKind::Conv;
  l.name = "pw";
  l.in_shape = {1, 24, 1, 1};
  l.conv.out_channels = 24;
  l.out_shape = conv2d_out_shape(l.in_shape, l.conv);
  CHECK(count_layer(l).madds == 24u * 24);
  CHECK(count_layer(l).params == 24u * 24);
}

TEST_CASE("conv entries follow Ho*Wo*kh*kw*(Cin/g)*Cout") {
  PrimLayer l;
  l.kind = PrimKind::Conv;
  l.name = "dw-ish";
  l.in_shape = {1, 24, 56, 56};
  l.conv.out_channels = 96;
  l.conv.groups = 4;
  l.conv.kernel_h = l.conv.kernel_w = 5;
  l.conv.stride_h = l.conv.stride_w = 2;
  l.conv.pad_h = l.conv.pad_w = 2;
  l.out_shape = conv2d_out_shape(l.in_shape, l.conv);
  REQUIRE(l.out_shape == Shape4{1, 96, 28, 28});
  const CostEntry e = count_layer(l);
  CHECK(e.madds == 28ull * 28 * 5 * 5 * (24 / 4) * 96);  // 11,289,600
  CHECK(e.madds == 11289600u);
  CHECK(e.conv_fc_madds == e.madds);
  CHECK(e.params == 5ull * 5 * (24 / 4) * 96);
}

TEST_CASE("norm, shuffle, skip, and upsample layers are free") {
  for (PrimKind k : {PrimKind::BatchNorm, PrimKind::Shuffle, PrimKind::ReLU,
                     PrimKind::Dropout, PrimKind::Upsample, PrimKind::SkipAdd,
                     PrimKind::AttentionPassthrough}) {
    PrimLayer l;
    l.kind = k;
    l.in_shape = l.out_shape = {1, 32, 14, 14};
    const CostEntry e = count_layer(l);
    CHECK(e.madds == 0u);
    CHECK(e.conv_fc_madds == 0u);
    if (k == PrimKind::BatchNorm) {
      CHECK(e.params == 64u);  // gamma and beta
    } else {
      CHECK(e.params == 0u);
    }
    if (k == PrimKind::AttentionPassthrough) CHECK(e.attention_passthrough);
  }
}

TEST_CASE("global pooling is attributed as additions only") {
  PrimLayer l;
  l.kind = PrimKind::GlobalPool;
  l.in_shape = {1, 576, 7, 7};
  l.out_shape = {1, 576, 1, 1};
  const CostEntry e = count_layer(l);
  CHECK(e.madds == 576u * 49);
  CHECK(e.adds_only == e.madds);
  CHECK(e.conv_fc_madds == 0u);
}

TEST_CASE("shift-max entries reproduce the activation cost model exactly") {
  PrimLayer l;
  l.kind = PrimKind::ShiftMax;
  l.in_shape = l.out_shape = {1, 64, 14, 14};
  l.smax.channels = 64;
  l.smax.groups = 4;
  l.smax.j_terms = 2;
  l.smax.k_branches = 2;
  l.smax.hidden = 16;
  l.smax.theta = ShiftMaxConfig::default_theta(2, 2);
  const CostEntry e = count_layer(l);
  const ShiftMaxCost c = shift_max_cost_parts(l.smax, 14, 14);
  CHECK(e.madds == c.total());
  CHECK(e.madds == 67840u);
  CHECK(e.adds_only == c.pool_adds);
  CHECK(e.conv_fc_madds == c.gen_madds);
  CHECK(e.params == 64u * 16 + 16 + 16u * 256 + 256);
}

// ---------------------------------------------------------------------------
// Ledger structure
// ---------------------------------------------------------------------------

TEST_CASE("totals are the plain sum of entries, in any order") {
  CostReport r = count_model(builtin_arch("m1"));
  std::uint64_t madds = 0, params = 0, convfc = 0, adds = 0;
  for (const auto& e : r.entries) {
    madds += e.madds;
    params += e.params;
    convfc += e.conv_fc_madds;
    adds += e.adds_only;
    CHECK(e.adds_only <= e.madds);
    CHECK(e.conv_fc_madds <= e.madds);
  }
  CHECK(r.total_madds() == madds);
  CHECK(r.total_params() == params);
  CHECK(r.conv_fc_madds() == convfc);
  CHECK(r.adds_only_madds() == adds);

  CostReport shuffled = r;
  std::mt19937 gen(123);
  std::shuffle(shuffled.entries.begin(), shuffled.entries.end(), gen);
  CHECK(shuffled.total_madds() == r.total_madds());
  CHECK(shuffled.total_params() == r.total_params());
  CHECK(shuffled.conv_fc_madds() == r.conv_fc_madds());
}

TEST_CASE("the stem pair lands on its analytic cost") {
  CostReport r = count_model(builtin_arch("m3"));
  const std::uint64_t stem =
      entry(r, "stem.conv_kx1").madds + entry(r, "stem.conv_1xk").madds;
  CHECK(stem == 1505280u);
}

TEST_CASE("square factored pointwise stages cost 2C^2/(RG) per position") {
  // Block 10 of the largest backbone: 576 -> 144 -> 576 with G1 = G2 = 12,
  // so R = 4 and the squeeze+expand pair costs 2*576^2/(4*12) = 13824.
  CostReport r = count_model(builtin_arch("m3"));
  const CostEntry& sq = entry(r, "blk10.squeeze");
  const CostEntry& ex = entry(r, "blk10.expand");
  const std::uint64_t hw =
      static_cast<std::uint64_t>(sq.out_shape.h) * sq.out_shape.w;
  CHECK(sq.madds + ex.madds == 2ull * 576 * 576 / (4 * 12) * hw);
  CHECK(sq.madds == ex.madds);  // balanced split at G1 == G2
}

TEST_CASE("classifier layers are flagged and excludable") {
  CostReport r = count_model(builtin_arch("m1"));
  const CostEntry& fc1 = entry(r, "classifier.fc1");
  const CostEntry& fc2 = entry(r, "classifier.fc2");
  CHECK(fc1.classifier_part);
  CHECK(fc2.classifier_part);
  CHECK(fc1.params == 768ull * 1024 + 1024);
  CHECK(fc2.params == 1024ull * 1000 + 1000);
  CHECK(r.total_params() - r.total_params(false) ==
        fc1.params + fc2.params);
  CHECK(r.total_madds() - r.total_madds(false) ==
        entry(r, "classifier.pool").madds + fc1.madds + fc2.madds);
}

TEST_CASE("keypoint reports carry a zero-cost attention placeholder") {
  CostReport r = count_model(builtin_arch("m3-kp"));
  const CostEntry& att = entry(r, "head.attention_passthrough");
  CHECK(att.attention_passthrough);
  CHECK(att.madds == 0u);
  CHECK(att.params == 0u);
  const CostEntry& hm = entry(r, "head.heatmap");
  CHECK(hm.params % 17 == 0);  // weight block plus bias, both per-heatmap
}

// ---------------------------------------------------------------------------
// Agreement with the instrumented kernels
// ---------------------------------------------------------------------------

TEST_CASE("the runtime probe reproduces the conv+fc subtotal exactly") {
  ArchSpec a = builtin_arch("m1");
  CostReport report = count_model(a);
  Network<float> net(a, 5);

  Rng rng(17);
  Tensor<float> x1(1, 3, 224, 224), x2(1, 3, 224, 224);
  x1.fill_normal(rng, 0.0, 1.0);
  x2.fill_normal(rng, 0.0, 2.0);

  MaddsProbe p1;
  ag::ExecContext ctx;
  ctx.probe = &p1;
  net.forward(x1, ctx);
  CHECK(p1.total() == report.conv_fc_madds());

  MaddsProbe p2;
  ctx.probe = &p2;
  net.forward(x2, ctx);  // cost is input-independent
  CHECK(p2.conv == p1.conv);
  CHECK(p2.fc == p1.fc);
}

TEST_CASE("reports are computed from shapes alone, without a network") {
  // Counting twice, and at an explicit input size, is pure and stable.
  ArchSpec a = builtin_arch("m0-kp");
  CostReport r1 = count_model(a);
  CostReport r2 = count_model(a, a.input_h, a.input_w);
  CHECK(r1.total_madds() == r2.total_madds());
  CHECK(r1.total_params() == r2.total_params());
  CHECK(r1.entries.size() == r2.entries.size());
}

// ---------------------------------------------------------------------------
// Published budgets
// ---------------------------------------------------------------------------

TEST_CASE("all eight published footers are matched within twenty percent") {
  const std::vector<std::pair<std::string, std::string>> models = {
      {"m0", "M0"},       {"m1", "M1"},       {"m2", "M2"},
      {"m3", "M3"},       {"m0-kp", "M0-kp"}, {"m1-kp", "M1-kp"},
      {"m2-kp", "M2-kp"}, {"m3-kp", "M3-kp"},
  };
  for (const auto& [key, name] : models) {
    CAPTURE(name);
    CostReport r = count_model(builtin_arch(key));
    CHECK(r.arch_name == name);
    const BudgetCheck c = check_budget(name, r);
    CHECK(c.known);
    CHECK(c.pass);
    CHECK(c.madds_ratio > 0.8);
    CHECK(c.madds_ratio < 1.2);
    CHECK(c.params_ratio > 0.8);
    CHECK(c.params_ratio < 1.2);
  }
}

TEST_CASE("model totals are frozen against accidental drift") {
  const std::vector<std::tuple<std::string, std::uint64_t, std::uint64_t>>
      frozen = {
          {"m0", 6870496u, 1893801u},      {"m1", 14058400u, 2454234u},
          {"m2", 24372784u, 3384301u},     {"m3", 49326672u, 4642415u},
          {"m0-kp", 81418480u, 913445u},   {"m1-kp", 128212672u, 1703427u},
          {"m2-kp", 177668016u, 2582308u}, {"m3-kp", 262048368u, 3802842u},
      };
  for (const auto& [key, madds, params] : frozen) {
    CAPTURE(key);
    CostReport r = count_model(builtin_arch(key));
    CHECK(r.total_madds() == madds);
    CHECK(r.total_params() == params);
  }
}

TEST_CASE("unknown model names are reported as unknown, not failed") {
  CostReport r = count_model(builtin_arch("m0-narrow"));
  const BudgetCheck c = check_budget("M0-narrow", r);
  CHECK(!c.known);
  CHECK(!c.pass);
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

TEST_CASE("the table and JSON renderings carry the ledger content") {
  CostReport r = count_model(builtin_arch("m0"));
  const std::string table = render_cost_table(r);
  CHECK(table.find("stem.conv_kx1") != std::string::npos);
  CHECK(table.find("total MAdds 6870496") != std::string::npos);
  CHECK(table.find("adds-only") != std::string::npos);

  const nlohmann::json j = cost_report_json(r);
  CHECK(j["arch"] == "M0");
  CHECK(j["total_madds"].get<std::uint64_t>() == r.total_madds());
  CHECK(j["layers"].size() == r.entries.size());
  std::uint64_t sum = 0;
  for (const auto& [name, layer] : j["layers"].items()) {
    sum += layer["madds"].get<std::uint64_t>();
  }
  CHECK(sum == r.total_madds());  // additivity as exposed to the CLI

  const nlohmann::json no_cls = cost_report_json(r, false);
  CHECK(no_cls["total_madds"].get<std::uint64_t>() == r.total_madds(false));
  CHECK(no_cls["layers"].size() < j["layers"].size());
}
