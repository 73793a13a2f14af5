// Command-line front end: inspect architectures, emit cost ledgers, run the
// verification suites, train toy models, and run inference with the portable
// weight-bundle format. Every command is deterministic given its flags and
// --seed; --threads 1 guarantees bit-reproducible output. Errors exit nonzero
// with a single machine-readable JSON diagnostic on stderr.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "micronet/accounting.hpp"
#include "micronet/arch.hpp"
#include "micronet/builtin_configs.hpp"
#include "micronet/bundle.hpp"
#include "micronet/image.hpp"
#include "micronet/network.hpp"
#include "micronet/train.hpp"
#include "micronet/verify.hpp"

namespace mn = micronet;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mn::ConfigError("cannot open config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// A name resolves to an embedded config; anything that exists on disk is
/// read as a config file (the override path).
mn::ArchSpec resolve_arch(const std::string& arg) {
  if (std::filesystem::is_regular_file(arg)) {
    return mn::parse_arch_config(slurp(arg));
  }
  const auto& table = mn::builtin_configs();
  const auto it = table.find(lower(arg));
  if (it == table.end()) {
    std::string known;
    for (const auto& [k, v] : table) {
      if (!known.empty()) known += ", ";
      known += k;
    }
    throw mn::ConfigError("unknown architecture '" + arg +
                          "' (no such file; built-ins: " + known + ")");
  }
  return mn::parse_arch_config(it->second);
}

std::pair<int, int> parse_hw(const std::string& v) {
  const auto x = v.find('x');
  if (x == std::string::npos) {
    throw mn::ConfigError("expected HxW, got '" + v + "'");
  }
  try {
    return {std::stoi(v.substr(0, x)), std::stoi(v.substr(x + 1))};
  } catch (const std::exception&) {
    throw mn::ConfigError("expected HxW, got '" + v + "'");
  }
}

int default_threads() {
  if (const char* env = std::getenv("MICRONET_THREADS")) {
    try {
      const int t = std::stoi(env);
      if (t >= 1) return t;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

mn::CostReport count_plan(const mn::ArchSpec& arch, int h, int w,
                          bool full_rank) {
  mn::CostReport r;
  r.arch_name = arch.name;
  const mn::LayerPlan plan = mn::build_plan(arch, h, w, 1, full_rank);
  r.input_shape = plan.input_shape;
  for (const auto& l : plan.layers) r.entries.push_back(mn::count_layer(l));
  return r;
}

// ---------------------------------------------------------------------------
// build: per-stage summary table
// ---------------------------------------------------------------------------

struct StageRow {
  std::string stage;
  std::string spec;
  mn::Shape4 out{0, 0, 0, 0};
  std::uint64_t madds = 0;
  std::uint64_t params = 0;
};

std::vector<StageRow> stage_rows(const mn::ArchSpec& arch,
                                 const mn::CostReport& rep) {
  auto sum_prefix = [&](const std::string& stage, StageRow& row) {
    for (const auto& e : rep.entries) {
      if (e.name == stage ||
          (e.name.size() > stage.size() && e.name[stage.size()] == '.' &&
           e.name.compare(0, stage.size(), stage) == 0)) {
        row.madds += e.madds;
        row.params += e.params;
        row.out = e.out_shape;
      }
    }
  };
  auto sum_exact = [&](const std::string& name, StageRow& row) {
    for (const auto& e : rep.entries) {
      if (e.name == name) {
        row.madds += e.madds;
        row.params += e.params;
        row.out = e.out_shape;
      }
    }
  };
  std::vector<StageRow> rows;
  int block_no = 0, up_no = 0;
  for (const auto& r : arch.rows) {
    if (r.kind == mn::RowKind::Classifier) {
      StageRow pool{"classifier.pool", "global average pool"};
      sum_exact("classifier.pool", pool);
      rows.push_back(pool);
      StageRow fc1{"classifier.fc1", "fc + relu + dropout"};
      sum_exact("classifier.fc1", fc1);
      sum_exact("classifier.dropout", fc1);
      rows.push_back(fc1);
      StageRow fc2{"classifier.fc2", "fc"};
      sum_exact("classifier.fc2", fc2);
      rows.push_back(fc2);
      continue;
    }
    StageRow row;
    row.spec = r.str();
    switch (r.kind) {
      case mn::RowKind::Stem:
        row.stage = "stem";
        break;
      case mn::RowKind::Upsample:
        row.stage = "up" + std::to_string(++up_no);
        break;
      case mn::RowKind::Heatmap:
        row.stage = "head";
        break;
      default:
        row.stage = "blk" + std::to_string(++block_no);
        break;
    }
    sum_prefix(row.stage, row);
    rows.push_back(row);
  }
  return rows;
}

int cmd_build(const std::string& arch_arg, const std::string& config_path,
              bool full_rank, bool json_out) {
  const mn::ArchSpec arch = config_path.empty()
                                ? resolve_arch(arch_arg)
                                : mn::parse_arch_config(slurp(config_path));
  const mn::CostReport rep =
      count_plan(arch, arch.input_h, arch.input_w, full_rank);
  const std::vector<StageRow> rows = stage_rows(arch, rep);
  if (json_out) {
    nlohmann::json j;
    j["arch"] = arch.name;
    j["input"] = std::to_string(arch.input_h) + "x" +
                 std::to_string(arch.input_w);
    j["full_rank"] = full_rank;
    j["stages"] = nlohmann::json::array();
    for (const auto& r : rows) {
      j["stages"].push_back({{"stage", r.stage},
                             {"spec", r.spec},
                             {"output", {r.out.c, r.out.h, r.out.w}},
                             {"madds", r.madds},
                             {"params", r.params}});
    }
    j["total_madds"] = rep.total_madds();
    j["total_params"] = rep.total_params();
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  std::cout << "arch " << arch.name << "  input " << arch.input_h << "x"
            << arch.input_w << (full_rank ? "  [full-rank twin]" : "") << "\n";
  std::cout << std::left << std::setw(18) << "stage" << std::setw(44) << "spec"
            << std::setw(16) << "output" << std::right << std::setw(12)
            << "MAdds" << std::setw(12) << "params" << "\n";
  for (const auto& r : rows) {
    const std::string out = "(" + std::to_string(r.out.c) + "," +
                            std::to_string(r.out.h) + "," +
                            std::to_string(r.out.w) + ")";
    std::cout << std::left << std::setw(18) << r.stage << std::setw(44)
              << r.spec << std::setw(16) << out << std::right << std::setw(12)
              << r.madds << std::setw(12) << r.params << "\n";
  }
  std::cout << "total MAdds " << rep.total_madds() << ", params "
            << rep.total_params() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

int cmd_flops(const std::string& arch_arg, const std::string& input_hw,
              const std::string& exclude, bool check, bool json_out) {
  const mn::ArchSpec arch = resolve_arch(arch_arg);
  int h = arch.input_h, w = arch.input_w;
  if (!input_hw.empty()) std::tie(h, w) = parse_hw(input_hw);
  const bool include_classifier = exclude != "classifier";
  const mn::CostReport rep = mn::count_model(arch, h, w);
  mn::BudgetCheck bc;
  if (check) {
    bc = mn::check_budget(arch.name, rep, 0.20);
    if (!bc.known) {
      throw mn::ConfigError("no published budget for '" + arch.name +
                            "'; --check needs one of the shipped tables");
    }
  }
  if (json_out) {
    nlohmann::json j = mn::cost_report_json(rep, include_classifier);
    if (check) {
      j["budget"] = {{"madds", bc.budget_madds},
                     {"params", bc.budget_params},
                     {"madds_ratio", bc.madds_ratio},
                     {"params_ratio", bc.params_ratio},
                     {"tolerance", 0.20},
                     {"pass", bc.pass}};
    }
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << mn::render_cost_table(rep, include_classifier);
    if (check) {
      std::cout << "budget " << (bc.pass ? "PASS" : "FAIL") << ": MAdds "
                << rep.total_madds() << " / " << bc.budget_madds << " (ratio "
                << std::fixed << std::setprecision(3) << bc.madds_ratio
                << "), params " << rep.total_params() << " / "
                << bc.budget_params << " (ratio " << bc.params_ratio
                << "), tolerance +/-0.20\n";
    }
  }
  return (check && !bc.pass) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

int cmd_verify(const std::string& suite) {
  std::vector<mn::VerifyReport> reports;
  if (suite == "all") {
    reports = mn::verify_all();
  } else if (suite == "rank") {
    reports = {mn::verify_rank()};
  } else if (suite == "oracle") {
    reports = {mn::verify_oracle()};
  } else if (suite == "grad") {
    reports = {mn::verify_grad()};
  } else if (suite == "shiftmax") {
    reports = {mn::verify_shiftmax()};
  } else {
    throw mn::ConfigError("unknown suite '" + suite +
                          "' (rank, oracle, grad, shiftmax, all)");
  }
  bool all_pass = true;
  for (const auto& rep : reports) {
    for (const auto& c : rep.checks) {
      std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << rep.suite << ": "
                << c.name;
      if (!c.detail.empty()) std::cout << " — " << c.detail;
      std::cout << "\n";
    }
    std::cout << "suite " << rep.suite << ": " << rep.passed() << "/"
              << rep.checks.size() << " properties passed\n";
    all_pass = all_pass && rep.pass();
  }
  return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& arch_arg, const std::string& data_dir,
              bool synthetic, int per_class, const std::string& out_path,
              const std::string& log_path, mn::TrainConfig cfg, bool mutual) {
  const mn::ArchSpec arch = resolve_arch(arch_arg);
  if (arch.is_keypoint()) {
    throw mn::ConfigError(
        "toy training targets classification architectures; '" + arch.name +
        "' ends in a heatmap head");
  }
  if (synthetic == !data_dir.empty()) {
    throw mn::ConfigError("pass a dataset directory or --synthetic, not both");
  }
  const mn::Dataset ds =
      synthetic ? mn::make_synthetic_blobs(arch.num_classes, per_class,
                                           arch.input_c, arch.input_h,
                                           arch.input_w, cfg.seed)
                : mn::load_image_directory(data_dir, arch.input_c,
                                           arch.input_h, arch.input_w);
  mn::Network<float> net(arch, cfg.seed);
  std::unique_ptr<mn::Network<float>> partner;
  if (mutual) {
    partner = std::make_unique<mn::Network<float>>(arch, cfg.seed + 1000,
                                                   /*full_rank_twin=*/true);
  }
  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) {
      throw mn::ConfigError("cannot open metric log '" + log_path + "'");
    }
    log = &log_file;
  }
  const mn::TrainResult result =
      mn::train_toy(net, ds, cfg, log, partner.get());
  mn::save_bundle(out_path, mn::bundle_from_network(net));
  std::cout << "trained " << arch.name << " on " << ds.size() << " images ("
            << ds.num_classes << " classes): final train accuracy "
            << std::fixed << std::setprecision(4)
            << result.final_train_accuracy << ", eval CE "
            << std::setprecision(6) << result.final_student_ce << "\n";
  std::cout << "bundle written to " << out_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

int cmd_infer(const std::string& bundle_path, const std::string& image_path,
              int topk, const std::string& heatmap_out, int threads,
              bool json_out) {
  const mn::WeightBundle bundle = mn::load_bundle(bundle_path);
  mn::Network<float> net = mn::network_from_bundle(bundle);
  mn::Tensor<float> img =
      mn::adapt_channels(mn::read_pnm(image_path), net.arch.input_c);
  if (img.h() != net.arch.input_h || img.w() != net.arch.input_w) {
    std::cerr << "warning: image is " << img.h() << "x" << img.w()
              << ", resizing to " << net.arch.input_h << "x"
              << net.arch.input_w << "\n";
    img = mn::nearest_resize(img, net.arch.input_h, net.arch.input_w);
  }
  mn::ag::ExecContext ctx;
  ctx.threads = threads;
  const auto out = net.forward(img, ctx);
  if (net.arch.is_keypoint()) {
    mn::write_npy(heatmap_out, out->value);
    const mn::Shape4 s = out->value.shape();
    std::cout << "heatmaps (" << s.c << "," << s.h << "," << s.w
              << ") written to " << heatmap_out << "\n";
    return 0;
  }
  const mn::Tensor<float> probs = mn::softmax_forward(out->value);
  const int k_count = std::min(topk, probs.c());
  std::vector<int> idx(probs.c());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return probs.at(0, a, 0, 0) > probs.at(0, b, 0, 0);
  });
  if (json_out) {
    nlohmann::json j;
    j["arch"] = net.arch.name;
    j["topk"] = nlohmann::json::array();
    for (int i = 0; i < k_count; ++i) {
      j["topk"].push_back({{"class", idx[i]},
                           {"prob", probs.at(0, idx[i], 0, 0)}});
    }
    std::cout << j.dump(2) << "\n";
  } else {
    for (int i = 0; i < k_count; ++i) {
      std::cout << "class " << idx[i] << "  p=" << std::fixed
                << std::setprecision(6) << probs.at(0, idx[i], 0, 0) << "\n";
    }
  }
  return 0;
}

nlohmann::json error_json(const std::string& kind, const std::string& what) {
  return nlohmann::json{{"error", kind}, {"message", what}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"micronet: low-cost factorized network toolkit"};
  app.require_subcommand(1);

  // build
  auto* build = app.add_subcommand("build", "print a per-stage summary");
  std::string build_arch, build_config;
  bool build_full_rank = false, build_json = false;
  build->add_option("arch", build_arch, "built-in name or config path");
  build->add_option("--config", build_config, "explicit config file path");
  build->add_flag("--full-rank", build_full_rank, "show the dense twin");
  build->add_flag("--json", build_json, "machine-readable output");

  // flops
  auto* flops = app.add_subcommand("flops", "analytic cost ledger");
  std::string flops_arch, flops_input, flops_exclude;
  bool flops_check = false, flops_json = false;
  flops->add_option("arch", flops_arch)->required();
  flops->add_option("--input", flops_input, "override input HxW");
  flops->add_option("--exclude", flops_exclude, "drop a stage from totals")
      ->check(CLI::IsMember({"classifier"}));
  flops->add_flag("--check", flops_check,
                  "compare against the published budget (+/-20%)");
  flops->add_flag("--json", flops_json);

  // verify
  auto* verify = app.add_subcommand("verify", "run a property suite");
  std::string verify_suite;
  verify->add_option("suite", verify_suite)
      ->required()
      ->check(CLI::IsMember({"rank", "oracle", "grad", "shiftmax", "all"}));

  // train
  auto* train = app.add_subcommand("train", "toy-scale training");
  std::string train_arch, train_data, train_out = "model.mnwb", train_log;
  bool train_synth = false, train_mutual = false, train_symmetric = false;
  int train_per_class = 20;
  mn::TrainConfig tc;
  train->add_option("arch", train_arch)->required();
  train->add_option("data", train_data, "dataset dir: root/<class>/<image>");
  train->add_flag("--synthetic", train_synth, "built-in synthetic blob set");
  train->add_option("--per-class", train_per_class,
                    "synthetic images per class");
  train->add_option("--out", train_out, "weight bundle path");
  train->add_option("--log", train_log, "metric log path (JSON lines)");
  train->add_option("--epochs", tc.epochs);
  train->add_option("--batch-size", tc.batch_size);
  train->add_option("--lr", tc.lr0);
  train->add_option("--momentum", tc.momentum);
  train->add_option("--weight-decay", tc.weight_decay);
  train->add_option("--label-smoothing", tc.label_smoothing);
  train->add_flag("--mutual", train_mutual,
                  "co-train a full-rank partner (mutual learning)");
  train->add_flag("--mutual-symmetric", train_symmetric,
                  "partner also distills from the student");
  train->add_option("--beta", tc.mutual_beta, "weight of the KL term");

  // infer
  auto* infer = app.add_subcommand("infer", "run a bundle on an image");
  std::string infer_bundle, infer_image, infer_heatmap = "heatmaps.npy";
  int infer_topk = 5;
  bool infer_json = false;
  infer->add_option("bundle", infer_bundle)->required();
  infer->add_option("image", infer_image, "PPM/PGM image")->required();
  infer->add_option("--topk", infer_topk, "classes to print");
  infer->add_option("--heatmap-out", infer_heatmap,
                    "output path for keypoint heatmaps (.npy)");
  infer->add_flag("--json", infer_json);

  std::uint64_t seed = 1;
  int threads = default_threads();
  for (auto* sub : {build, flops, verify, train, infer}) {
    sub->add_option("--seed", seed, "RNG seed");
    sub->add_option("--threads", threads, "worker threads (1 = bit-exact)");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (*build) {
      if (build_arch.empty() && build_config.empty()) {
        throw mn::ConfigError("build wants an arch name or --config path");
      }
      return cmd_build(build_arch, build_config, build_full_rank, build_json);
    }
    if (*flops) {
      return cmd_flops(flops_arch, flops_input, flops_exclude, flops_check,
                       flops_json);
    }
    if (*verify) return cmd_verify(verify_suite);
    if (*train) {
      tc.seed = seed;
      tc.threads = threads;
      tc.mutual_symmetric = train_symmetric;
      tc.validate();
      return cmd_train(train_arch, train_data, train_synth, train_per_class,
                       train_out, train_log, tc, train_mutual);
    }
    if (*infer) {
      return cmd_infer(infer_bundle, infer_image, infer_topk, infer_heatmap,
                       threads, infer_json);
    }
  } catch (const mn::ConfigError& e) {
    std::cerr << error_json("ConfigError", e.what()).dump() << "\n";
    return 1;
  } catch (const mn::DimensionError& e) {
    std::cerr << error_json("DimensionError", e.what()).dump() << "\n";
    return 1;
  } catch (const mn::FormatError& e) {
    std::cerr << error_json("FormatError", e.what()).dump() << "\n";
    return 1;
  } catch (const mn::NumericError& e) {
    std::cerr << error_json("NumericError", e.what()).dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << error_json("Error", e.what()).dump() << "\n";
    return 1;
  }
  return 0;
}
