// End-to-end tests of the command-line tool, spawned as a subprocess via the
// MICRONET_CLI_PATH environment variable set by the build.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "micronet/builtin_configs.hpp"
#include "micronet/bundle.hpp"
#include "micronet/image.hpp"
#include "micronet/network.hpp"

namespace fs = std::filesystem;
using namespace micronet;
using nlohmann::json;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() /
                 ("micronet_cli_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE_MESSAGE(bool(in), "cannot read " << p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  REQUIRE(bool(out));
}

struct RunResult {
  int code = -1;
  std::string out, err;
};

RunResult run_cli(const std::string& args) {
  static int serial = 0;
  const char* cli = std::getenv("MICRONET_CLI_PATH");
#ifdef MICRONET_CLI_PATH
  if (cli == nullptr) cli = MICRONET_CLI_PATH;
#endif
  REQUIRE_MESSAGE(cli != nullptr, "MICRONET_CLI_PATH is not set");
  const fs::path out = work_dir() / ("out" + std::to_string(serial) + ".txt");
  const fs::path err = work_dir() / ("err" + std::to_string(serial) + ".txt");
  ++serial;
  const std::string cmd = std::string(cli) + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

json error_payload(const RunResult& r) {
  CAPTURE(r.err);
  return json::parse(r.err);
}

}  // namespace

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

TEST_CASE("build prints one stage row per table row plus the classifier") {
  const RunResult r = run_cli("build m1");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("arch M1") != std::string::npos);
  CHECK(r.out.find("stem") != std::string::npos);
  CHECK(r.out.find("blk8") != std::string::npos);
  CHECK(r.out.find("classifier.fc2") != std::string::npos);
  CHECK(r.out.find("total MAdds 14058400") != std::string::npos);

  const RunResult j = run_cli("build m1 --json");
  REQUIRE(j.code == 0);
  const json doc = json::parse(j.out);
  CHECK(doc["arch"] == "M1");
  // stem + 8 blocks + pool/fc1/fc2 from the classifier row.
  CHECK(doc["stages"].size() == 12);
  CHECK(doc["total_madds"].get<std::uint64_t>() == 14058400u);
  CHECK(doc["total_params"].get<std::uint64_t>() == 2454234u);
}

TEST_CASE("build resolves built-ins case-insensitively and files by path") {
  CHECK(run_cli("build M3-KP").code == 0);
  const fs::path cfg = work_dir() / "custom.cfg";
  spit(cfg, builtin_configs().at("m0-narrow"));
  const RunResult by_path = run_cli("build " + cfg.string());
  CHECK(by_path.code == 0);
  CHECK(by_path.out.find("arch M0-narrow") != std::string::npos);
  const RunResult by_flag = run_cli("build --config " + cfg.string());
  CHECK(by_flag.code == 0);
  CHECK(by_flag.out == by_path.out);
}

TEST_CASE("build rejects unknown names with a JSON diagnostic") {
  const RunResult r = run_cli("build no-such-model");
  CHECK(r.code != 0);
  CHECK(r.out.empty());
  const json e = error_payload(r);
  CHECK(e["error"] == "ConfigError");
  const std::string msg = e["message"].get<std::string>();
  CHECK(msg.find("unknown architecture") != std::string::npos);
  CHECK(msg.find("m0-narrow") != std::string::npos);  // lists built-ins
}

TEST_CASE("build names the offending row of a broken config") {
  std::string text = builtin_configs().at("m0-narrow");
  const auto pos = text.find("g=2,-");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 5, "g=5,-");  // 5 does not divide c=12
  const fs::path cfg = work_dir() / "broken.cfg";
  spit(cfg, text);
  const RunResult r = run_cli("build --config " + cfg.string());
  CHECK(r.code != 0);
  const json e = error_payload(r);
  CHECK(e["error"] == "ConfigError");
  const std::string msg = e["message"].get<std::string>();
  CHECK(msg.find("micro-a") != std::string::npos);
  CHECK(msg.find("does not divide") != std::string::npos);
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

TEST_CASE("flops totals are the sum of the emitted per-layer entries") {
  const RunResult r = run_cli("flops m0 --json");
  REQUIRE(r.code == 0);
  const json doc = json::parse(r.out);
  std::uint64_t sum = 0;
  for (const auto& [name, layer] : doc["layers"].items()) {
    sum += layer["madds"].get<std::uint64_t>();
  }
  CHECK(sum == doc["total_madds"].get<std::uint64_t>());
  CHECK(doc["total_madds"].get<std::uint64_t>() == 6870496u);

  const RunResult ex = run_cli("flops m0 --exclude classifier --json");
  REQUIRE(ex.code == 0);
  const json exdoc = json::parse(ex.out);
  CHECK(exdoc["total_madds"].get<std::uint64_t>() <
        doc["total_madds"].get<std::uint64_t>());
  CHECK(!exdoc["layers"].contains("classifier.fc1"));
}

TEST_CASE("flops --check passes the published budgets") {
  const RunResult m3 = run_cli("flops m3 --check");
  CHECK(m3.code == 0);
  CHECK(m3.out.find("budget PASS") != std::string::npos);

  const RunResult kp = run_cli("flops m3-kp --input 256x192 --check --json");
  REQUIRE(kp.code == 0);
  const json doc = json::parse(kp.out);
  CHECK(doc["budget"]["pass"].get<bool>());
  CHECK(doc["budget"]["madds_ratio"].get<double>() > 0.8);
  CHECK(doc["budget"]["madds_ratio"].get<double>() < 1.2);
}

TEST_CASE("flops --check refuses models without a published budget") {
  const RunResult r = run_cli("flops m0-narrow --check");
  CHECK(r.code != 0);
  const json e = error_payload(r);
  CHECK(e["message"].get<std::string>().find("no published budget") !=
        std::string::npos);
}

TEST_CASE("flops output is bitwise stable across invocations") {
  const RunResult a = run_cli("flops m1 --json --threads 1");
  const RunResult b = run_cli("flops m1 --json --threads 1");
  CHECK(a.code == 0);
  CHECK(a.out == b.out);
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

TEST_CASE("the fast verification suite passes under the CLI") {
  const RunResult r = run_cli("verify shiftmax");
  CHECK(r.code == 0);
  CHECK(r.out.find("[PASS]") != std::string::npos);
  CHECK(r.out.find("[FAIL]") == std::string::npos);
  CHECK(r.out.find("properties passed") != std::string::npos);

  const RunResult bad = run_cli("verify bogus");
  CHECK(bad.code != 0);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TEST_CASE("training writes a bundle and a JSON-lines metric log") {
  const fs::path bundle = work_dir() / "a.mnwb";
  const fs::path log = work_dir() / "a.log";
  const RunResult r = run_cli(
      "train m0-narrow --synthetic --per-class 4 --epochs 2 --batch-size 8 "
      "--lr 0.1 --seed 5 --out " +
      bundle.string() + " --log " + log.string());
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("bundle written to") != std::string::npos);
  REQUIRE(fs::exists(bundle));

  std::istringstream lines(slurp(log));
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    CHECK(j["epoch"].get<int>() == count + 1);
    CHECK(j.contains("lr"));
    CHECK(j.contains("student_ce"));
    CHECK(j.contains("train_acc"));
    ++count;
  }
  CHECK(count == 2);

  // The bundle round-trips through the loader.
  const WeightBundle wb = load_bundle(bundle.string());
  CHECK(wb.arch_text.find("M0-narrow") != std::string::npos);
}

TEST_CASE("same seed and flags reproduce the bundle byte for byte") {
  const fs::path b1 = work_dir() / "s1.mnwb";
  const fs::path b2 = work_dir() / "s2.mnwb";
  const fs::path b3 = work_dir() / "s3.mnwb";
  const std::string base =
      "train m0-narrow --synthetic --per-class 2 --epochs 1 --batch-size 8 "
      "--lr 0.1 --threads 1 ";
  REQUIRE(run_cli(base + "--seed 9 --out " + b1.string()).code == 0);
  REQUIRE(run_cli(base + "--seed 9 --out " + b2.string()).code == 0);
  REQUIRE(run_cli(base + "--seed 10 --out " + b3.string()).code == 0);
  CHECK(slurp(b1) == slurp(b2));
  CHECK(slurp(b1) != slurp(b3));
}

TEST_CASE("co-training logs partner losses from the CLI") {
  const fs::path bundle = work_dir() / "mut.mnwb";
  const fs::path log = work_dir() / "mut.log";
  const RunResult r = run_cli(
      "train m0-narrow --synthetic --per-class 2 --epochs 1 --batch-size 8 "
      "--mutual --beta 0.5 --seed 3 --out " +
      bundle.string() + " --log " + log.string());
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json j = json::parse(slurp(log));
  CHECK(j.contains("partner_ce"));
  CHECK(j["kl"].get<double>() >= -1e-6);
}

TEST_CASE("training rejects keypoint heads and ambiguous data sources") {
  const RunResult kp = run_cli("train m0-kp --synthetic --epochs 1");
  CHECK(kp.code != 0);
  CHECK(error_payload(kp)["message"].get<std::string>().find("heatmap") !=
        std::string::npos);

  const RunResult neither = run_cli("train m0-narrow --epochs 1");
  CHECK(neither.code != 0);
  CHECK(error_payload(neither)["message"].get<std::string>().find(
            "--synthetic") != std::string::npos);
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

TEST_CASE("inference reproduces the library forward pass on a PPM image") {
  // Build a fresh classifier and save its bundle in-process.
  ArchSpec arch = parse_arch_config(builtin_configs().at("m0-narrow"));
  Network<float> net(arch, /*seed=*/123);
  const fs::path bundle = work_dir() / "fresh.mnwb";
  save_bundle(bundle.string(), bundle_from_network(net));

  // An 8-bit image survives the PPM round trip exactly.
  Rng rng(77);
  Tensor<float> img(1, 3, 32, 32);
  for (std::size_t i = 0; i < img.size(); ++i) {
    img.data()[i] = static_cast<float>(rng.below(256)) / 255.0f;
  }
  const fs::path ppm = work_dir() / "img.ppm";
  write_pnm(ppm.string(), img);

  const RunResult r =
      run_cli("infer " + bundle.string() + " " + ppm.string() +
              " --topk 10 --json --threads 1");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json doc = json::parse(r.out);
  CHECK(doc["arch"] == "M0-narrow");
  REQUIRE(doc["topk"].size() == 10);

  // Library-side reference: same bundle, same image file, same math.
  Network<float> loaded = network_from_bundle(load_bundle(bundle.string()));
  ag::ExecContext ctx;
  const Tensor<float> back = read_pnm(ppm.string());
  const Tensor<float> probs =
      softmax_forward(loaded.forward(back, ctx)->value);

  double prev = 2.0;
  for (const auto& item : doc["topk"]) {
    const int cls = item["class"].get<int>();
    const double p = item["prob"].get<double>();
    CHECK(p == doctest::Approx(probs.at(0, cls, 0, 0)).epsilon(1e-6));
    CHECK(p <= prev);
    CHECK(p > 0.0);
    prev = p;
  }

  // Bitwise-stable stdout across runs.
  const RunResult again =
      run_cli("infer " + bundle.string() + " " + ppm.string() +
              " --topk 10 --json --threads 1");
  CHECK(again.out == r.out);
}

TEST_CASE("keypoint inference writes quarter-resolution heatmaps as npy") {
  ArchSpec arch = parse_arch_config(builtin_configs().at("m0-kp"));
  Network<float> net(arch, 9);
  const fs::path bundle = work_dir() / "kp.mnwb";
  save_bundle(bundle.string(), bundle_from_network(net));

  // Grayscale input exercises the channel-adaptation path.
  Rng rng(5);
  Tensor<float> gray(1, 1, 256, 192);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    gray.data()[i] = static_cast<float>(rng.below(256)) / 255.0f;
  }
  const fs::path pgm = work_dir() / "pose.pgm";
  write_pnm(pgm.string(), gray);

  const fs::path npy = work_dir() / "maps.npy";
  const RunResult r = run_cli("infer " + bundle.string() + " " + pgm.string() +
                              " --heatmap-out " + npy.string());
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("heatmaps (17,64,48)") != std::string::npos);
  REQUIRE(fs::exists(npy));

  const std::string blob = slurp(npy);
  REQUIRE(blob.size() > 10);
  CHECK(blob.compare(1, 5, "NUMPY") == 0);
  CHECK(blob.find("(17, 64, 48)") != std::string::npos);
  std::uint16_t hlen = 0;
  std::memcpy(&hlen, blob.data() + 8, 2);
  CHECK(blob.size() == 10u + hlen + 4u * 17 * 64 * 48);
}

TEST_CASE("a truncated bundle fails cleanly without output") {
  ArchSpec arch = parse_arch_config(builtin_configs().at("m0-narrow"));
  Network<float> net(arch, 31);
  const fs::path good = work_dir() / "good.mnwb";
  save_bundle(good.string(), bundle_from_network(net));

  const std::string bytes = slurp(good);
  const fs::path cut = work_dir() / "cut.mnwb";
  spit(cut, bytes.substr(0, bytes.size() - 16));

  Rng rng(1);
  Tensor<float> img(1, 3, 32, 32);
  img.fill_normal(rng, 0.5, 0.1);
  const fs::path ppm = work_dir() / "t.ppm";
  write_pnm(ppm.string(), img);

  const RunResult r = run_cli("infer " + cut.string() + " " + ppm.string());
  CHECK(r.code != 0);
  CHECK(r.out.empty());
  CHECK(error_payload(r)["error"] == "FormatError");

  const RunResult missing =
      run_cli("infer " + (work_dir() / "absent.mnwb").string() + " " +
              ppm.string());
  CHECK(missing.code != 0);
}
