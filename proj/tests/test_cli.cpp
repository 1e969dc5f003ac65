#include <doctest.h>

#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

#include "cli.hpp"
#include "cut/metrics/metrics.hpp"
#include "support.hpp"

using namespace cut;
using cut::test::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Swallows std::cout and keeps std::cerr for inspection.
struct Captured {
  int code = 0;
  std::string err;
};

Captured run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Captured c;
  c.code = cli::run_cli(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  c.err = err.str();
  return c;
}

// Every key path of `want` also exists in `got`.
void check_same_keys(const nlohmann::json& want, const nlohmann::json& got, const std::string& where) {
  for (const auto& [k, v] : want.items()) {
    INFO(where << k);
    REQUIRE(got.contains(k));
    if (v.is_object()) check_same_keys(v, got.at(k), where + k + ".");
  }
}

}  // namespace

TEST_CASE("validation failures exit with code 2") {
  TempDir dir("cli_bad");
  const auto out = (dir / "out").string();

  const auto missing = run({"generate", "--dataset-root", (dir / "no_such_root").string(), "--category", "bottle",
                            "--out", out});
  CHECK(missing.code == cli::kExitValidation);
  CHECK(missing.err.find((dir / "no_such_root").string()) != std::string::npos);

  CHECK(run({"train", "--toy", "--epochs", "0", "--out", out}).code == cli::kExitValidation);
  CHECK(run({"generate", "--toy", "--gamma", "1.5", "--out", out}).code == cli::kExitValidation);
  CHECK(run({"generate", "--toy", "--k", "3", "--out", out}).code == cli::kExitValidation);
  CHECK(run({}).code == cli::kExitValidation);
  CHECK(run({"generate", "--no-such-flag"}).code == cli::kExitValidation);

  std::ofstream(dir / "bad.json") << R"({"generation": {"gamma": 0.25, "typo": 1}})";
  CHECK(run({"generate", "--toy", "--config", (dir / "bad.json").string(), "--out", out}).code ==
        cli::kExitValidation);

  const auto no_ckpt = run({"eval", "--toy", "--out", out});
  CHECK(no_ckpt.code == cli::kExitValidation);
  CHECK(no_ckpt.err.find("not-found") != std::string::npos);
}

TEST_CASE("generate, train and eval on the toy preset") {
  TempDir dir("cli_toy");
  const auto out = (dir / "a").string();
  REQUIRE(run({"generate", "--toy", "--k", "1", "--seed", "0", "--out", out}).code == cli::kExitOk);

  const auto records = data::read_manifest(fs::path(out) / "generated", "disk");
  int anomalous = 0, normal = 0;
  for (const auto& r : records) (r.y_img ? anomalous : normal)++;
  CHECK(anomalous == 100);
  CHECK(normal == 1);
  CHECK(fs::exists(fs::path(out) / "generated" / "disk" / "images" / "00100.png"));

  // the sidecar materialises every default
  const auto sidecar = nlohmann::json::parse(slurp(fs::path(out) / "generate.resolved.json"));
  cli::RunConfig defaults;
  check_same_keys(cli::to_json(defaults), sidecar, "");
  CHECK(sidecar.at("generation").at("gamma") == 0.25);
  CHECK(sidecar.at("per_image") == 100);

  // rerun from the sidecar into a fresh directory
  const auto replay = (dir / "b").string();
  REQUIRE(run({"generate", "--config", (fs::path(out) / "generate.resolved.json").string(), "--out", replay}).code ==
          cli::kExitOk);
  CHECK(slurp(fs::path(out) / "generated" / "disk" / "manifest.jsonl") ==
        slurp(fs::path(replay) / "generated" / "disk" / "manifest.jsonl"));

  // uninterrupted training versus stop-and-resume
  const fs::path ckpt = fs::path(out) / "checkpoints" / "disk";
  REQUIRE(run({"train", "--toy", "--epochs", "3", "--out", out}).code == cli::kExitOk);
  const std::string adapter = slurp(ckpt / "adapter.ckpt");
  const std::string bank = slurp(ckpt / "bank.ckpt");
  REQUIRE(!adapter.empty());
  fs::remove(ckpt / "adapter.ckpt");
  REQUIRE(run({"train", "--toy", "--epochs", "3", "--stop-after", "1", "--out", out}).code == cli::kExitOk);
  CHECK_FALSE(fs::exists(ckpt / "adapter.ckpt"));
  REQUIRE(run({"train", "--toy", "--epochs", "3", "--resume", "--out", out}).code == cli::kExitOk);
  CHECK(slurp(ckpt / "adapter.ckpt") == adapter);
  CHECK(slurp(ckpt / "bank.ckpt") == bank);

  REQUIRE(run({"eval", "--toy", "--epochs", "3", "--out", out}).code == cli::kExitOk);
  const auto report = metrics::report_from_json(slurp(fs::path(out) / "report.json"));
  REQUIRE(report.categories.size() == 1);
  const auto& disk = report.categories.at("disk");
  CHECK(disk.size() == 5);
  for (const auto& [metric, stat] : disk) {
    CHECK(stat.std == 0.0);
    CHECK(stat.n_runs == 1);
    CHECK(stat.mean >= 0.0);
    CHECK(stat.mean <= 1.0);
  }
  // header plus five metric rows
  const std::string csv = slurp(fs::path(out) / "report.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}

TEST_CASE("report aggregates saved per-run reports") {
  TempDir dir("cli_report");
  std::vector<metrics::EvalReport> runs;
  std::vector<std::string> args{"report"};
  for (std::uint64_t s = 0; s < 3; ++s) {
    metrics::CategoryMetrics a, b;
    for (metrics::Metric m : metrics::kAllMetrics) {
      a[m] = 0.6 + 0.1 * s + 0.01 * static_cast<int>(m);
      b[m] = 0.9 - 0.05 * s;
    }
    runs.push_back(metrics::single_run_report("1-shot", s, {{"bottle", a}, {"cable", b}}));
    const auto path = dir / ("run" + std::to_string(s) + ".json");
    std::ofstream(path) << metrics::to_json(runs.back());
    args.push_back(path.string());
  }
  args.push_back("--out");
  args.push_back((dir / "agg").string());
  REQUIRE(run(args).code == cli::kExitOk);

  const auto got = metrics::report_from_json(slurp(dir / "agg" / "report.json"));
  const auto want = metrics::aggregate_runs(runs);
  CHECK(got.seeds == want.seeds);
  CHECK(got.setup == want.setup);
  for (const auto& [cat, per] : want.categories)
    for (const auto& [metric, stat] : per) {
      CHECK(got.categories.at(cat).at(metric).mean == doctest::Approx(stat.mean).epsilon(1e-12));
      CHECK(got.categories.at(cat).at(metric).std == doctest::Approx(stat.std).epsilon(1e-12));
      CHECK(got.categories.at(cat).at(metric).n_runs == 3);
    }
  CHECK(run({"report", "--out", (dir / "empty").string()}).code == cli::kExitValidation);
}
