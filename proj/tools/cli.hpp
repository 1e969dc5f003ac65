#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cut/data/dataset.hpp"
#include "cut/generation/pipeline.hpp"
#include "cut/metrics/metrics.hpp"
#include "cut/trainer/trainer.hpp"
#include "cut/vlad/detector.hpp"

namespace cut::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;

struct ToyDataSettings {
  int n_train = 5;
  int n_test_normal = 50;
  int n_test_anomalous = 50;
  std::uint64_t seed = 0;
};

// Everything a command needs, with every default materialised. Paths are
// made absolute when the config is resolved.
struct RunConfig {
  std::string dataset_root;
  std::string layout = "mvtec";
  std::vector<std::string> categories;
  std::string visa_csv = "split_csv/1cls.csv";
  int resize = 0;

  int k = 1;  // data::kAllShots for the full-shot setup
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int runs = 1;

  bool toy = false;
  ToyDataSettings toy_data{};
  std::string backbone = "toy";
  std::string extractor = "toy";
  std::string out = "runs";

  generation::GenerationConfig generation{};
  int per_image = 0;  // 0: 100 for k-shot, 5 for full-shot
  int workers = 1;

  trainer::TrainConfig train{};
  bool include_normals = true;
  bool rescale_vl = true;
};

// --toy preset: procedural dataset under <out>/toy_data, 20 epochs at lr 1e-3
// on native 128 px inputs.
void apply_toy_preset(RunConfig& config);

nlohmann::json to_json(const RunConfig& config);
// Overlays the keys present in `j`; unknown keys are rejected.
void overlay(RunConfig& config, const nlohmann::json& j);

void validate(const RunConfig& config);

int effective_per_image(const RunConfig& config);
std::string backbone_selector(const RunConfig& config);

data::DatasetSpec dataset_spec(const RunConfig& config, data::Split split);

// Builds the toy dataset when the toy preset is on and it is missing.
void ensure_toy_dataset(const RunConfig& config);

// Command bodies; they throw cut::Error on failure.
void run_generate(const RunConfig& config);
void run_train(const RunConfig& config, bool resume, int stop_after);
metrics::EvalReport run_eval(const RunConfig& config);
metrics::EvalReport run_pipeline_runs(const RunConfig& config);

// Writes <out>/<command>.resolved.json.
std::string write_sidecar(const RunConfig& config, const std::string& command);

// Full CLI entry point; returns the process exit code.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace cut::cli
