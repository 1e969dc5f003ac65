#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cut/core/tensor.hpp"

namespace cut::metrics {

// Rank-sum AUROC with midranks for ties.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Best F1 over thresholds at the distinct score values (predict score >= th).
double max_f1(std::span<const double> scores, std::span<const int> labels);

// F1 of the rule score >= threshold.
double f1_at(std::span<const double> scores, std::span<const int> labels, double threshold);

// Labels 8-connected foreground components 1..n; background stays 0.
Grid<int> label_components(const BinaryMask& mask, int* count = nullptr);

// Per-region overlap integrated over FPR in [0, fpr_limit], divided by the
// limit. The curve is swept exactly over every distinct score.
double pro(std::span<const Map2D> score_maps, std::span<const BinaryMask> gt_masks, double fpr_limit = 0.3);

enum class Metric { kImageAuroc, kImageF1, kPixelAuroc, kPixelF1, kPro };
inline constexpr std::array<Metric, 5> kAllMetrics{Metric::kImageAuroc, Metric::kImageF1, Metric::kPixelAuroc,
                                                   Metric::kPixelF1, Metric::kPro};
const char* to_string(Metric metric);

using CategoryMetrics = std::map<Metric, double>;

struct EvalInputs {
  std::vector<double> image_scores;
  std::vector<int> image_labels;
  std::vector<Map2D> pixel_scores;
  std::vector<BinaryMask> gt_masks;
};

// Image metrics over the image lists; pixel metrics pool every test pixel of
// the category.
CategoryMetrics evaluate_category(const EvalInputs& inputs, double fpr_limit = 0.3);

struct MetricStats {
  double mean = 0.0;
  double std = 0.0;
  int n_runs = 0;
};

struct EvalReport {
  std::string setup;  // "1-shot", "2-shot", "4-shot" or "full"
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::map<Metric, MetricStats>> categories;
};

// Report for one run (n_runs = 1, std = 0).
EvalReport single_run_report(const std::string& setup, std::uint64_t seed,
                             const std::map<std::string, CategoryMetrics>& per_category);

// Per-metric mean and population std across the runs' means.
EvalReport aggregate_runs(std::span<const EvalReport> runs);

std::string to_csv(const EvalReport& report);
std::string to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

}  // namespace cut::metrics
