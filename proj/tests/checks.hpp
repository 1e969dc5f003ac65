#pragma once

#include <cstdint>
#include <vector>

#include "cut/core/tensor.hpp"
#include "cut/generation/pipeline.hpp"

// Checks shared by the unit tests and the acceptance binary.
namespace cut::test {

struct GradientCheck {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  int coordinates = 0;
};

// Central differences of L_att against the toy backbone's analytic gradient
// at the conditioning start of a toy disk image. Coordinates are drawn
// uniformly over the whole latent. The relative error of one coordinate is
// |a - n| / max(|a|, |n|, floor * max|a|).
GradientCheck latt_gradient_check(std::uint64_t seed, int coordinates, double h = 1e-4, double floor = 0.0);

struct MaskedInvariance {
  int calls = 0;
  int violations = 0;     // calls that touched an out-of-mask latent entry
  int moved = 0;          // calls that changed some in-mask entry
};

// Randomised optimize_step calls on the fitted toy backbone: random latent,
// timestep, masks, lambda and refinement position per call.
MaskedInvariance masked_invariance_trials(int calls, std::uint64_t seed);

struct PairedRun {
  double off = 0.0;  // final in-mask anomaly attention, lambda = 0
  double on = 0.0;   // same seed, default lambda
};

// Paired generations on toy disk images with the fitted toy backbone; run s
// conditions on toy image s and uses generation seed s.
std::vector<PairedRun> optimization_pairs(int runs, generation::GenerationConfig config = {});

struct PairedTest {
  double mean_off = 0.0;
  double mean_on = 0.0;
  double mean_diff = 0.0;
  double t = 0.0;  // paired t statistic of on - off
  int wins = 0;
};

PairedTest paired_t(const std::vector<PairedRun>& runs);

// One-sided 95% critical value of Student's t for df in [1, 30].
double t_critical_95(int df);

// Brute-force metric oracles: pair counting, exhaustive thresholds and a
// flood-fill PRO evaluated at every threshold in `thresholds` (descending
// order not required).
double brute_auroc(const std::vector<double>& scores, const std::vector<int>& labels);
double brute_max_f1(const std::vector<double>& scores, const std::vector<int>& labels);
Grid<int> brute_components(const BinaryMask& mask, int* count);
double brute_pro(const std::vector<Map2D>& maps, const std::vector<BinaryMask>& masks, std::vector<double> thresholds,
                 double fpr_limit = 0.3);
// Every distinct score of the maps, for an exact brute_pro sweep.
std::vector<double> distinct_scores(const std::vector<Map2D>& maps);

struct MetricOracleReport {
  int instances = 0;
  double auroc_dev = 0.0;  // max |metric - oracle| over the instances
  double f1_dev = 0.0;
  double pro_dev = 0.0;
};

// Random instances of up to 200 scores and one to three 16x16 maps, with
// ties forced on some instances.
MetricOracleReport metric_oracle_trials(int instances, std::uint64_t seed);

struct VladAlgebra {
  int trials = 0;
  double max_increase = 0.0;   // worst pixel increase of M_VV after growing the bank
  bool empty_bank_bitwise = false;
  double self_match_max = 0.0;  // max M_VV with a bank built from the query itself
};

// Random unit-row stages and banks for the monotonicity trials; a toy disk
// image through the toy extractor and a fresh adapter for the other two.
VladAlgebra vlad_algebra(int trials, std::uint64_t seed);

}  // namespace cut::test
