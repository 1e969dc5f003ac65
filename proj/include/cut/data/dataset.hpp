#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cut/core/types.hpp"

namespace cut::data {

enum class Layout { kMvtec, kVisa, kGenerated, kToy };
enum class Split { kTrain, kTest };

Layout parse_layout(const std::string& name);
const char* to_string(Layout layout);

struct DatasetSpec {
  std::filesystem::path root;
  Layout layout = Layout::kMvtec;
  std::vector<std::string> categories;
  Split split = Split::kTest;
  // Split file for the VisA layout, relative to root unless absolute.
  std::filesystem::path visa_csv = "split_csv/1cls.csv";
  // Square side images and masks are resized to on load; 0 keeps the size.
  int resize_side = 0;
};

void validate(const DatasetSpec& spec);

struct LabeledSample {
  ImageSample image;
  int y_img = 0;
  Map2D mask;  // H x W; binary for real datasets, soft for generated ones
  std::string id;
};

// Samples of every category in `spec`, in canonical (sorted path) order.
std::vector<LabeledSample> load_split(const DatasetSpec& spec);

// Paths of the normal training images of one category, sorted.
std::vector<std::filesystem::path> list_train_normals(const DatasetSpec& spec, const std::string& category);

inline constexpr int kAllShots = 0;

struct KShotSample {
  int k = kAllShots;  // kAllShots selects every normal
  std::uint64_t seed = 0;
  std::string category;
  std::vector<std::string> selected;
};

// Parses "1", "2", "4" or "all".
int parse_shots(const std::string& text);
std::string shots_name(int k);

// Seed for the selection shuffle of one category.
std::uint64_t kshot_stream_seed(std::uint64_t seed, const std::string& category);

// Fisher-Yates over the canonical normal list (j = rng() mod (i + 1), i from
// the end), then the first k entries.
std::vector<std::size_t> shuffle_prefix(std::size_t n, std::size_t k, std::uint64_t stream_seed);

KShotSample sample_kshot(const DatasetSpec& spec, const std::string& category, int k, std::uint64_t seed);
std::vector<ImageSample> load_kshot(const KShotSample& selection, const std::string& category, int resize_side = 0);

// --- generated dataset ---

struct ManifestRecord {
  std::size_t index = 0;
  int y_img = 0;
  std::uint64_t seed = 0;
  double gamma = 0.0;
  std::string prompt;
  std::string source_normal;
  std::vector<int> anomaly_tokens;
};

bool operator==(const ManifestRecord& a, const ManifestRecord& b);

std::string index_name(std::size_t index);
ManifestRecord manifest_record(const AnnotatedSample& sample, std::size_t index);

// Writes images/, masks/ and manifest.jsonl under root/category.
void write_generated(const std::filesystem::path& root, const std::string& category,
                     const std::vector<AnnotatedSample>& samples);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& root, const std::string& category);
std::vector<AnnotatedSample> load_generated(const std::filesystem::path& root, const std::string& category);

// --- procedural toy dataset ---

inline constexpr int kToySide = 128;
inline constexpr const char* kToyCategory = "disk";

enum class ToyDefect { kNone, kScratch, kBlob, kWedge };
const char* to_string(ToyDefect defect);

struct ToyRender {
  Tensor3 clean;      // 8-bit levels / 255
  Tensor3 defective;  // equals clean for kNone
  BinaryMask mask;
  ToyDefect defect = ToyDefect::kNone;
};

// Deterministic render of one toy image from (seed, stream, index).
ToyRender render_toy(std::uint64_t seed, std::uint64_t stream, std::size_t index, ToyDefect defect);

struct ToyCounts {
  int n_train = 5;
  int n_normal = 10;     // test/good
  int n_anomalous = 10;  // spread over test/{scratch,blob,wedge}
};

// mvtec layout under out/disk: train/good, test/good, test/<defect> and
// ground_truth/<defect>/<name>_mask.png.
DatasetSpec make_toy_dataset(const std::filesystem::path& out, int n_normal, int n_anomalous, std::uint64_t seed,
                             int n_train = 5);

}  // namespace cut::data
