#include "cut/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cut/core/error.hpp"
#include "cut/core/random.hpp"
#include "cut/data/image_io.hpp"

namespace cut::data {

namespace fs = std::filesystem;
using nlohmann::json;

Layout parse_layout(const std::string& name) {
  if (name == "mvtec") return Layout::kMvtec;
  if (name == "visa") return Layout::kVisa;
  if (name == "generated") return Layout::kGenerated;
  if (name == "toy") return Layout::kToy;
  throw Error(ErrorCode::kInvalidArgument, "unknown dataset layout '" + name + "' (mvtec, visa, generated, toy)");
}

const char* to_string(Layout layout) {
  switch (layout) {
    case Layout::kMvtec: return "mvtec";
    case Layout::kVisa: return "visa";
    case Layout::kGenerated: return "generated";
    case Layout::kToy: return "toy";
  }
  return "?";
}

void validate(const DatasetSpec& spec) {
  if (spec.categories.empty()) throw Error(ErrorCode::kInvalidArgument, "dataset spec lists no categories");
  if (!fs::is_directory(spec.root)) throw Error(ErrorCode::kNotFound, "dataset root not found: " + spec.root.string());
  if (spec.resize_side < 0) throw Error(ErrorCode::kRange, "resize side must be >= 0");
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::kNotFound, "missing directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> list_subdirs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::kNotFound, "missing directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

ImageSample load_image(const fs::path& path, const std::string& category, int side) {
  ImageSample s;
  s.pixels = read_image(path);
  if (side > 0 && (s.pixels.dim0() != side || s.pixels.dim1() != side)) s.pixels = resize_image(s.pixels, side, side);
  s.category = category;
  s.path = path.string();
  return s;
}

Map2D load_mask(const fs::path& path, int rows, int cols, bool binary) {
  if (!fs::exists(path)) throw Error(ErrorCode::kNotFound, "missing mask file: " + path.string());
  Map2D m = read_gray(path);
  if (binary)
    for (double& v : m.values()) v = v > 0.0 ? 1.0 : 0.0;
  if (m.rows() != rows || m.cols() != cols) {
    m = resize_bilinear(m, rows, cols);
    if (binary)
      for (double& v : m.values()) v = v >= 0.5 ? 1.0 : 0.0;
  }
  return m;
}

struct VisaRow {
  std::string object, split, label, image, mask;
};

std::vector<VisaRow> read_visa_csv(const DatasetSpec& spec) {
  const fs::path csv = spec.visa_csv.is_absolute() ? spec.visa_csv : spec.root / spec.visa_csv;
  std::ifstream in(csv);
  if (!in) throw Error(ErrorCode::kNotFound, "missing VisA split file: " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kInvalidArgument, "empty VisA split file: " + csv.string());
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) {
      if (!f.empty() && f.back() == '\r') f.pop_back();
      header.push_back(f);
    }
  }
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"object", "split", "label", "image", "mask"}) {
    if (!col.count(need)) throw Error(ErrorCode::kInvalidArgument, std::string("VisA split file lacks column ") + need);
  }
  std::vector<VisaRow> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string x;
    while (std::getline(ss, x, ',')) f.push_back(x);
    f.resize(header.size());
    rows.push_back({f[col["object"]], f[col["split"]], f[col["label"]], f[col["image"]], f[col["mask"]]});
  }
  return rows;
}

std::vector<LabeledSample> load_mvtec_category(const DatasetSpec& spec, const std::string& cat) {
  const fs::path base = spec.root / cat;
  std::vector<LabeledSample> out;
  auto add = [&](const fs::path& img, int y, const std::optional<fs::path>& mask) {
    LabeledSample s;
    s.image = load_image(img, cat, spec.resize_side);
    s.y_img = y;
    s.mask = mask ? load_mask(*mask, s.image.height(), s.image.width(), true)
                  : Map2D(s.image.height(), s.image.width(), 0.0);
    s.id = fs::relative(img, spec.root).string();
    validate_sample(s.image);
    out.push_back(std::move(s));
  };
  if (spec.split == Split::kTrain) {
    for (const auto& p : list_images(base / "train" / "good")) add(p, 0, std::nullopt);
    return out;
  }
  for (const auto& dir : list_subdirs(base / "test")) {
    const std::string defect = dir.filename().string();
    for (const auto& p : list_images(dir)) {
      if (defect == "good") {
        add(p, 0, std::nullopt);
      } else {
        add(p, 1, base / "ground_truth" / defect / (p.stem().string() + "_mask.png"));
      }
    }
  }
  return out;
}

std::vector<LabeledSample> load_visa_category(const DatasetSpec& spec, const std::string& cat,
                                              const std::vector<VisaRow>& rows) {
  const std::string want = spec.split == Split::kTrain ? "train" : "test";
  std::vector<const VisaRow*> pick;
  for (const auto& r : rows)
    if (r.object == cat && r.split == want) pick.push_back(&r);
  std::sort(pick.begin(), pick.end(), [](const VisaRow* a, const VisaRow* b) { return a->image < b->image; });
  std::vector<LabeledSample> out;
  for (const VisaRow* r : pick) {
    LabeledSample s;
    s.image = load_image(spec.root / r->image, cat, spec.resize_side);
    s.y_img = r->label == "normal" ? 0 : 1;
    if (s.y_img == 1) {
      if (r->mask.empty()) throw Error(ErrorCode::kNotFound, "anomalous VisA image without mask: " + r->image);
      s.mask = load_mask(spec.root / r->mask, s.image.height(), s.image.width(), true);
    } else {
      s.mask = Map2D(s.image.height(), s.image.width(), 0.0);
    }
    s.id = r->image;
    validate_sample(s.image);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::vector<LabeledSample> load_split(const DatasetSpec& spec) {
  validate(spec);
  std::vector<LabeledSample> out;
  std::vector<VisaRow> visa;
  if (spec.layout == Layout::kVisa) visa = read_visa_csv(spec);
  for (const auto& cat : spec.categories) {
    std::vector<LabeledSample> part;
    switch (spec.layout) {
      case Layout::kMvtec:
      case Layout::kToy: part = load_mvtec_category(spec, cat); break;
      case Layout::kVisa: part = load_visa_category(spec, cat, visa); break;
      case Layout::kGenerated: {
        const auto gen = load_generated(spec.root, cat);
        for (std::size_t i = 0; i < gen.size(); ++i) {
          LabeledSample s;
          s.image = gen[i].image;
          if (spec.resize_side > 0 && s.image.height() != spec.resize_side) {
            s.image.pixels = resize_image(s.image.pixels, spec.resize_side, spec.resize_side);
            s.mask = resize_bilinear(gen[i].y_pix, spec.resize_side, spec.resize_side);
          } else {
            s.mask = gen[i].y_pix;
          }
          s.y_img = gen[i].y_img;
          s.id = cat + "/" + index_name(i);
          part.push_back(std::move(s));
        }
        break;
      }
    }
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

std::vector<fs::path> list_train_normals(const DatasetSpec& spec, const std::string& category) {
  validate(spec);
  switch (spec.layout) {
    case Layout::kMvtec:
    case Layout::kToy: return list_images(spec.root / category / "train" / "good");
    case Layout::kVisa: {
      std::vector<fs::path> out;
      for (const auto& r : read_visa_csv(spec))
        if (r.object == category && r.split == "train" && r.label == "normal") out.push_back(spec.root / r.image);
      std::sort(out.begin(), out.end());
      return out;
    }
    case Layout::kGenerated: {
      std::vector<fs::path> out;
      for (const auto& r : read_manifest(spec.root, category))
        if (r.y_img == 0) out.push_back(spec.root / category / "images" / (index_name(r.index) + ".png"));
      return out;
    }
  }
  return {};
}

int parse_shots(const std::string& text) {
  if (text == "all" || text == "full") return kAllShots;
  if (text == "1" || text == "2" || text == "4") return std::stoi(text);
  throw Error(ErrorCode::kInvalidArgument, "k must be 1, 2, 4 or all (got '" + text + "')");
}

std::string shots_name(int k) { return k == kAllShots ? "full" : std::to_string(k) + "-shot"; }

std::uint64_t kshot_stream_seed(std::uint64_t seed, const std::string& category) {
  return mix_seed(seed, fnv1a(category));
}

std::vector<std::size_t> shuffle_prefix(std::size_t n, std::size_t k, std::uint64_t stream_seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(stream_seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  idx.resize(std::min(k, n));
  return idx;
}

KShotSample sample_kshot(const DatasetSpec& spec, const std::string& category, int k, std::uint64_t seed) {
  if (k < 0) throw Error(ErrorCode::kRange, "k must be positive or 'all'");
  const auto normals = list_train_normals(spec, category);
  if (normals.empty()) throw Error(ErrorCode::kUndersized, "no normal training images for " + category);
  KShotSample out;
  out.k = k;
  out.seed = seed;
  out.category = category;
  if (k == kAllShots) {
    for (const auto& p : normals) out.selected.push_back(p.string());
    return out;
  }
  if (static_cast<std::size_t>(k) > normals.size()) {
    throw Error(ErrorCode::kRange, "k = " + std::to_string(k) + " exceeds the " + std::to_string(normals.size()) +
                                       " normal images of " + category);
  }
  for (std::size_t i : shuffle_prefix(normals.size(), static_cast<std::size_t>(k), kshot_stream_seed(seed, category))) {
    out.selected.push_back(normals[i].string());
  }
  return out;
}

std::vector<ImageSample> load_kshot(const KShotSample& selection, const std::string& category, int resize_side) {
  std::vector<ImageSample> out;
  for (const auto& p : selection.selected) {
    out.push_back(load_image(p, category, resize_side));
    validate_sample(out.back());
  }
  return out;
}

// --- generated dataset ---

bool operator==(const ManifestRecord& a, const ManifestRecord& b) {
  return a.index == b.index && a.y_img == b.y_img && a.seed == b.seed && a.gamma == b.gamma && a.prompt == b.prompt &&
         a.source_normal == b.source_normal && a.anomaly_tokens == b.anomaly_tokens;
}

std::string index_name(std::size_t index) {
  std::string s = std::to_string(index);
  if (s.size() < 5) s.insert(0, 5 - s.size(), '0');
  return s;
}

ManifestRecord manifest_record(const AnnotatedSample& sample, std::size_t index) {
  ManifestRecord r;
  r.index = index;
  r.y_img = sample.y_img;
  r.seed = sample.seed;
  r.gamma = sample.gamma;
  r.prompt = sample.prompt.text;
  r.source_normal = sample.source_normal;
  r.anomaly_tokens = sample.prompt.anomaly_token_indices;
  return r;
}

void write_generated(const fs::path& root, const std::string& category, const std::vector<AnnotatedSample>& samples) {
  const fs::path base = root / category;
  std::error_code ec;
  fs::create_directories(base / "images", ec);
  if (!ec) fs::create_directories(base / "masks", ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + base.string() + ": " + ec.message());
  std::ofstream manifest(base / "manifest.jsonl", std::ios::binary | std::ios::trunc);
  if (!manifest) throw Error(ErrorCode::kIo, "cannot write " + (base / "manifest.jsonl").string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    validate_annotated(samples[i]);
    const std::string name = index_name(i) + ".png";
    write_png_rgb(base / "images" / name, samples[i].image.pixels);
    write_png_gray(base / "masks" / name, samples[i].y_pix);
    const auto r = manifest_record(samples[i], i);
    json j = {{"index", r.index},   {"y_img", r.y_img},   {"seed", r.seed},
              {"gamma", r.gamma},   {"prompt", r.prompt}, {"source_normal", r.source_normal},
              {"anomaly_tokens", r.anomaly_tokens}};
    manifest << j.dump() << '\n';
  }
  if (!manifest) throw Error(ErrorCode::kIo, "failed writing " + (base / "manifest.jsonl").string());
}

std::vector<ManifestRecord> read_manifest(const fs::path& root, const std::string& category) {
  const fs::path path = root / category / "manifest.jsonl";
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kNotFound, "missing manifest: " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      ManifestRecord r;
      r.index = j.at("index").get<std::size_t>();
      r.y_img = j.at("y_img").get<int>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.gamma = j.at("gamma").get<double>();
      r.prompt = j.at("prompt").get<std::string>();
      r.source_normal = j.at("source_normal").get<std::string>();
      r.anomaly_tokens = j.at("anomaly_tokens").get<std::vector<int>>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument,
                  path.string() + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
  }
  return out;
}

std::vector<AnnotatedSample> load_generated(const fs::path& root, const std::string& category) {
  const auto records = read_manifest(root, category);
  std::vector<AnnotatedSample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const std::string name = index_name(r.index) + ".png";
    AnnotatedSample s;
    s.image.pixels = read_image(root / category / "images" / name);
    s.image.category = category;
    s.image.path = (root / category / "images" / name).string();
    s.y_img = r.y_img;
    s.y_pix = read_gray(root / category / "masks" / name);
    s.prompt.text = r.prompt;
    s.prompt.anomaly_token_indices = r.anomaly_tokens;
    s.prompt.class_name = category;
    s.seed = r.seed;
    s.gamma = r.gamma;
    s.source_normal = r.source_normal;
    validate_annotated(s);
    out.push_back(std::move(s));
  }
  return out;
}

// --- procedural toy dataset ---

const char* to_string(ToyDefect defect) {
  switch (defect) {
    case ToyDefect::kNone: return "good";
    case ToyDefect::kScratch: return "scratch";
    case ToyDefect::kBlob: return "blob";
    case ToyDefect::kWedge: return "wedge";
  }
  return "?";
}

ToyRender render_toy(std::uint64_t seed, std::uint64_t stream, std::size_t index, ToyDefect defect) {
  constexpr int S = kToySide;
  std::mt19937_64 rng(mix_seed(mix_seed(seed, stream), index));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
  auto level = [&](double a, double b) { return std::floor(uni(a, b)); };

  const double cx = S / 2.0 + uni(-4.0, 4.0);
  const double cy = S / 2.0 + uni(-4.0, 4.0);
  const double R = uni(50.0, 56.0);
  const double bg[3] = {level(36, 46), level(36, 46), level(44, 54)};
  const double fg[3] = {level(172, 188), level(142, 158), level(82, 98)};

  ToyRender out;
  out.defect = defect;
  out.clean = Tensor3(S, S, 3);
  BinaryMask disk(S, S, 0);
  Tensor3 background(S, S, 3);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      disk(y, x) = dx * dx + dy * dy <= R * R;
      for (int c = 0; c < 3; ++c) {
        const double noise = std::floor(uni(-2.0, 3.0));
        background(y, x, c) = (bg[c] + noise) / 255.0;
        out.clean(y, x, c) = disk(y, x) ? (fg[c] + noise) / 255.0 : background(y, x, c);
      }
    }
  }
  out.defective = out.clean;
  out.mask = BinaryMask(S, S, 0);
  if (defect == ToyDefect::kNone) return out;

  // Defect centre somewhere well inside the disk.
  const double rho = R * std::sqrt(uni(0.0, 1.0)) * 0.6;
  const double phi = uni(0.0, 2.0 * std::numbers::pi);
  const double px = cx + rho * std::cos(phi), py = cy + rho * std::sin(phi);

  std::function<bool(double, double)> inside;
  double colour[3] = {0, 0, 0};
  bool use_background = false;
  switch (defect) {
    case ToyDefect::kScratch: {
      const double theta = uni(0.0, std::numbers::pi);
      const double half = uni(9.0, 18.0);
      const double w = uni(1.0, 1.8);
      const double ux = std::cos(theta), uy = std::sin(theta);
      inside = [=](double x, double y) {
        const double rx = x - px, ry = y - py;
        const double along = std::clamp(rx * ux + ry * uy, -half, half);
        const double ex = rx - along * ux, ey = ry - along * uy;
        return ex * ex + ey * ey <= w * w;
      };
      colour[0] = level(20, 34);
      colour[1] = level(16, 30);
      colour[2] = level(14, 26);
      break;
    }
    case ToyDefect::kBlob: {
      const double a = uni(4.0, 9.0), b = uni(4.0, 9.0), rot = uni(0.0, std::numbers::pi);
      const double cr = std::cos(rot), sr = std::sin(rot);
      inside = [=](double x, double y) {
        const double rx = x - px, ry = y - py;
        const double u = (rx * cr + ry * sr) / a, v = (-rx * sr + ry * cr) / b;
        return u * u + v * v <= 1.0;
      };
      colour[0] = level(70, 100);
      colour[1] = level(150, 175);
      colour[2] = level(200, 230);
      break;
    }
    case ToyDefect::kWedge: {
      const double start = uni(0.0, 2.0 * std::numbers::pi);
      const double span = uni(25.0, 50.0) * std::numbers::pi / 180.0;
      const double r_in = 0.45 * R;
      inside = [=](double x, double y) {
        const double rx = x - cx, ry = y - cy;
        if (rx * rx + ry * ry < r_in * r_in) return false;
        double ang = std::atan2(ry, rx) - start;
        ang = std::fmod(ang, 2.0 * std::numbers::pi);
        if (ang < 0) ang += 2.0 * std::numbers::pi;
        return ang <= span;
      };
      use_background = true;
      break;
    }
    case ToyDefect::kNone: break;
  }

  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      if (!disk(y, x) || !inside(x + 0.5, y + 0.5)) continue;
      out.mask(y, x) = 1;
      for (int c = 0; c < 3; ++c) {
        out.defective(y, x, c) = use_background ? background(y, x, c) : colour[c] / 255.0;
      }
    }
  }
  return out;
}

DatasetSpec make_toy_dataset(const fs::path& out, int n_normal, int n_anomalous, std::uint64_t seed, int n_train) {
  if (n_normal < 1 || n_train < 1) throw Error(ErrorCode::kRange, "toy dataset counts must be >= 1");
  if (n_anomalous < 0) throw Error(ErrorCode::kRange, "anomalous count must be >= 0");
  const fs::path base = out / kToyCategory;
  auto name = [](int i) {
    std::string s = std::to_string(i);
    return std::string(3 - std::min<std::size_t>(3, s.size()), '0') + s;
  };
  for (int i = 0; i < n_train; ++i) {
    write_png_rgb(base / "train" / "good" / (name(i) + ".png"), render_toy(seed, 1, i, ToyDefect::kNone).clean);
  }
  for (int i = 0; i < n_normal; ++i) {
    write_png_rgb(base / "test" / "good" / (name(i) + ".png"), render_toy(seed, 2, i, ToyDefect::kNone).clean);
  }
  constexpr ToyDefect kinds[3] = {ToyDefect::kScratch, ToyDefect::kBlob, ToyDefect::kWedge};
  for (int i = 0; i < n_anomalous; ++i) {
    const ToyDefect d = kinds[i % 3];
    const auto r = render_toy(seed, 3, i, d);
    const std::string dir = to_string(d);
    write_png_rgb(base / "test" / dir / (name(i) + ".png"), r.defective);
    std::vector<std::uint8_t> m(r.mask.values().begin(), r.mask.values().end());
    for (auto& v : m) v = v ? 255 : 0;
    write_png_bytes(base / "ground_truth" / dir / (name(i) + "_mask.png"), m, kToySide, kToySide, 1);
  }
  DatasetSpec spec;
  spec.root = out;
  spec.layout = Layout::kToy;
  spec.categories = {kToyCategory};
  spec.split = Split::kTest;
  return spec;
}

}  // namespace cut::data
