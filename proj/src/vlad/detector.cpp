#include "cut/vlad/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "cut/core/error.hpp"
#include "cut/core/random.hpp"
#include "cut/vlad/container.hpp"

namespace cut::vlad {

FeatureAdapter init_adapter(const std::vector<StageInfo>& stages, int dim, std::uint64_t seed) {
  if (dim < 1 || stages.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "adapter needs a positive dimension and at least one stage");
  }
  FeatureAdapter adapter;
  adapter.dim = dim;
  std::mt19937_64 rng(mix_seed(seed, 0xADA));
  for (const auto& s : stages) {
    AdapterStage stage;
    stage.id = s.id;
    stage.in_dim = s.channels;
    stage.out_dim = dim;
    stage.weight = gaussian_vector(rng, static_cast<std::size_t>(dim) * s.channels,
                                   1.0 / std::sqrt(static_cast<double>(s.channels)));
    stage.bias.assign(dim, 0.0);
    adapter.stages.push_back(std::move(stage));
  }
  return adapter;
}

void check_compatible(const FeatureAdapter& adapter, const FeatureExtractor& extractor) {
  const auto& stages = extractor.stages();
  if (adapter.dim != extractor.embed_dim()) {
    throw Error(ErrorCode::kShapeMismatch, "adapter output dim " + std::to_string(adapter.dim) +
                                               " != text embedding dim " + std::to_string(extractor.embed_dim()));
  }
  if (adapter.stages.size() != stages.size()) {
    throw Error(ErrorCode::kShapeMismatch, "adapter stage count does not match the extractor");
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& a = adapter.stages[i];
    if (a.id != stages[i].id || a.in_dim != stages[i].channels || a.out_dim != adapter.dim ||
        a.weight.size() != static_cast<std::size_t>(a.out_dim) * a.in_dim ||
        a.bias.size() != static_cast<std::size_t>(a.out_dim)) {
      throw Error(ErrorCode::kShapeMismatch, "adapter stage '" + a.id + "' does not match extractor stage '" +
                                                 stages[i].id + "'");
    }
  }
}

Tensor3 adapt_raw(const AdapterStage& stage, const Tensor3& tokens) {
  if (tokens.dim2() != stage.in_dim) {
    throw Error(ErrorCode::kShapeMismatch, "patch token dim " + std::to_string(tokens.dim2()) + " != adapter input " +
                                               std::to_string(stage.in_dim));
  }
  Tensor3 out(tokens.dim0(), tokens.dim1(), stage.out_dim);
  for (int r = 0; r < tokens.dim0(); ++r) {
    for (int c = 0; c < tokens.dim1(); ++c) {
      const double* x = &tokens.values()[(static_cast<std::size_t>(r) * tokens.dim1() + c) * stage.in_dim];
      for (int o = 0; o < stage.out_dim; ++o) {
        const double* w = stage.weight.data() + static_cast<std::size_t>(o) * stage.in_dim;
        double acc = stage.bias[o];
        for (int k = 0; k < stage.in_dim; ++k) acc += w[k] * x[k];
        out(r, c, o) = acc;
      }
    }
  }
  return out;
}

Tensor3 normalize_rows(const Tensor3& tokens) {
  Tensor3 out = tokens;
  const int d = tokens.dim2();
  auto v = out.values();
  for (std::size_t base = 0; base < v.size(); base += d) {
    double norm = 0.0;
    for (int k = 0; k < d; ++k) norm += v[base + k] * v[base + k];
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (int k = 0; k < d; ++k) v[base + k] /= norm;
    }
  }
  return out;
}

std::vector<Tensor3> adapt(const FeatureAdapter& adapter, const std::vector<Tensor3>& patches) {
  if (patches.size() != adapter.stages.size()) {
    throw Error(ErrorCode::kShapeMismatch, "got " + std::to_string(patches.size()) + " stages, adapter has " +
                                               std::to_string(adapter.stages.size()));
  }
  std::vector<Tensor3> out;
  out.reserve(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) out.push_back(normalize_rows(adapt_raw(adapter.stages[i], patches[i])));
  return out;
}

bool MemoryBank::empty() const noexcept {
  return std::all_of(stages.begin(), stages.end(), [](const BankStage& s) { return s.count() == 0; });
}

void append_to_bank(MemoryBank& bank, const std::vector<Tensor3>& adapted, const std::vector<std::string>& ids) {
  if (adapted.size() != ids.size()) throw Error(ErrorCode::kShapeMismatch, "stage ids and tokens disagree");
  if (bank.stages.empty()) {
    for (std::size_t i = 0; i < adapted.size(); ++i) bank.stages.push_back({ids[i], adapted[i].dim2(), {}});
  }
  if (bank.stages.size() != adapted.size()) throw Error(ErrorCode::kShapeMismatch, "bank stage count mismatch");
  for (std::size_t i = 0; i < adapted.size(); ++i) {
    auto& stage = bank.stages[i];
    if (stage.id != ids[i] || stage.dim != adapted[i].dim2()) {
      throw Error(ErrorCode::kShapeMismatch, "bank stage '" + stage.id + "' does not match '" + ids[i] + "'");
    }
    const auto v = adapted[i].values();
    stage.rows.insert(stage.rows.end(), v.begin(), v.end());
  }
}

void validate(const DetectorConfig& config) {
  if (!std::isfinite(config.logit_scale) || config.logit_scale <= 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "logit_scale must be finite and > 0");
  }
  if (config.input_side != 0 && config.input_side < kMinImageSide) {
    throw Error(ErrorCode::kInvalidArgument, "input_side must be 0 or >= " + std::to_string(kMinImageSide));
  }
}

namespace {

// Two-class softmax abnormal entry from the logit difference, written so that
// large differences do not overflow.
double abnormal_probability(double logit_normal, double logit_abnormal) {
  const double d = logit_abnormal - logit_normal;
  if (d >= 0.0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

void check_text(const TextEmbedding& text, int dim) {
  if (text.dim() != dim || static_cast<int>(text.abnormal.size()) != dim) {
    throw Error(ErrorCode::kShapeMismatch, "feature dim " + std::to_string(dim) + " != text embedding dim " +
                                               std::to_string(text.dim()));
  }
}

}  // namespace

double vl_image_score(std::span<const double> f_img, const TextEmbedding& text, double scale) {
  check_text(text, static_cast<int>(f_img.size()));
  double ln = 0.0, la = 0.0;
  for (std::size_t k = 0; k < f_img.size(); ++k) {
    ln += f_img[k] * text.normal[k];
    la += f_img[k] * text.abnormal[k];
  }
  return abnormal_probability(scale * ln, scale * la);
}

Map2D vl_patch_probabilities(const Tensor3& adapted, const TextEmbedding& text, double scale) {
  check_text(text, adapted.dim2());
  Map2D out(adapted.dim0(), adapted.dim1());
  const int d = adapted.dim2();
  const auto v = adapted.values();
  for (int r = 0; r < adapted.dim0(); ++r) {
    for (int c = 0; c < adapted.dim1(); ++c) {
      out(r, c) = vl_image_score(v.subspan((static_cast<std::size_t>(r) * adapted.dim1() + c) * d, d), text, scale);
    }
  }
  return out;
}

Map2D vl_pixel_map(const std::vector<Tensor3>& adapted, const TextEmbedding& text, int rows, int cols,
                   double scale) {
  if (adapted.empty()) throw Error(ErrorCode::kInvalidArgument, "vl_pixel_map needs at least one stage");
  Map2D out(rows, cols, 0.0);
  for (const auto& stage : adapted) {
    const Map2D up = resize_bilinear(vl_patch_probabilities(stage, text, scale), rows, cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += up.values()[i];
  }
  return out;
}

Map2D vv_patch_scores(const Tensor3& adapted, const BankStage& bank) {
  if (bank.count() == 0) throw Error(ErrorCode::kInvalidArgument, "memory bank stage '" + bank.id + "' is empty");
  if (bank.dim != adapted.dim2()) {
    throw Error(ErrorCode::kShapeMismatch, "bank dim " + std::to_string(bank.dim) + " != token dim " +
                                               std::to_string(adapted.dim2()));
  }
  const int d = bank.dim;
  const std::size_t n = bank.count();
  Map2D out(adapted.dim0(), adapted.dim1());
  const auto v = adapted.values();
  for (int r = 0; r < adapted.dim0(); ++r) {
    for (int c = 0; c < adapted.dim1(); ++c) {
      const double* q = v.data() + (static_cast<std::size_t>(r) * adapted.dim1() + c) * d;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) {
        const double* b = bank.rows.data() + i * d;
        double dot = 0.0;
        for (int k = 0; k < d; ++k) dot += q[k] * b[k];
        best = std::max(best, dot);
      }
      out(r, c) = 1.0 - best;
    }
  }
  return out;
}

Map2D vv_pixel_map(const std::vector<Tensor3>& adapted, const MemoryBank& bank, int rows, int cols) {
  if (bank.empty()) throw Error(ErrorCode::kInvalidArgument, "memory bank is empty");
  if (bank.stages.size() != adapted.size()) {
    throw Error(ErrorCode::kShapeMismatch, "bank has " + std::to_string(bank.stages.size()) + " stages, query has " +
                                               std::to_string(adapted.size()));
  }
  Map2D out(rows, cols, 0.0);
  for (std::size_t i = 0; i < adapted.size(); ++i) {
    const Map2D up = resize_bilinear(vv_patch_scores(adapted[i], bank.stages[i]), rows, cols);
    for (std::size_t p = 0; p < out.size(); ++p) out.values()[p] += up.values()[p];
  }
  return out;
}

ImageSample prepare_input(const ImageSample& image, int input_side) {
  if (input_side == 0 || (image.height() == input_side && image.width() == input_side)) return image;
  ImageSample out = image;
  out.pixels = resize_image(image.pixels, input_side, input_side);
  for (double& v : out.pixels.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

DetectionResult detect(const ImageSample& image, const FeatureExtractor& extractor, const FeatureAdapter& adapter,
                       const MemoryBank* bank, const TextEmbedding& text, const DetectorConfig& config) {
  validate(config);
  validate_sample(image);
  check_compatible(adapter, extractor);
  const int rows = image.height();
  const int cols = image.width();
  const ImageSample input = prepare_input(image, config.input_side);

  auto f_img = extractor.image_token(input);
  {
    double norm = 0.0;
    for (double x : f_img) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (double& x : f_img) x /= norm;
    }
  }
  const auto adapted = adapt(adapter, extractor.patch_tokens(input));

  DetectionResult result;
  result.s_vl = vl_image_score(f_img, text, config.logit_scale);
  result.m_vl = vl_pixel_map(adapted, text, rows, cols, config.logit_scale);
  if (config.rescale_vl) {
    const double inv = 1.0 / static_cast<double>(adapted.size());
    for (double& v : result.m_vl.values()) v *= inv;
  }
  if (bank != nullptr && !bank->empty()) {
    result.m_vv = vv_pixel_map(adapted, *bank, rows, cols);
    result.s_vv = *std::max_element(result.m_vv.values().begin(), result.m_vv.values().end());
  } else {
    result.m_vv = Map2D(rows, cols, 0.0);
    result.s_vv = 0.0;
  }
  result.s_img = result.s_vl + result.s_vv;
  result.m_pix = result.m_vl;
  for (std::size_t i = 0; i < result.m_pix.size(); ++i) result.m_pix.values()[i] += result.m_vv.values()[i];
  return result;
}

namespace {

constexpr int kCheckpointVersion = 1;

void check_header(const nlohmann::json& h, const std::string& kind, const std::string& path) {
  if (h.value("kind", std::string{}) != kind) {
    throw Error(ErrorCode::kIo, path + " is not a " + kind + " checkpoint");
  }
  if (h.value("version", 0) != kCheckpointVersion) {
    throw Error(ErrorCode::kIo, path + ": unsupported checkpoint version");
  }
}

}  // namespace

void save_adapter(const FeatureAdapter& adapter, const std::string& path) {
  nlohmann::json header{{"kind", "adapter"}, {"version", kCheckpointVersion}, {"dim", adapter.dim}};
  header["stages"] = nlohmann::json::array();
  std::vector<double> payload;
  for (const auto& s : adapter.stages) {
    header["stages"].push_back({{"id", s.id}, {"in_dim", s.in_dim}, {"out_dim", s.out_dim}});
    payload.insert(payload.end(), s.weight.begin(), s.weight.end());
    payload.insert(payload.end(), s.bias.begin(), s.bias.end());
  }
  write_container(path, header, payload);
}

FeatureAdapter load_adapter(const std::string& path) {
  const auto c = read_container(path);
  check_header(c.header, "adapter", path);
  FeatureAdapter adapter;
  try {
    adapter.dim = c.header.at("dim").get<int>();
    std::size_t offset = 0;
    for (const auto& s : c.header.at("stages")) {
      AdapterStage stage;
      stage.id = s.at("id").get<std::string>();
      stage.in_dim = s.at("in_dim").get<int>();
      stage.out_dim = s.at("out_dim").get<int>();
      const std::size_t nw = static_cast<std::size_t>(stage.out_dim) * stage.in_dim;
      const std::size_t nb = static_cast<std::size_t>(stage.out_dim);
      if (offset + nw + nb > c.payload.size()) throw Error(ErrorCode::kIo, path + ": truncated adapter payload");
      stage.weight.assign(c.payload.begin() + offset, c.payload.begin() + offset + nw);
      stage.bias.assign(c.payload.begin() + offset + nw, c.payload.begin() + offset + nw + nb);
      offset += nw + nb;
      adapter.stages.push_back(std::move(stage));
    }
    if (offset != c.payload.size()) throw Error(ErrorCode::kIo, path + ": trailing adapter payload");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIo, path + ": bad adapter header: " + e.what());
  }
  return adapter;
}

void save_bank(const MemoryBank& bank, const std::string& path) {
  nlohmann::json header{{"kind", "bank"}, {"version", kCheckpointVersion}};
  header["stages"] = nlohmann::json::array();
  std::vector<double> payload;
  for (const auto& s : bank.stages) {
    header["stages"].push_back({{"id", s.id}, {"dim", s.dim}, {"rows", s.count()}});
    payload.insert(payload.end(), s.rows.begin(), s.rows.end());
  }
  write_container(path, header, payload);
}

MemoryBank load_bank(const std::string& path) {
  const auto c = read_container(path);
  check_header(c.header, "bank", path);
  MemoryBank bank;
  try {
    std::size_t offset = 0;
    for (const auto& s : c.header.at("stages")) {
      BankStage stage;
      stage.id = s.at("id").get<std::string>();
      stage.dim = s.at("dim").get<int>();
      const std::size_t n = s.at("rows").get<std::size_t>() * stage.dim;
      if (offset + n > c.payload.size()) throw Error(ErrorCode::kIo, path + ": truncated bank payload");
      stage.rows.assign(c.payload.begin() + offset, c.payload.begin() + offset + n);
      offset += n;
      bank.stages.push_back(std::move(stage));
    }
    if (offset != c.payload.size()) throw Error(ErrorCode::kIo, path + ": trailing bank payload");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIo, path + ": bad bank header: " + e.what());
  }
  return bank;
}

}  // namespace cut::vlad
