#include "cut/vlad/extractor.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cut/core/error.hpp"
#include "cut/core/random.hpp"
#include "prompt_resource.hpp"

namespace cut::vlad {

namespace {

void normalize_in_place(std::vector<double>& v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (double& x : v) x /= norm;
  }
}

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u) || ch == '-' || ch == '\'') {
      current.push_back(static_cast<char>(std::tolower(u)));
    } else if (!current.empty()) {
      words.push_back(current);
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(current);
  return words;
}

}  // namespace

PromptEnsemble parse_prompt_ensemble(const std::string& json_text) {
  PromptEnsemble out;
  try {
    const auto j = nlohmann::json::parse(json_text);
    out.version = j.at("version").get<int>();
    out.normal = j.at("normal").get<std::vector<std::string>>();
    out.abnormal = j.at("abnormal").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("bad prompt ensemble: ") + e.what());
  }
  if (out.normal.empty() || out.abnormal.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "prompt ensemble needs normal and abnormal prompts");
  }
  return out;
}

const PromptEnsemble& default_prompt_ensemble() {
  static const PromptEnsemble ensemble = parse_prompt_ensemble(detail::kPromptEnsembleJson);
  return ensemble;
}

std::vector<std::string> instantiate(const std::vector<std::string>& templates, const std::string& category) {
  std::vector<std::string> out;
  out.reserve(templates.size());
  for (std::string text : templates) {
    for (auto pos = text.find("[cls]"); pos != std::string::npos; pos = text.find("[cls]", pos + category.size())) {
      text.replace(pos, 5, category);
    }
    out.push_back(std::move(text));
  }
  return out;
}

Tensor3 FeatureExtractor::patch_tokens(const ImageSample& image, int stage) const {
  const auto all = patch_tokens(image);
  if (stage < 0 || stage >= static_cast<int>(all.size())) {
    throw Error(ErrorCode::kRange, "stage index " + std::to_string(stage) + " out of range");
  }
  return all[stage];
}

TextEmbedding FeatureExtractor::text_embed_for(const std::string& category, const PromptEnsemble& ensemble) const {
  return text_embed(instantiate(ensemble.normal, category), instantiate(ensemble.abnormal, category));
}

void validate(const ToyExtractorConfig& c) {
  if (c.grid < 1 || c.stages < 1 || c.channels < 1 || c.embed_dim < 1) {
    throw Error(ErrorCode::kInvalidArgument, "toy extractor dimensions must be positive");
  }
  if (!std::isfinite(c.position_gain) || !std::isfinite(c.projection_gain) || c.projection_gain <= 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "toy extractor gains must be finite, projection gain > 0");
  }
}

namespace {
// own cell stats, pooled stats, (row, col)
constexpr int kToyInputDim = 2 * ToyExtractor::kCellFeatures + 2;
}  // namespace

ToyExtractor::ToyExtractor(ToyExtractorConfig config) : config_(config) {
  validate(config_);
  std::mt19937_64 rng(mix_seed(config_.weight_seed, 0x70F));
  const double wstd = config_.projection_gain / std::sqrt(static_cast<double>(kToyInputDim));
  for (int s = 0; s < config_.stages; ++s) {
    stages_.push_back({"stage" + std::to_string(s), config_.grid, config_.grid, config_.channels});
    weights_.push_back(gaussian_vector(rng, static_cast<std::size_t>(config_.channels) * kToyInputDim, wstd));
    biases_.push_back(gaussian_vector(rng, config_.channels, 0.1));
  }
}

Tensor3 ToyExtractor::cell_features(const ImageSample& image) const {
  validate_sample(image);
  const int h = image.height();
  const int w = image.width();
  const Map2D luma = to_grayscale(image.pixels);
  const int g = config_.grid;
  Tensor3 out(g, g, kCellFeatures);
  for (int gr = 0; gr < g; ++gr) {
    const int r0 = gr * h / g;
    const int r1 = std::max(r0 + 1, (gr + 1) * h / g);
    for (int gc = 0; gc < g; ++gc) {
      const int c0 = gc * w / g;
      const int c1 = std::max(c0 + 1, (gc + 1) * w / g);
      double rgb[3] = {0.0, 0.0, 0.0};
      double sum_l = 0.0, sum_l2 = 0.0, lo = 1.0, hi = 0.0;
      double gx = 0.0, gy = 0.0;
      int ngx = 0, ngy = 0;
      for (int r = r0; r < r1; ++r) {
        for (int c = c0; c < c1; ++c) {
          for (int k = 0; k < 3; ++k) rgb[k] += image.pixels(r, c, k);
          const double l = luma(r, c);
          sum_l += l;
          sum_l2 += l * l;
          lo = std::min(lo, l);
          hi = std::max(hi, l);
          if (c + 1 < w) {
            gx += std::abs(luma(r, c + 1) - l);
            ++ngx;
          }
          if (r + 1 < h) {
            gy += std::abs(luma(r + 1, c) - l);
            ++ngy;
          }
        }
      }
      const double n = static_cast<double>((r1 - r0) * (c1 - c0));
      const double mean_l = sum_l / n;
      const double var_l = std::max(0.0, sum_l2 / n - mean_l * mean_l);
      for (int k = 0; k < 3; ++k) out(gr, gc, k) = 2.0 * (rgb[k] / n - 0.5);
      out(gr, gc, 3) = 4.0 * std::sqrt(var_l);
      out(gr, gc, 4) = 8.0 * (ngx > 0 ? gx / ngx : 0.0);
      out(gr, gc, 5) = 8.0 * (ngy > 0 ? gy / ngy : 0.0);
      out(gr, gc, 6) = 2.0 * (lo - 0.5);
      out(gr, gc, 7) = 2.0 * (hi - 0.5);
    }
  }
  return out;
}

std::vector<Tensor3> ToyExtractor::patch_tokens(const ImageSample& image) const {
  const Tensor3 cells = cell_features(image);
  const int g = config_.grid;
  const int f = kCellFeatures;
  std::vector<Tensor3> out;
  out.reserve(stages_.size());
  std::vector<double> input(kToyInputDim);
  for (int s = 0; s < config_.stages; ++s) {
    const auto& wt = weights_[s];
    const auto& b = biases_[s];
    Tensor3 tokens(g, g, config_.channels);
    for (int r = 0; r < g; ++r) {
      for (int c = 0; c < g; ++c) {
        std::fill(input.begin(), input.end(), 0.0);
        for (int k = 0; k < f; ++k) input[k] = cells(r, c, k);
        int count = 0;
        for (int rr = std::max(0, r - s); rr <= std::min(g - 1, r + s); ++rr) {
          for (int cc = std::max(0, c - s); cc <= std::min(g - 1, c + s); ++cc) {
            for (int k = 0; k < f; ++k) input[f + k] += cells(rr, cc, k);
            ++count;
          }
        }
        for (int k = 0; k < f; ++k) input[f + k] /= count;
        const double centre = 0.5 * (g - 1);
        input[2 * f] = config_.position_gain * (r - centre) / std::max(centre, 0.5);
        input[2 * f + 1] = config_.position_gain * (c - centre) / std::max(centre, 0.5);
        for (int o = 0; o < config_.channels; ++o) {
          double acc = b[o];
          const double* row = wt.data() + static_cast<std::size_t>(o) * kToyInputDim;
          for (int k = 0; k < kToyInputDim; ++k) acc += row[k] * input[k];
          tokens(r, c, o) = std::tanh(acc);
        }
      }
    }
    out.push_back(std::move(tokens));
  }
  return out;
}

std::vector<double> ToyExtractor::embed_prompt(const std::string& prompt) const {
  std::vector<double> v(config_.embed_dim, 0.0);
  for (const auto& word : words_of(prompt)) {
    std::mt19937_64 rng(mix_seed(config_.weight_seed, fnv1a(word)));
    const auto wv = gaussian_vector(rng, config_.embed_dim);
    for (int k = 0; k < config_.embed_dim; ++k) v[k] += wv[k];
  }
  normalize_in_place(v);
  return v;
}

TextEmbedding ToyExtractor::text_embed(const std::vector<std::string>& normal_prompts,
                                       const std::vector<std::string>& abnormal_prompts) const {
  if (normal_prompts.empty() || abnormal_prompts.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "text_embed needs at least one prompt per class");
  }
  auto mean_of = [&](const std::vector<std::string>& prompts) {
    std::vector<double> acc(config_.embed_dim, 0.0);
    for (const auto& p : prompts) {
      const auto e = embed_prompt(p);
      for (int k = 0; k < config_.embed_dim; ++k) acc[k] += e[k];
    }
    normalize_in_place(acc);
    return acc;
  };
  return {mean_of(normal_prompts), mean_of(abnormal_prompts)};
}

std::vector<double> ToyExtractor::image_token(const ImageSample& image) const {
  validate_sample(image);
  const auto text = text_embed_for(image.category);
  std::vector<double> token(config_.embed_dim);
  for (int k = 0; k < config_.embed_dim; ++k) token[k] = text.normal[k] + text.abnormal[k];
  normalize_in_place(token);
  return token;
}

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& selector, const std::string& cache_dir) {
  if (selector == "toy" || selector.rfind("toy:", 0) == 0) {
    ToyExtractorConfig config;
    std::istringstream in(selector.size() > 4 ? selector.substr(4) : std::string{});
    std::string item;
    while (std::getline(in, item, ',')) {
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorCode::kInvalidArgument, "toy extractor option '" + item + "' is not key=value");
      }
      const std::string key = item.substr(0, eq);
      const std::string value = item.substr(eq + 1);
      try {
        if (key == "grid") config.grid = std::stoi(value);
        else if (key == "stages") config.stages = std::stoi(value);
        else if (key == "channels") config.channels = std::stoi(value);
        else if (key == "dim") config.embed_dim = std::stoi(value);
        else if (key == "position") config.position_gain = std::stod(value);
        else if (key == "gain") config.projection_gain = std::stod(value);
        else if (key == "seed") config.weight_seed = std::stoull(value);
        else throw Error(ErrorCode::kInvalidArgument, "unknown toy extractor option '" + key + "'");
      } catch (const std::logic_error&) {
        throw Error(ErrorCode::kInvalidArgument, "bad value for toy extractor option '" + key + "'");
      }
    }
    return std::make_unique<ToyExtractor>(config);
  }
  throw Error(ErrorCode::kBackend, "extractor '" + selector + "' needs a pretrained two-tower model" +
                                       (cache_dir.empty() ? std::string{} : " (looked in " + cache_dir + ")") +
                                       "; only the toy extractor is built in");
}

}  // namespace cut::vlad
