#include "cut/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cut/core/error.hpp"
#include "cut/core/random.hpp"
#include "cut/vlad/container.hpp"

namespace cut::trainer {

void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw Error(ErrorCode::kInvalidArgument, "epochs must be >= 1");
  if (c.batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
  if (!std::isfinite(c.lr) || c.lr < 0.0) throw Error(ErrorCode::kInvalidArgument, "learning rate must be >= 0");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0) || !(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0) ||
      !(c.adam_eps > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "Adam betas must be in [0, 1) and eps > 0");
  }
  if (c.input_side != 0 && c.input_side < kMinImageSide) {
    throw Error(ErrorCode::kInvalidArgument, "input side must be 0 or >= " + std::to_string(kMinImageSide));
  }
  if (!std::isfinite(c.logit_scale) || c.logit_scale <= 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "logit scale must be finite and > 0");
  }
  losses::validate(c.loss);
}

double cosine_lr(double base_lr, int epoch, int epochs) {
  if (epochs <= 1) return base_lr;
  const double frac = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  if (frac >= 1.0) return 0.0;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

std::string to_jsonl(const EpochLog& e) {
  nlohmann::json j{{"epoch", e.epoch},     {"lr", e.lr},       {"focal", e.terms.focal},
                   {"bce", e.terms.bce},   {"dice", e.terms.dice}, {"total", e.terms.total}};
  return j.dump();
}

std::vector<std::vector<std::size_t>> stratified_batches(std::span<const int> labels, int batch_size,
                                                         std::uint64_t seed, int epoch) {
  if (batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
  std::vector<std::size_t> normals, anomalies;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 0 ? normals : anomalies).push_back(i);
  std::mt19937_64 rng(mix_seed(seed, 0xBA7C0000ull + static_cast<std::uint64_t>(epoch)));
  std::shuffle(normals.begin(), normals.end(), rng);
  std::shuffle(anomalies.begin(), anomalies.end(), rng);

  const std::size_t n = labels.size();
  const std::size_t n_batches = (n + batch_size - 1) / batch_size;
  std::vector<std::vector<std::size_t>> batches(n_batches);
  if (n_batches == 0) return batches;
  for (std::size_t i = 0; i < normals.size(); ++i) batches[i % n_batches].push_back(normals[i]);
  for (std::size_t b = normals.size(); b < n_batches && !normals.empty(); ++b) {
    batches[b].push_back(normals[b % normals.size()]);
  }
  std::size_t next = 0;
  for (auto& batch : batches) {
    while (batch.size() < static_cast<std::size_t>(batch_size) && next < anomalies.size()) {
      batch.push_back(anomalies[next++]);
    }
  }
  // Normals can crowd anomalies out of the fixed-size batches; the rest go
  // to the batches round-robin.
  for (std::size_t b = 0; next < anomalies.size(); b = (b + 1) % n_batches) batches[b].push_back(anomalies[next++]);
  return batches;
}

namespace {

std::vector<double> flatten(const vlad::FeatureAdapter& a) {
  std::vector<double> out;
  for (const auto& s : a.stages) {
    out.insert(out.end(), s.weight.begin(), s.weight.end());
    out.insert(out.end(), s.bias.begin(), s.bias.end());
  }
  return out;
}

void unflatten(std::span<const double> flat, vlad::FeatureAdapter& a) {
  std::size_t offset = 0;
  for (auto& s : a.stages) {
    if (offset + s.weight.size() + s.bias.size() > flat.size()) {
      throw Error(ErrorCode::kIo, "trainer state payload is too short for the adapter");
    }
    std::copy_n(flat.begin() + offset, s.weight.size(), s.weight.begin());
    offset += s.weight.size();
    std::copy_n(flat.begin() + offset, s.bias.size(), s.bias.begin());
    offset += s.bias.size();
  }
}

vlad::FeatureAdapter zeros_like(const vlad::FeatureAdapter& a) {
  vlad::FeatureAdapter z = a;
  for (auto& s : z.stages) {
    std::fill(s.weight.begin(), s.weight.end(), 0.0);
    std::fill(s.bias.begin(), s.bias.end(), 0.0);
  }
  return z;
}

}  // namespace

SampleGradient sample_gradient(const vlad::FeatureAdapter& adapter, const std::vector<Tensor3>& patches,
                               const vlad::TextEmbedding& text, int y_img, const Map2D& y_pix,
                               const TrainConfig& config) {
  if (patches.size() != adapter.stages.size()) throw Error(ErrorCode::kShapeMismatch, "stage count mismatch");
  const int rows = y_pix.rows();
  const int cols = y_pix.cols();
  const double n_stages = static_cast<double>(patches.size());
  const double scale = config.logit_scale;

  std::vector<Tensor3> raw, unit;
  std::vector<Map2D> probs;
  Map2D m(rows, cols, 0.0);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    raw.push_back(vlad::adapt_raw(adapter.stages[i], patches[i]));
    unit.push_back(vlad::normalize_rows(raw.back()));
    probs.push_back(vlad::vl_patch_probabilities(unit.back(), text, scale));
    const Map2D up = resize_bilinear(probs.back(), rows, cols);
    for (std::size_t p = 0; p < m.size(); ++p) m.values()[p] += up.values()[p] / n_stages;
  }
  const auto mv = m.values();
  const auto arg = static_cast<std::size_t>(std::max_element(mv.begin(), mv.end()) - mv.begin());
  const double p_img = mv[arg];

  auto lg = losses::total_loss_grad(y_img, p_img, y_pix, m, config.loss);
  lg.d_m_pix.values()[arg] += lg.d_p_img;

  SampleGradient out;
  out.terms = lg.terms;
  out.grad = zeros_like(adapter);
  const int d = adapter.dim;
  std::vector<double> dir(d);
  for (int k = 0; k < d; ++k) dir[k] = text.abnormal[k] - text.normal[k];
  std::vector<double> dn(d), df(d);

  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& st = adapter.stages[i];
    auto& g = out.grad.stages[i];
    const Tensor3& x = patches[i];
    const Map2D d_prob = resize_bilinear_adjoint(lg.d_m_pix, x.dim0(), x.dim1());
    for (int r = 0; r < x.dim0(); ++r) {
      for (int c = 0; c < x.dim1(); ++c) {
        const double p = probs[i](r, c);
        const double g_logit = d_prob(r, c) / n_stages * p * (1.0 - p) * scale;
        if (g_logit == 0.0) continue;
        double norm = 0.0, dot = 0.0;
        for (int k = 0; k < d; ++k) norm += raw[i](r, c, k) * raw[i](r, c, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        for (int k = 0; k < d; ++k) {
          dn[k] = g_logit * dir[k];
          dot += unit[i](r, c, k) * dn[k];
        }
        for (int k = 0; k < d; ++k) df[k] = (dn[k] - unit[i](r, c, k) * dot) / norm;
        const double* xv = &x.values()[(static_cast<std::size_t>(r) * x.dim1() + c) * st.in_dim];
        for (int o = 0; o < d; ++o) {
          if (df[o] == 0.0) continue;
          double* wrow = g.weight.data() + static_cast<std::size_t>(o) * st.in_dim;
          for (int k = 0; k < st.in_dim; ++k) wrow[k] += df[o] * xv[k];
          g.bias[o] += df[o];
        }
      }
    }
  }
  return out;
}

namespace {

constexpr int kStateVersion = 1;

nlohmann::json config_fingerprint(const TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"lr", c.lr},
          {"input_side", c.input_side}, {"logit_scale", c.logit_scale}, {"seed", c.seed},
          {"beta", c.loss.beta},        {"omega", c.loss.omega}};
}

struct State {
  vlad::FeatureAdapter adapter;
  std::vector<double> m1, m2;
  std::uint64_t step = 0;
  int epochs_completed = 0;
  std::vector<EpochLog> log;
};

void save_state(const State& s, const TrainConfig& config, const std::string& path) {
  nlohmann::json header{{"kind", "train_state"},
                        {"version", kStateVersion},
                        {"epochs_completed", s.epochs_completed},
                        {"step", s.step},
                        {"config", config_fingerprint(config)}};
  header["log"] = nlohmann::json::array();
  for (const auto& e : s.log) header["log"].push_back(nlohmann::json::parse(to_jsonl(e)));
  std::vector<double> payload = flatten(s.adapter);
  payload.insert(payload.end(), s.m1.begin(), s.m1.end());
  payload.insert(payload.end(), s.m2.begin(), s.m2.end());
  vlad::write_container(path, header, payload);
}

void load_state(State& s, const TrainConfig& config, const std::string& path) {
  const auto c = vlad::read_container(path);
  if (c.header.value("kind", std::string{}) != "train_state" || c.header.value("version", 0) != kStateVersion) {
    throw Error(ErrorCode::kIo, path + " is not a trainer state file");
  }
  if (c.header.at("config") != config_fingerprint(config)) {
    throw Error(ErrorCode::kPrecondition, path + " was written with a different training config");
  }
  const std::size_t n = s.m1.size();
  if (c.payload.size() != 3 * n) throw Error(ErrorCode::kIo, path + ": state payload size mismatch");
  const std::span<const double> all(c.payload);
  unflatten(all.subspan(0, n), s.adapter);
  s.m1.assign(all.begin() + n, all.begin() + 2 * n);
  s.m2.assign(all.begin() + 2 * n, all.end());
  s.step = c.header.at("step").get<std::uint64_t>();
  s.epochs_completed = c.header.at("epochs_completed").get<int>();
  s.log.clear();
  for (const auto& j : c.header.at("log")) {
    EpochLog e;
    e.epoch = j.at("epoch").get<int>();
    e.lr = j.at("lr").get<double>();
    e.terms = {j.at("focal").get<double>(), j.at("bce").get<double>(), j.at("dice").get<double>(),
               j.at("total").get<double>()};
    s.log.push_back(e);
  }
}

void write_log(const std::vector<EpochLog>& log, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write training log " + path);
  for (const auto& e : log) out << to_jsonl(e) << '\n';
}

bool finite_terms(const losses::LossTerms& t) {
  return std::isfinite(t.focal) && std::isfinite(t.bce) && std::isfinite(t.dice) && std::isfinite(t.total);
}

}  // namespace

TrainResult train(std::span<const AnnotatedSample> dataset, const vlad::FeatureExtractor& extractor,
                  const TrainConfig& config, const TrainOptions& options) {
  validate(config);
  bool has_normal = false, has_anomaly = false;
  for (const auto& s : dataset) (s.y_img == 0 ? has_normal : has_anomaly) = true;
  if (!has_normal || !has_anomaly) {
    throw Error(ErrorCode::kPrecondition, "training needs both normal and anomalous samples");
  }

  // The extractor is frozen, so its tokens are computed once.
  std::vector<std::vector<Tensor3>> patches;
  std::vector<int> labels;
  std::map<std::string, vlad::TextEmbedding> texts;
  patches.reserve(dataset.size());
  for (const auto& s : dataset) {
    validate_annotated(s);
    patches.push_back(extractor.patch_tokens(vlad::prepare_input(s.image, config.input_side)));
    labels.push_back(s.y_img);
    if (!texts.contains(s.image.category)) texts.emplace(s.image.category, extractor.text_embed_for(s.image.category));
  }

  State state;
  state.adapter = vlad::init_adapter(extractor.stages(), extractor.embed_dim(), config.seed);
  state.m1.assign(flatten(state.adapter).size(), 0.0);
  state.m2 = state.m1;
  if (options.resume && !options.state_path.empty() && std::filesystem::exists(options.state_path)) {
    load_state(state, config, options.state_path);
  }

  auto params = flatten(state.adapter);
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  for (int epoch = state.epochs_completed; epoch < config.epochs; ++epoch) {
    if (options.stop_after >= 0 && epoch >= options.stop_after) break;
    const double lr = cosine_lr(config.lr, epoch, config.epochs);
    losses::LossTerms sum;
    std::size_t seen = 0;
    for (const auto& batch : stratified_batches(labels, config.batch_size, config.seed, epoch)) {
      std::vector<double> grad(params.size(), 0.0);
      for (std::size_t idx : batch) {
        const auto& s = dataset[idx];
        auto sg = sample_gradient(state.adapter, patches[idx], texts.at(s.image.category), s.y_img, s.y_pix, config);
        if (!finite_terms(sg.terms)) {
          throw Error(ErrorCode::kDiverged, "loss became non-finite in epoch " + std::to_string(epoch) +
                                                (options.state_path.empty() ? std::string{}
                                                                            : "; last good state kept in " +
                                                                                  options.state_path));
        }
        const auto g = flatten(sg.grad);
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
        sum.focal += sg.terms.focal;
        sum.bce += sg.terms.bce;
        sum.dice += sg.terms.dice;
        sum.total += sg.terms.total;
        ++seen;
      }
      ++state.step;
      const double inv = 1.0 / static_cast<double>(batch.size());
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
      for (std::size_t k = 0; k < params.size(); ++k) {
        const double gk = grad[k] * inv;
        state.m1[k] = b1 * state.m1[k] + (1.0 - b1) * gk;
        state.m2[k] = b2 * state.m2[k] + (1.0 - b2) * gk * gk;
        params[k] -= lr * (state.m1[k] / c1) / (std::sqrt(state.m2[k] / c2) + config.adam_eps);
      }
      if (!std::all_of(params.begin(), params.end(), [](double v) { return std::isfinite(v); })) {
        throw Error(ErrorCode::kDiverged, "adapter parameters became non-finite in epoch " + std::to_string(epoch));
      }
      unflatten(params, state.adapter);
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    const double inv_seen = 1.0 / static_cast<double>(std::max<std::size_t>(seen, 1));
    entry.terms = {sum.focal * inv_seen, sum.bce * inv_seen, sum.dice * inv_seen, sum.total * inv_seen};
    state.log.push_back(entry);
    state.epochs_completed = epoch + 1;
    if (!options.state_path.empty()) save_state(state, config, options.state_path);
  }
  if (!options.log_path.empty()) write_log(state.log, options.log_path);

  TrainResult result;
  result.adapter = state.adapter;
  result.log = state.log;
  result.epochs_completed = state.epochs_completed;
  return result;
}

vlad::MemoryBank build_bank(std::span<const ImageSample> normals, const vlad::FeatureExtractor& extractor,
                            const vlad::FeatureAdapter& adapter, int input_side) {
  if (normals.empty()) throw Error(ErrorCode::kPrecondition, "memory bank needs at least one normal image");
  vlad::check_compatible(adapter, extractor);
  std::vector<std::string> ids;
  for (const auto& s : extractor.stages()) ids.push_back(s.id);
  vlad::MemoryBank bank;
  for (const auto& image : normals) {
    vlad::append_to_bank(bank, vlad::adapt(adapter, extractor.patch_tokens(vlad::prepare_input(image, input_side))),
                         ids);
  }
  return bank;
}

Scorer detector_scorer(const vlad::FeatureExtractor& extractor, const vlad::FeatureAdapter& adapter,
                       const vlad::MemoryBank* bank, const vlad::DetectorConfig& config) {
  return [&extractor, &adapter, bank, config, cache = std::map<std::string, vlad::TextEmbedding>{}](
             const ImageSample& image) mutable {
    auto it = cache.find(image.category);
    if (it == cache.end()) it = cache.emplace(image.category, extractor.text_embed_for(image.category)).first;
    auto r = vlad::detect(image, extractor, adapter, bank, it->second, config);
    return Score{r.s_img, std::move(r.m_pix)};
  };
}

metrics::CategoryMetrics evaluate(const Scorer& scorer, std::span<const TestSample> samples) {
  if (samples.empty()) throw Error(ErrorCode::kPrecondition, "evaluation needs at least one test sample");
  metrics::EvalInputs inputs;
  for (const auto& s : samples) {
    Score sc = scorer(s.image);
    if (sc.pixels.rows() != s.mask.rows() || sc.pixels.cols() != s.mask.cols()) {
      throw Error(ErrorCode::kShapeMismatch, "score map shape does not match the ground-truth mask");
    }
    inputs.image_scores.push_back(sc.image);
    inputs.image_labels.push_back(s.y_img);
    inputs.pixel_scores.push_back(std::move(sc.pixels));
    inputs.gt_masks.push_back(s.mask);
  }
  return metrics::evaluate_category(inputs);
}

}  // namespace cut::trainer
