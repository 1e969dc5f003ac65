#include "checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include "cut/attention/engine.hpp"
#include "cut/core/error.hpp"
#include "cut/core/random.hpp"
#include "cut/diffusion/toy_backbone.hpp"
#include "cut/metrics/metrics.hpp"
#include "cut/vlad/detector.hpp"
#include "support.hpp"

namespace cut::test {

namespace {

double latt_value(const diffusion::Backbone& bb, const LatentState& z, const PromptSpec& prompt,
                  const BinaryMask& mask16) {
  const auto abar = attention::aggregate_attention(bb.capture_attention(z, prompt));
  return attention::latt(abar, prompt.anomaly_token_indices, mask16);
}

}  // namespace

GradientCheck latt_gradient_check(std::uint64_t seed, int coordinates, double h, double floor) {
  const ImageSample image = toy_image(seed);
  diffusion::ToyBackbone bb;
  std::vector<ImageSample> refs{image};
  bb.fit_prior(std::span<const ImageSample>(refs));
  generation::GenerationConfig cfg;
  cfg.seed = seed;
  const PromptSpec prompt = bb.make_prompt(cfg.prompt_template, image.category, cfg.anomaly_word);
  const LatentState z = generation::conditioning_start(image, cfg, bb);
  const ForegroundMask mask = generation::foreground_mask(image, bb.latent_side());

  const Tensor3 grad = diffusion::grad_latt_wrt_latent(
      bb, z, prompt, attention::make_latt_loss(prompt.anomaly_token_indices, mask.mask16));

  GradientCheck out;
  for (double g : grad.values()) out.max_abs_grad = std::max(out.max_abs_grad, std::abs(g));
  std::mt19937_64 rng(mix_seed(seed, 0x6AD));
  std::uniform_int_distribution<std::size_t> pick(0, grad.size() - 1);
  for (int i = 0; i < coordinates; ++i) {
    const std::size_t k = pick(rng);
    LatentState plus = z, minus = z;
    plus.z[k] += h;
    minus.z[k] -= h;
    const double numeric = (latt_value(bb, plus, prompt, mask.mask16) - latt_value(bb, minus, prompt, mask.mask16)) / (2 * h);
    const double denom = std::max({std::abs(grad[k]), std::abs(numeric), floor * out.max_abs_grad});
    const double rel = denom == 0.0 ? 0.0 : std::abs(grad[k] - numeric) / denom;
    out.max_rel_error = std::max(out.max_rel_error, rel);
    ++out.coordinates;
  }
  return out;
}

MaskedInvariance masked_invariance_trials(int calls, std::uint64_t seed) {
  diffusion::ToyBackbone bb;
  std::vector<ImageSample> refs{toy_image(seed)};
  bb.fit_prior(std::span<const ImageSample>(refs));
  const PromptSpec prompt = bb.make_prompt(generation::kDefaultPromptTemplate, "disk", generation::kDefaultAnomalyWord);
  const int P = bb.latent_side();
  std::mt19937_64 rng(mix_seed(seed, 0x3A5C));
  std::uniform_int_distribution<int> t_dist(1, bb.schedule().T());
  std::uniform_real_distribution<double> lambda_dist(0.0, 50.0);
  std::uniform_real_distribution<double> density(0.05, 0.95);
  std::uniform_int_distribution<int> window_dist(1, 40);

  MaskedInvariance out;
  for (int i = 0; i < calls; ++i) {
    LatentState z;
    z.z = random_tensor(rng, bb.latent_channels(), P, P, -2.0, 2.0);
    z.t = t_dist(rng);
    z.T = bb.schedule().T();
    ForegroundMask mask;
    mask.mask_lat = random_mask(rng, P, P, density(rng));
    mask.mask16 = random_mask(rng, 16, 16, density(rng));
    mask.mask16(8, 8) = 1;
    attention::SchedulerState state;
    state.lambda = lambda_dist(rng);
    state.t_start = bb.schedule().T();
    state.n_start = 1 + static_cast<int>(rng() % 40);
    const int window = window_dist(rng);
    const int step_index = static_cast<int>(rng() % window);
    const auto res = attention::optimize_step(bb, z, prompt, mask, state, {}, {}, step_index, window);
    bool bad = false, moved = false;
    for (int ch = 0; ch < z.z.dim0(); ++ch)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) {
          const double before = z.z(ch, y, x), after = res.z.z(ch, y, x);
          const bool same = std::memcmp(&before, &after, sizeof(double)) == 0;
          if (!mask.mask_lat(y, x) && !same) bad = true;
          if (mask.mask_lat(y, x) && !same) moved = true;
        }
    ++out.calls;
    out.violations += bad ? 1 : 0;
    out.moved += moved ? 1 : 0;
  }
  return out;
}

std::vector<PairedRun> optimization_pairs(int runs, generation::GenerationConfig config) {
  std::vector<PairedRun> out;
  const double lambda = config.lambda;
  for (int s = 0; s < runs; ++s) {
    const ImageSample image = toy_image(7, static_cast<std::size_t>(s));
    diffusion::ToyBackbone bb;
    std::vector<ImageSample> refs{image};
    bb.fit_prior(std::span<const ImageSample>(refs));
    config.seed = static_cast<std::uint64_t>(s);
    PairedRun run;
    config.lambda = 0.0;
    run.off = generation::generate(image, config, bb).final_in_mask_max;
    config.lambda = lambda;
    run.on = generation::generate(image, config, bb).final_in_mask_max;
    out.push_back(run);
  }
  return out;
}

PairedTest paired_t(const std::vector<PairedRun>& runs) {
  PairedTest out;
  const double n = static_cast<double>(runs.size());
  if (runs.size() < 2) throw Error(ErrorCode::kUndersized, "paired test needs two runs");
  for (const auto& r : runs) {
    out.mean_off += r.off / n;
    out.mean_on += r.on / n;
    out.wins += r.on > r.off ? 1 : 0;
  }
  out.mean_diff = out.mean_on - out.mean_off;
  double ss = 0.0;
  for (const auto& r : runs) ss += (r.on - r.off - out.mean_diff) * (r.on - r.off - out.mean_diff);
  const double se = std::sqrt(ss / (n - 1.0) / n);
  out.t = se == 0.0 ? (out.mean_diff > 0 ? INFINITY : 0.0) : out.mean_diff / se;
  return out;
}

double t_critical_95(int df) {
  static constexpr double kTable[] = {6.314, 2.920, 2.353, 2.132, 2.015, 1.943, 1.895, 1.860, 1.833, 1.812,
                                      1.796, 1.782, 1.771, 1.761, 1.753, 1.746, 1.740, 1.734, 1.729, 1.725,
                                      1.721, 1.717, 1.714, 1.711, 1.708, 1.706, 1.703, 1.701, 1.699, 1.697};
  if (df < 1 || df > 30) throw Error(ErrorCode::kRange, "t table covers df 1..30");
  return kTable[df - 1];
}

double brute_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[i] != 1 || labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) good += 1.0;
      else if (scores[i] == scores[j]) good += 0.5;
    }
  return good / pairs;
}

double brute_max_f1(const std::vector<double>& scores, const std::vector<int>& labels) {
  double best = 0.0;
  for (double th : scores) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool pred = scores[i] >= th;
      if (pred && labels[i]) tp += 1;
      if (pred && !labels[i]) fp += 1;
      if (!pred && labels[i]) fn += 1;
    }
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp / (tp + fn);
    if (precision + recall > 0) best = std::max(best, 2 * precision * recall / (precision + recall));
  }
  return best;
}

Grid<int> brute_components(const BinaryMask& mask, int* count) {
  Grid<int> lab(mask.rows(), mask.cols(), 0);
  int next = 0;
  for (int r = 0; r < mask.rows(); ++r)
    for (int c = 0; c < mask.cols(); ++c) {
      if (!mask(r, c) || lab(r, c)) continue;
      ++next;
      std::vector<std::pair<int, int>> stack{{r, c}};
      lab(r, c) = next;
      while (!stack.empty()) {
        const auto [y, x] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= mask.rows() || xx >= mask.cols()) continue;
            if (mask(yy, xx) && !lab(yy, xx)) {
              lab(yy, xx) = next;
              stack.push_back({yy, xx});
            }
          }
      }
    }
  if (count) *count = next;
  return lab;
}

double brute_pro(const std::vector<Map2D>& maps, const std::vector<BinaryMask>& masks, std::vector<double> thresholds,
                 double fpr_limit) {
  std::vector<Grid<int>> labels;
  std::vector<int> counts;
  double normals = 0;
  for (const auto& m : masks) {
    int n = 0;
    labels.push_back(brute_components(m, &n));
    counts.push_back(n);
    for (auto v : m.values()) normals += v ? 0 : 1;
  }
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
  for (double th : thresholds) {
    double fp = 0, overlap = 0;
    int regions = 0;
    for (std::size_t k = 0; k < maps.size(); ++k) {
      for (int id = 1; id <= counts[k]; ++id) {
        double size = 0, hit = 0;
        for (int r = 0; r < maps[k].rows(); ++r)
          for (int c = 0; c < maps[k].cols(); ++c)
            if (labels[k](r, c) == id) {
              size += 1;
              hit += maps[k](r, c) >= th ? 1 : 0;
            }
        overlap += hit / size;
        ++regions;
      }
      for (int r = 0; r < maps[k].rows(); ++r)
        for (int c = 0; c < maps[k].cols(); ++c)
          if (!masks[k](r, c) && maps[k](r, c) >= th) fp += 1;
    }
    curve.push_back({fp / normals, overlap / regions});
  }
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    auto [x0, y0] = curve[i - 1];
    auto [x1, y1] = curve[i];
    if (x0 >= fpr_limit) break;
    if (x1 > fpr_limit) {
      y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
      x1 = fpr_limit;
    }
    area += 0.5 * (y0 + y1) * (x1 - x0);
  }
  return area / fpr_limit;
}

std::vector<double> distinct_scores(const std::vector<Map2D>& maps) {
  std::set<double> s;
  for (const auto& m : maps) s.insert(m.values().begin(), m.values().end());
  return {s.begin(), s.end()};
}

MetricOracleReport metric_oracle_trials(int instances, std::uint64_t seed) {
  MetricOracleReport out;
  std::mt19937_64 rng(mix_seed(seed, 0x3E7));
  std::uniform_int_distribution<int> n_dist(2, 200);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int inst = 0; inst < instances; ++inst) {
    const bool ties = inst % 3 == 0;
    const int n = n_dist(rng);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      labels[i] = u(rng) < 0.4 ? 1 : 0;
      scores[i] = ties ? std::floor(u(rng) * 8) / 8 : u(rng) + 0.3 * labels[i];
    }
    labels[0] = 1;
    labels[1] = 0;
    out.auroc_dev = std::max(out.auroc_dev, std::abs(metrics::auroc(scores, labels) - brute_auroc(scores, labels)));
    out.f1_dev = std::max(out.f1_dev, std::abs(metrics::max_f1(scores, labels) - brute_max_f1(scores, labels)));

    const int n_maps = 1 + inst % 3;
    std::vector<Map2D> maps;
    std::vector<BinaryMask> masks;
    for (int k = 0; k < n_maps; ++k) {
      BinaryMask m(16, 16, 0);
      const int blobs = 1 + static_cast<int>(rng() % 3);
      for (int b = 0; b < blobs; ++b) {
        const int y = static_cast<int>(rng() % 13), x = static_cast<int>(rng() % 13);
        const int h = 1 + static_cast<int>(rng() % 4), w = 1 + static_cast<int>(rng() % 4);
        for (int r = y; r < std::min(16, y + h); ++r)
          for (int c = x; c < std::min(16, x + w); ++c) m(r, c) = 1;
      }
      Map2D s(16, 16);
      for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) {
          const double v = u(rng) + 0.4 * m(r, c);
          s(r, c) = ties ? std::floor(v * 10) / 10 : v;
        }
      maps.push_back(std::move(s));
      masks.push_back(std::move(m));
    }
    const double got = metrics::pro(maps, masks, 0.3);
    out.pro_dev = std::max(out.pro_dev, std::abs(got - brute_pro(maps, masks, distinct_scores(maps), 0.3)));
    ++out.instances;
  }
  return out;
}

namespace {

Tensor3 random_unit_rows(std::mt19937_64& rng, int rows, int cols, int dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor3 t(rows, cols, dim);
  for (double& v : t.values()) v = n(rng);
  return vlad::normalize_rows(t);
}

}  // namespace

VladAlgebra vlad_algebra(int trials, std::uint64_t seed) {
  VladAlgebra out;
  std::mt19937_64 rng(seed);
  const std::vector<std::string> ids{"s0", "s1"};
  for (int trial = 0; trial < trials; ++trial) {
    const int dim = 4 + static_cast<int>(rng() % 13);
    const std::vector<Tensor3> query{random_unit_rows(rng, 4, 4, dim), random_unit_rows(rng, 8, 8, dim)};
    vlad::MemoryBank bank;
    vlad::append_to_bank(bank, {random_unit_rows(rng, 1, 1 + rng() % 6, dim), random_unit_rows(rng, 1, 1 + rng() % 6, dim)},
                         ids);
    const int side = 16 + static_cast<int>(rng() % 17);
    const Map2D before = vlad::vv_pixel_map(query, bank, side, side);
    vlad::append_to_bank(bank, {random_unit_rows(rng, 1, 1 + rng() % 10, dim), random_unit_rows(rng, 2, 3, dim)}, ids);
    const Map2D after = vlad::vv_pixel_map(query, bank, side, side);
    for (std::size_t i = 0; i < before.size(); ++i)
      out.max_increase = std::max(out.max_increase, after.values()[i] - before.values()[i]);
    ++out.trials;
  }

  const vlad::ToyExtractor extractor;
  const auto adapter = vlad::init_adapter(extractor.stages(), extractor.embed_dim(), seed);
  const auto text = extractor.text_embed_for(data::kToyCategory);
  vlad::DetectorConfig config;
  config.input_side = data::kToySide;
  const ImageSample image = toy_image(seed, 0, data::ToyDefect::kScratch);

  // VL-only path assembled from the public pieces
  const ImageSample input = vlad::prepare_input(image, config.input_side);
  auto f_img = extractor.image_token(input);
  double norm = 0.0;
  for (double x : f_img) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& x : f_img) x /= norm;
  const auto adapted = vlad::adapt(adapter, extractor.patch_tokens(input));
  const double s_vl = vlad::vl_image_score(f_img, text, config.logit_scale);
  Map2D m_vl = vlad::vl_pixel_map(adapted, text, image.height(), image.width(), config.logit_scale);
  for (double& v : m_vl.values()) v *= 1.0 / static_cast<double>(adapted.size());

  const auto none = vlad::detect(image, extractor, adapter, nullptr, text, config);
  const vlad::MemoryBank empty;
  const auto with_empty = vlad::detect(image, extractor, adapter, &empty, text, config);
  auto same_bits = [](const Map2D& a, const Map2D& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
  };
  out.empty_bank_bitwise = std::memcmp(&none.s_img, &s_vl, sizeof(double)) == 0 && same_bits(none.m_pix, m_vl) &&
                           std::memcmp(&with_empty.s_img, &s_vl, sizeof(double)) == 0 &&
                           same_bits(with_empty.m_pix, m_vl);

  vlad::MemoryBank self;
  std::vector<std::string> stage_ids;
  for (const auto& s : extractor.stages()) stage_ids.push_back(s.id);
  vlad::append_to_bank(self, adapted, stage_ids);
  const auto matched = vlad::detect(image, extractor, adapter, &self, text, config);
  out.self_match_max = *std::max_element(matched.m_vv.values().begin(), matched.m_vv.values().end());
  return out;
}

}  // namespace cut::test
