#include "cut/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cut/core/error.hpp"

namespace cut::metrics {

namespace {

void check_pair(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::kShapeMismatch, "scores and labels differ in length");
  for (double s : scores)
    if (!std::isfinite(s)) throw Error(ErrorCode::kNonFinite, "non-finite score");
  for (int l : labels)
    if (l != 0 && l != 1) throw Error(ErrorCode::kRange, "labels must be 0 or 1");
}

std::vector<std::size_t> order_descending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_pair(scores, labels);
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]]) {
        rank_sum += mid;
        pos += 1.0;
      } else {
        neg += 1.0;
      }
    }
    i = j;
  }
  if (pos == 0.0 || neg == 0.0) throw Error(ErrorCode::kPrecondition, "AUROC needs both classes");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double max_f1(std::span<const double> scores, std::span<const int> labels) {
  check_pair(scores, labels);
  const double P = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  if (P == 0.0) throw Error(ErrorCode::kPrecondition, "max-F1 needs at least one positive");
  const auto idx = order_descending(scores);
  double tp = 0.0, fp = 0.0, best = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp) += 1.0;
      ++j;
    }
    best = std::max(best, 2.0 * tp / (tp + fp + P));
    i = j;
  }
  return best;
}

double f1_at(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_pair(scores, labels);
  double tp = 0.0, fp = 0.0, P = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    P += labels[i];
    if (scores[i] >= threshold) (labels[i] ? tp : fp) += 1.0;
  }
  if (P == 0.0) throw Error(ErrorCode::kPrecondition, "F1 needs at least one positive");
  return 2.0 * tp / (tp + fp + P);
}

Grid<int> label_components(const BinaryMask& mask, int* count) {
  Grid<int> labels(mask.rows(), mask.cols(), 0);
  int next = 0;
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < mask.rows(); ++r) {
    for (int c = 0; c < mask.cols(); ++c) {
      if (!mask(r, c) || labels(r, c)) continue;
      ++next;
      labels(r, c) = next;
      stack.assign(1, {r, c});
      while (!stack.empty()) {
        const auto [y, x] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= mask.rows() || xx >= mask.cols()) continue;
            if (!mask(yy, xx) || labels(yy, xx)) continue;
            labels(yy, xx) = next;
            stack.push_back({yy, xx});
          }
        }
      }
    }
  }
  if (count) *count = next;
  return labels;
}

double pro(std::span<const Map2D> score_maps, std::span<const BinaryMask> gt_masks, double fpr_limit) {
  if (score_maps.size() != gt_masks.size()) throw Error(ErrorCode::kShapeMismatch, "map and mask counts differ");
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw Error(ErrorCode::kRange, "fpr_limit must lie in (0, 1]");

  struct Px {
    double score;
    int region;  // -1 for normal pixels
  };
  std::vector<Px> px;
  std::vector<double> region_size;
  double normals = 0.0;
  for (std::size_t m = 0; m < score_maps.size(); ++m) {
    const auto& s = score_maps[m];
    const auto& g = gt_masks[m];
    if (s.rows() != g.rows() || s.cols() != g.cols()) throw Error(ErrorCode::kShapeMismatch, "score map and mask differ in shape");
    int n = 0;
    const auto lab = label_components(g, &n);
    const int base = static_cast<int>(region_size.size());
    region_size.resize(region_size.size() + n, 0.0);
    for (int r = 0; r < s.rows(); ++r) {
      for (int c = 0; c < s.cols(); ++c) {
        if (!std::isfinite(s(r, c))) throw Error(ErrorCode::kNonFinite, "non-finite pixel score");
        const int l = lab(r, c);
        if (l) {
          region_size[base + l - 1] += 1.0;
          px.push_back({s(r, c), base + l - 1});
        } else {
          normals += 1.0;
          px.push_back({s(r, c), -1});
        }
      }
    }
  }
  const double R = static_cast<double>(region_size.size());
  if (R == 0.0) throw Error(ErrorCode::kPrecondition, "PRO needs at least one anomalous region");
  if (normals == 0.0) throw Error(ErrorCode::kPrecondition, "PRO needs normal pixels");

  std::sort(px.begin(), px.end(), [](const Px& a, const Px& b) { return a.score > b.score; });
  std::vector<double> covered(region_size.size(), 0.0);
  double fp = 0.0;
  double prev_fpr = 0.0, prev_ov = 0.0, area = 0.0;
  for (std::size_t i = 0; i < px.size();) {
    std::size_t j = i;
    while (j < px.size() && px[j].score == px[i].score) {
      if (px[j].region < 0) fp += 1.0;
      else covered[px[j].region] += 1.0;
      ++j;
    }
    i = j;
    double ov = 0.0;
    for (std::size_t k = 0; k < covered.size(); ++k) ov += covered[k] / region_size[k];
    ov /= R;
    const double fpr = fp / normals;
    if (fpr >= fpr_limit) {
      if (fpr > prev_fpr) {
        const double w = (fpr_limit - prev_fpr) / (fpr - prev_fpr);
        const double ov_lim = prev_ov + w * (ov - prev_ov);
        area += 0.5 * (prev_ov + ov_lim) * (fpr_limit - prev_fpr);
      }
      return area / fpr_limit;
    }
    area += 0.5 * (prev_ov + ov) * (fpr - prev_fpr);
    prev_fpr = fpr;
    prev_ov = ov;
  }
  // Unreachable: the last group always reaches fpr = 1.
  return area / fpr_limit;
}

const char* to_string(Metric metric) {
  switch (metric) {
    case Metric::kImageAuroc: return "I-AUC";
    case Metric::kImageF1: return "I-F1";
    case Metric::kPixelAuroc: return "P-AUC";
    case Metric::kPixelF1: return "P-F1";
    case Metric::kPro: return "PRO";
  }
  return "?";
}

namespace {

Metric parse_metric(const std::string& name) {
  for (Metric m : kAllMetrics)
    if (name == to_string(m)) return m;
  throw Error(ErrorCode::kInvalidArgument, "unknown metric '" + name + "'");
}

}  // namespace

CategoryMetrics evaluate_category(const EvalInputs& in, double fpr_limit) {
  if (in.pixel_scores.size() != in.gt_masks.size() || in.pixel_scores.size() != in.image_scores.size()) {
    throw Error(ErrorCode::kShapeMismatch, "evaluation inputs differ in length");
  }
  CategoryMetrics out;
  out[Metric::kImageAuroc] = auroc(in.image_scores, in.image_labels);
  out[Metric::kImageF1] = max_f1(in.image_scores, in.image_labels);

  std::vector<double> ps;
  std::vector<int> pl;
  for (std::size_t i = 0; i < in.pixel_scores.size(); ++i) {
    if (in.pixel_scores[i].rows() != in.gt_masks[i].rows() || in.pixel_scores[i].cols() != in.gt_masks[i].cols()) {
      throw Error(ErrorCode::kShapeMismatch, "pixel score map and mask differ in shape");
    }
    const auto s = in.pixel_scores[i].values();
    const auto g = in.gt_masks[i].values();
    ps.insert(ps.end(), s.begin(), s.end());
    for (auto v : g) pl.push_back(v ? 1 : 0);
  }
  out[Metric::kPixelAuroc] = auroc(ps, pl);
  out[Metric::kPixelF1] = max_f1(ps, pl);
  out[Metric::kPro] = pro(in.pixel_scores, in.gt_masks, fpr_limit);
  return out;
}

EvalReport single_run_report(const std::string& setup, std::uint64_t seed,
                             const std::map<std::string, CategoryMetrics>& per_category) {
  EvalReport r;
  r.setup = setup;
  r.seeds = {seed};
  for (const auto& [cat, values] : per_category)
    for (const auto& [m, v] : values) r.categories[cat][m] = {v, 0.0, 1};
  return r;
}

EvalReport aggregate_runs(std::span<const EvalReport> runs) {
  if (runs.empty()) throw Error(ErrorCode::kPrecondition, "no runs to aggregate");
  EvalReport out;
  out.setup = runs.front().setup;
  for (const auto& run : runs) {
    if (run.categories.size() != runs.front().categories.size()) {
      throw Error(ErrorCode::kShapeMismatch, "runs cover different categories");
    }
    for (const auto& [cat, _] : run.categories) {
      if (!runs.front().categories.count(cat)) throw Error(ErrorCode::kShapeMismatch, "runs cover different categories");
    }
    out.seeds.insert(out.seeds.end(), run.seeds.begin(), run.seeds.end());
  }
  const double n = static_cast<double>(runs.size());
  for (const auto& [cat, metrics] : runs.front().categories) {
    for (const auto& [m, _] : metrics) {
      double sum = 0.0;
      for (const auto& run : runs) {
        const auto& cm = run.categories.at(cat);
        const auto it = cm.find(m);
        if (it == cm.end()) throw Error(ErrorCode::kShapeMismatch, "runs report different metrics");
        sum += it->second.mean;
      }
      const double mean = sum / n;
      double var = 0.0;
      for (const auto& run : runs) {
        const double d = run.categories.at(cat).at(m).mean - mean;
        var += d * d;
      }
      out.categories[cat][m] = {mean, std::sqrt(var / n), static_cast<int>(runs.size())};
    }
  }
  return out;
}

std::string to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "category,metric,mean,std,n_runs\n" << std::setprecision(10);
  for (const auto& [cat, metrics] : report.categories)
    for (const auto& [m, s] : metrics) os << cat << ',' << to_string(m) << ',' << s.mean << ',' << s.std << ',' << s.n_runs << '\n';
  return os.str();
}

std::string to_json(const EvalReport& report) {
  nlohmann::json j;
  j["setup"] = report.setup;
  j["seeds"] = report.seeds;
  auto& cats = j["categories"];
  cats = nlohmann::json::object();
  for (const auto& [cat, metrics] : report.categories)
    for (const auto& [m, s] : metrics)
      cats[cat][to_string(m)] = {{"mean", s.mean}, {"std", s.std}, {"n_runs", s.n_runs}};
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  EvalReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.setup = j.value("setup", "");
    r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
    for (const auto& [cat, metrics] : j.at("categories").items())
      for (const auto& [name, s] : metrics.items())
        r.categories[cat][parse_metric(name)] = {s.at("mean").get<double>(), s.at("std").get<double>(),
                                                 s.at("n_runs").get<int>()};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("malformed report: ") + e.what());
  }
  return r;
}

}  // namespace cut::metrics
