#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "cut/core/error.hpp"
#include "cut/core/random.hpp"
#include "cut/data/image_io.hpp"
#include "cut/diffusion/backbone.hpp"
#include "cut/diffusion/toy_backbone.hpp"
#include "cut/vlad/extractor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cut::cli {

void apply_toy_preset(RunConfig& c) {
  c.toy = true;
  c.layout = "toy";
  c.categories = {data::kToyCategory};
  if (c.dataset_root.empty()) c.dataset_root = (fs::path(c.out) / "toy_data").string();
  c.backbone = "toy";
  c.extractor = "toy";
  c.train.epochs = 20;
  c.train.lr = 1e-3;
  c.train.input_side = data::kToySide;
}

namespace {

std::string cache_dir() {
  const char* v = std::getenv("CUT_CACHE_DIR");
  return v ? std::string(v) : std::string{};
}

json generation_json(const generation::GenerationConfig& g) {
  return {{"gamma", g.gamma},
          {"steps", g.T},
          {"prompt_template", g.prompt_template},
          {"anomaly_word", g.anomaly_word},
          {"lambda", g.lambda},
          {"delta_t", g.delta_t.value_or(1.0 / g.T)},
          {"min_pixels", g.min_pixels},
          {"max_pixels_for_stop", g.max_pixels_for_stop},
          {"warmup_steps", g.warmup_steps},
          {"thresholds", g.thresholds.values},
          {"threshold_checkpoints", g.thresholds.checkpoints},
          {"max_iterations", g.thresholds.max_iterations},
          {"softmax_scale", g.aggregation.softmax_scale},
          {"smoothing_kernel", g.aggregation.smoothing.kernel_size},
          {"smoothing_sigma", g.aggregation.smoothing.sigma},
          {"optimize", g.optimize}};
}

json train_json(const trainer::TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"input_side", t.input_side},
          {"logit_scale", t.logit_scale},
          {"beta", t.loss.beta},
          {"omega", t.loss.omega},
          {"focal_gamma", t.loss.focal_gamma},
          {"focal_alpha", t.loss.focal_alpha},
          {"seed", t.seed}};
}

// Reads every key of `j` through `take`, which must recognise it.
template <typename F>
void for_each_key(const json& j, const std::string& where, F&& take) {
  if (!j.is_object()) throw Error(ErrorCode::kInvalidArgument, "config section '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    try {
      if (!take(it.key(), it.value())) {
        throw Error(ErrorCode::kInvalidArgument, "unknown config key '" + where + it.key() + "'");
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, "bad value for config key '" + where + it.key() + "': " + e.what());
    }
  }
}

void overlay_generation(generation::GenerationConfig& g, const json& j) {
  for_each_key(j, "generation.", [&](const std::string& k, const json& v) {
    if (k == "gamma") g.gamma = v.get<double>();
    else if (k == "steps") g.T = v.get<int>();
    else if (k == "prompt_template") g.prompt_template = v.get<std::string>();
    else if (k == "anomaly_word") g.anomaly_word = v.get<std::string>();
    else if (k == "lambda") g.lambda = v.get<double>();
    else if (k == "delta_t") g.delta_t = v.get<double>();
    else if (k == "min_pixels") g.min_pixels = v.get<int>();
    else if (k == "max_pixels_for_stop") g.max_pixels_for_stop = v.get<int>();
    else if (k == "warmup_steps") g.warmup_steps = v.get<int>();
    else if (k == "thresholds") g.thresholds.values = v.get<std::vector<double>>();
    else if (k == "threshold_checkpoints") g.thresholds.checkpoints = v.get<std::vector<double>>();
    else if (k == "max_iterations") g.thresholds.max_iterations = v.get<int>();
    else if (k == "softmax_scale") g.aggregation.softmax_scale = v.get<double>();
    else if (k == "smoothing_kernel") g.aggregation.smoothing.kernel_size = v.get<int>();
    else if (k == "smoothing_sigma") g.aggregation.smoothing.sigma = v.get<double>();
    else if (k == "optimize") g.optimize = v.get<bool>();
    else return false;
    return true;
  });
}

void overlay_train(trainer::TrainConfig& t, const json& j) {
  for_each_key(j, "train.", [&](const std::string& k, const json& v) {
    if (k == "epochs") t.epochs = v.get<int>();
    else if (k == "batch_size") t.batch_size = v.get<int>();
    else if (k == "lr") t.lr = v.get<double>();
    else if (k == "adam_beta1") t.adam_beta1 = v.get<double>();
    else if (k == "adam_beta2") t.adam_beta2 = v.get<double>();
    else if (k == "adam_eps") t.adam_eps = v.get<double>();
    else if (k == "input_side") t.input_side = v.get<int>();
    else if (k == "logit_scale") t.logit_scale = v.get<double>();
    else if (k == "beta") t.loss.beta = v.get<double>();
    else if (k == "omega") t.loss.omega = v.get<double>();
    else if (k == "focal_gamma") t.loss.focal_gamma = v.get<double>();
    else if (k == "focal_alpha") t.loss.focal_alpha = v.get<double>();
    else if (k == "seed") t.seed = v.get<std::uint64_t>();
    else return false;
    return true;
  });
}

}  // namespace

json to_json(const RunConfig& c) {
  return {{"dataset",
           {{"root", c.dataset_root},
            {"layout", c.layout},
            {"categories", c.categories},
            {"visa_csv", c.visa_csv},
            {"resize", c.resize}}},
          {"shots", c.k == data::kAllShots ? std::string("all") : std::to_string(c.k)},
          {"seed", c.seed},
          {"seeds", c.seeds},
          {"runs", c.runs},
          {"toy", c.toy},
          {"toy_data",
           {{"n_train", c.toy_data.n_train},
            {"n_test_normal", c.toy_data.n_test_normal},
            {"n_test_anomalous", c.toy_data.n_test_anomalous},
            {"seed", c.toy_data.seed}}},
          {"backbone", c.backbone},
          {"extractor", c.extractor},
          {"out", c.out},
          {"generation", generation_json(c.generation)},
          {"per_image", c.per_image},
          {"workers", c.workers},
          {"train", train_json(c.train)},
          {"include_normals", c.include_normals},
          {"rescale_vl", c.rescale_vl}};
}

void overlay(RunConfig& c, const json& j) {
  for_each_key(j, "", [&](const std::string& k, const json& v) {
    if (k == "dataset") {
      for_each_key(v, "dataset.", [&](const std::string& dk, const json& dv) {
        if (dk == "root") c.dataset_root = dv.get<std::string>();
        else if (dk == "layout") c.layout = dv.get<std::string>();
        else if (dk == "categories") c.categories = dv.get<std::vector<std::string>>();
        else if (dk == "visa_csv") c.visa_csv = dv.get<std::string>();
        else if (dk == "resize") c.resize = dv.get<int>();
        else return false;
        return true;
      });
    } else if (k == "shots") {
      c.k = data::parse_shots(v.is_number() ? std::to_string(v.get<int>()) : v.get<std::string>());
    } else if (k == "seed") {
      c.seed = v.get<std::uint64_t>();
    } else if (k == "seeds") {
      c.seeds = v.get<std::vector<std::uint64_t>>();
    } else if (k == "runs") {
      c.runs = v.get<int>();
    } else if (k == "toy") {
      c.toy = v.get<bool>();
    } else if (k == "toy_data") {
      for_each_key(v, "toy_data.", [&](const std::string& tk, const json& tv) {
        if (tk == "n_train") c.toy_data.n_train = tv.get<int>();
        else if (tk == "n_test_normal") c.toy_data.n_test_normal = tv.get<int>();
        else if (tk == "n_test_anomalous") c.toy_data.n_test_anomalous = tv.get<int>();
        else if (tk == "seed") c.toy_data.seed = tv.get<std::uint64_t>();
        else return false;
        return true;
      });
    } else if (k == "backbone") {
      c.backbone = v.get<std::string>();
    } else if (k == "extractor") {
      c.extractor = v.get<std::string>();
    } else if (k == "out") {
      c.out = v.get<std::string>();
    } else if (k == "generation") {
      overlay_generation(c.generation, v);
    } else if (k == "per_image") {
      c.per_image = v.get<int>();
    } else if (k == "workers") {
      c.workers = v.get<int>();
    } else if (k == "train") {
      overlay_train(c.train, v);
    } else if (k == "include_normals") {
      c.include_normals = v.get<bool>();
    } else if (k == "rescale_vl") {
      c.rescale_vl = v.get<bool>();
    } else {
      return false;
    }
    return true;
  });
}

void validate(const RunConfig& c) {
  if (c.dataset_root.empty()) throw Error(ErrorCode::kInvalidArgument, "no dataset root given (--dataset-root)");
  if (c.categories.empty()) throw Error(ErrorCode::kInvalidArgument, "no categories given (--category)");
  data::parse_layout(c.layout);
  if (c.k < 0) throw Error(ErrorCode::kRange, "k must be >= 0");
  if (c.runs < 1) throw Error(ErrorCode::kRange, "runs must be >= 1");
  if (c.runs > 1 && static_cast<int>(c.seeds.size()) < c.runs) {
    throw Error(ErrorCode::kInvalidArgument, "--runs " + std::to_string(c.runs) + " needs at least that many seeds");
  }
  if (c.per_image < 0) throw Error(ErrorCode::kRange, "per_image must be >= 0");
  if (c.workers < 1) throw Error(ErrorCode::kRange, "workers must be >= 1");
  if (c.resize < 0) throw Error(ErrorCode::kRange, "dataset resize must be >= 0");
  if (c.toy && (c.toy_data.n_train < 1 || c.toy_data.n_test_normal < 1 || c.toy_data.n_test_anomalous < 1)) {
    throw Error(ErrorCode::kRange, "toy dataset counts must be >= 1");
  }
  generation::validate(c.generation);
  trainer::validate(c.train);
  if (c.out.empty()) throw Error(ErrorCode::kInvalidArgument, "output root is empty");
}

int effective_per_image(const RunConfig& c) {
  if (c.per_image > 0) return c.per_image;
  return c.k == data::kAllShots ? 5 : 100;
}

std::string backbone_selector(const RunConfig& c) {
  std::string s = c.backbone;
  const bool toy = s == "toy" || s.rfind("toy:", 0) == 0;
  if (toy && s.find("steps=") == std::string::npos) {
    s += (s == "toy" ? ":" : ",") + std::string("steps=") + std::to_string(c.generation.T);
  }
  return s;
}

data::DatasetSpec dataset_spec(const RunConfig& c, data::Split split) {
  data::DatasetSpec spec;
  spec.root = c.dataset_root;
  spec.layout = data::parse_layout(c.layout);
  spec.categories = c.categories;
  spec.split = split;
  spec.visa_csv = c.visa_csv;
  spec.resize_side = c.resize;
  data::validate(spec);
  return spec;
}

void ensure_toy_dataset(const RunConfig& c) {
  if (!c.toy) return;
  if (fs::is_directory(fs::path(c.dataset_root) / data::kToyCategory)) return;
  data::make_toy_dataset(c.dataset_root, c.toy_data.n_test_normal, c.toy_data.n_test_anomalous, c.toy_data.seed,
                         c.toy_data.n_train);
}

namespace {

fs::path generated_root(const RunConfig& c) { return fs::path(c.out) / "generated"; }
fs::path checkpoint_dir(const RunConfig& c, const std::string& cat) { return fs::path(c.out) / "checkpoints" / cat; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "file not found: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_kshot(const fs::path& path, const data::KShotSample& s) {
  json j{{"k", s.k}, {"seed", s.seed}, {"category", s.category}, {"selected", s.selected}};
  write_text(path, j.dump(2) + "\n");
}

data::KShotSample read_kshot(const fs::path& path) {
  try {
    const auto j = json::parse(read_text(path));
    data::KShotSample s;
    s.k = j.at("k").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.category = j.at("category").get<std::string>();
    s.selected = j.at("selected").get<std::vector<std::string>>();
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIo, path.string() + ": bad k-shot record: " + e.what());
  }
}

std::uint64_t generation_seed(std::uint64_t seed, const std::string& category) {
  return mix_seed(seed, fnv1a("generate/" + category));
}

}  // namespace

void run_generate(const RunConfig& c) {
  ensure_toy_dataset(c);
  const auto spec = dataset_spec(c, data::Split::kTrain);
  const std::string selector = backbone_selector(c);
  diffusion::make_backbone(selector, cache_dir());  // fail early on a bad selector
  for (const auto& cat : c.categories) {
    const auto selection = data::sample_kshot(spec, cat, c.k, c.seed);
    const auto normals = data::load_kshot(selection, cat, c.resize);
    diffusion::BackboneFactory factory = [&selector, &normals]() {
      auto backbone = diffusion::make_backbone(selector, cache_dir());
      if (auto* toy = dynamic_cast<diffusion::ToyBackbone*>(backbone.get())) {
        toy->fit_prior(std::span<const ImageSample>(normals));
      }
      return backbone;
    };
    generation::GenerationConfig g = c.generation;
    g.seed = generation_seed(c.seed, cat);
    const auto batch = generation::batch_generate(normals, effective_per_image(c), g, factory, c.workers);
    for (const auto& f : batch.failures) {
      std::cerr << "warning: " << cat << " generation " << f.index << " failed: " << f.message << "\n";
    }
    data::write_generated(generated_root(c), cat, batch.samples);
    write_kshot(generated_root(c) / cat / "kshot.json", selection);
    std::cout << cat << ": " << batch.samples.size() - normals.size() << " anomalous + " << normals.size()
              << " normal samples -> " << (generated_root(c) / cat).string() << "\n";
  }
}

namespace {

std::vector<ImageSample> load_bank_normals(const RunConfig& c, const std::string& cat) {
  const auto selection = read_kshot(generated_root(c) / cat / "kshot.json");
  return data::load_kshot(selection, cat, c.resize);
}

}  // namespace

void run_train(const RunConfig& c, bool resume, int stop_after) {
  const auto extractor = vlad::make_extractor(c.extractor, cache_dir());
  for (const auto& cat : c.categories) {
    auto samples = data::load_generated(generated_root(c), cat);
    if (!c.include_normals) std::erase_if(samples, [](const AnnotatedSample& s) { return s.y_img == 0; });
    const fs::path dir = checkpoint_dir(c, cat);
    trainer::TrainOptions options;
    options.state_path = (dir / "train_state.ckpt").string();
    options.log_path = (dir / "train_log.jsonl").string();
    options.resume = resume;
    options.stop_after = stop_after;
    if (!resume && fs::exists(options.state_path)) fs::remove(options.state_path);
    const auto result = trainer::train(samples, *extractor, c.train, options);
    if (result.epochs_completed < c.train.epochs) {
      std::cout << cat << ": stopped after " << result.epochs_completed << " of " << c.train.epochs
                << " epochs; state in " << options.state_path << "\n";
      continue;
    }
    vlad::save_adapter(result.adapter, (dir / "adapter.ckpt").string());
    const auto normals = load_bank_normals(c, cat);
    const auto bank = trainer::build_bank(normals, *extractor, result.adapter, c.train.input_side);
    vlad::save_bank(bank, (dir / "bank.ckpt").string());
    const auto& last = result.log.back().terms;
    std::cout << cat << ": trained " << result.epochs_completed << " epochs, final loss " << last.total
              << " (focal " << last.focal << ", bce " << last.bce << ", dice " << last.dice << ") -> "
              << dir.string() << "\n";
  }
}

metrics::EvalReport run_eval(const RunConfig& c) {
  ensure_toy_dataset(c);
  const auto extractor = vlad::make_extractor(c.extractor, cache_dir());
  auto spec = dataset_spec(c, data::Split::kTest);
  vlad::DetectorConfig dc;
  dc.logit_scale = c.train.logit_scale;
  dc.rescale_vl = c.rescale_vl;
  dc.input_side = c.train.input_side;
  std::map<std::string, metrics::CategoryMetrics> per_category;
  for (const auto& cat : c.categories) {
    const fs::path dir = checkpoint_dir(c, cat);
    const auto adapter = vlad::load_adapter((dir / "adapter.ckpt").string());
    const auto bank = vlad::load_bank((dir / "bank.ckpt").string());
    vlad::check_compatible(adapter, *extractor);
    auto cat_spec = spec;
    cat_spec.categories = {cat};
    std::vector<trainer::TestSample> tests;
    for (auto& s : data::load_split(cat_spec)) {
      BinaryMask gt(s.mask.rows(), s.mask.cols());
      for (std::size_t i = 0; i < gt.size(); ++i) gt.values()[i] = s.mask.values()[i] > 0.5 ? 1 : 0;
      tests.push_back({std::move(s.image), s.y_img, std::move(gt)});
    }
    per_category[cat] = trainer::evaluate(trainer::detector_scorer(*extractor, adapter, &bank, dc), tests);
  }
  auto report = metrics::single_run_report(data::shots_name(c.k), c.seed, per_category);
  write_text(fs::path(c.out) / "report.json", metrics::to_json(report));
  write_text(fs::path(c.out) / "report.csv", metrics::to_csv(report));
  return report;
}

metrics::EvalReport run_pipeline_runs(const RunConfig& c) {
  std::vector<metrics::EvalReport> runs;
  for (int r = 0; r < c.runs; ++r) {
    RunConfig sub = c;
    sub.seed = c.seeds[r];
    sub.train.seed = c.seeds[r];
    sub.runs = 1;
    sub.out = (fs::path(c.out) / "runs" / ("seed_" + std::to_string(sub.seed))).string();
    write_sidecar(sub, "eval");
    run_generate(sub);
    run_train(sub, false, -1);
    runs.push_back(run_eval(sub));
  }
  auto report = metrics::aggregate_runs(runs);
  write_text(fs::path(c.out) / "report.json", metrics::to_json(report));
  write_text(fs::path(c.out) / "report.csv", metrics::to_csv(report));
  return report;
}

std::string write_sidecar(const RunConfig& c, const std::string& command) {
  const fs::path path = fs::path(c.out) / (command + ".resolved.json");
  write_text(path, to_json(c).dump(2) + "\n");
  return path.string();
}

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  try {
    const auto dots = text.find("..");
    if (dots != std::string::npos) {
      const auto lo = std::stoull(text.substr(0, dots));
      const auto hi = std::stoull(text.substr(dots + 2));
      if (hi < lo) throw Error(ErrorCode::kInvalidArgument, "empty seed range '" + text + "'");
      for (auto s = lo; s <= hi; ++s) out.push_back(s);
      return out;
    }
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      if (!item.empty()) out.push_back(std::stoull(item));
    }
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kInvalidArgument, "bad seed list '" + text + "' (use 0..4 or 0,1,2)");
  }
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "empty seed list");
  return out;
}

struct Flags {
  std::optional<std::string> config;
  std::optional<std::string> dataset_root;
  std::optional<std::string> layout;
  std::vector<std::string> categories;
  std::optional<std::string> k;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> seeds;
  std::optional<int> runs;
  std::optional<double> gamma;
  std::optional<int> steps;
  std::optional<double> lambda;
  std::optional<double> beta;
  std::optional<double> omega;
  bool toy = false;
  std::optional<std::string> backbone;
  std::optional<std::string> extractor;
  std::optional<std::string> out;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<int> batch_size;
  std::optional<int> per_image;
  std::optional<int> workers;
  std::optional<int> input_side;
  bool no_optimize = false;
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON run config; flags override it");
  app->add_option("--dataset-root", f.dataset_root, "dataset root directory");
  app->add_option("--layout", f.layout, "mvtec, visa, generated or toy");
  app->add_option("--category", f.categories, "category to process (repeatable)");
  app->add_option("--k", f.k, "shots: 1, 2, 4 or all");
  app->add_option("--seed", f.seed, "run seed");
  app->add_option("--seeds", f.seeds, "seed list for --runs, e.g. 0..4");
  app->add_option("--runs", f.runs, "number of full pipeline runs");
  app->add_option("--gamma", f.gamma, "skipped fraction of the forward trajectory");
  app->add_option("--steps", f.steps, "diffusion steps T");
  app->add_option("--lambda", f.lambda, "base latent step size");
  app->add_option("--beta", f.beta, "adapted Dice scale");
  app->add_option("--omega", f.omega, "pixel loss weight");
  app->add_flag("--toy", f.toy, "procedural toy dataset, toy backbone and toy extractor");
  app->add_option("--backbone", f.backbone, "diffusion backbone selector");
  app->add_option("--extractor", f.extractor, "two-tower extractor selector");
  app->add_option("--out", f.out, "output root");
  app->add_option("--epochs", f.epochs, "training epochs");
  app->add_option("--lr", f.lr, "learning rate");
  app->add_option("--batch-size", f.batch_size, "training batch size");
  app->add_option("--per-image", f.per_image, "generations per conditioning normal (0: 100 k-shot, 5 full)");
  app->add_option("--workers", f.workers, "generation worker threads");
  app->add_option("--input-side", f.input_side, "detector input side (0 keeps the image size)");
  app->add_flag("--no-optimize", f.no_optimize, "disable attention optimisation");
}

RunConfig resolve(const Flags& f) {
  json file = json::object();
  if (f.config) {
    try {
      file = json::parse(read_text(*f.config));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, *f.config + ": " + e.what());
    }
  }
  RunConfig c;
  if (f.out) c.out = *f.out;
  else if (file.contains("out") && file["out"].is_string()) c.out = file["out"].get<std::string>();
  const bool toy = f.toy || (file.contains("toy") && file["toy"].is_boolean() && file["toy"].get<bool>());
  if (toy) apply_toy_preset(c);
  overlay(c, file);
  if (f.dataset_root) c.dataset_root = *f.dataset_root;
  if (f.layout) c.layout = *f.layout;
  if (!f.categories.empty()) c.categories = f.categories;
  if (f.k) c.k = data::parse_shots(*f.k);
  if (f.seed) {
    c.seed = *f.seed;
    c.train.seed = *f.seed;
  }
  if (f.seeds) c.seeds = parse_seeds(*f.seeds);
  if (f.runs) c.runs = *f.runs;
  if (f.gamma) c.generation.gamma = *f.gamma;
  if (f.steps) {
    c.generation.T = *f.steps;
    if (!file.contains("generation") || !file["generation"].contains("delta_t")) c.generation.delta_t.reset();
  }
  if (f.lambda) c.generation.lambda = *f.lambda;
  if (f.beta) c.train.loss.beta = *f.beta;
  if (f.omega) c.train.loss.omega = *f.omega;
  if (f.backbone) c.backbone = *f.backbone;
  if (f.extractor) c.extractor = *f.extractor;
  if (f.out) c.out = *f.out;
  if (f.epochs) c.train.epochs = *f.epochs;
  if (f.lr) c.train.lr = *f.lr;
  if (f.batch_size) c.train.batch_size = *f.batch_size;
  if (f.per_image) c.per_image = *f.per_image;
  if (f.workers) c.workers = *f.workers;
  if (f.input_side) c.train.input_side = *f.input_side;
  if (f.no_optimize) c.generation.optimize = false;
  if (f.seeds && !f.runs) c.runs = static_cast<int>(c.seeds.size());

  // Materialise everything that has a derived default.
  if (!c.generation.delta_t) c.generation.delta_t = 1.0 / c.generation.T;
  if (!c.dataset_root.empty()) c.dataset_root = fs::absolute(c.dataset_root).lexically_normal().string();
  if (!c.out.empty()) c.out = fs::absolute(c.out).lexically_normal().string();
  c.per_image = effective_per_image(c);
  validate(c);
  return c;
}

int report_error(const Error& e) {
  std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
  return e.is_validation() ? kExitValidation : kExitRuntime;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Anomaly generation with attention-steered latent diffusion, and VLAD training and evaluation"};
  app.require_subcommand(1);

  Flags gen_flags, train_flags, eval_flags;
  bool resume = false;
  int stop_after = -1;
  std::vector<std::string> report_inputs;
  std::optional<std::string> report_out;

  auto* gen = app.add_subcommand("generate", "sample k-shot normals and generate annotated anomalies");
  add_common(gen, gen_flags);
  auto* trn = app.add_subcommand("train", "train the VLAD adapter and build memory banks");
  add_common(trn, train_flags);
  trn->add_flag("--resume", resume, "continue from the saved trainer state");
  trn->add_option("--stop-after", stop_after, "stop once this many epochs are complete");
  auto* evl = app.add_subcommand("eval", "evaluate checkpoints; with --runs, loop the whole pipeline");
  add_common(evl, eval_flags);
  auto* rep = app.add_subcommand("report", "aggregate saved per-run reports");
  rep->add_option("inputs", report_inputs, "report.json files (default: <out>/runs/seed_*/report.json)");
  rep->add_option("--out", report_out, "directory for the aggregated report")->default_str("runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (gen->parsed()) {
      const auto c = resolve(gen_flags);
      std::cout << "resolved config: " << write_sidecar(c, "generate") << "\n";
      run_generate(c);
    } else if (trn->parsed()) {
      const auto c = resolve(train_flags);
      std::cout << "resolved config: " << write_sidecar(c, "train") << "\n";
      run_train(c, resume, stop_after);
    } else if (evl->parsed()) {
      const auto c = resolve(eval_flags);
      std::cout << "resolved config: " << write_sidecar(c, "eval") << "\n";
      const auto report = c.runs > 1 ? run_pipeline_runs(c) : run_eval(c);
      std::cout << metrics::to_csv(report);
    } else if (rep->parsed()) {
      const fs::path out = fs::absolute(report_out.value_or("runs"));
      std::vector<std::string> inputs = report_inputs;
      if (inputs.empty()) {
        const fs::path runs_dir = out / "runs";
        if (fs::is_directory(runs_dir)) {
          for (const auto& e : fs::directory_iterator(runs_dir)) {
            if (fs::exists(e.path() / "report.json")) inputs.push_back((e.path() / "report.json").string());
          }
        }
        std::sort(inputs.begin(), inputs.end());
      }
      if (inputs.empty()) throw Error(ErrorCode::kNotFound, "no run reports found under " + (out / "runs").string());
      std::vector<metrics::EvalReport> runs;
      for (const auto& path : inputs) runs.push_back(metrics::report_from_json(read_text(path)));
      const auto report = metrics::aggregate_runs(runs);
      write_text(out / "report.json", metrics::to_json(report));
      write_text(out / "report.csv", metrics::to_csv(report));
      std::cout << metrics::to_csv(report);
    }
  } catch (const Error& e) {
    return report_error(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error [io]: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("cut");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace cut::cli
