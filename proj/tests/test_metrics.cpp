#include <doctest.h>

#include <cmath>
#include <random>

#include "checks.hpp"
#include "cut/metrics/metrics.hpp"
#include "support.hpp"

using namespace cut;
using namespace cut::metrics;
using cut::test::error_code;

TEST_CASE("auroc worked cases") {
  CHECK(auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}) == 0.75);
  CHECK(auroc(std::vector<double>{0.1, 0.2, 0.7, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
  CHECK(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5, 0.5}, std::vector<int>{0, 1, 0, 1, 1}) == 0.5);
  CHECK(error_code([] { auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}); }) == ErrorCode::kPrecondition);
  CHECK(error_code([] { auroc(std::vector<double>{0.1}, std::vector<int>{1, 0}); }).has_value());
}

TEST_CASE("max_f1 worked cases") {
  CHECK(max_f1(std::vector<double>{0.1, 0.2, 0.7, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
  CHECK(max_f1(std::vector<double>{0.8, 0.9, 0.1, 0.2}, std::vector<int>{0, 0, 1, 1}) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("auroc, max_f1 and pro equal their brute-force oracles") {
  const auto r = cut::test::metric_oracle_trials(60, 1);
  CHECK(r.instances == 60);
  CHECK(r.auroc_dev <= 1e-9);
  CHECK(r.f1_dev <= 1e-9);
  CHECK(r.pro_dev <= 1e-9);
}

TEST_CASE("pro matches a 1001-threshold sweep on quantised scores") {
  std::mt19937_64 rng(2);
  std::vector<double> grid;
  for (int i = 0; i <= 1000; ++i) grid.push_back(i / 1000.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Map2D> maps;
    std::vector<BinaryMask> masks;
    for (int k = 0; k < 2; ++k) {
      auto m = cut::test::random_mask(rng, 16, 16, 0.15);
      m(0, 0) = 1;
      m(15, 15) = 0;
      Map2D s(16, 16);
      for (int i = 0; i < 256; ++i) s.values()[i] = static_cast<double>(rng() % 501) / 500.0;
      maps.push_back(s);
      masks.push_back(m);
    }
    CHECK(std::abs(pro(maps, masks) - cut::test::brute_pro(maps, masks, grid)) <= 1e-9);
  }
}

TEST_CASE("pro fixed cases") {
  BinaryMask gt(16, 16, 0);
  for (int r = 3; r < 7; ++r)
    for (int c = 2; c < 9; ++c) gt(r, c) = 1;
  gt(12, 12) = 1;
  Map2D indicator(16, 16, 0.0);
  for (std::size_t i = 0; i < gt.size(); ++i) indicator.values()[i] = gt.values()[i];
  const std::vector<Map2D> maps{indicator};
  const std::vector<BinaryMask> masks{gt};
  CHECK(pro(maps, masks) == doctest::Approx(1.0).epsilon(1e-12));

  // A constant map reaches full overlap and full FPR at one threshold; the
  // curve is interpolated linearly across the jump.
  const std::vector<Map2D> flat{Map2D(16, 16, 0.5)};
  const double v = pro(flat, masks);
  CHECK(v == doctest::Approx(cut::test::brute_pro(flat, masks, {0.5})).epsilon(1e-12));
  CHECK(v == doctest::Approx(0.15).epsilon(1e-12));

  CHECK(error_code([&] { pro(flat, std::vector<BinaryMask>{BinaryMask(16, 16, 0)}); }) == ErrorCode::kPrecondition);
}

TEST_CASE("label_components agrees with a flood fill") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = cut::test::random_mask(rng, 16, 16, 0.35);
    int n = 0, m_n = 0;
    const auto got = label_components(m, &n);
    const auto want = cut::test::brute_components(m, &m_n);
    REQUIRE(n == m_n);
    // same partition: labels correspond one to one
    std::map<int, int> fwd;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const int a = got.values()[i], b = want.values()[i];
      REQUIRE((a == 0) == (b == 0));
      if (!a) continue;
      auto [it, fresh] = fwd.emplace(a, b);
      REQUIRE(it->second == b);
    }
  }
}

TEST_CASE("auroc and pro are invariant under strictly monotone transforms") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> s(80), t(80);
    std::vector<int> y(80);
    for (int i = 0; i < 80; ++i) {
      y[i] = i % 3 == 0;
      s[i] = std::floor(u(rng) * 20) + 2 * y[i];  // integer scores keep ties exact
      t[i] = std::exp(0.3 * s[i]) - 7;
    }
    REQUIRE(auroc(s, y) == doctest::Approx(auroc(t, y)).epsilon(1e-14));
    REQUIRE(max_f1(s, y) == doctest::Approx(max_f1(t, y)).epsilon(1e-14));

    auto mask = cut::test::random_mask(rng, 16, 16, 0.2);
    mask(0, 0) = 1;
    mask(1, 1) = 0;
    Map2D a = cut::test::random_map(rng, 16, 16), b(16, 16);
    for (std::size_t i = 0; i < a.size(); ++i) b.values()[i] = std::pow(a.values()[i], 3) * 5 + 2;
    REQUIRE(pro(std::vector<Map2D>{a}, std::vector<BinaryMask>{mask}) ==
            doctest::Approx(pro(std::vector<Map2D>{b}, std::vector<BinaryMask>{mask})).epsilon(1e-12));
  }
}

TEST_CASE("max_f1 bounds every fixed-threshold F1") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(60);
    std::vector<int> y(60);
    for (int i = 0; i < 60; ++i) {
      y[i] = u(rng) < 0.3;
      s[i] = u(rng);
    }
    y[0] = 1;
    const double best = max_f1(s, y);
    for (int k = 0; k < 20; ++k) REQUIRE(f1_at(s, y, u(rng)) <= best + 1e-15);
  }
}

TEST_CASE("evaluate_category on a perfect detector") {
  EvalInputs in;
  std::mt19937_64 rng(6);
  for (int i = 0; i < 10; ++i) {
    BinaryMask m(16, 16, 0);
    if (i % 2) m(i, i) = m(i, i + 1) = 1;
    Map2D s(16, 16, 0.0);
    for (std::size_t k = 0; k < m.size(); ++k) s.values()[k] = m.values()[k];
    in.image_scores.push_back(i % 2);
    in.image_labels.push_back(i % 2);
    in.pixel_scores.push_back(s);
    in.gt_masks.push_back(m);
  }
  const auto r = evaluate_category(in);
  REQUIRE(r.size() == 5);
  for (const auto& [metric, value] : r) CHECK(value == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("aggregate_runs statistics and report serialisation") {
  auto run = [](std::uint64_t seed, double v) {
    CategoryMetrics m;
    for (Metric k : kAllMetrics) m[k] = v;
    return single_run_report("1-shot", seed, {{"disk", m}});
  };
  const auto single = run(0, 0.7);
  CHECK(single.categories.at("disk").at(Metric::kPro).std == 0.0);
  CHECK(single.categories.at("disk").at(Metric::kPro).n_runs == 1);

  const std::vector<EvalReport> flat{run(0, 0.9), run(1, 0.9), run(2, 0.9)};
  const auto f = aggregate_runs(flat);
  CHECK(f.categories.at("disk").at(Metric::kImageAuroc).mean == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(f.categories.at("disk").at(Metric::kImageAuroc).std == doctest::Approx(0.0).scale(1e-15));

  const std::vector<EvalReport> pair{run(3, 0.8), run(4, 1.0)};
  const auto p = aggregate_runs(pair);
  CHECK(p.categories.at("disk").at(Metric::kPixelF1).mean == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(p.categories.at("disk").at(Metric::kPixelF1).std == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(p.categories.at("disk").at(Metric::kPixelF1).n_runs == 2);
  CHECK(p.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(p.setup == "1-shot");

  const auto back = report_from_json(to_json(p));
  CHECK(back.setup == p.setup);
  CHECK(back.seeds == p.seeds);
  for (Metric k : kAllMetrics) {
    CHECK(back.categories.at("disk").at(k).mean == p.categories.at("disk").at(k).mean);
    CHECK(back.categories.at("disk").at(k).std == p.categories.at("disk").at(k).std);
  }
  const std::string csv = to_csv(p);
  CHECK(csv.rfind("category,metric,mean,std,n_runs\n", 0) == 0);
  CHECK(csv.find("disk,P-F1,") != std::string::npos);

  const std::vector<EvalReport> mixed{run(0, 0.5), single_run_report("full", 1, {})};
  CHECK(error_code([&] { aggregate_runs(mixed); }).has_value());
}
