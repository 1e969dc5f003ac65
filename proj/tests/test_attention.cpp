#include <doctest.h>

#include <cmath>
#include <random>

#include "checks.hpp"
#include "cut/attention/engine.hpp"
#include "cut/diffusion/toy_backbone.hpp"
#include "support.hpp"

using namespace cut;
using namespace cut::attention;
using cut::test::error_code;

namespace {

constexpr int S = kAttentionSide;

Tensor3 random_probs(std::mt19937_64& rng, int rows, int tokens) {
  Tensor3 t = cut::test::random_tensor(rng, rows, rows, tokens, 0.0, 1.0);
  for (int y = 0; y < rows; ++y)
    for (int x = 0; x < rows; ++x) {
      double sum = 0.0;
      for (int n = 0; n < tokens; ++n) sum += t(y, x, n);
      for (int n = 0; n < tokens; ++n) t(y, x, n) /= sum;
    }
  return t;
}

int mirror(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

// Mean, token softmax and a full 2-D Gaussian convolution with mirrored
// borders, in plain loops.
Tensor3 aggregate_oracle(const std::vector<Tensor3>& maps, double scale, int ksize, double sigma) {
  const int N = maps[0].dim2();
  Tensor3 mean(S, S, N);
  for (const auto& m : maps)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        for (int n = 0; n < N; ++n) mean(y, x, n) += m(y, x, n) / maps.size();
  Tensor3 soft(S, S, N);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double total = 0.0;
      for (int n = 0; n < N; ++n) total += std::exp(scale * mean(y, x, n));
      for (int n = 0; n < N; ++n) soft(y, x, n) = std::exp(scale * mean(y, x, n)) / total;
    }
  const int h = ksize / 2;
  double norm = 0.0;
  for (int dy = -h; dy <= h; ++dy)
    for (int dx = -h; dx <= h; ++dx) norm += std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
  Tensor3 out(S, S, N);
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double acc = 0.0;
        for (int dy = -h; dy <= h; ++dy)
          for (int dx = -h; dx <= h; ++dx)
            acc += std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma)) / norm *
                   soft(mirror(y + dy, S), mirror(x + dx, S), n);
        out(y, x, n) = acc;
      }
  return out;
}

AggregatedAttention from_map(const Map2D& anomaly) {
  // Two tokens: token 1 carries the anomaly map, token 0 the rest.
  AggregatedAttention a;
  a.abar = Tensor3(S, S, 2);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      a.abar(y, x, 1) = anomaly(y, x);
      a.abar(y, x, 0) = 1.0 - anomaly(y, x);
    }
  return a;
}

double formula(double lambda, double delta_t, int t, int n_t, int n_start) {
  return lambda * (1.0 + delta_t * t) * n_t / n_start;
}

}  // namespace

TEST_CASE("aggregate_attention: uniform maps stay uniform and duplicates change nothing") {
  AttentionStack stack;
  stack.maps.emplace_back(S, S, 5, 0.2);
  const auto one = aggregate_attention(stack);
  for (double v : one.abar.values()) REQUIRE(v == doctest::Approx(0.2).epsilon(1e-12));

  std::mt19937_64 rng(1);
  AttentionStack single, twice;
  single.maps.push_back(random_probs(rng, S, 6));
  twice.maps = {single.maps[0], single.maps[0]};
  const auto a = aggregate_attention(single), b = aggregate_attention(twice);
  for (std::size_t i = 0; i < a.abar.size(); ++i) REQUIRE(a.abar[i] == doctest::Approx(b.abar[i]).epsilon(1e-12));
}

TEST_CASE("aggregate_attention matches a loop oracle and ignores other resolutions") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int N = 2 + trial % 6;
    AttentionStack stack;
    std::vector<Tensor3> used;
    for (int k = 0; k < 1 + trial % 3; ++k) {
      stack.maps.push_back(random_probs(rng, S, N));
      used.push_back(stack.maps.back());
    }
    stack.maps.push_back(random_probs(rng, 8, N));  // skipped
    AggregationConfig cfg;
    cfg.softmax_scale = 1.0 + trial;
    cfg.smoothing.kernel_size = trial % 2 ? 5 : 3;
    cfg.smoothing.sigma = 0.5 + 0.1 * trial;
    const auto got = aggregate_attention(stack, cfg);
    const auto want = aggregate_oracle(used, cfg.softmax_scale, cfg.smoothing.kernel_size, cfg.smoothing.sigma);
    for (std::size_t i = 0; i < want.size(); ++i) REQUIRE(std::abs(got.abar[i] - want[i]) <= 1e-6);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double sum = 0.0;
        for (int n = 0; n < N; ++n) sum += got.abar(y, x, n);
        REQUIRE(sum == doctest::Approx(1.0).epsilon(1e-9));
      }
  }
  AttentionStack none;
  none.maps.emplace_back(8, 8, 3, 1.0 / 3);
  CHECK(error_code([&] { aggregate_attention(none); }) == ErrorCode::kPrecondition);
  CHECK(error_code([] { gaussian_taps({4, 0.5}); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("latt fixed cases") {
  const BinaryMask centre = [] {
    BinaryMask m(S, S, 0);
    for (int y = 4; y < 12; ++y)
      for (int x = 4; x < 12; ++x) m(y, x) = 1;
    return m;
  }();
  const std::vector<int> j{1};

  Map2D peak(S, S, 0.2);
  peak(6, 6) = 1.0;
  CHECK(latt(from_map(peak), j, centre) == 0.0);

  Map2D outside(S, S, 0.9);
  for (int y = 4; y < 12; ++y)
    for (int x = 4; x < 12; ++x) outside(y, x) = 0.0;
  CHECK(latt(from_map(outside), j, centre) == 1.0);

  Map2D third(S, S, 0.1);
  third(5, 9) = 0.3;
  CHECK(latt(from_map(third), j, centre) == doctest::Approx(0.7).epsilon(1e-15));

  CHECK(error_code([&] { latt(from_map(third), j, BinaryMask(S, S, 0)); }) == ErrorCode::kPrecondition);
  CHECK(error_code([&] { latt(from_map(third), std::vector<int>{}, centre); }) == ErrorCode::kInvalidArgument);
  CHECK(error_code([&] { latt(from_map(third), std::vector<int>{2}, centre); }) == ErrorCode::kRange);
}

TEST_CASE("latt stays in [0, 1] and is zero only at an in-mask peak of one") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    AttentionStack stack;
    stack.maps.push_back(random_probs(rng, S, 4));
    auto mask = cut::test::random_mask(rng, S, S, 0.3);
    mask(0, 0) = 1;
    const double v = latt(aggregate_attention(stack), std::vector<int>{2}, mask);
    REQUIRE(v >= 0.0);
    REQUIRE(v < 1.0);
    REQUIRE(v > 0.0);  // softmax of finite logits never reaches one
  }
}

TEST_CASE("latt_with_grad matches central differences on the captured maps") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    AttentionStack stack;
    stack.maps.push_back(random_probs(rng, S, 4));
    stack.maps.push_back(random_probs(rng, S, 4));
    auto mask = cut::test::random_mask(rng, S, S, 0.5);
    mask(3, 3) = 1;
    const std::vector<int> j{1, 3};
    AggregationConfig cfg;
    cfg.softmax_scale = 5.0;
    const auto res = latt_with_grad(stack, j, mask, cfg);
    CHECK(res.value == doctest::Approx(latt(aggregate_attention(stack, cfg), j, mask)).epsilon(1e-12));
    std::uniform_int_distribution<std::size_t> pick(0, stack.maps[0].size() - 1);
    for (int k = 0; k < 40; ++k) {
      const std::size_t m = k % 2, i = pick(rng);
      const double h = 1e-6;
      AttentionStack plus = stack, minus = stack;
      plus.maps[m][i] += h;
      minus.maps[m][i] -= h;
      const double fd = (latt(aggregate_attention(plus, cfg), j, mask) - latt(aggregate_attention(minus, cfg), j, mask)) / (2 * h);
      REQUIRE(res.grad[m][i] == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
    }
  }
}

TEST_CASE("count_activated cases and loop oracle") {
  const BinaryMask full(S, S, 1);
  CHECK(count_activated(Map2D(S, S, 0.4), full) == 0);
  Map2D spike(S, S, 0.0);
  spike(7, 3) = 1.0;
  CHECK(count_activated(spike, full) == 1);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Map2D m = cut::test::random_map(rng, S, S);
    auto mask = cut::test::random_mask(rng, S, S, 0.4);
    mask(1, 1) = 1;
    double sum = 0.0;
    int n = 0;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        if (mask(y, x)) {
          sum += m(y, x);
          ++n;
        }
    const double mean = sum / n;
    int above = 0;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        if (mask(y, x) && m(y, x) > mean) ++above;
    REQUIRE(count_activated(m, mask) == above);
  }
}

TEST_CASE("step_size closed form over a grid") {
  for (int a = 0; a < 10; ++a)
    for (int b = 0; b < 10; ++b)
      for (int c = 0; c < 10; ++c) {
        SchedulerState s;
        s.lambda = 0.5 + 2.3 * a;
        s.delta_t = 1.0 / 200;
        s.n_start = 7;
        const int t = 20 * b + 3;
        const int n_t = 25 * c;
        REQUIRE(std::abs(step_size(s, t, n_t) - formula(s.lambda, s.delta_t, t, n_t, s.n_start)) <= 1e-12);
      }
}

TEST_CASE("step_size default constants and boundaries") {
  SchedulerState s;
  s.lambda = 10.0;
  s.delta_t = 1.0 / 200;
  s.n_start = 37;
  CHECK(step_size(s, 150, 37) == 17.5);
  CHECK(step_size(s, 150, 0) == 0.0);
  CHECK(step_size(s, 0, 37) == 10.0);
  SchedulerState bad;
  bad.n_start = 0;
  CHECK(error_code([&] { validate(bad); }).has_value());
  bad.n_start = 1;
  bad.delta_t = 0.0;
  CHECK(error_code([&] { validate(bad); }).has_value());
}

TEST_CASE("should_stop warm-up, interval and latching") {
  SchedulerState s;
  CHECK_FALSE(should_stop(s, 5, 30));
  CHECK(should_stop(s, 12, 30));
  SchedulerState diffuse;
  CHECK_FALSE(should_stop(diffuse, 12, 200));
  CHECK_FALSE(should_stop(diffuse, 12, 10));
  CHECK_FALSE(should_stop(diffuse, 12, 50));

  // scripted traces against a direct re-statement of the rule
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> n(0, 120);
  for (int trial = 0; trial < 100; ++trial) {
    SchedulerState state;
    bool latched = false;
    for (int step = 0; step < 60; ++step) {
      const int n_t = n(rng);
      latched = latched || (step >= 10 && n_t > 10 && n_t < 50);
      REQUIRE(should_stop(state, step, n_t) == latched);
      REQUIRE(state.stopped == latched);
    }
  }
}

TEST_CASE("active_threshold picks refinement checkpoints") {
  RefinementThresholds th;
  const int window = 40;
  CHECK(active_threshold(th, 10, window) == 0.05);
  CHECK(active_threshold(th, 20, window) == 0.5);
  CHECK(active_threshold(th, 30, window) == 0.8);
  CHECK_FALSE(active_threshold(th, 11, window));
  CHECK_FALSE(active_threshold(th, 0, window));
  RefinementThresholds bad;
  bad.values = {0.5, 0.4, 0.8};
  CHECK(error_code([&] { validate(bad); }).has_value());
  bad.values = {0.05, 0.5, 1.0};
  CHECK(error_code([&] { validate(bad); }).has_value());
}

TEST_CASE("optimize_step leaves out-of-mask latents bit-identical") {
  const auto r = cut::test::masked_invariance_trials(100, 1);
  CHECK(r.calls == 100);
  CHECK(r.violations == 0);
  CHECK(r.moved > 50);
}

TEST_CASE("optimize_step zero step cases") {
  diffusion::ToyBackbone bb;
  std::vector<ImageSample> refs{cut::test::toy_image(2)};
  bb.fit_prior(std::span<const ImageSample>(refs));
  const PromptSpec prompt = bb.make_prompt("A photo of a [cls] that is damaged", "disk", "damaged");
  std::mt19937_64 rng(7);
  LatentState z;
  z.z = cut::test::random_tensor(rng, 4, 16, 16);
  z.t = 120;
  z.T = 200;
  ForegroundMask mask;
  mask.mask16 = BinaryMask(S, S, 1);
  mask.mask_lat = BinaryMask(16, 16, 1);
  SchedulerState zero;
  zero.lambda = 0.0;
  CHECK(optimize_step(bb, z, prompt, mask, zero, {}, {}, 3, 40).z.z == z.z);

  mask.mask_lat = BinaryMask(16, 16, 0);
  SchedulerState s;
  const auto r = optimize_step(bb, z, prompt, mask, s, {}, {}, 3, 40);
  CHECK(r.z.z == z.z);
  CHECK(r.iterations == 1);

  SchedulerState stopped;
  stopped.stopped = true;
  CHECK(error_code([&] { optimize_step(bb, z, prompt, mask, stopped, {}, {}, 3, 40); }) == ErrorCode::kPrecondition);
}

TEST_CASE("optimize_step with small lambda descends L_att") {
  diffusion::ToyBackbone bb;
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    const ImageSample image = cut::test::toy_image(seed);
    std::vector<ImageSample> refs{image};
    bb.fit_prior(std::span<const ImageSample>(refs));
    const PromptSpec prompt = bb.make_prompt("A photo of a [cls] that is damaged", "disk", "damaged");
    std::mt19937_64 rng(seed);
    LatentState z;
    z.z = cut::test::random_tensor(rng, 4, 16, 16);
    z.t = 150;
    z.T = 200;
    ForegroundMask mask;
    mask.mask16 = BinaryMask(S, S, 1);
    mask.mask_lat = BinaryMask(16, 16, 1);
    SchedulerState s;
    s.lambda = 0.01;
    s.n_start = std::max(1, count_activated(token_map(aggregate_attention(bb.capture_attention(z, prompt)),
                                                      prompt.anomaly_token_indices),
                                            mask.mask16));
    RefinementThresholds th;
    th.values = {0.999};
    th.checkpoints = {0.0};
    th.max_iterations = 5;
    const auto r = optimize_step(bb, z, prompt, mask, s, th, {}, 0, 10);
    REQUIRE(r.iterations == 5);
    REQUIRE(r.losses.size() == 6);
    for (std::size_t i = 1; i < r.losses.size(); ++i) CHECK(r.losses[i] <= r.losses[i - 1]);
    CHECK(r.losses.back() < r.losses.front());
  }
}
