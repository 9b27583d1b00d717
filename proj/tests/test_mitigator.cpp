#include <cmath>
#include <cstring>
#include <numeric>

#include "doctest.h"
#include "drarmor/attack.hpp"
#include "drarmor/data.hpp"
#include "drarmor/errors.hpp"
#include "drarmor/flsim.hpp"
#include "drarmor/mitigator.hpp"
#include "drarmor/nn.hpp"
#include "test_support.hpp"

using namespace drarmor;

namespace {

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0);
}

GradientReport single_layer(std::size_t n, double fill = 0.0) {
  GradientReport g;
  LayerGradient lg;
  lg.id = 7;
  lg.weight = Tensor({n}, fill);
  g.layers.push_back(lg);
  return g;
}

Tensor iota_matrix(std::size_t m, std::size_t n) {
  Tensor t({m, n});
  std::iota(t.values().begin(), t.values().end(), 1.0);
  return t;
}

GradientReport random_gradients(std::uint64_t seed) {
  const Model m = test_support::random_cnn(seed);
  const Tensor x = test_support::random_batch(seed, 3, m.input_shape);
  const auto y = test_support::random_labels(seed, 3, test_support::classes_of(m));
  return backward(m, forward(m, x), y);
}

}  // namespace

TEST_CASE("pixelate: hand-computed 4x4 example") {
  const Tensor p = pixelate(iota_matrix(4, 4), 2);
  const Tensor expected({4, 4}, {3.5, 3.5, 5.5, 5.5, 3.5, 3.5, 5.5, 5.5, 11.5, 11.5, 13.5, 13.5, 11.5, 11.5, 13.5, 13.5});
  CHECK(p == expected);
}

TEST_CASE("pixelate: identity, constants and ragged edges") {
  const Tensor g = iota_matrix(5, 7);
  CHECK(pixelate(g, 1) == g);
  const Tensor c({6, 6}, 0.25);
  CHECK(pixelate(c, 4) == c);
  // 3x3 with b=2: blocks {1,2,4,5}, {3,6}, {7,8}, {9}.
  const Tensor r = pixelate(iota_matrix(3, 3), 2);
  CHECK(r == Tensor({3, 3}, {3, 3, 4.5, 3, 3, 4.5, 7.5, 7.5, 9}));
  CHECK_THROWS_AS(pixelate(g, 0), ConfigError);
  CHECK_THROWS_AS(pixelate(Tensor({8}), 2), InputError);
}

TEST_CASE("pixelate: idempotent on random matrices") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.index(12), n = 1 + rng.index(12), b = 1 + rng.index(5);
    Tensor g({m, n});
    for (double& v : g.values()) v = rng.normal();
    const Tensor once = pixelate(g, b);
    CHECK(pixelate(once, b) == once);
  }
}

TEST_CASE("pixelate: preserves the global mean when b divides both sides") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 1 + rng.index(4), m = b * (1 + rng.index(4)), n = b * (1 + rng.index(4));
    Tensor g({m, n});
    for (double& v : g.values()) v = rng.normal();
    const Tensor p = pixelate(g, b);
    const double before = std::accumulate(g.values().begin(), g.values().end(), 0.0) / static_cast<double>(g.size());
    const double after = std::accumulate(p.values().begin(), p.values().end(), 0.0) / static_cast<double>(p.size());
    CHECK(std::abs(before - after) < 1e-12);
  }
}

TEST_CASE("pixelate_gradients: conv kernels slice by slice, biases as a row") {
  GradientReport g;
  LayerGradient conv;
  conv.id = 1;
  conv.weight = Tensor({2, 1, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  conv.bias = Tensor({4}, {1, 3, 5, 7});
  g.layers.push_back(conv);
  const std::vector<Verdict> flagged{{0, 0.5}};
  const auto out = pixelate_gradients(g, flagged, 2);
  CHECK(out.grads.layers[0].weight == Tensor({2, 1, 2, 2}, {2.5, 2.5, 2.5, 2.5, 25, 25, 25, 25}));
  CHECK(out.grads.layers[0].bias == Tensor({4}, {2, 2, 6, 6}));
  REQUIRE(out.provenance.size() == 1);
  CHECK(out.provenance[0].mode == "pixelate");
  CHECK(out.provenance[0].parameters.at("block") == 2.0);
}

TEST_CASE("noise_gaussian: zero base variance is bit-identical") {
  const GradientReport g = random_gradients(1);
  std::vector<Verdict> all;
  for (std::size_t k = 0; k < g.layers.size(); ++k) all.push_back({k, 1.0});
  const auto out = noise_gaussian(g, all, 0.0, 3.0, 9);
  for (std::size_t k = 0; k < g.layers.size(); ++k) {
    CHECK(bit_identical(out.grads.layers[k].weight, g.layers[k].weight));
    CHECK(bit_identical(out.grads.layers[k].bias, g.layers[k].bias));
  }
}

TEST_CASE("noise_gaussian: confidence-scaled variance") {
  const std::size_t n = 100000;
  const std::vector<Verdict> flagged{{0, 1.0}};
  const auto out = noise_gaussian(single_layer(n), flagged, 0.1, 1.0, 21);
  const auto& v = out.grads.layers[0].weight.values();
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(n - 1);
  CHECK(std::abs(var - 0.2) < 0.05 * 0.2);
  CHECK(out.provenance[0].parameters.at("variance") == doctest::Approx(0.2));
}

TEST_CASE("noise_laplace: mean absolute noise equals the scale") {
  const std::size_t n = 100000;
  const std::vector<Verdict> flagged{{0, 0.3}};
  const auto out = noise_laplace(single_layer(n), flagged, 0.5, 2.0, 5);
  double mad = 0.0;
  for (double x : out.grads.layers[0].weight.values()) mad += std::abs(x);
  CHECK(std::abs(mad / n - 0.25) < 0.05 * 0.25);

  const auto tiny = noise_laplace(single_layer(1000), flagged, 1e-12, 1.0, 5);
  for (double x : tiny.grads.layers[0].weight.values()) CHECK(std::abs(x) < 1e-9);
  CHECK_THROWS_AS(noise_laplace(single_layer(2), flagged, 1.0, 0.0, 5), ConfigError);
}

TEST_CASE("noise is unbiased across seeds") {
  const std::vector<Verdict> flagged{{0, 0.5}};
  const std::size_t seeds = 10000;
  for (int mode = 0; mode < 2; ++mode) {
    double sum = 0.0, sumsq = 0.0;
    std::size_t count = 0;
    for (std::uint64_t s = 0; s < seeds; ++s) {
      const auto out = mode == 0 ? noise_gaussian(single_layer(4, 1.0), flagged, 0.2, 1.0, s)
                                 : noise_laplace(single_layer(4, 1.0), flagged, 1.0, 1.0, s);
      for (double x : out.grads.layers[0].weight.values()) {
        sum += x - 1.0;
        sumsq += (x - 1.0) * (x - 1.0);
        ++count;
      }
    }
    const double mean = sum / count, sd = std::sqrt(sumsq / count - mean * mean);
    CHECK(std::abs(mean) < 3.0 * sd / std::sqrt(static_cast<double>(count)));
  }
}

TEST_CASE("every defense leaves unflagged layers bit-identical") {
  Rng rng(12);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const GradientReport g = random_gradients(seed);
    std::vector<Verdict> flagged;
    std::vector<bool> is_flagged(g.layers.size(), false);
    for (std::size_t k = 0; k < g.layers.size(); ++k) {
      if (rng.uniform() < 0.4) {
        flagged.push_back({k, rng.uniform()});
        is_flagged[k] = true;
      }
    }
    for (auto mode : {DefenseMode::noise_gaussian, DefenseMode::noise_laplace, DefenseMode::pixelate}) {
      DefenseAction action;
      action.mode = mode;
      const auto out = sanitize(g, flagged, action, seed);
      for (std::size_t k = 0; k < g.layers.size(); ++k) {
        CHECK(bit_identical(out.grads.layers[k].input, g.layers[k].input));
        if (is_flagged[k]) continue;
        CHECK(bit_identical(out.grads.layers[k].weight, g.layers[k].weight));
        CHECK(bit_identical(out.grads.layers[k].bias, g.layers[k].bias));
      }
      for (const auto& p : out.provenance) CHECK(is_flagged[p.layer_index]);
    }
  }
}

TEST_CASE("noise is deterministic per seed and differs across seeds") {
  const std::vector<Verdict> flagged{{0, 1.0}};
  const auto a = noise_gaussian(single_layer(16), flagged, 0.2, 1.0, 3);
  const auto b = noise_gaussian(single_layer(16), flagged, 0.2, 1.0, 3);
  const auto c = noise_gaussian(single_layer(16), flagged, 0.2, 1.0, 4);
  CHECK(bit_identical(a.grads.layers[0].weight, b.grads.layers[0].weight));
  CHECK_FALSE(bit_identical(a.grads.layers[0].weight, c.grads.layers[0].weight));
}

TEST_CASE("orthonormal_sketch preserves variance") {
  for (auto [out, in] : {std::pair<std::size_t, std::size_t>{4, 9}, {9, 4}, {5, 5}}) {
    const Tensor w = orthonormal_sketch(out, in, 3);
    const bool rows = out <= in;
    const std::size_t count = rows ? out : in, length = rows ? in : out;
    const double expect = rows ? static_cast<double>(in) / out : static_cast<double>(out) / in;
    for (std::size_t a = 0; a < count; ++a)
      for (std::size_t b = 0; b < count; ++b) {
        double dot = 0.0;
        for (std::size_t i = 0; i < length; ++i) {
          dot += rows ? w[a * in + i] * w[b * in + i] : w[i * in + a] * w[i * in + b];
        }
        CHECK(dot == doctest::Approx(a == b ? expect : 0.0).epsilon(1e-9));
      }
  }
}

TEST_CASE("prune_and_bridge: empty flag set leaves the model unchanged") {
  const Model m = test_support::random_cnn(2);
  CHECK(prune_and_bridge(m, {}) == m);
}

TEST_CASE("prune_and_bridge: removing the imprint block restores a working model without leakage") {
  const auto data = synth_dataset(SynthKind::stripes, 300, 12, 4, 6);
  const Model base = init_model(base_architecture(data.sample_shape, data.classes), data.sample_shape, 6);
  for (std::size_t placement : {std::size_t{0}, std::size_t{4}}) {
    ImprintPlan plan;
    plan.placement = placement;
    plan.gain = 100.0;
    const MaliciousModel mal = build_malicious_model(base, plan, data.validation.images);
    std::vector<Verdict> flagged;
    for (std::size_t k = 0; k < mal.tagged.tags.size(); ++k)
      if (mal.tagged.tags[k] == LayerTag::malicious) flagged.push_back({k, 1.0});
    const Model pruned = prune_and_bridge(mal.model(), flagged);
    CHECK(infer_shapes(pruned).back() == infer_shapes(base).back());
    CHECK(pruned.input_shape == base.input_shape);
    CHECK(pruned.find(mal.plan.conv_id) == nullptr);
    CHECK(pruned.find(mal.plan.imprint_id) == nullptr);
    CHECK(pruned.find(mal.plan.readout_id) == nullptr);

    const Split batch = subset(data.train, 0, 16);
    const auto trace = forward(pruned, batch.images);
    CHECK(trace.output.all_finite());
    const GradientReport grads = backward(pruned, trace, batch.labels);
    CHECK(grads.find(mal.plan.imprint_id) == nullptr);
    auto result = server_reconstruct(grads, mal.plan, ReconstructionRule::both);
    score_reconstruction(result, block_inputs(mal, batch.images), mal.plan.feature_shape, batch.size());
    CHECK(result.active_bins() == 0);
    CHECK(result.leakage_rate == 0.0);
  }
}

TEST_CASE("prune_and_bridge: width and channel gaps get adapters") {
  const Model m = init_model({Conv2D{1, 3, 3, 1, Padding::same}, ReLU{}, Conv2D{3, 5, 3, 1, Padding::same}, ReLU{},
                              Flatten{}, Dense{5 * 16, 12}, ReLU{}, Dense{12, 7}, ReLU{}, Dense{7, 3}, LogSoftmax{}},
                             {1, 4, 4}, 3);
  const Tensor x = test_support::random_batch(1, 2, m.input_shape);
  SUBCASE("dense in the middle") {
    const std::vector<Verdict> flagged{{7, 1.0}};
    const Model p = prune_and_bridge(m, flagged);
    CHECK(infer_shapes(p).back() == Shape{3});
    CHECK(forward(p, x).output.all_finite());
  }
  SUBCASE("conv changing channels") {
    const std::vector<Verdict> flagged{{2, 1.0}};
    const Model p = prune_and_bridge(m, flagged);
    CHECK(infer_shapes(p).back() == Shape{3});
    CHECK(forward(p, x).output.all_finite());
  }
  SUBCASE("the output layer") {
    const std::vector<Verdict> flagged{{9, 1.0}};
    const Model p = prune_and_bridge(m, flagged);
    CHECK(infer_shapes(p).back() == Shape{3});
    CHECK(forward(p, x).output.all_finite());
  }
  SUBCASE("everything") {
    std::vector<Verdict> flagged;
    for (std::size_t k = 0; k < m.layers.size(); ++k)
      if (m.layers[k].parameterized()) flagged.push_back({k, 1.0});
    CHECK_THROWS_AS(prune_and_bridge(m, flagged), PruneRefused);
  }
  SUBCASE("a verdict outside the model") {
    const std::vector<Verdict> flagged{{99, 1.0}};
    CHECK_THROWS_AS(prune_and_bridge(m, flagged), InputError);
  }
}

TEST_CASE("delta_acc") {
  CHECK(delta_acc(0.924, 0.874) == doctest::Approx(0.050));
  CHECK(delta_acc(0.894, 0.843) == doctest::Approx(0.051));
  CHECK(delta_acc(0.7, 0.7) == 0.0);
  CHECK_THROWS_AS(delta_acc(1.2, 0.5), InputError);
  CHECK_THROWS_AS(delta_acc(0.5, -0.1), InputError);
}

TEST_CASE("defense names and validation") {
  CHECK(parse_defense("noise") == DefenseMode::noise_gaussian);
  CHECK(parse_defense(defense_name(DefenseMode::prune)) == DefenseMode::prune);
  CHECK_THROWS_AS(parse_defense("magic"), ConfigError);
  DefenseAction a;
  a.block = 0;
  CHECK_THROWS_AS(a.check(), ConfigError);
  a = {};
  a.sigma2_base = -1.0;
  CHECK_THROWS_AS(a.check(), ConfigError);
}
