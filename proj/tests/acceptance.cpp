// Acceptance run: prints one PASS/FAIL line per criterion. Exits 0 once every
// selected criterion has run; with --strict any FAIL makes the exit code 1.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "drarmor/attack.hpp"
#include "drarmor/config.hpp"
#include "drarmor/data.hpp"
#include "drarmor/detector.hpp"
#include "drarmor/flsim.hpp"
#include "drarmor/harness.hpp"
#include "drarmor/mitigator.hpp"
#include "drarmor/nn.hpp"
#include "drarmor/rng.hpp"
#include "test_support.hpp"

using namespace drarmor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  std::string name;
  double limit_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------- 1
Outcome gradient_correctness() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Model m = seed % 2 ? test_support::random_mlp(seed, 6, 32) : test_support::random_cnn(seed);
    const Tensor x = test_support::random_batch(seed + 1000, 3, m.input_shape);
    const auto y = test_support::random_labels(seed, 3, test_support::classes_of(m));
    const auto g = backward(m, forward(m, x), y);
    const auto fd = finite_diff_grad(m, x, y, 1e-5);
    worst = std::max(worst, test_support::max_relative_error(g, fd));
  }
  return {worst < 1e-4, fmt("20 models, max relative error %.3e (< 1e-4)", worst)};
}

// ---------------------------------------------------------------- 2
Outcome attack_exactness() {
  std::size_t bins = 0, exact = 0, seeds_without_bins = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto data = synth_dataset(SynthKind::stripes, 300, 12, 4, seed);
    const Model base = init_model(base_architecture(data.sample_shape, data.classes), data.sample_shape, seed);
    const Split batch = subset(data.train, 0, 8);
    ImprintPlan plan;
    plan.num_bins = 8;
    plan.gain = 100.0;
    // Calibrating on the batch itself puts one sample in each bin interval.
    const MaliciousModel mal = build_malicious_model(base, plan, batch.images);
    const Tensor truth = block_inputs(mal, batch.images);
    const auto grads = backward(mal.model(), forward(mal.model(), batch.images), batch.labels);
    auto result = server_reconstruct(grads, mal.plan, ReconstructionRule::consecutive_difference);
    score_reconstruction(result, truth, mal.plan.feature_shape, batch.size());
    const auto occupants = isolated_samples(mal.plan, truth);
    std::size_t active = 0;
    for (const auto& bin : result.bins) {
      if (!bin.active() || !occupants[bin.bin]) continue;
      ++active;
      ++bins;
      const std::size_t f = mal.plan.feature_size();
      const auto* t = truth.data().data() + *occupants[bin.bin] * f;
      double mse = 0.0;
      for (std::size_t j = 0; j < f; ++j) mse += (bin.estimate[j] - t[j]) * (bin.estimate[j] - t[j]);
      mse /= static_cast<double>(f);
      worst = std::max(worst, mse);
      exact += mse < 1e-6;
    }
    seeds_without_bins += active == 0;
  }
  return {bins > 0 && exact == bins && seeds_without_bins == 0,
          fmt("20 seeds, %zu active single-sample bins, %zu with MSE < 1e-6, worst %.3e", bins, exact, worst)};
}

// ---------------------------------------------------------------- 3, 4
struct DetectionStats {
  double tpr = 0.0;
  double tnr = 0.0;
  double margin = 0.0;
};

DetectionStats detection_stats(Placement placement) {
  const DetectorConfig cfg;
  double tpr = 0.0, tnr = 0.0, margin = 0.0;
  std::size_t flagged = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto data = synth_dataset(SynthKind::blobs, 800, 12, 4, seed);
    const Model base = init_model(base_architecture(data.sample_shape, data.classes), data.sample_shape, seed);
    ImprintPlan plan;
    plan.placement = placement_index(placement);
    plan.gain = AttackSettings{}.gain;
    plan.projection_seed = seed;
    const MaliciousModel mal = build_malicious_model(base, plan, subset(data.validation, 0, 64).images);
    const Split client = subset(data.train, 400, 64);
    const auto report = detect(mal.model(), client.images, client.labels, cfg);
    std::vector<bool> flags(mal.model().layers.size(), false);
    for (const auto& s : report.scores) {
      flags[s.layer_index] = s.flagged;
      if (s.flagged) {
        margin += s.normalized_score - cfg.tau;
        ++flagged;
      }
    }
    const Confusion c = detection_confusion(flags, mal.tagged.tags, mal.model());
    tpr += c.tpr().value_or(0.0) / 20.0;
    tnr += c.tnr().value_or(0.0) / 20.0;
  }
  return {tpr, tnr, flagged ? margin / static_cast<double>(flagged) : 0.0};
}

DetectionStats start_stats;

Outcome detection_start() {
  start_stats = detection_stats(Placement::start);
  return {start_stats.tpr >= 0.90 && start_stats.tnr >= 0.85,
          fmt("blobs, 20 seeds: TPR %.3f (>= 0.90), TNR %.3f (>= 0.85), flagged margin %.3f", start_stats.tpr,
              start_stats.tnr, start_stats.margin)};
}

Outcome detection_deep() {
  const DetectionStats deep = detection_stats(Placement::deep);
  return {deep.tpr >= 0.80 && deep.margin < start_stats.margin,
          fmt("blobs, 20 seeds: TPR %.3f (>= 0.80), TNR %.3f, margin %.3f (< start %.3f)", deep.tpr, deep.tnr,
              deep.margin, start_stats.margin)};
}

// ---------------------------------------------------------------- 5
Outcome pruning_leakage() {
  ExperimentConfig c = preset_config("mnist-start-3mal");
  c.round.defense.mode = DefenseMode::prune;
  std::string rows;
  bool zero = true;
  for (const auto& row : leakage_sweep(c, {50, 100, 200, 500})) {
    zero = zero && row.leakage_rate == 0.0 && row.images_leaked == 0;
    rows += fmt(" %zu:%g", row.size, row.leakage_rate);
  }
  return {zero, "leakage rate by local size" + rows};
}

// ---------------------------------------------------------------- 6, 8
ExperimentConfig task_config(std::uint64_t seed) {
  ExperimentConfig c = preset_config("mnist-start-3mal");
  c.round.seed = seed;
  c.compare_baseline = false;
  c.dump_reconstructions = false;
  return c;
}

double final_accuracy(ExperimentConfig c) { return run_experiment(c).final_accuracy; }

Outcome defense_utility() {
  std::vector<double> clean, noise, prune;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentConfig c = task_config(seed);
    ExperimentConfig base = c;
    base.round.poisoning = Poisoning::none;
    clean.push_back(final_accuracy(base));
    c.round.defense.mode = DefenseMode::noise_gaussian;
    noise.push_back(final_accuracy(c));
    c.round.defense.mode = DefenseMode::prune;
    prune.push_back(final_accuracy(c));
    std::printf("    seed %llu: clean %.3f noise %.3f (delta_acc %+.3f) prune %.3f (delta_acc %+.3f)\n",
                static_cast<unsigned long long>(seed), clean.back(), noise.back(),
                delta_acc(clean.back(), noise.back()), prune.back(), delta_acc(clean.back(), prune.back()));
    std::fflush(stdout);
  }
  const double dn = delta_acc(mean(clean), mean(noise)), dp = delta_acc(mean(clean), mean(prune));
  return {dn < 0.10 && dp < 0.12,
          fmt("5 seeds: clean %.3f, noise %.3f (delta %.3f < 0.10), prune %.3f (delta %.3f < 0.12)", mean(clean),
              mean(noise), dn, mean(prune), dp)};
}

Outcome poisoning_robustness() {
  std::string detail;
  bool pass = true;
  for (DefenseMode mode : {DefenseMode::noise_gaussian, DefenseMode::prune}) {
    std::vector<double> cont, per;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      ExperimentConfig c = task_config(seed);
      c.round.defense.mode = mode;
      cont.push_back(final_accuracy(c));
      c.round.poisoning = Poisoning::periodic;
      c.round.period = 3;
      per.push_back(final_accuracy(c));
    }
    const double gap = std::abs(mean(cont) - mean(per));
    pass = pass && gap < 0.03;
    detail += fmt("%s%s: continuous %.3f periodic %.3f gap %.3f (< 0.03)", detail.empty() ? "" : "; ",
                  defense_name(mode).c_str(), mean(cont), mean(per), gap);
    std::printf("    %s\n", detail.c_str());
    std::fflush(stdout);
  }
  return {pass, "5 seeds, " + detail};
}

// ---------------------------------------------------------------- 7
Outcome pixelation_privacy() {
  std::vector<double> clean, pixelated;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentConfig c = task_config(seed);
    c.synth_kind = SynthKind::stripes;
    const auto plain = attack_demo(c, 16);
    if (plain.metrics.ssim_mean) clean.push_back(*plain.metrics.ssim_mean);
    c.round.defense.mode = DefenseMode::pixelate;
    c.round.defense.block = 4;
    const auto pix = attack_demo(c, 16);
    if (pix.metrics.ssim_mean) pixelated.push_back(*pix.metrics.ssim_mean);
  }
  const bool measured = clean.size() == 5 && pixelated.size() == 5;
  return {measured && mean(clean) > 0.9 && mean(pixelated) < 0.45,
          fmt("stripes, b=4, 5 seeds: clean SSIM %.3f (> 0.9), pixelated SSIM %.3f (< 0.45), %zu/%zu seeds measured",
              mean(clean), mean(pixelated), clean.size(), pixelated.size())};
}

// ---------------------------------------------------------------- 9
Outcome wasserstein_oracle() {
  Rng rng(2024);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = test_support::random_points(rng, 5), q = test_support::random_points(rng, 5);
    worst = std::max(worst, std::abs(wasserstein_1d(p, q) - test_support::transport_oracle(p, q)));
  }
  return {worst < 1e-6, fmt("1000 cases, max |W - OT| %.3e (< 1e-6)", worst)};
}

// ---------------------------------------------------------------- 10
bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                                              [](double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0; });
}

bool lrp_conservation() {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Model m = init_model({Dense{6, 5}, ReLU{}, Dense{5, 4}, ReLU{}, Dense{4, 3}, LogSoftmax{}}, {6}, seed);
    Rng rng(seed);
    for (Layer& l : m.layers) {
      for (double& w : l.weight.values()) w = rng.uniform(0.01, 1.0);
      for (double& b : l.bias.values()) b = 0.0;
    }
    Tensor x({4, 6});
    for (double& v : x.values()) v = rng.uniform(0.05, 1.0);
    const std::vector<int> targets{0, 1, 2, 1};
    const auto map = lrp_relevance(m, forward(m, x), targets, 1e-9);
    for (const Tensor& r : map.layers)
      if (std::abs(std::accumulate(r.values().begin(), r.values().end(), 0.0) - map.total) >= 1e-6) return false;
  }
  return true;
}

bool dtd_zero_at_root() {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Model m = test_support::random_cnn(seed);
    const Tensor x = test_support::random_batch(seed, 3, m.input_shape);
    const auto targets = test_support::random_labels(seed, 3, test_support::classes_of(m));
    for (const Tensor& r : dtd_relevance(m, forward(m, x), targets, x).layers)
      for (double v : r.values())
        if (v != 0.0) return false;
  }
  return true;
}

bool pixelation_properties() {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + rng.index(5);
    const std::size_t m = trial % 2 ? 1 + rng.index(12) : b * (1 + rng.index(3));
    const std::size_t n = trial % 2 ? 1 + rng.index(12) : b * (1 + rng.index(3));
    Tensor g({m, n});
    for (double& v : g.values()) v = rng.normal();
    const Tensor once = pixelate(g, b);
    if (!(pixelate(once, b) == once)) return false;
    if (m % b == 0 && n % b == 0) {
      const double before = std::accumulate(g.values().begin(), g.values().end(), 0.0);
      const double after = std::accumulate(once.values().begin(), once.values().end(), 0.0);
      if (std::abs(before - after) / static_cast<double>(g.size()) >= 1e-12) return false;
    }
  }
  return true;
}

bool noise_targeting() {
  Rng rng(12);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Model m = test_support::random_cnn(seed);
    const Tensor x = test_support::random_batch(seed, 3, m.input_shape);
    const auto g = backward(m, forward(m, x), test_support::random_labels(seed, 3, test_support::classes_of(m)));
    std::vector<Verdict> flagged;
    std::set<std::size_t> hit;
    for (std::size_t k = 0; k < g.layers.size(); ++k)
      if (!g.layers[k].weight.empty() && rng.uniform() < 0.4) {
        flagged.push_back({k, rng.uniform()});
        hit.insert(k);
      }
    for (auto mode : {DefenseMode::noise_gaussian, DefenseMode::noise_laplace, DefenseMode::pixelate}) {
      DefenseAction action;
      action.mode = mode;
      const auto out = sanitize(g, flagged, action, seed);
      for (std::size_t k = 0; k < g.layers.size(); ++k) {
        if (hit.count(k)) continue;
        if (!bit_identical(out.grads.layers[k].weight, g.layers[k].weight)) return false;
        if (!bit_identical(out.grads.layers[k].bias, g.layers[k].bias)) return false;
      }
    }
  }
  return true;
}

bool confusion_identities() {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const Confusion c{1 + rng.index(50), rng.index(50), 1 + rng.index(50), rng.index(50)};
    if (std::abs(*c.tpr() + *c.fnr() - 1.0) > 1e-12 || std::abs(*c.tnr() + *c.fpr() - 1.0) > 1e-12) return false;
    if (c.malicious() + c.benign() != c.tp + c.fn + c.tn + c.fp) return false;
  }
  return true;
}

bool experiment_determinism() {
  ExperimentConfig c = preset_config("mnist-start-3mal");
  c.synth_n = 600;
  c.synth_side = 8;
  c.rounds = 3;
  c.round.num_clients = 4;
  c.round.clients_per_round = 2;
  c.round.batch_size = 16;
  c.round.local_steps = 2;
  c.round.defense.mode = DefenseMode::noise_gaussian;
  c.compare_baseline = false;
  c.dump_reconstructions = false;
  const auto a = run_experiment(c), b = run_experiment(c);
  return metrics_csv(a.rounds) == metrics_csv(b.rounds) && summary_json(c, a) == summary_json(c, b);
}

Outcome property_suites() {
  const std::vector<std::pair<std::string, std::function<bool()>>> suites{
      {"lrp-conservation", lrp_conservation},     {"dtd-zero-at-root", dtd_zero_at_root},
      {"pixelation", pixelation_properties},      {"noise-targeting", noise_targeting},
      {"confusion", confusion_identities},        {"determinism", experiment_determinism}};
  bool all = true;
  std::string detail;
  for (const auto& [name, suite] : suites) {
    const bool ok = suite();
    all = all && ok;
    detail += (detail.empty() ? "" : " ") + name + (ok ? "=ok" : "=FAILED");
  }
  return {all, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  bool strict = false;
  std::vector<int> only;
  app.add_flag("--strict", strict, "Exit 1 when any criterion fails");
  app.add_option("--only", only, "Run only these criterion numbers");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 30, gradient_correctness},
      {2, "attack exactness", 30, attack_exactness},
      {3, "detection, start placement", 300, detection_start},
      {4, "detection, deep placement", 300, detection_deep},
      {5, "pruning leakage zero", 120, pruning_leakage},
      {6, "targeted-defense utility", 600, defense_utility},
      {7, "pixelation privacy", 120, pixelation_privacy},
      {8, "poisoning robustness", 600, poisoning_robustness},
      {9, "wasserstein oracle", 30, wasserstein_oracle},
      {10, "property suites", 120, property_suites},
  };
  auto selected = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  if (selected(4) && !selected(3)) only.push_back(3);

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected(c.number)) continue;
    std::printf("criterion %d (%s) ...\n", c.number, c.name.c_str());
    std::fflush(stdout);
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = seconds < c.limit_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s criterion %d (%s): %s; %.1f s (limit %.0f s%s)\n", pass ? "PASS" : "FAIL", c.number,
                c.name.c_str(), o.detail.c_str(), seconds, c.limit_seconds, in_time ? "" : ", exceeded");
    std::fflush(stdout);
  }
  std::printf("%d criterion(s) failed\n", failures);
  return strict && failures ? 1 : 0;
}
