#include "drarmor/attack.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "drarmor/errors.hpp"
#include "drarmor/image.hpp"
#include "drarmor/rng.hpp"
#include "drarmor/serialize.hpp"

namespace drarmor {

namespace {

const char* rule_name(ReconstructionRule rule) {
  switch (rule) {
    case ReconstructionRule::ratio: return "ratio";
    case ReconstructionRule::consecutive_difference: return "difference";
    case ReconstructionRule::both: return "both";
  }
  return "?";
}

std::vector<double> unit_random(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  std::vector<double> v(n);
  double norm = 0.0;
  for (double& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

std::vector<double> thresholds_from(std::vector<double> h, std::size_t k) {
  std::sort(h.begin(), h.end());
  const std::size_t n = h.size();
  const double range = h.back() - h.front();
  const double margin = range > 0.0 ? range / static_cast<double>(n) : 1.0;
  std::vector<double> t(k);
  t[0] = h.front() - margin;
  for (std::size_t i = 1; i < k; ++i) {
    const std::size_t q = i * n / k;
    t[i] = 0.5 * (h[q - 1] + h[q]);
    const double floor = t[i - 1] + 1e-12 * std::max(1.0, std::abs(t[i - 1]));
    if (t[i] < floor) t[i] = floor;
  }
  return t;
}

void append_bin(ReconstructionResult& out, std::size_t bin, ReconstructionRule rule, std::span<const double> dw,
                double db) {
  BinRecovery r;
  r.bin = bin;
  r.rule = rule;
  if (std::abs(db) > kActivationTolerance) {
    r.estimate = Tensor(Shape{dw.size()});
    for (std::size_t j = 0; j < dw.size(); ++j) r.estimate[j] = dw[j] / db;
  }
  out.bins.push_back(std::move(r));
}

}  // namespace

std::vector<double> measurement_direction(const ImprintPlan& plan) {
  const std::size_t f = plan.feature_size();
  if (plan.measurement == MeasurementMode::pixel_sum) {
    return std::vector<double>(f, 1.0 / std::sqrt(static_cast<double>(f)));
  }
  return unit_random(derive_seed(plan.projection_seed, 0x3EA5), f);
}

MaliciousModel build_malicious_model(const Model& base, ImprintPlan plan, const Tensor& calibration) {
  validate(base);
  if (plan.num_bins < 2) throw ConfigError("imprint block needs at least 2 bins");
  if (plan.placement > base.layers.size()) {
    throw ConfigError("imprint placement " + std::to_string(plan.placement) + " beyond the model's " +
                      std::to_string(base.layers.size()) + " layers");
  }
  const std::vector<Shape> shapes = infer_shapes(base);
  plan.feature_shape = shapes[plan.placement];
  if (plan.feature_shape.size() != 3) {
    throw ConfigError("imprint placement " + std::to_string(plan.placement) + " sees features of shape " +
                      to_string(plan.feature_shape) + "; the block needs (C, H, W)");
  }
  if (calibration.empty() || calibration.dim(0) < plan.num_bins) {
    throw ConfigError("imprint block with " + std::to_string(plan.num_bins) + " bins needs at least that many " +
                      "calibration samples");
  }
  const std::size_t f = plan.feature_size(), k = plan.num_bins, ch = plan.feature_shape[0];
  const Tensor feats = forward_range(base, calibration, 0, plan.placement);
  const std::vector<double> w_hat = measurement_direction(plan);
  std::vector<double> h(feats.dim(0));
  for (std::size_t s = 0; s < h.size(); ++s) {
    const auto x = feats.row(s);
    for (std::size_t j = 0; j < f; ++j) h[s] += w_hat[j] * x[j];
  }
  plan.thresholds = thresholds_from(std::move(h), k);

  LayerId next = base.next_free_id();
  Layer conv{Conv2D{ch, ch, 3, 1, Padding::same}, Tensor(Shape{ch, ch, 3, 3}), Tensor(Shape{ch}), next++};
  for (std::size_t c = 0; c < ch; ++c) conv.weight[((c * ch + c) * 3 + 1) * 3 + 1] = 1.0;
  plan.conv_id = conv.id;

  Layer imprint{Dense{f, f + k, true}, Tensor(Shape{f + k, f}), Tensor(Shape{f + k}), next++};
  for (std::size_t j = 0; j < f; ++j) imprint.weight[j * f + j] = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < f; ++j) imprint.weight[(f + i) * f + j] = plan.measurement_scale * w_hat[j];
    imprint.bias[f + i] = -plan.measurement_scale * plan.thresholds[i];
  }
  plan.imprint_id = imprint.id;

  const std::vector<double> u = unit_random(derive_seed(plan.projection_seed, 0xD17), f);
  Layer readout{Dense{f + k, f, true}, Tensor(Shape{f, f + k}), Tensor(Shape{f}), next++};
  for (std::size_t j = 0; j < f; ++j) {
    readout.weight[j * (f + k) + j] = 1.0;
    for (std::size_t i = 0; i < k; ++i) readout.weight[j * (f + k) + f + i] = plan.gain * u[j];
  }
  plan.readout_id = readout.id;

  std::vector<Layer> block;
  block.push_back(std::move(conv));
  block.push_back(Layer{Flatten{}, {}, {}, next++});
  block.push_back(std::move(imprint));
  block.push_back(Layer{ReLU{}, {}, {}, next++});
  block.push_back(std::move(readout));
  block.push_back(Layer{Reshape{plan.feature_shape}, {}, {}, next++});
  const std::vector<LayerTag> block_tags{LayerTag::malicious, LayerTag::benign, LayerTag::malicious,
                                         LayerTag::benign,    LayerTag::malicious, LayerTag::benign};

  MaliciousModel out;
  out.tagged.model.input_shape = base.input_shape;
  out.tagged.model.layers = base.layers;
  out.tagged.model.layers.insert(out.tagged.model.layers.begin() + static_cast<std::ptrdiff_t>(plan.placement),
                                 block.begin(), block.end());
  out.tagged.tags.assign(base.layers.size(), LayerTag::benign);
  out.tagged.tags.insert(out.tagged.tags.begin() + static_cast<std::ptrdiff_t>(plan.placement), block_tags.begin(),
                         block_tags.end());
  out.plan = std::move(plan);
  validate(out.tagged.model);
  if (infer_shapes(out.tagged.model).back() != shapes.back()) {
    throw ConfigError("imprint block changed the model's output shape");
  }
  return out;
}

std::size_t ReconstructionResult::active_bins() const {
  return static_cast<std::size_t>(std::count_if(bins.begin(), bins.end(), [](const BinRecovery& b) { return b.active(); }));
}

ReconstructionResult server_reconstruct(const GradientReport& grads, const ImprintPlan& plan, ReconstructionRule rule) {
  ReconstructionResult out;
  const std::size_t f = plan.feature_size(), k = plan.num_bins;
  const LayerGradient* g = grads.find(plan.imprint_id);
  const bool usable = g != nullptr && g->weight.shape() == Shape{f + k, f} && g->bias.shape() == Shape{f + k};
  std::vector<double> diff(f);
  for (std::size_t i = 0; i < k; ++i) {
    if (!usable) {
      out.bins.push_back(BinRecovery{i, rule, {}, std::nullopt, 0.0, 0.0, false});
      continue;
    }
    const auto dw = g->weight.row(f + i);
    const double db = g->bias[f + i];
    if (rule != ReconstructionRule::consecutive_difference) append_bin(out, i, ReconstructionRule::ratio, dw, db);
    if (rule != ReconstructionRule::ratio) {
      if (i + 1 == k) {
        append_bin(out, i, ReconstructionRule::consecutive_difference, dw, db);
      } else {
        const auto up = g->weight.row(f + i + 1);
        for (std::size_t j = 0; j < f; ++j) diff[j] = dw[j] - up[j];
        append_bin(out, i, ReconstructionRule::consecutive_difference, diff, db - g->bias[f + i + 1]);
      }
    }
  }
  return out;
}

Tensor block_inputs(const MaliciousModel& attacked, const Tensor& batch) {
  const Model& m = attacked.model();
  const std::size_t at = m.index_of(attacked.plan.conv_id);
  if (at == m.layers.size()) throw ConsistencyError("attacked model lost its imprint block");
  Tensor feats = forward_range(m, batch, 0, at);
  return feats.reshaped(Shape{batch.dim(0), attacked.plan.feature_size()});
}

void score_reconstruction(ReconstructionResult& result, const Tensor& truth, const Shape& feature_shape,
                          std::size_t population) {
  std::set<std::size_t> recovered;
  for (auto& bin : result.bins) {
    if (!bin.active()) continue;
    double best = INFINITY;
    for (std::size_t s = 0; s < truth.dim(0); ++s) {
      const double mse = mean_squared_error(bin.estimate.data(), truth.row(s));
      if (mse < best) {
        best = mse;
        bin.match = s;
      }
    }
    if (!bin.match) continue;
    bin.mse = best;
    const auto row = truth.row(*bin.match);
    Tensor original(feature_shape, std::vector<double>(row.begin(), row.end()));
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double range = *hi - *lo;
    bin.ssim = ssim(bin.estimate.reshaped(feature_shape), original, range > 0.0 ? range : 1.0);
    bin.leaked = std::isfinite(best) && best < kLeakageMseThreshold;
    if (bin.leaked) recovered.insert(*bin.match);
  }
  result.leakage_count = recovered.size();
  result.leakage_rate = population == 0 ? 0.0 : static_cast<double>(recovered.size()) / static_cast<double>(population);
}

std::vector<std::optional<std::size_t>> isolated_samples(const ImprintPlan& plan, const Tensor& truth) {
  const std::size_t f = plan.feature_size(), k = plan.num_bins;
  if (truth.rank() != 2 || truth.dim(1) != f || plan.thresholds.size() != k) {
    throw InputError("truth rows do not match the imprint plan");
  }
  const std::vector<double> w_hat = measurement_direction(plan);
  std::vector<std::size_t> count(k, 0);
  std::vector<std::size_t> last(k, 0);
  for (std::size_t s = 0; s < truth.dim(0); ++s) {
    const auto x = truth.row(s);
    double h = 0.0;
    for (std::size_t j = 0; j < f; ++j) h += w_hat[j] * x[j];
    // Highest bin whose threshold h exceeds; the sample lands in that interval.
    std::size_t bin = k;
    for (std::size_t i = 0; i < k; ++i)
      if (h > plan.thresholds[i]) bin = i;
    if (bin == k) continue;
    ++count[bin];
    last[bin] = s;
  }
  std::vector<std::optional<std::size_t>> out(k);
  for (std::size_t i = 0; i < k; ++i)
    if (count[i] == 1) out[i] = last[i];
  return out;
}

std::optional<IsolatedScore> isolated_ssim(const ReconstructionResult& result, const ImprintPlan& plan,
                                           const Tensor& truth) {
  const auto occupants = isolated_samples(plan, truth);
  IsolatedScore score;
  double total = 0.0;
  for (std::size_t i = 0; i < occupants.size(); ++i) {
    if (!occupants[i]) continue;
    const auto row = truth.row(*occupants[i]);
    const Tensor original(plan.feature_shape, std::vector<double>(row.begin(), row.end()));
    Tensor estimate(plan.feature_shape);
    for (const auto& bin : result.bins) {
      if (bin.bin == i && bin.rule == ReconstructionRule::consecutive_difference && bin.active()) {
        estimate = bin.estimate.reshaped(plan.feature_shape);
      }
    }
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double value = ssim(estimate, original, *hi > *lo ? *hi - *lo : 1.0);
    total += value;
    score.ssim_max = score.bins == 0 ? value : std::max(score.ssim_max, value);
    ++score.bins;
  }
  if (score.bins == 0) return std::nullopt;
  score.ssim_mean = total / static_cast<double>(score.bins);
  return score;
}

void dump_reconstruction(const ReconstructionResult& result, const Tensor& truth, const Shape& feature_shape,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& bin : result.bins) {
    nlohmann::json entry{{"bin", bin.bin}, {"rule", rule_name(bin.rule)}, {"active", bin.active()}};
    if (bin.active()) {
      const std::string stem = "bin_" + std::to_string(bin.bin) + "_" + rule_name(bin.rule);
      write_pgm(dir / (stem + ".pgm"), bin.estimate.reshaped(feature_shape));
      entry["file"] = stem + ".pgm";
      if (bin.match) {
        const auto row = truth.row(*bin.match);
        const std::string orig = "original_" + std::to_string(*bin.match) + ".pgm";
        write_pgm(dir / orig, Tensor(feature_shape, std::vector<double>(row.begin(), row.end())));
        entry["original"] = orig;
        entry["matched_sample"] = *bin.match;
        entry["mse"] = bin.mse;
        entry["ssim"] = bin.ssim;
        entry["leaked"] = bin.leaked;
      }
    }
    bins.push_back(std::move(entry));
  }
  nlohmann::json doc{{"leakage_count", result.leakage_count},
                     {"leakage_rate", result.leakage_rate},
                     {"active_bins", result.active_bins()},
                     {"bins", std::move(bins)}};
  write_file(dir / "reconstruction.json", doc.dump(2) + "\n");
}

}  // namespace drarmor
