#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "drarmor/detector.hpp"
#include "drarmor/model.hpp"
#include "drarmor/nn.hpp"

namespace drarmor {

enum class DefenseMode { none, noise_gaussian, noise_laplace, pixelate, prune };

std::string defense_name(DefenseMode mode);
DefenseMode parse_defense(const std::string& name);  // accepts "noise" for noise_gaussian

struct DefenseAction {
  DefenseMode mode = DefenseMode::none;
  double sigma2_base = 0.2;
  double alpha = 1.0;
  double sensitivity = 1.0;  // Laplace delta_g
  double epsilon_dp = 1.0;
  std::size_t block = 4;

  void check() const;
};

struct Verdict {
  std::size_t layer_index = 0;
  double confidence = 0.0;
};

std::vector<Verdict> verdicts_from(const DetectionReport& report);

struct ProvenanceEntry {
  std::size_t layer_index = 0;
  LayerId layer_id = 0;
  std::string mode;
  std::map<std::string, double> parameters;
  std::uint64_t seed = 0;
};

struct SanitizedGradients {
  GradientReport grads;
  std::vector<ProvenanceEntry> provenance;
};

// g + N(0, sigma2_base * (1 + alpha * c_l)) on weight and bias gradients of
// flagged layers. Each layer draws from its own stream derived from `seed`.
SanitizedGradients noise_gaussian(const GradientReport& grads, std::span<const Verdict> verdicts, double sigma2_base,
                                  double alpha, std::uint64_t seed);

// g + Lap(sensitivity / epsilon_dp) on flagged layers.
SanitizedGradients noise_laplace(const GradientReport& grads, std::span<const Verdict> verdicts, double sensitivity,
                                 double epsilon_dp, std::uint64_t seed);

// Replaces every b x b block (ragged at the right and bottom edges) of a
// 2-D tensor by its mean.
Tensor pixelate(const Tensor& grad, std::size_t b);

// Pixelates flagged layers: dense weights as one matrix, each k x k slice of a
// conv kernel separately, biases as a 1 x n row.
SanitizedGradients pixelate_gradients(const GradientReport& grads, std::span<const Verdict> verdicts, std::size_t b);

// Pruning cannot leave a usable model.
class PruneRefused : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Removes flagged layers and inserts shape adapters where the remaining chain
// no longer fits: zero-pad/crop selections for spatial changes, variance
// preserving orthonormal sketches (Dense or 1x1 Conv) for width and channel
// changes. Adapters get fresh layer ids.
Model prune_and_bridge(const Model& model, std::span<const Verdict> verdicts);

// Orthonormal (out, in) sketch scaled to preserve per-unit variance.
Tensor orthonormal_sketch(std::size_t out, std::size_t in, std::uint64_t seed);

double delta_acc(double acc_clean, double acc_defended);

// Applies `action` to one client's gradients (not to prune, which acts on the
// model before training).
SanitizedGradients sanitize(const GradientReport& grads, std::span<const Verdict> verdicts,
                            const DefenseAction& action, std::uint64_t seed);

nlohmann::json provenance_json(const std::vector<ProvenanceEntry>& provenance);

}  // namespace drarmor
