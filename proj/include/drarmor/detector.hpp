#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drarmor/model.hpp"
#include "drarmor/nn.hpp"

namespace drarmor {

enum class RelevanceMethod { lrp, dtd };
enum class GammaMode { fixed, adaptive };
enum class RootPolicy { zeros, black_input, custom };
enum class TargetPolicy { true_label, predicted_label };
// Domain in which D is min-max normalized across layers.
enum class ScoreScale { linear, log };

struct DetectorConfig {
  RelevanceMethod method = RelevanceMethod::lrp;
  double epsilon = 1e-6;
  GammaMode gamma_mode = GammaMode::adaptive;
  double gamma = 1.0;  // used when gamma_mode == fixed
  double tau = 0.5;
  std::optional<double> tau_D;  // unset: 3 x median of the per-layer D values
  double tau_W = 0.25;
  RootPolicy root_policy = RootPolicy::zeros;
  Tensor custom_root;  // one sample, model input shape
  TargetPolicy target_policy = TargetPolicy::true_label;
  double relevance_floor = 1e-12;
  ScoreScale score_scale = ScoreScale::log;

  // Throws ConfigError when a field is out of range.
  void check() const;
};

/// Relevance at the input of every layer, batch-shaped like the trace.
struct RelevanceMap {
  std::vector<Tensor> layers;
  double total = 0.0;             // relevance injected at the output
  std::vector<bool> degenerate;   // layer saw an all-zero input for some sample
};

struct LayerScore {
  std::size_t layer_index = 0;
  double G = 0.0;
  double R_norm = 0.0;
  double D = 0.0;
  double W_next = 0.0;
  double normalized_score = 0.0;
  bool saturated = false;
  bool flagged = false;
  double confidence = 0.0;
};

struct DetectionReport {
  std::vector<LayerScore> scores;  // one per parameterized layer, in model order
  std::vector<double> gammas;      // per model layer, 1 for glue layers
  double tau_D = 0.0;              // threshold actually applied

  std::vector<std::size_t> flagged_layers() const;
  bool is_flagged(std::size_t layer_index) const;
  double confidence_of(std::size_t layer_index) const;  // 0 when not flagged
};

// Class whose output explains the decision for each sample.
std::vector<int> resolve_targets(const ForwardTrace& trace, std::span<const int> labels, TargetPolicy policy);

// Epsilon-rule LRP from the target logit down to the input. `gammas` holds one
// factor per layer (empty means 1 everywhere) and scales the relevance a
// parameterized layer hands to its input.
RelevanceMap lrp_relevance(const Model& model, const ForwardTrace& trace, std::span<const int> targets,
                           double epsilon, std::span<const double> gammas = {});

// Deep Taylor relevance grad_f(x_l) * (x_l - x0_l), with hidden-layer root
// points taken from a forward pass of the input root point.
RelevanceMap dtd_relevance(const Model& model, const ForwardTrace& trace, std::span<const int> targets,
                           const Tensor& root_batch, Exec exec = Exec::serial);

// Input root point for a batch under the given policy.
Tensor root_batch(const Tensor& batch, RootPolicy policy, const Tensor& custom_root);

std::vector<double> gradient_norms(const GradientReport& grads);

double discrepancy(double G, double R_norm, double floor);

// 1-Wasserstein distance between the equally weighted empirical distributions
// of `p` and `q`, integrated exactly over the merged quantile breakpoints.
double wasserstein_1d(std::span<const double> p, std::span<const double> q);

// Flattened |R| scaled to unit total mass (uniform when R is all zero).
std::vector<double> relevance_distribution(const Tensor& relevance);

// Per-layer gamma from relevance shares, clamped to [0.1, 1]. Glue layers get 1.
std::vector<double> adaptive_gamma(const Model& model, const RelevanceMap& relevance);

DetectionReport score_and_flag(const Model& model, const RelevanceMap& relevance, const GradientReport& grads,
                               const DetectorConfig& config);

// Full client-side pipeline on one labelled batch.
DetectionReport detect(const Model& model, const Tensor& batch, std::span<const int> labels,
                       const DetectorConfig& config, Exec exec = Exec::serial);

std::string report_json(const Model& model, const DetectionReport& report);

}  // namespace drarmor
