#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "drarmor/model.hpp"
#include "drarmor/nn.hpp"

namespace drarmor {

enum class MeasurementMode { pixel_sum, random_projection };
enum class ReconstructionRule { ratio, consecutive_difference, both };

/// What the server inserts and how it later reads the gradients back.
///
/// The block is Conv2D(identity) -> Flatten -> Dense(imprint) -> ReLU ->
/// Dense(readout) -> Reshape, inserted in front of base layer `placement`.
/// The imprint layer keeps an identity copy of its input and adds
/// `num_bins` identical measurement rows with increasing thresholds; the
/// readout layer folds the bins back onto the features along a fixed
/// direction scaled by `gain`.
struct ImprintPlan {
  std::size_t num_bins = 16;
  std::size_t placement = 0;
  MeasurementMode measurement = MeasurementMode::pixel_sum;
  std::uint64_t projection_seed = 0;
  double measurement_scale = 1.0;
  double gain = 1.0;

  // Filled in by build_malicious_model.
  Shape feature_shape;  // per-sample block input (C, H, W)
  LayerId conv_id = 0;
  LayerId imprint_id = 0;
  LayerId readout_id = 0;
  std::vector<double> thresholds;  // ascending, on <w_hat, x>

  std::size_t feature_size() const { return numel(feature_shape); }
};

struct MaliciousModel {
  TaggedModel tagged;
  ImprintPlan plan;

  const Model& model() const { return tagged.model; }
};

MaliciousModel build_malicious_model(const Model& base, ImprintPlan plan, const Tensor& calibration);

// Unit measurement direction used by the imprint rows.
std::vector<double> measurement_direction(const ImprintPlan& plan);

struct BinRecovery {
  std::size_t bin = 0;
  ReconstructionRule rule = ReconstructionRule::ratio;
  Tensor estimate;  // (feature_size), absent when the bin is inactive
  std::optional<std::size_t> match;
  double mse = 0.0;
  double ssim = 0.0;
  bool leaked = false;

  bool active() const { return !estimate.empty(); }
};

struct ReconstructionResult {
  std::vector<BinRecovery> bins;
  std::size_t leakage_count = 0;
  double leakage_rate = 0.0;

  std::size_t active_bins() const;
};

constexpr double kActivationTolerance = 1e-9;
constexpr double kLeakageMseThreshold = 1e-3;

// Candidate inputs recovered from one client's update. A missing or
// misshapen imprint gradient yields no active bins.
ReconstructionResult server_reconstruct(const GradientReport& grads, const ImprintPlan& plan,
                                        ReconstructionRule rule = ReconstructionRule::ratio);

// Evaluator side: the block inputs each sample actually produced, flattened to
// (batch, feature_size).
Tensor block_inputs(const MaliciousModel& attacked, const Tensor& batch);

// Matches every active bin to its nearest true sample and counts the distinct
// samples recovered below the MSE threshold. `population` is the denominator
// of the leakage rate.
void score_reconstruction(ReconstructionResult& result, const Tensor& truth, const Shape& feature_shape,
                          std::size_t population);

// Evaluator side: for each bin, the batch sample that sits alone in the bin's
// consecutive-difference interval (t_i < h <= t_{i+1}; h > t_i for the top
// bin), if any.
std::vector<std::optional<std::size_t>> isolated_samples(const ImprintPlan& plan, const Tensor& truth);

struct IsolatedScore {
  std::size_t bins = 0;  // isolated bins in the batch
  double ssim_mean = 0.0;
  double ssim_max = 0.0;
};

// SSIM of the consecutive-difference estimate of every isolated bin against
// its sample. An inactive estimate counts as a blank image. Empty when no bin
// is isolated.
std::optional<IsolatedScore> isolated_ssim(const ReconstructionResult& result, const ImprintPlan& plan,
                                           const Tensor& truth);

// Writes one PGM per active bin (plus the matched original) and a sidecar
// JSON with per-bin statistics into `dir`.
void dump_reconstruction(const ReconstructionResult& result, const Tensor& truth, const Shape& feature_shape,
                         const std::filesystem::path& dir);

}  // namespace drarmor
