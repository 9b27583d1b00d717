#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "drarmor/config.hpp"
#include "drarmor/data.hpp"
#include "drarmor/flsim.hpp"

namespace drarmor {

DatasetBundle load_dataset(const ExperimentConfig& config);

struct ExperimentResult {
  std::vector<RoundMetrics> rounds;
  std::vector<RoundMetrics> baseline;  // same seed without attack or defense, when compared
  double final_accuracy = 0.0;
  double mean_leakage = 0.0;
  std::optional<double> baseline_accuracy;
  std::optional<double> delta_acc;
  std::vector<std::string> server_log;
};

// Runs every round and, when `out` is set, writes metrics.csv, summary.json,
// config.txt and one directory per round with the round report and
// reconstruction dumps. Nothing is written outside `out`.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::optional<std::filesystem::path>& out = std::nullopt);

std::string metrics_csv(const std::vector<RoundMetrics>& rounds);
std::string summary_json(const ExperimentConfig& config, const ExperimentResult& result);

struct DemoResult {
  RoundMetrics metrics;
  ReconstructionRecord record;
};

// One attacked FedSGD round against a single client holding `samples`
// samples, all used as one batch.
DemoResult attack_demo(const ExperimentConfig& config, std::size_t samples,
                       const std::optional<std::filesystem::path>& out = std::nullopt);

std::vector<LeakageRow> leakage_sweep(const ExperimentConfig& config, const std::vector<std::size_t>& sizes,
                                      const std::optional<std::filesystem::path>& out = std::nullopt);

}  // namespace drarmor
