#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "drarmor/attack.hpp"
#include "drarmor/data.hpp"
#include "drarmor/detector.hpp"
#include "drarmor/mitigator.hpp"
#include "drarmor/model.hpp"

namespace drarmor {

enum class Aggregation { fedsgd, fedavg };
enum class Poisoning { none, continuous, periodic };
enum class Placement { start, deep };
enum class Partition { iid, dirichlet };

struct AttackSettings {
  std::size_t num_bins = 16;
  Placement placement = Placement::start;
  MeasurementMode measurement = MeasurementMode::pixel_sum;
  double measurement_scale = 1.0;
  double gain = 100.0;
};

struct RoundConfig {
  std::size_t num_clients = 20;
  std::size_t clients_per_round = 5;
  std::size_t batch_size = 64;  // 0: the whole local dataset
  std::size_t local_steps = 1;
  double lr = 1e-4;
  Aggregation aggregation = Aggregation::fedsgd;
  Poisoning poisoning = Poisoning::none;
  std::size_t period = 3;
  DefenseAction defense;
  DetectorConfig detector;
  AttackSettings attack;
  std::uint64_t seed = 1;

  void check() const;
  bool attack_round(std::size_t round) const;
};

struct Confusion {
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;

  std::size_t malicious() const { return tp + fn; }
  std::size_t benign() const { return tn + fp; }
  std::optional<double> tpr() const;
  std::optional<double> fnr() const;
  std::optional<double> tnr() const;
  std::optional<double> fpr() const;
  Confusion& operator+=(const Confusion& other);
};

// Confusion over the parameterized layers of a tagged model.
Confusion detection_confusion(const std::vector<bool>& flagged, const std::vector<LayerTag>& tags,
                              const Model& model);

// Per-client record kept for the round report.
struct ClientLog {
  std::size_t client_id = 0;
  std::size_t samples = 0;
  bool pruned = false;
  Confusion confusion;
  std::string report_json;  // detection report against the distributed model
  std::vector<ProvenanceEntry> provenance;
};

struct RoundMetrics {
  std::size_t round = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  double leakage_rate = 0.0;        // over the selected clients' local datasets
  double leakage_rate_batch = 0.0;  // over the samples actually used this round
  std::size_t images_leaked = 0;
  bool attacked = false;
  Confusion confusion;
  double fp_per_client = 0.0;
  double fn_per_client = 0.0;
  std::optional<double> ssim_mean;  // over isolated bins, see isolated_ssim
  std::optional<double> ssim_max;
  std::optional<double> delta_acc;
  std::size_t discarded_updates = 0;
  std::vector<ClientLog> clients;
};

struct ClientState {
  std::size_t id = 0;
  Split shard;
};

// What leaves a client: layer gradients keyed by id plus bookkeeping.
struct ClientUpdate {
  std::size_t client_id = 0;
  std::size_t samples = 0;
  GradientReport grads;
  std::vector<ProvenanceEntry> provenance;
  bool pruned = false;
};

struct ReconstructionRecord {
  std::size_t round = 0;
  std::size_t client_id = 0;
  ReconstructionResult result;
  Tensor truth;  // evaluator-only block inputs, (batch, feature_size)
  Shape feature_shape;
};

// The server only sees models, updates and its own calibration data.
struct ServerState {
  Model global;
  Split calibration;
  std::vector<std::string> log;
  std::vector<ReconstructionRecord> reconstruction_log;
  bool attacker = false;
  std::size_t round = 0;
};

struct ClientOutcome {
  ClientUpdate update;
  DetectionReport report;
  Tensor batch;  // evaluator-only: the samples used this round
};

std::vector<LayerKind> base_architecture(const Shape& sample_shape, std::size_t classes);
std::size_t placement_index(Placement placement);

std::vector<ClientState> partition_clients(const Split& train, std::size_t num_clients, std::size_t per_client,
                                           Partition partition, double dirichlet_alpha, std::size_t classes,
                                           std::uint64_t seed);

std::vector<std::size_t> select_clients(std::size_t num_clients, std::size_t per_round, std::size_t round,
                                        std::uint64_t seed);

// The model the server distributes this round (with the imprint block when
// attacking).
std::optional<MaliciousModel> server_attack_model(const ServerState& server, const RoundConfig& config);

// One client's local pipeline: detect, defend, train, sanitize.
ClientOutcome client_round(const Model& received, const ClientState& client, const RoundConfig& config,
                           std::size_t round);

// Weighted mean of the updates over the layers of `global`, in update order.
// Updates with a misshapen gradient are dropped and reported in `discarded`.
GradientReport aggregate(const Model& global, const std::vector<ClientUpdate>& updates, Aggregation rule,
                         std::vector<std::size_t>* discarded = nullptr);

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

Evaluation evaluate(const Model& model, const Split& data);

RoundMetrics run_round(ServerState& server, const std::vector<ClientState>& clients, const RoundConfig& config,
                       const Split& test);

struct LeakageRow {
  std::size_t size = 0;
  double leakage_rate = 0.0;
  std::size_t images_leaked = 0;
};

// One attacked FedSGD round per local dataset size on a single client that
// uses its whole local dataset as the batch.
std::vector<LeakageRow> leakage_curve(const std::vector<std::size_t>& sizes, const Model& base, const Split& pool,
                                      const Split& calibration, const RoundConfig& config);

}  // namespace drarmor
