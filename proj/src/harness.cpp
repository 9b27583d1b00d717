#include "drarmor/harness.hpp"

#include <charconv>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "drarmor/errors.hpp"
#include "drarmor/nn.hpp"
#include "drarmor/rng.hpp"
#include "drarmor/serialize.hpp"

namespace drarmor {

namespace {

std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : "NA"; }

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string round_dir(std::size_t round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round_%03zu", round);
  return buf;
}

struct Setup {
  DatasetBundle data;
  std::vector<ClientState> clients;
  Model initial;
};

Setup prepare(const ExperimentConfig& config) {
  Setup s;
  s.data = load_dataset(config);
  const std::size_t n = config.round.num_clients;
  const std::size_t per_client = config.samples_per_client ? config.samples_per_client : s.data.train.size() / n;
  if (per_client == 0) throw ConfigError("training split too small for " + std::to_string(n) + " clients");
  s.clients = partition_clients(s.data.train, n, per_client, config.partition, config.dirichlet_alpha,
                                s.data.classes, derive_seed(config.seed(), 0xC11E));
  s.initial = init_model(base_architecture(s.data.sample_shape, s.data.classes), s.data.sample_shape,
                         derive_seed(config.seed(), 0x1417));
  return s;
}

std::vector<RoundMetrics> run_rounds(const ExperimentConfig& config, const Setup& setup, ServerState& server) {
  std::vector<RoundMetrics> rounds;
  for (std::size_t r = 0; r < config.rounds; ++r) rounds.push_back(run_round(server, setup.clients, config.round, setup.data.test));
  return rounds;
}

nlohmann::json confusion_json(const Confusion& c) {
  return {{"tp", c.tp}, {"fn", c.fn}, {"tn", c.tn}, {"fp", c.fp}, {"tpr", opt_json(c.tpr())}, {"tnr", opt_json(c.tnr())}};
}

void write_round(const std::filesystem::path& dir, const RoundMetrics& m, const std::vector<ReconstructionRecord>& recs,
                 bool dump) {
  nlohmann::json clients = nlohmann::json::array();
  for (const ClientLog& c : m.clients) {
    clients.push_back({{"client_id", c.client_id},
                       {"samples", c.samples},
                       {"pruned", c.pruned},
                       {"confusion", confusion_json(c.confusion)},
                       {"detection", nlohmann::json::parse(c.report_json)},
                       {"provenance", provenance_json(c.provenance)}});
  }
  nlohmann::json doc{{"round", m.round},
                     {"attacked", m.attacked},
                     {"accuracy", m.accuracy},
                     {"loss", m.loss},
                     {"leak_rate", m.leakage_rate},
                     {"leak_rate_batch", m.leakage_rate_batch},
                     {"images_leaked", m.images_leaked},
                     {"discarded_updates", m.discarded_updates},
                     {"clients", std::move(clients)}};
  write_file(dir / "report.json", doc.dump(2) + "\n");
  if (!dump) return;
  for (const ReconstructionRecord& rec : recs) {
    if (rec.round != m.round) continue;
    dump_reconstruction(rec.result, rec.truth, rec.feature_shape, dir / ("client_" + std::to_string(rec.client_id)));
  }
}

}  // namespace

DatasetBundle load_dataset(const ExperimentConfig& config) {
  if (config.dataset == "synthetic") {
    return synth_dataset(config.synth_kind, config.synth_n, config.synth_side, config.synth_classes, config.seed());
  }
  if (config.dataset != "idx") throw ConfigError("unknown dataset '" + config.dataset + "'");
  for (const auto& path : {config.idx_images, config.idx_labels}) {
    if (!std::filesystem::exists(path)) throw ConfigError("IDX file not found: " + path);
  }
  const Split all = load_idx(config.idx_images, config.idx_labels);
  std::size_t classes = 0;
  for (int label : all.labels) classes = std::max(classes, static_cast<std::size_t>(label) + 1);
  return split_dataset(all, classes, config.seed());
}

std::string metrics_csv(const std::vector<RoundMetrics>& rounds) {
  std::string out = "round,acc,loss,leak_rate,images_leaked,tpr,tnr,fpr,fnr,fp,fn,ssim_mean,ssim_max,delta_acc\n";
  for (const RoundMetrics& m : rounds) {
    const Confusion& c = m.confusion;
    out += std::to_string(m.round) + "," + num(m.accuracy) + "," + num(m.loss) + "," + num(m.leakage_rate) + "," +
           std::to_string(m.images_leaked) + "," + num(c.tpr()) + "," + num(c.tnr()) + "," + num(c.fpr()) + "," +
           num(c.fnr()) + "," + std::to_string(c.fp) + "," + std::to_string(c.fn) + "," + num(m.ssim_mean) + "," +
           num(m.ssim_max) + "," + num(m.delta_acc) + "\n";
  }
  return out;
}

std::string summary_json(const ExperimentConfig& config, const ExperimentResult& result) {
  Confusion total;
  for (const RoundMetrics& m : result.rounds) total += m.confusion;
  std::size_t leaked = 0;
  for (const RoundMetrics& m : result.rounds) leaked += m.images_leaked;
  nlohmann::json doc{{"seed", config.seed()},
                     {"rounds", result.rounds.size()},
                     {"defense", defense_name(config.round.defense.mode)},
                     {"final_accuracy", result.final_accuracy},
                     {"final_loss", result.rounds.empty() ? 0.0 : result.rounds.back().loss},
                     {"mean_leakage", result.mean_leakage},
                     {"images_leaked", leaked},
                     {"baseline_accuracy", opt_json(result.baseline_accuracy)},
                     {"delta_acc", opt_json(result.delta_acc)},
                     {"detection", confusion_json(total)},
                     {"server_log", result.server_log}};
  return doc.dump(2) + "\n";
}

ExperimentResult run_experiment(const ExperimentConfig& config, const std::optional<std::filesystem::path>& out) {
  config.round.check();
  const Setup setup = prepare(config);
  ExperimentResult result;
  ServerState server{setup.initial, setup.data.validation, {}, {}, config.round.poisoning != Poisoning::none, 0};
  result.rounds = run_rounds(config, setup, server);
  result.server_log = server.log;

  const bool clean_run = config.round.defense.mode == DefenseMode::none && config.round.poisoning == Poisoning::none;
  if (config.compare_baseline && !clean_run) {
    ExperimentConfig clean = config;
    clean.round.defense.mode = DefenseMode::none;
    clean.round.poisoning = Poisoning::none;
    ServerState base{setup.initial, setup.data.validation, {}, {}, false, 0};
    result.baseline = run_rounds(clean, setup, base);
    for (std::size_t r = 0; r < result.rounds.size(); ++r) {
      result.rounds[r].delta_acc = delta_acc(result.baseline[r].accuracy, result.rounds[r].accuracy);
    }
    result.baseline_accuracy = result.baseline.back().accuracy;
    result.delta_acc = result.rounds.back().delta_acc;
  }
  result.final_accuracy = result.rounds.back().accuracy;
  double leak = 0.0;
  for (const RoundMetrics& m : result.rounds) leak += m.leakage_rate;
  result.mean_leakage = leak / static_cast<double>(result.rounds.size());

  if (out) {
    write_file(*out / "config.txt", serialize_config(config));
    write_file(*out / "metrics.csv", metrics_csv(result.rounds));
    if (!result.baseline.empty()) write_file(*out / "baseline_metrics.csv", metrics_csv(result.baseline));
    write_file(*out / "summary.json", summary_json(config, result));
    for (const RoundMetrics& m : result.rounds) {
      write_round(*out / "rounds" / round_dir(m.round), m, server.reconstruction_log,
                  config.dump_reconstructions && m.attacked);
    }
  }
  return result;
}

DemoResult attack_demo(const ExperimentConfig& config, std::size_t samples,
                       const std::optional<std::filesystem::path>& out) {
  ExperimentConfig demo = config;
  demo.round.num_clients = 1;
  demo.round.clients_per_round = 1;
  demo.round.poisoning = Poisoning::continuous;
  demo.round.batch_size = 0;
  demo.round.aggregation = Aggregation::fedsgd;
  demo.round.check();
  const DatasetBundle data = load_dataset(demo);
  const std::size_t n = samples;
  if (n == 0 || data.train.size() < n) throw ConfigError("demo sample count must be in [1, training split size]");
  const std::vector<ClientState> clients{{0, subset(data.train, 0, n)}};
  const Model initial = init_model(base_architecture(data.sample_shape, data.classes), data.sample_shape,
                                   derive_seed(demo.seed(), 0x1417));
  ServerState server{initial, data.validation, {}, {}, true, 0};
  DemoResult result;
  result.metrics = run_round(server, clients, demo.round, data.test);
  if (server.reconstruction_log.empty()) throw ConsistencyError("attacked round produced no reconstruction record");
  result.record = server.reconstruction_log.front();

  if (out) {
    dump_reconstruction(result.record.result, result.record.truth, result.record.feature_shape, *out);
    std::vector<double> ssims;
    for (const auto& bin : result.record.result.bins)
      if (bin.active() && bin.match) ssims.push_back(bin.ssim);
    nlohmann::json doc{
        {"seed", demo.seed()},
        {"defense", defense_name(demo.round.defense.mode)},
        {"samples", n},
        {"active_bins", result.record.result.active_bins()},
        {"images_leaked", result.record.result.leakage_count},
        {"leak_rate", result.record.result.leakage_rate},
        {"ssim_mean", opt_json(result.metrics.ssim_mean)},
        {"ssim_max", opt_json(result.metrics.ssim_max)},
        {"detection", nlohmann::json::parse(result.metrics.clients.front().report_json)},
        {"provenance", provenance_json(result.metrics.clients.front().provenance)}};
    write_file(*out / "demo.json", doc.dump(2) + "\n");
  }
  return result;
}

std::vector<LeakageRow> leakage_sweep(const ExperimentConfig& config, const std::vector<std::size_t>& sizes,
                                      const std::optional<std::filesystem::path>& out) {
  config.round.check();
  const DatasetBundle data = load_dataset(config);
  for (std::size_t size : sizes) {
    if (size > data.train.size()) {
      throw ConfigError("dataset size " + std::to_string(size) + " exceeds the training split (" +
                        std::to_string(data.train.size()) + ")");
    }
  }
  const Model initial = init_model(base_architecture(data.sample_shape, data.classes), data.sample_shape,
                                   derive_seed(config.seed(), 0x1417));
  const std::vector<LeakageRow> rows = leakage_curve(sizes, initial, data.train, data.validation, config.round);
  if (out) {
    std::string csv = "size,leak_rate,images_leaked\n";
    for (const LeakageRow& r : rows) {
      csv += std::to_string(r.size) + "," + num(r.leakage_rate) + "," + std::to_string(r.images_leaked) + "\n";
    }
    write_file(*out / "leakage.csv", csv);
  }
  return rows;
}

}  // namespace drarmor
