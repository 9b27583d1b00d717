#include "drarmor/flsim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "drarmor/errors.hpp"
#include "drarmor/kernels.hpp"
#include "drarmor/rng.hpp"

namespace drarmor {

namespace {

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

double gamma_draw(Rng& rng, double shape) {
  if (shape < 1.0) return gamma_draw(rng, shape + 1.0) * std::pow(rng.uniform() + 0x1.0p-60, 1.0 / shape);
  const double d = shape - 1.0 / 3.0, c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u + 0x1.0p-60) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

Tensor sample_rows(const Tensor& images, std::span<const std::size_t> idx) { return gather_rows(images, idx); }

std::vector<std::size_t> draw_batch(std::size_t shard, std::size_t batch, std::uint64_t seed) {
  std::vector<std::size_t> idx(shard);
  std::iota(idx.begin(), idx.end(), 0);
  if (batch == 0 || batch >= shard) return idx;
  Rng rng(seed);
  for (std::size_t i = 0; i < batch; ++i) std::swap(idx[i], idx[i + rng.index(shard - i)]);
  idx.resize(batch);
  std::sort(idx.begin(), idx.end());
  return idx;
}

GradientReport strip_inputs(GradientReport grads) {
  for (auto& g : grads.layers) g.input = Tensor();
  return grads;
}

// (start - end) / lr for every parameterized layer, keyed by id.
GradientReport pseudo_gradient(const Model& start, const Model& end, double lr) {
  GradientReport out;
  for (std::size_t k = 0; k < start.layers.size(); ++k) {
    const Layer& a = start.layers[k];
    const Layer& b = end.layers[k];
    LayerGradient g;
    g.id = a.id;
    if (a.parameterized()) {
      g.weight = Tensor(a.weight.shape());
      for (std::size_t i = 0; i < g.weight.size(); ++i) g.weight[i] = (a.weight[i] - b.weight[i]) / lr;
      if (!a.bias.empty()) {
        g.bias = Tensor(a.bias.shape());
        for (std::size_t i = 0; i < g.bias.size(); ++i) g.bias[i] = (a.bias[i] - b.bias[i]) / lr;
      }
    }
    out.layers.push_back(std::move(g));
  }
  return out;
}

}  // namespace

void RoundConfig::check() const {
  if (num_clients == 0 || num_clients > 200) throw ConfigError("num_clients must lie in [1, 200]");
  if (clients_per_round == 0 || clients_per_round > num_clients) {
    throw ConfigError("clients_per_round must lie in [1, num_clients]");
  }
  if (local_steps == 0) throw ConfigError("local_steps must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (period == 0) throw ConfigError("poisoning period must be >= 1");
  if (attack.num_bins < 2) throw ConfigError("attack needs at least 2 bins");
  defense.check();
  detector.check();
}

bool RoundConfig::attack_round(std::size_t round) const {
  switch (poisoning) {
    case Poisoning::none: return false;
    case Poisoning::continuous: return true;
    case Poisoning::periodic: return round % period == 0;
  }
  return false;
}

std::optional<double> Confusion::tpr() const { return ratio(tp, malicious()); }
std::optional<double> Confusion::fnr() const { return ratio(fn, malicious()); }
std::optional<double> Confusion::tnr() const { return ratio(tn, benign()); }
std::optional<double> Confusion::fpr() const { return ratio(fp, benign()); }

Confusion& Confusion::operator+=(const Confusion& o) {
  tp += o.tp;
  fn += o.fn;
  tn += o.tn;
  fp += o.fp;
  return *this;
}

Confusion detection_confusion(const std::vector<bool>& flagged, const std::vector<LayerTag>& tags, const Model& model) {
  if (flagged.size() != model.layers.size() || tags.size() != model.layers.size()) {
    throw InputError("one verdict and one tag per layer are required");
  }
  Confusion c;
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    if (!model.layers[k].parameterized()) continue;
    const bool malicious = tags[k] == LayerTag::malicious;
    if (malicious) {
      (flagged[k] ? c.tp : c.fn) += 1;
    } else {
      (flagged[k] ? c.fp : c.tn) += 1;
    }
  }
  return c;
}

std::vector<LayerKind> base_architecture(const Shape& sample_shape, std::size_t classes) {
  if (sample_shape.size() != 3 || sample_shape[1] % 2 || sample_shape[2] % 2) {
    throw ConfigError("base architecture needs (C, H, W) input with even H and W, got " + to_string(sample_shape));
  }
  const std::size_t c = sample_shape[0], flat = 4 * (sample_shape[1] / 2) * (sample_shape[2] / 2);
  return {Conv2D{c, 4, 3, 1, Padding::same}, ReLU{},     Conv2D{4, 4, 3, 1, Padding::same}, ReLU{},
          Conv2D{4, 4, 3, 1, Padding::same}, ReLU{},     AvgPool{2},                        Flatten{},
          Dense{flat, 32},                   ReLU{},     Dense{32, 32},                     ReLU{},
          Dense{32, 32},                     ReLU{},     Dense{32, 16},                     ReLU{},
          Dense{16, classes},                LogSoftmax{}};
}

std::size_t placement_index(Placement placement) { return placement == Placement::start ? 0 : 4; }

std::vector<ClientState> partition_clients(const Split& train, std::size_t num_clients, std::size_t per_client,
                                           Partition partition, double dirichlet_alpha, std::size_t classes,
                                           std::uint64_t seed) {
  if (num_clients == 0) throw ConfigError("need at least one client");
  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5AAD));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

  std::vector<std::vector<std::size_t>> members(num_clients);
  if (partition == Partition::iid) {
    if (per_client == 0) per_client = n / num_clients;
    if (per_client * num_clients > n) {
      throw ConfigError("training split holds " + std::to_string(n) + " samples, " + std::to_string(num_clients) +
                        " clients x " + std::to_string(per_client) + " requested");
    }
    for (std::size_t c = 0; c < num_clients; ++c)
      members[c].assign(order.begin() + static_cast<std::ptrdiff_t>(c * per_client),
                        order.begin() + static_cast<std::ptrdiff_t>((c + 1) * per_client));
  } else {
    if (!(dirichlet_alpha > 0.0)) throw ConfigError("dirichlet_alpha must be > 0");
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i : order) by_class.at(static_cast<std::size_t>(train.labels[i])).push_back(i);
    for (std::size_t y = 0; y < classes; ++y) {
      std::vector<double> p(num_clients);
      double total = 0.0;
      for (double& v : p) total += v = gamma_draw(rng, dirichlet_alpha);
      std::size_t begin = 0;
      double acc = 0.0;
      for (std::size_t c = 0; c < num_clients; ++c) {
        acc += p[c] / total;
        const std::size_t end = c + 1 == num_clients ? by_class[y].size()
                                                     : static_cast<std::size_t>(std::floor(acc * static_cast<double>(by_class[y].size())));
        for (std::size_t i = begin; i < std::max(begin, end); ++i) members[c].push_back(by_class[y][i]);
        begin = std::max(begin, end);
      }
    }
  }
  std::vector<ClientState> clients;
  for (std::size_t c = 0; c < num_clients; ++c) {
    std::sort(members[c].begin(), members[c].end());
    ClientState state{c, {sample_rows(train.images, members[c]), {}}};
    if (members[c].empty()) state.shard.images = Tensor();
    for (std::size_t i : members[c]) state.shard.labels.push_back(train.labels[i]);
    clients.push_back(std::move(state));
  }
  return clients;
}

std::vector<std::size_t> select_clients(std::size_t num_clients, std::size_t per_round, std::size_t round,
                                        std::uint64_t seed) {
  std::vector<std::size_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, round, 0xC11E));
  for (std::size_t i = 0; i < per_round; ++i) std::swap(ids[i], ids[i + rng.index(num_clients - i)]);
  ids.resize(per_round);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::optional<MaliciousModel> server_attack_model(const ServerState& server, const RoundConfig& config) {
  if (!server.attacker || !config.attack_round(server.round)) return std::nullopt;
  ImprintPlan plan;
  plan.num_bins = config.attack.num_bins;
  plan.placement = placement_index(config.attack.placement);
  plan.measurement = config.attack.measurement;
  plan.projection_seed = derive_seed(config.seed, server.round, 0xA77);
  plan.measurement_scale = config.attack.measurement_scale;
  plan.gain = config.attack.gain;
  return build_malicious_model(server.global, std::move(plan), server.calibration.images);
}

ClientOutcome client_round(const Model& received, const ClientState& client, const RoundConfig& config,
                           std::size_t round) {
  ClientOutcome out;
  out.update.client_id = client.id;
  if (client.shard.size() == 0) return out;
  const std::uint64_t stream = derive_seed(config.seed, client.id, round);
  const auto idx = draw_batch(client.shard.size(), config.batch_size, derive_seed(stream, 0xBA7C));
  out.batch = gather_rows(client.shard.images, idx);
  std::vector<int> labels;
  for (std::size_t i : idx) labels.push_back(client.shard.labels[i]);

  out.report = detect(received, out.batch, labels, config.detector, Exec::parallel);
  std::vector<Verdict> verdicts = verdicts_from(out.report);
  DefenseAction action = config.defense;

  Model local = received;
  if (action.mode == DefenseMode::prune && !verdicts.empty()) {
    try {
      local = prune_and_bridge(received, verdicts);
      out.update.pruned = true;
      verdicts.clear();
    } catch (const PruneRefused&) {
      action.mode = DefenseMode::noise_gaussian;
    }
  }

  GradientReport grads;
  if (config.aggregation == Aggregation::fedsgd) {
    grads = strip_inputs(backward(local, forward(local, out.batch, Exec::parallel), labels, Exec::parallel));
  } else {
    Model trained = local;
    for (std::size_t step = 0; step < config.local_steps; ++step) {
      const auto sub = draw_batch(client.shard.size(), config.batch_size, derive_seed(stream, step, 0xFEDA));
      const Tensor x = gather_rows(client.shard.images, sub);
      std::vector<int> y;
      for (std::size_t i : sub) y.push_back(client.shard.labels[i]);
      trained = sgd_step(trained, backward(trained, forward(trained, x, Exec::parallel), y, Exec::parallel), config.lr);
    }
    grads = pseudo_gradient(local, trained, config.lr);
  }

  SanitizedGradients clean = sanitize(grads, verdicts, action, derive_seed(stream, 0xD15E));
  out.update.grads = std::move(clean.grads);
  out.update.provenance = std::move(clean.provenance);
  out.update.samples = idx.size();
  return out;
}

GradientReport aggregate(const Model& global, const std::vector<ClientUpdate>& updates, Aggregation rule,
                         std::vector<std::size_t>* discarded) {
  (void)rule;  // both rules average gradient-equivalent updates; FedAvg's are delta / lr
  if (updates.empty()) throw InputError("cannot aggregate an empty update list");
  std::vector<bool> usable(updates.size(), true);
  for (std::size_t u = 0; u < updates.size(); ++u) {
    for (const Layer& layer : global.layers) {
      if (!layer.parameterized()) continue;
      const LayerGradient* g = updates[u].grads.find(layer.id);
      if (g == nullptr) continue;
      if (g->weight.shape() != layer.weight.shape() || g->bias.shape() != layer.bias.shape() ||
          !g->weight.all_finite() || !g->bias.all_finite()) {
        usable[u] = false;
        if (discarded) discarded->push_back(updates[u].client_id);
        break;
      }
    }
  }
  GradientReport out;
  for (const Layer& layer : global.layers) {
    LayerGradient agg;
    agg.id = layer.id;
    if (layer.parameterized()) {
      agg.weight = Tensor(layer.weight.shape());
      if (!layer.bias.empty()) agg.bias = Tensor(layer.bias.shape());
      double total = 0.0;
      for (std::size_t u = 0; u < updates.size(); ++u)
        if (usable[u] && updates[u].grads.find(layer.id)) total += static_cast<double>(updates[u].samples);
      for (std::size_t u = 0; u < updates.size() && total > 0.0; ++u) {
        const LayerGradient* g = usable[u] ? updates[u].grads.find(layer.id) : nullptr;
        if (g == nullptr) continue;
        const double w = static_cast<double>(updates[u].samples) / total;
        for (std::size_t i = 0; i < agg.weight.size(); ++i) agg.weight[i] += w * g->weight[i];
        for (std::size_t i = 0; i < agg.bias.size(); ++i) agg.bias[i] += w * g->bias[i];
      }
    }
    out.layers.push_back(std::move(agg));
  }
  return out;
}

Evaluation evaluate(const Model& model, const Split& data) {
  if (data.size() == 0) return {};
  const ForwardTrace trace = forward(model, data.images, Exec::parallel);
  const Tensor& lp = trace.log_probs();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); ++b) {
    const auto row = lp.row(b);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == data.labels[b];
  }
  return {static_cast<double>(correct) / static_cast<double>(data.size()), nll_loss(lp, data.labels)};
}

RoundMetrics run_round(ServerState& server, const std::vector<ClientState>& clients, const RoundConfig& config,
                       const Split& test) {
  config.check();
  RoundMetrics metrics;
  metrics.round = server.round;
  const std::optional<MaliciousModel> attacked = server_attack_model(server, config);
  const Model& distributed = attacked ? attacked->model() : server.global;
  const std::vector<LayerTag> tags =
      attacked ? attacked->tagged.tags : std::vector<LayerTag>(distributed.layers.size(), LayerTag::benign);
  metrics.attacked = attacked.has_value();

  const std::vector<std::size_t> selected =
      select_clients(clients.size(), config.clients_per_round, server.round, config.seed);
  std::vector<ClientOutcome> outcomes(selected.size());
  const int n = static_cast<int>(selected.size());
#pragma omp parallel for schedule(static) num_threads(kernels::worker_threads())
  for (int i = 0; i < n; ++i) outcomes[static_cast<std::size_t>(i)] = client_round(distributed, clients[selected[static_cast<std::size_t>(i)]], config, server.round);

  std::vector<ClientUpdate> updates;
  std::size_t population = 0, used = 0;
  std::size_t isolated = 0;
  double ssim_total = 0.0, ssim_max = -1.0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    ClientOutcome& o = outcomes[i];
    const ClientState& client = clients[selected[i]];
    std::vector<bool> flagged(distributed.layers.size(), false);
    for (std::size_t k : o.report.flagged_layers()) flagged[k] = true;
    const Confusion c = detection_confusion(flagged, tags, distributed);
    metrics.confusion += c;
    metrics.fp_per_client += static_cast<double>(c.fp) / static_cast<double>(outcomes.size());
    metrics.fn_per_client += static_cast<double>(c.fn) / static_cast<double>(outcomes.size());
    population += client.shard.size();
    used += o.update.samples;
    metrics.clients.push_back({client.id, o.update.samples, o.update.pruned, c, report_json(distributed, o.report),
                               o.update.provenance});
    if (attacked && o.update.samples > 0) {
      ReconstructionResult rec = server_reconstruct(o.update.grads, attacked->plan, ReconstructionRule::both);
      Tensor truth = block_inputs(*attacked, o.batch);
      score_reconstruction(rec, truth, attacked->plan.feature_shape, client.shard.size());
      metrics.images_leaked += rec.leakage_count;
      if (const auto iso = isolated_ssim(rec, attacked->plan, truth)) {
        isolated += iso->bins;
        ssim_total += iso->ssim_mean * static_cast<double>(iso->bins);
        ssim_max = std::max(ssim_max, iso->ssim_max);
      }
      server.reconstruction_log.push_back(
          {server.round, client.id, std::move(rec), std::move(truth), attacked->plan.feature_shape});
    }
    if (o.update.samples > 0) updates.push_back(std::move(o.update));
  }
  metrics.leakage_rate = population ? static_cast<double>(metrics.images_leaked) / static_cast<double>(population) : 0.0;
  metrics.leakage_rate_batch = used ? static_cast<double>(metrics.images_leaked) / static_cast<double>(used) : 0.0;
  if (isolated > 0) {
    metrics.ssim_mean = ssim_total / static_cast<double>(isolated);
    metrics.ssim_max = ssim_max;
  }

  if (!updates.empty()) {
    std::vector<std::size_t> discarded;
    const GradientReport agg = aggregate(server.global, updates, config.aggregation, &discarded);
    for (std::size_t id : discarded) {
      server.log.push_back("round " + std::to_string(server.round) + ": discarded malformed update from client " +
                           std::to_string(id));
    }
    metrics.discarded_updates = discarded.size();
    server.global = sgd_step(server.global, agg, config.lr);
  }
  const Evaluation eval = evaluate(server.global, test);
  metrics.accuracy = eval.accuracy;
  metrics.loss = eval.loss;
  ++server.round;
  return metrics;
}

std::vector<LeakageRow> leakage_curve(const std::vector<std::size_t>& sizes, const Model& base, const Split& pool,
                                      const Split& calibration, const RoundConfig& config) {
  std::vector<LeakageRow> rows;
  RoundConfig local = config;
  local.batch_size = 0;
  local.aggregation = Aggregation::fedsgd;
  ServerState server{base, calibration, {}, {}, true, 0};
  local.poisoning = Poisoning::continuous;
  const MaliciousModel attacked = *server_attack_model(server, local);
  for (std::size_t size : sizes) {
    if (size == 0) throw ConfigError("dataset sizes must be positive");
    ClientState client{0, subset(pool, 0, size)};
    ClientOutcome o = client_round(attacked.model(), client, local, 0);
    ReconstructionResult rec = server_reconstruct(o.update.grads, attacked.plan, ReconstructionRule::both);
    score_reconstruction(rec, block_inputs(attacked, o.batch), attacked.plan.feature_shape, size);
    rows.push_back({size, rec.leakage_rate, rec.leakage_count});
  }
  return rows;
}

}  // namespace drarmor
