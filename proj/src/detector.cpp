#include "drarmor/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "drarmor/errors.hpp"
#include "drarmor/kernels.hpp"

namespace drarmor {

namespace {

double stabilize(double z, double epsilon) { return z + (z >= 0.0 ? epsilon : -epsilon); }

bool all_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

// Relevance of one Dense/Conv layer's input under the epsilon rule.
Tensor lrp_affine(const Layer& layer, const Tensor& in, const Tensor& r_out, double epsilon, double gamma,
                  bool& degenerate) {
  const std::size_t n = in.dim(0);
  Tensor z(r_out.shape());
  Tensor c(in.shape());
  if (const auto* d = std::get_if<Dense>(&layer.kind)) {
    const kernels::DenseDims dims{n, d->in_dim, d->out_dim};
    kernels::parallel::dense_forward(dims, in.data(), layer.weight.data(), {}, z.data());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = r_out[i] / stabilize(z[i], epsilon);
    kernels::parallel::dense_backward_input(dims, z.data(), layer.weight.data(), c.data());
  } else {
    const auto& cv = std::get<Conv2D>(layer.kind);
    const kernels::ConvDims dims{n, cv.in_ch, in.dim(2), in.dim(3), cv.out_ch, cv.kernel, cv.stride, cv.pad()};
    kernels::parallel::conv2d_forward(dims, in.data(), layer.weight.data(), {}, z.data());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = r_out[i] / stabilize(z[i], epsilon);
    kernels::parallel::conv2d_backward_input(dims, z.data(), layer.weight.data(), c.data());
  }
  Tensor r_in(in.shape());
  const std::size_t in_row = in.row_size(), out_row = r_out.row_size();
  for (std::size_t b = 0; b < n; ++b) {
    const auto x = in.row(b);
    if (all_zero(x)) {
      // Nothing to attribute to: hand the sample's relevance through as is,
      // spread evenly when the widths differ.
      degenerate = true;
      const auto ro = r_out.row(b);
      if (in_row == out_row) {
        for (std::size_t i = 0; i < in_row; ++i) r_in[b * in_row + i] = gamma * ro[i];
      } else {
        const double total = std::accumulate(ro.begin(), ro.end(), 0.0);
        for (std::size_t i = 0; i < in_row; ++i) r_in[b * in_row + i] = gamma * total / static_cast<double>(in_row);
      }
      continue;
    }
    for (std::size_t i = 0; i < in_row; ++i) r_in[b * in_row + i] = gamma * x[i] * c[b * in_row + i];
  }
  return r_in;
}

Tensor lrp_avgpool(const AvgPool& p, const Tensor& in, const Tensor& r_out) {
  Tensor r_in(in.shape());
  const std::size_t n = in.dim(0), ch = in.dim(1), h = in.dim(2), w = in.dim(3);
  const std::size_t oh = h / p.window, ow = w / p.window;
  const double share = 1.0 / static_cast<double>(p.window * p.window);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t o = ((b * ch + c) * oh + y / p.window) * ow + x / p.window;
          r_in[((b * ch + c) * h + y) * w + x] = r_out[o] * share;
        }
  return r_in;
}

std::size_t logit_layer_end(const Model& model) {
  std::size_t end = model.layers.size();
  if (end > 0 && std::holds_alternative<LogSoftmax>(model.layers.back().kind)) --end;
  if (end == 0) throw ConfigError("model has no layer producing logits");
  return end;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

void DetectorConfig::check() const {
  if (!(epsilon > 0.0)) throw ConfigError("detector epsilon must be > 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("detector tau must lie in [0, 1]");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("detector gamma must lie in [0, 1]");
  if (tau_D && !(*tau_D >= 0.0)) throw ConfigError("detector tau_D must be >= 0");
  if (!(tau_W >= 0.0)) throw ConfigError("detector tau_W must be >= 0");
  if (!(relevance_floor > 0.0)) throw ConfigError("relevance floor must be > 0");
  if (root_policy == RootPolicy::custom && custom_root.empty()) {
    throw ConfigError("custom root policy requires a root tensor");
  }
}

std::vector<std::size_t> DetectionReport::flagged_layers() const {
  std::vector<std::size_t> out;
  for (const auto& s : scores)
    if (s.flagged) out.push_back(s.layer_index);
  return out;
}

bool DetectionReport::is_flagged(std::size_t layer_index) const {
  return std::any_of(scores.begin(), scores.end(),
                     [&](const LayerScore& s) { return s.layer_index == layer_index && s.flagged; });
}

double DetectionReport::confidence_of(std::size_t layer_index) const {
  for (const auto& s : scores)
    if (s.layer_index == layer_index && s.flagged) return s.confidence;
  return 0.0;
}

std::vector<int> resolve_targets(const ForwardTrace& trace, std::span<const int> labels, TargetPolicy policy) {
  if (policy == TargetPolicy::true_label) {
    if (labels.size() != trace.batch()) throw InputError("one label per sample is required");
    return {labels.begin(), labels.end()};
  }
  const Tensor& out = trace.output;
  std::vector<int> targets(out.dim(0));
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const auto row = out.row(b);
    targets[b] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return targets;
}

RelevanceMap lrp_relevance(const Model& model, const ForwardTrace& trace, std::span<const int> targets,
                           double epsilon, std::span<const double> gammas) {
  if (trace.size() != model.layers.size()) throw ConsistencyError("trace does not belong to model");
  if (!gammas.empty() && gammas.size() != model.layers.size()) {
    throw ConsistencyError("one gamma per layer is required");
  }
  const std::size_t end = logit_layer_end(model);
  const Tensor& logits = trace.output_of(end - 1);
  if (targets.size() != logits.dim(0)) throw InputError("one target per sample is required");

  RelevanceMap map;
  map.layers.resize(model.layers.size());
  map.degenerate.assign(model.layers.size(), false);
  Tensor r(logits.shape());
  const std::size_t classes = logits.dim(1);
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const auto t = static_cast<std::size_t>(targets[b]);
    if (t >= classes) throw InputError("target class out of range");
    r[b * classes + t] = logits[b * classes + t];
    map.total += r[b * classes + t];
  }
  for (std::size_t k = model.layers.size(); k-- > end;) map.layers[k] = r;

  for (std::size_t k = end; k-- > 0;) {
    const Layer& layer = model.layers[k];
    const Tensor& in = trace.input(k);
    const double gamma = gammas.empty() ? 1.0 : gammas[k];
    if (layer.parameterized()) {
      bool degenerate = false;
      r = lrp_affine(layer, in, r, epsilon, gamma, degenerate);
      map.degenerate[k] = degenerate;
    } else if (const auto* p = std::get_if<AvgPool>(&layer.kind)) {
      r = lrp_avgpool(*p, in, r);
    } else {
      r = r.reshaped(in.shape());
    }
    map.layers[k] = r;
  }
  return map;
}

Tensor root_batch(const Tensor& batch, RootPolicy policy, const Tensor& custom_root) {
  Tensor root(batch.shape());
  switch (policy) {
    case RootPolicy::zeros:
      break;
    case RootPolicy::black_input: {
      const double lo = batch.empty() ? 0.0 : *std::min_element(batch.values().begin(), batch.values().end());
      std::fill(root.values().begin(), root.values().end(), lo);
      break;
    }
    case RootPolicy::custom: {
      if (custom_root.size() != batch.row_size()) throw ConfigError("custom root does not match the input shape");
      for (std::size_t b = 0; b < batch.dim(0); ++b)
        std::copy(custom_root.values().begin(), custom_root.values().end(), root.row(b).begin());
      break;
    }
  }
  return root;
}

RelevanceMap dtd_relevance(const Model& model, const ForwardTrace& trace, std::span<const int> targets,
                           const Tensor& root, Exec exec) {
  if (trace.size() != model.layers.size()) throw ConsistencyError("trace does not belong to model");
  if (root.shape() != trace.input(0).shape()) throw ConsistencyError("root batch shape differs from the input");
  const GradientReport grads = target_gradients(model, trace, targets, exec);
  const ForwardTrace root_trace = forward(model, root, exec);
  const std::size_t end = logit_layer_end(model);

  RelevanceMap map;
  map.layers.resize(model.layers.size());
  map.degenerate.assign(model.layers.size(), false);
  for (std::size_t k = 0; k < end; ++k) {
    const Tensor& x = trace.input(k);
    const Tensor& x0 = root_trace.input(k);
    const Tensor& g = grads.layers[k].input;
    Tensor r(x.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = g[i] * (x[i] - x0[i]);
    map.layers[k] = std::move(r);
  }
  const Tensor& logits = trace.output_of(end - 1);
  const Tensor& root_logits = root_trace.output_of(end - 1);
  Tensor top(logits.shape());
  for (std::size_t b = 0; b < targets.size(); ++b) {
    const std::size_t i = b * logits.dim(1) + static_cast<std::size_t>(targets[b]);
    top[i] = logits[i] - root_logits[i];
    map.total += top[i];
  }
  for (std::size_t k = end; k < model.layers.size(); ++k) map.layers[k] = top;
  return map;
}

std::vector<double> gradient_norms(const GradientReport& grads) {
  std::vector<double> g;
  g.reserve(grads.layers.size());
  for (const auto& layer : grads.layers) g.push_back(layer.input.l2_norm());
  return g;
}

double discrepancy(double G, double R_norm, double floor) { return G / std::max(R_norm, floor); }

double wasserstein_1d(std::span<const double> p, std::span<const double> q) {
  if (p.empty() || q.empty()) throw InputError("wasserstein_1d needs two nonempty samples");
  std::vector<double> a(p.begin(), p.end()), b(q.begin(), q.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Both quantile functions are step functions; walk their breakpoints i/n and
  // j/m in order using integer cross-multiplication so the steps line up exactly.
  const std::size_t n = a.size(), m = b.size();
  std::size_t i = 0, j = 0;
  std::size_t prev = 0;  // current position in units of 1/(n*m)
  double total = 0.0;
  while (i < n && j < m) {
    const std::size_t next_a = (i + 1) * m, next_b = (j + 1) * n;
    const std::size_t next = std::min(next_a, next_b);
    total += static_cast<double>(next - prev) * std::abs(a[i] - b[j]);
    prev = next;
    if (next_a == next) ++i;
    if (next_b == next) ++j;
  }
  return total / static_cast<double>(n * m);
}

std::vector<double> relevance_distribution(const Tensor& relevance) {
  std::vector<double> v(relevance.size());
  double mass = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) mass += v[i] = std::abs(relevance[i]);
  if (mass == 0.0) {
    std::fill(v.begin(), v.end(), 1.0 / static_cast<double>(v.size()));
  } else {
    for (double& x : v) x /= mass;
  }
  return v;
}

std::vector<double> adaptive_gamma(const Model& model, const RelevanceMap& relevance) {
  std::vector<double> gammas(model.layers.size(), 1.0);
  double peak = 0.0;
  for (std::size_t k = 0; k < model.layers.size(); ++k)
    if (model.layers[k].parameterized()) peak = std::max(peak, relevance.layers[k].l2_norm());
  if (peak == 0.0) return gammas;
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    if (!model.layers[k].parameterized()) continue;
    gammas[k] = std::clamp(std::sqrt(relevance.layers[k].l2_norm() / peak), 0.1, 1.0);
  }
  return gammas;
}

DetectionReport score_and_flag(const Model& model, const RelevanceMap& relevance, const GradientReport& grads,
                               const DetectorConfig& config) {
  config.check();
  if (relevance.layers.size() != model.layers.size() || grads.layers.size() != model.layers.size()) {
    throw ConsistencyError("relevance, gradients and model disagree on layer count");
  }
  DetectionReport report;
  std::vector<std::vector<double>> dists;
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    if (!model.layers[k].parameterized()) continue;
    LayerScore s;
    s.layer_index = k;
    s.G = grads.layers[k].input.l2_norm();
    s.R_norm = relevance.layers[k].l2_norm();
    s.D = discrepancy(s.G, s.R_norm, config.relevance_floor);
    s.saturated = s.R_norm < config.relevance_floor && s.G > 0.0;
    report.scores.push_back(s);
    dists.push_back(relevance_distribution(relevance.layers[k]));
  }
  for (std::size_t i = 0; i + 1 < report.scores.size(); ++i) report.scores[i].W_next = wasserstein_1d(dists[i], dists[i + 1]);

  const bool log_scale = config.score_scale == ScoreScale::log;
  auto scaled = [&](double d) { return log_scale ? std::log(std::max(d, config.relevance_floor)) : d; };
  double lo = INFINITY, hi = -INFINITY;
  std::vector<double> ds;
  for (const auto& s : report.scores) {
    if (s.saturated) continue;
    lo = std::min(lo, scaled(s.D));
    hi = std::max(hi, scaled(s.D));
    ds.push_back(s.D);
  }
  report.tau_D = config.tau_D.value_or(3.0 * median(ds));
  for (auto& s : report.scores) {
    if (s.saturated) {
      s.normalized_score = 1.0;
    } else if (hi > lo) {
      s.normalized_score = (scaled(s.D) - lo) / (hi - lo);
    }
    const bool by_score = s.normalized_score > config.tau;
    const bool by_transition = s.W_next > config.tau_W;
    const bool by_discrepancy = config.method == RelevanceMethod::dtd && hi > lo && s.D > report.tau_D;
    s.flagged = by_score || by_transition || by_discrepancy || s.saturated;
    if (s.flagged) {
      s.confidence = config.tau < 1.0 ? std::clamp((s.normalized_score - config.tau) / (1.0 - config.tau), 0.0, 1.0)
                                      : 0.0;
    }
  }
  return report;
}

DetectionReport detect(const Model& model, const Tensor& batch, std::span<const int> labels,
                       const DetectorConfig& config, Exec exec) {
  config.check();
  const ForwardTrace trace = forward(model, batch, exec);
  const GradientReport grads = backward(model, trace, labels, exec);
  const std::vector<int> targets = resolve_targets(trace, labels, config.target_policy);

  std::vector<double> gammas(model.layers.size(), 1.0);
  RelevanceMap relevance;
  if (config.method == RelevanceMethod::dtd) {
    relevance = dtd_relevance(model, trace, targets, root_batch(batch, config.root_policy, config.custom_root), exec);
  } else if (config.gamma_mode == GammaMode::fixed) {
    for (std::size_t k = 0; k < model.layers.size(); ++k)
      if (model.layers[k].parameterized()) gammas[k] = config.gamma;
    relevance = lrp_relevance(model, trace, targets, config.epsilon, gammas);
  } else {
    gammas = adaptive_gamma(model, lrp_relevance(model, trace, targets, config.epsilon));
    relevance = lrp_relevance(model, trace, targets, config.epsilon, gammas);
  }
  DetectionReport report = score_and_flag(model, relevance, grads, config);
  report.gammas = std::move(gammas);
  return report;
}

std::string report_json(const Model& model, const DetectionReport& report) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& s : report.scores) {
    layers.push_back({{"index", s.layer_index},
                      {"kind", kind_name(model.layers.at(s.layer_index).kind)},
                      {"G", s.G},
                      {"R_norm", s.R_norm},
                      {"D", s.D},
                      {"normalized_score", s.normalized_score},
                      {"W_next", s.W_next},
                      {"flagged", s.flagged},
                      {"confidence", s.confidence}});
  }
  nlohmann::json doc{{"tau_D", report.tau_D}, {"layers", std::move(layers)}};
  return doc.dump(2) + "\n";
}

}  // namespace drarmor
