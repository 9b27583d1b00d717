#include "drarmor/mitigator.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "drarmor/errors.hpp"
#include "drarmor/rng.hpp"

namespace drarmor {

namespace {

const Verdict* find_verdict(std::span<const Verdict> verdicts, std::size_t index) {
  for (const auto& v : verdicts)
    if (v.layer_index == index) return &v;
  return nullptr;
}

template <class Perturb>
SanitizedGradients perturb_flagged(const GradientReport& grads, std::span<const Verdict> verdicts, Perturb&& perturb) {
  SanitizedGradients out{grads, {}};
  for (std::size_t k = 0; k < out.grads.layers.size(); ++k) {
    const Verdict* v = find_verdict(verdicts, k);
    LayerGradient& g = out.grads.layers[k];
    if (v == nullptr || (g.weight.empty() && g.bias.empty())) continue;
    ProvenanceEntry entry{k, g.id, "", {}, 0};
    perturb(g, *v, entry);
    out.provenance.push_back(std::move(entry));
  }
  return out;
}

Tensor pixelate_slices(const Tensor& g, std::size_t b) {
  if (g.empty()) return g;
  if (g.rank() == 1) return pixelate(g.reshaped(Shape{1, g.size()}), b).reshaped(g.shape());
  if (g.rank() == 2) return pixelate(g, b);
  // (out_ch, in_ch, k, k): each k x k slice on its own.
  const std::size_t rows = g.dim(g.rank() - 2), cols = g.dim(g.rank() - 1), plane = rows * cols;
  Tensor out(g.shape());
  for (std::size_t s = 0; s < g.size() / plane; ++s) {
    Tensor slice(Shape{rows, cols}, std::vector<double>(g.values().begin() + static_cast<std::ptrdiff_t>(s * plane),
                                                         g.values().begin() + static_cast<std::ptrdiff_t>((s + 1) * plane)));
    const Tensor p = pixelate(slice, b);
    std::copy(p.values().begin(), p.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(s * plane));
  }
  return out;
}

Layer adapter_dense(std::size_t in, std::size_t out, LayerId id, std::uint64_t seed) {
  return Layer{Dense{in, out, true}, orthonormal_sketch(out, in, seed), Tensor(Shape{out}), id};
}

// Zero-pad/crop selection between two (C, H, W) maps with equal channel count.
Layer spatial_selection(const Shape& from, const Shape& to, LayerId id) {
  const std::size_t in = numel(from), out = numel(to);
  Tensor w(Shape{out, in});
  for (std::size_t c = 0; c < to[0]; ++c)
    for (std::size_t y = 0; y < std::min(from[1], to[1]); ++y)
      for (std::size_t x = 0; x < std::min(from[2], to[2]); ++x)
        w[((c * to[1] + y) * to[2] + x) * in + (c * from[1] + y) * from[2] + x] = 1.0;
  return Layer{Dense{in, out, true}, std::move(w), Tensor(Shape{out}), id};
}

// Layers turning a `from` activation into a `to` activation.
std::vector<Layer> bridge(const Shape& from, const Shape& to, LayerId& next, std::uint64_t seed) {
  std::vector<Layer> out;
  if (from.size() == 3 && to.size() == 3 && from[1] == to[1] && from[2] == to[2]) {
    Tensor w = orthonormal_sketch(to[0], from[0], seed).reshaped(Shape{to[0], from[0], 1, 1});
    out.push_back(Layer{Conv2D{from[0], to[0], 1, 1, Padding::valid}, std::move(w), Tensor(Shape{to[0]}), next++});
    return out;
  }
  if (from.size() != 1) out.push_back(Layer{Flatten{}, {}, {}, next++});
  const std::size_t in = numel(from), width = numel(to);
  if (from.size() == 3 && to.size() == 3 && from[0] == to[0]) {
    out.push_back(spatial_selection(from, to, next++));
  } else if (in != width) {
    out.push_back(adapter_dense(in, width, next++, seed));
  }
  if (to.size() != 1) out.push_back(Layer{Reshape{to}, {}, {}, next++});
  return out;
}

}  // namespace

std::string defense_name(DefenseMode mode) {
  switch (mode) {
    case DefenseMode::none: return "none";
    case DefenseMode::noise_gaussian: return "noise";
    case DefenseMode::noise_laplace: return "laplace";
    case DefenseMode::pixelate: return "pixelate";
    case DefenseMode::prune: return "prune";
  }
  return "none";
}

DefenseMode parse_defense(const std::string& name) {
  if (name == "none") return DefenseMode::none;
  if (name == "noise" || name == "gaussian") return DefenseMode::noise_gaussian;
  if (name == "laplace") return DefenseMode::noise_laplace;
  if (name == "pixelate") return DefenseMode::pixelate;
  if (name == "prune") return DefenseMode::prune;
  throw ConfigError("unknown defense '" + name + "' (expected none, noise, laplace, pixelate or prune)");
}

void DefenseAction::check() const {
  if (!(sigma2_base >= 0.0)) throw ConfigError("sigma2_base must be >= 0");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (!(epsilon_dp > 0.0)) throw ConfigError("epsilon_dp must be > 0");
  if (!(sensitivity > 0.0)) throw ConfigError("sensitivity must be > 0");
  if (block < 1) throw ConfigError("pixelation block must be >= 1");
}

std::vector<Verdict> verdicts_from(const DetectionReport& report) {
  std::vector<Verdict> out;
  for (const auto& s : report.scores)
    if (s.flagged) out.push_back({s.layer_index, s.confidence});
  return out;
}

SanitizedGradients noise_gaussian(const GradientReport& grads, std::span<const Verdict> verdicts, double sigma2_base,
                                  double alpha, std::uint64_t seed) {
  return perturb_flagged(grads, verdicts, [&](LayerGradient& g, const Verdict& v, ProvenanceEntry& entry) {
    const double variance = sigma2_base * (1.0 + alpha * v.confidence);
    const double sd = std::sqrt(variance);
    entry.mode = "noise_gaussian";
    entry.seed = derive_seed(seed, g.id, 0x6A55);
    entry.parameters = {{"sigma2_base", sigma2_base}, {"alpha", alpha}, {"confidence", v.confidence},
                        {"variance", variance}};
    if (variance == 0.0) return;
    Rng rng(entry.seed);
    for (double& x : g.weight.values()) x += rng.normal(0.0, sd);
    for (double& x : g.bias.values()) x += rng.normal(0.0, sd);
  });
}

SanitizedGradients noise_laplace(const GradientReport& grads, std::span<const Verdict> verdicts, double sensitivity,
                                 double epsilon_dp, std::uint64_t seed) {
  if (!(epsilon_dp > 0.0) || !(sensitivity > 0.0)) throw ConfigError("Laplace noise needs sensitivity, epsilon > 0");
  const double scale = sensitivity / epsilon_dp;
  return perturb_flagged(grads, verdicts, [&](LayerGradient& g, const Verdict&, ProvenanceEntry& entry) {
    entry.mode = "noise_laplace";
    entry.seed = derive_seed(seed, g.id, 0x1A9);
    entry.parameters = {{"sensitivity", sensitivity}, {"epsilon_dp", epsilon_dp}, {"scale", scale}};
    Rng rng(entry.seed);
    for (double& x : g.weight.values()) x += rng.laplace(scale);
    for (double& x : g.bias.values()) x += rng.laplace(scale);
  });
}

Tensor pixelate(const Tensor& grad, std::size_t b) {
  if (b < 1) throw ConfigError("pixelation block must be >= 1");
  if (grad.rank() != 2) throw InputError("pixelate expects a 2-D tensor, got " + to_string(grad.shape()));
  const std::size_t m = grad.dim(0), n = grad.dim(1);
  Tensor out(grad.shape());
  for (std::size_t r0 = 0; r0 < m; r0 += b) {
    const std::size_t r1 = std::min(m, r0 + b);
    for (std::size_t c0 = 0; c0 < n; c0 += b) {
      const std::size_t c1 = std::min(n, c0 + b);
      double sum = 0.0;
      bool constant = true;
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) {
          sum += grad[r * n + c];
          constant = constant && grad[r * n + c] == grad[r0 * n + c0];
        }
      // A constant block keeps its value exactly, which makes the operation idempotent.
      const double mean = constant ? grad[r0 * n + c0] : sum / static_cast<double>((r1 - r0) * (c1 - c0));
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) out[r * n + c] = mean;
    }
  }
  return out;
}

SanitizedGradients pixelate_gradients(const GradientReport& grads, std::span<const Verdict> verdicts, std::size_t b) {
  return perturb_flagged(grads, verdicts, [&](LayerGradient& g, const Verdict&, ProvenanceEntry& entry) {
    entry.mode = "pixelate";
    entry.parameters = {{"block", static_cast<double>(b)}};
    g.weight = pixelate_slices(g.weight, b);
    g.bias = pixelate_slices(g.bias, b);
  });
}

Tensor orthonormal_sketch(std::size_t out, std::size_t in, std::uint64_t seed) {
  // Gram-Schmidt over the shorter side, then scale so a unit-variance input
  // keeps unit variance per output.
  const bool by_rows = out <= in;
  const std::size_t count = by_rows ? out : in, length = by_rows ? in : out;
  Rng rng(derive_seed(seed, out, in));
  std::vector<std::vector<double>> basis;
  while (basis.size() < count) {
    std::vector<double> v(length);
    for (double& x : v) x = rng.normal();
    for (const auto& q : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < length; ++i) dot += v[i] * q[i];
      for (std::size_t i = 0; i < length; ++i) v[i] -= dot * q[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  const double scale = by_rows ? std::sqrt(static_cast<double>(in) / static_cast<double>(out))
                               : std::sqrt(static_cast<double>(out) / static_cast<double>(in));
  Tensor w(Shape{out, in});
  for (std::size_t r = 0; r < out; ++r)
    for (std::size_t c = 0; c < in; ++c) w[r * in + c] = scale * (by_rows ? basis[r][c] : basis[c][r]);
  return w;
}

Model prune_and_bridge(const Model& model, std::span<const Verdict> verdicts) {
  std::set<std::size_t> drop;
  for (const auto& v : verdicts) {
    if (v.layer_index >= model.layers.size()) throw InputError("verdict names a layer outside the model");
    if (model.layers[v.layer_index].parameterized()) drop.insert(v.layer_index);
  }
  if (drop.empty()) return model;
  const std::vector<Shape> shapes = infer_shapes(model);
  bool any_left = false;
  for (std::size_t k = 0; k < model.layers.size(); ++k)
    if (model.layers[k].parameterized() && !drop.count(k)) any_left = true;
  if (!any_left) throw PruneRefused("pruning every parameterized layer would disconnect input from output");

  Model out;
  out.input_shape = model.input_shape;
  LayerId next = model.next_free_id();
  Shape current = model.input_shape;
  const bool terminal_softmax = std::holds_alternative<LogSoftmax>(model.layers.back().kind);
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    if (drop.count(k)) continue;
    const Layer& layer = model.layers[k];
    if (terminal_softmax && k + 1 == model.layers.size() && current != shapes[k]) {
      for (auto& a : bridge(current, shapes[k], next, derive_seed(next, k))) out.layers.push_back(std::move(a));
      current = shapes[k];
    }
    Shape produced;
    try {
      produced = layer_output_shape(layer.kind, current, out.layers.size());
    } catch (const ConfigError&) {
      for (auto& a : bridge(current, shapes[k], next, derive_seed(next, k))) out.layers.push_back(std::move(a));
      current = shapes[k];
      produced = layer_output_shape(layer.kind, current, out.layers.size());
    }
    out.layers.push_back(layer);
    current = std::move(produced);
  }
  if (current != shapes.back()) {
    for (auto& a : bridge(current, shapes.back(), next, derive_seed(next, 0xE0D))) out.layers.push_back(std::move(a));
  }
  try {
    validate(out);
  } catch (const ConfigError& e) {
    throw PruneRefused(std::string("bridged model is inconsistent: ") + e.what());
  }
  return out;
}

double delta_acc(double acc_clean, double acc_defended) {
  if (acc_clean < 0.0 || acc_clean > 1.0 || acc_defended < 0.0 || acc_defended > 1.0) {
    throw InputError("accuracies must lie in [0, 1]");
  }
  return acc_clean - acc_defended;
}

SanitizedGradients sanitize(const GradientReport& grads, std::span<const Verdict> verdicts, const DefenseAction& action,
                            std::uint64_t seed) {
  switch (action.mode) {
    case DefenseMode::noise_gaussian: return noise_gaussian(grads, verdicts, action.sigma2_base, action.alpha, seed);
    case DefenseMode::noise_laplace: return noise_laplace(grads, verdicts, action.sensitivity, action.epsilon_dp, seed);
    case DefenseMode::pixelate: return pixelate_gradients(grads, verdicts, action.block);
    case DefenseMode::none:
    case DefenseMode::prune: break;
  }
  return {grads, {}};
}

nlohmann::json provenance_json(const std::vector<ProvenanceEntry>& provenance) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : provenance) {
    out.push_back({{"layer_index", p.layer_index},
                   {"layer_id", p.layer_id},
                   {"mode", p.mode},
                   {"parameters", p.parameters},
                   {"seed", p.seed}});
  }
  return out;
}

}  // namespace drarmor
