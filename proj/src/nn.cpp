#include "drarmor/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "drarmor/errors.hpp"
#include "drarmor/kernels.hpp"
#include "drarmor/rng.hpp"

namespace drarmor {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

Shape batched(std::size_t n, const Shape& sample) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

Shape sample_shape(const Tensor& t) { return Shape(t.shape().begin() + 1, t.shape().end()); }

kernels::ConvDims conv_dims(const Conv2D& c, const Tensor& in) {
  return {in.dim(0), c.in_ch, in.dim(2), in.dim(3), c.out_ch, c.kernel, c.stride, c.pad()};
}

Tensor layer_forward(const Layer& layer, const Tensor& in, std::size_t index, Exec exec) {
  const std::size_t n = in.dim(0);
  const Shape out_sample = layer_output_shape(layer.kind, sample_shape(in), index);
  Tensor out(batched(n, out_sample));
  std::visit(overloaded{
                 [&](const Dense& d) {
                   const kernels::DenseDims dims{n, d.in_dim, d.out_dim};
                   if (exec == Exec::parallel) {
                     kernels::parallel::dense_forward(dims, in.data(), layer.weight.data(), layer.bias.data(),
                                                      out.data());
                   } else {
                     kernels::serial::dense_forward(dims, in.data(), layer.weight.data(), layer.bias.data(),
                                                    out.data());
                   }
                 },
                 [&](const Conv2D& c) {
                   const auto dims = conv_dims(c, in);
                   if (exec == Exec::parallel) {
                     kernels::parallel::conv2d_forward(dims, in.data(), layer.weight.data(), layer.bias.data(),
                                                       out.data());
                   } else {
                     kernels::serial::conv2d_forward(dims, in.data(), layer.weight.data(), layer.bias.data(),
                                                     out.data());
                   }
                 },
                 [&](const ReLU&) {
                   for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
                 },
                 [&](const Flatten&) { out.values() = in.values(); },
                 [&](const Reshape&) { out.values() = in.values(); },
                 [&](const AvgPool& p) {
                   const std::size_t c = in.dim(1), h = in.dim(2), w = in.dim(3);
                   const std::size_t oh = h / p.window, ow = w / p.window;
                   const double scale = 1.0 / static_cast<double>(p.window * p.window);
                   for (std::size_t b = 0; b < n * c; ++b) {
                     for (std::size_t y = 0; y < oh; ++y) {
                       for (std::size_t x = 0; x < ow; ++x) {
                         double acc = 0.0;
                         for (std::size_t dy = 0; dy < p.window; ++dy) {
                           for (std::size_t dx = 0; dx < p.window; ++dx) {
                             acc += in[(b * h + y * p.window + dy) * w + x * p.window + dx];
                           }
                         }
                         out[(b * oh + y) * ow + x] = acc * scale;
                       }
                     }
                   }
                 },
                 [&](const LogSoftmax&) {
                   const std::size_t k = in.row_size();
                   for (std::size_t b = 0; b < n; ++b) {
                     auto row = in.row(b);
                     const double mx = *std::max_element(row.begin(), row.end());
                     double sum = 0.0;
                     for (double v : row) sum += std::exp(v - mx);
                     const double lse = mx + std::log(sum);
                     for (std::size_t j = 0; j < k; ++j) out[b * k + j] = row[j] - lse;
                   }
                 },
             },
             layer.kind);
  return out;
}

// Fills grad.input (and grad.weight / grad.bias for parameterized layers).
void layer_backward(const Layer& layer, const Tensor& in, const Tensor& out, const Tensor& grad_out,
                    Exec exec, LayerGradient& grad) {
  const std::size_t n = in.dim(0);
  grad.id = layer.id;
  grad.input = Tensor(in.shape());
  std::visit(
      overloaded{
          [&](const Dense& d) {
            const kernels::DenseDims dims{n, d.in_dim, d.out_dim};
            grad.weight = Tensor(layer.weight.shape());
            if (d.has_bias) grad.bias = Tensor(layer.bias.shape());
            if (exec == Exec::parallel) {
              kernels::parallel::dense_backward_input(dims, grad_out.data(), layer.weight.data(),
                                                      grad.input.data());
              kernels::parallel::dense_backward_params(dims, grad_out.data(), in.data(), grad.weight.data(),
                                                       grad.bias.data());
            } else {
              kernels::serial::dense_backward_input(dims, grad_out.data(), layer.weight.data(),
                                                    grad.input.data());
              kernels::serial::dense_backward_params(dims, grad_out.data(), in.data(), grad.weight.data(),
                                                     grad.bias.data());
            }
          },
          [&](const Conv2D& c) {
            const auto dims = conv_dims(c, in);
            grad.weight = Tensor(layer.weight.shape());
            grad.bias = Tensor(layer.bias.shape());
            if (exec == Exec::parallel) {
              kernels::parallel::conv2d_backward_input(dims, grad_out.data(), layer.weight.data(),
                                                       grad.input.data());
              kernels::parallel::conv2d_backward_params(dims, grad_out.data(), in.data(), grad.weight.data(),
                                                        grad.bias.data());
            } else {
              kernels::serial::conv2d_backward_input(dims, grad_out.data(), layer.weight.data(),
                                                     grad.input.data());
              kernels::serial::conv2d_backward_params(dims, grad_out.data(), in.data(), grad.weight.data(),
                                                      grad.bias.data());
            }
          },
          [&](const ReLU&) {
            // Subgradient at exactly zero is zero.
            for (std::size_t i = 0; i < in.size(); ++i) grad.input[i] = in[i] > 0.0 ? grad_out[i] : 0.0;
          },
          [&](const Flatten&) { grad.input.values() = grad_out.values(); },
          [&](const Reshape&) { grad.input.values() = grad_out.values(); },
          [&](const AvgPool& p) {
            const std::size_t c = in.dim(1), h = in.dim(2), w = in.dim(3);
            const std::size_t oh = h / p.window, ow = w / p.window;
            const double scale = 1.0 / static_cast<double>(p.window * p.window);
            for (std::size_t b = 0; b < n * c; ++b) {
              for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                  grad.input[(b * h + y) * w + x] = grad_out[(b * oh + y / p.window) * ow + x / p.window] * scale;
                }
              }
            }
          },
          [&](const LogSoftmax&) {
            const std::size_t k = in.row_size();
            for (std::size_t b = 0; b < n; ++b) {
              double gsum = 0.0;
              for (std::size_t j = 0; j < k; ++j) gsum += grad_out[b * k + j];
              for (std::size_t j = 0; j < k; ++j) {
                grad.input[b * k + j] = grad_out[b * k + j] - std::exp(out[b * k + j]) * gsum;
              }
            }
          },
      },
      layer.kind);
}

void check_labels(std::span<const int> labels, std::size_t batch, std::size_t classes) {
  if (labels.size() != batch) {
    throw InputError("expected " + std::to_string(batch) + " labels, got " + std::to_string(labels.size()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw InputError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

}  // namespace

const Tensor& ForwardTrace::pre_activation(std::size_t k, const Model& model) const {
  if (std::holds_alternative<ReLU>(model.layers.at(k).kind)) return input(k);
  return output_of(k);
}

const LayerGradient* GradientReport::find(LayerId id) const {
  auto it = std::find_if(layers.begin(), layers.end(), [id](const LayerGradient& g) { return g.id == id; });
  return it == layers.end() ? nullptr : &*it;
}

LayerGradient* GradientReport::find(LayerId id) {
  auto it = std::find_if(layers.begin(), layers.end(), [id](const LayerGradient& g) { return g.id == id; });
  return it == layers.end() ? nullptr : &*it;
}

ForwardTrace forward(const Model& model, const Tensor& batch, Exec exec) {
  if (batch.rank() != model.input_shape.size() + 1 || sample_shape(batch) != model.input_shape) {
    throw ConfigError("layer 0: batch shape " + to_string(batch.shape()) + " does not match model input " +
                      to_string(model.input_shape) + " with a leading batch dimension");
  }
  ForwardTrace trace;
  trace.inputs.reserve(model.layers.size());
  Tensor current = batch;
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    Tensor next = layer_forward(model.layers[k], current, k, exec);
    trace.inputs.push_back(std::move(current));
    current = std::move(next);
  }
  trace.output = std::move(current);
  return trace;
}

Tensor forward_range(const Model& model, const Tensor& input, std::size_t begin, std::size_t end,
                     Exec exec) {
  Tensor current = input;
  for (std::size_t k = begin; k < end; ++k) current = layer_forward(model.layers[k], current, k, exec);
  return current;
}

double nll_loss(const Tensor& log_probs, std::span<const int> labels) {
  if (log_probs.rank() != 2) throw InputError("nll_loss expects (batch, classes) log-probabilities");
  check_labels(labels, log_probs.dim(0), log_probs.dim(1));
  double sum = 0.0;
  const std::size_t k = log_probs.dim(1);
  for (std::size_t b = 0; b < labels.size(); ++b) sum -= log_probs[b * k + static_cast<std::size_t>(labels[b])];
  return std::max(0.0, sum / static_cast<double>(labels.size()));
}

GradientReport backpropagate(const Model& model, const ForwardTrace& trace, Tensor output_grad,
                             std::size_t end, Exec exec) {
  if (trace.size() != model.layers.size()) {
    throw ConsistencyError("trace has " + std::to_string(trace.size()) + " layers, model has " +
                           std::to_string(model.layers.size()));
  }
  if (end == 0 || end > model.layers.size()) throw ConsistencyError("backpropagate: end out of range");
  if (output_grad.shape() != trace.output_of(end - 1).shape()) {
    throw ConsistencyError("seed gradient shape " + to_string(output_grad.shape()) + " != layer output " +
                           to_string(trace.output_of(end - 1).shape()));
  }
  GradientReport report;
  report.layers.resize(model.layers.size());
  for (std::size_t k = 0; k < model.layers.size(); ++k) report.layers[k].id = model.layers[k].id;
  Tensor grad = std::move(output_grad);
  for (std::size_t k = end; k-- > 0;) {
    const Tensor& in = trace.input(k);
    if (in.shape()[0] != grad.shape()[0]) throw ConsistencyError("batch size changed inside trace");
    layer_backward(model.layers[k], in, trace.output_of(k), grad, exec, report.layers[k]);
    grad = report.layers[k].input;
  }
  return report;
}

GradientReport backward(const Model& model, const ForwardTrace& trace, std::span<const int> labels,
                        Exec exec) {
  const Tensor& log_probs = trace.log_probs();
  if (log_probs.rank() != 2) throw ConsistencyError("backward expects (batch, classes) model output");
  check_labels(labels, log_probs.dim(0), log_probs.dim(1));
  Tensor seed(log_probs.shape());
  const std::size_t k = log_probs.dim(1);
  const double scale = -1.0 / static_cast<double>(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) seed[b * k + static_cast<std::size_t>(labels[b])] = scale;
  GradientReport report = backpropagate(model, trace, std::move(seed), model.layers.size(), exec);
  report.loss = nll_loss(log_probs, labels);
  return report;
}

GradientReport target_gradients(const Model& model, const ForwardTrace& trace, std::span<const int> targets,
                                Exec exec) {
  std::size_t end = model.layers.size();
  if (end > 0 && std::holds_alternative<LogSoftmax>(model.layers.back().kind)) --end;
  if (end == 0) throw ConfigError("model has no layer producing logits");
  const Tensor& logits = trace.output_of(end - 1);
  if (logits.rank() != 2) throw ConsistencyError("target_gradients expects flat logits");
  check_labels(targets, logits.dim(0), logits.dim(1));
  Tensor seed(logits.shape());
  for (std::size_t b = 0; b < targets.size(); ++b) seed[b * logits.dim(1) + static_cast<std::size_t>(targets[b])] = 1.0;
  return backpropagate(model, trace, std::move(seed), end, exec);
}

GradientReport finite_diff_grad(const Model& model, const Tensor& batch, std::span<const int> labels,
                                double h) {
  if (!(h > 0.0)) throw InputError("finite difference step must be positive");
  auto loss_of = [&](const Model& m, const Tensor& x) { return nll_loss(forward(m, x).log_probs(), labels); };
  GradientReport report;
  report.layers.resize(model.layers.size());
  report.loss = loss_of(model, batch);
  Model probe = model;
  auto central = [&](double& slot) {
    const double saved = slot;
    slot = saved + h;
    const double up = loss_of(probe, batch);
    slot = saved - h;
    const double down = loss_of(probe, batch);
    slot = saved;
    return (up - down) / (2.0 * h);
  };
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    LayerGradient& g = report.layers[k];
    g.id = model.layers[k].id;
    Layer& layer = probe.layers[k];
    if (!layer.weight.empty()) {
      g.weight = Tensor(layer.weight.shape());
      for (std::size_t i = 0; i < layer.weight.size(); ++i) g.weight[i] = central(layer.weight[i]);
    }
    if (!layer.bias.empty()) {
      g.bias = Tensor(layer.bias.shape());
      for (std::size_t i = 0; i < layer.bias.size(); ++i) g.bias[i] = central(layer.bias[i]);
    }
  }
  if (!model.layers.empty()) {
    Tensor x = batch;
    Tensor gx(batch.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + h;
      const double up = loss_of(model, x);
      x[i] = saved - h;
      const double down = loss_of(model, x);
      x[i] = saved;
      gx[i] = (up - down) / (2.0 * h);
    }
    report.layers[0].input = std::move(gx);
  }
  return report;
}

Tensor finite_diff_input_grad(const Model& model, const ForwardTrace& trace, std::span<const int> labels,
                              std::size_t layer, double h) {
  if (!(h > 0.0)) throw InputError("finite difference step must be positive");
  Tensor x = trace.input(layer);
  Tensor g(x.shape());
  auto loss_at = [&](const Tensor& in) {
    return nll_loss(forward_range(model, in, layer, model.layers.size()), labels);
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = loss_at(x);
    x[i] = saved - h;
    const double down = loss_at(x);
    x[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

Model sgd_step(const Model& model, const GradientReport& grads, double lr) {
  Model next = model;
  for (Layer& layer : next.layers) {
    if (!layer.parameterized()) continue;
    const LayerGradient* g = grads.find(layer.id);
    if (g == nullptr) continue;
    if (!g->weight.empty()) {
      if (g->weight.shape() != layer.weight.shape()) throw ConsistencyError("sgd_step: weight gradient shape mismatch");
      for (std::size_t i = 0; i < layer.weight.size(); ++i) layer.weight[i] -= lr * g->weight[i];
    }
    if (!g->bias.empty() && !layer.bias.empty()) {
      if (g->bias.shape() != layer.bias.shape()) throw ConsistencyError("sgd_step: bias gradient shape mismatch");
      for (std::size_t i = 0; i < layer.bias.size(); ++i) layer.bias[i] -= lr * g->bias[i];
    }
  }
  return next;
}

Model init_model(const std::vector<LayerKind>& kinds, const Shape& input_shape, std::uint64_t seed) {
  Model model;
  model.input_shape = input_shape;
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    Layer layer;
    layer.kind = kinds[k];
    layer.id = static_cast<LayerId>(k);
    std::size_t fan_in = 0;
    if (const auto* d = std::get_if<Dense>(&layer.kind)) {
      layer.weight = Tensor({d->out_dim, d->in_dim});
      if (d->has_bias) layer.bias = Tensor({d->out_dim});
      fan_in = d->in_dim;
    } else if (const auto* c = std::get_if<Conv2D>(&layer.kind)) {
      layer.weight = Tensor({c->out_ch, c->in_ch, c->kernel, c->kernel});
      layer.bias = Tensor({c->out_ch});
      fan_in = c->in_ch * c->kernel * c->kernel;
    }
    if (fan_in > 0) {
      Rng rng(derive_seed(seed, k, 0x1417));
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (double& w : layer.weight.values()) w = rng.uniform(-limit, limit);
    }
    model.layers.push_back(std::move(layer));
  }
  validate(model);
  return model;
}

}  // namespace drarmor
