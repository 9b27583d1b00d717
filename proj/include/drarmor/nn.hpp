#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "drarmor/model.hpp"
#include "drarmor/tensor.hpp"

namespace drarmor {

// Kernel flavour. Both produce bit-identical results.
enum class Exec { serial, parallel };

/// Activations recorded by one forward pass over a batch.
///
/// `inputs[k]` is the batch fed to layer k; the output of layer k is
/// `inputs[k + 1]` (or `output` for the last layer), so consecutive entries
/// agree by construction.
struct ForwardTrace {
  std::vector<Tensor> inputs;
  Tensor output;

  std::size_t size() const { return inputs.size(); }
  std::size_t batch() const { return output.empty() ? 0 : output.dim(0); }
  const Tensor& input(std::size_t k) const { return inputs.at(k); }
  const Tensor& output_of(std::size_t k) const { return k + 1 < inputs.size() ? inputs[k + 1] : output; }
  // Dense/Conv are affine, so their pre-activation is their output; for a
  // ReLU layer the pre-activation is what it receives.
  const Tensor& pre_activation(std::size_t k, const Model& model) const;
  const Tensor& log_probs() const { return output; }
};

struct LayerGradient {
  LayerId id = 0;
  Tensor weight;  // dL/dW, absent for parameter-free layers
  Tensor bias;    // dL/dB, absent when the layer has no bias
  Tensor input;   // dL/d(layer input)
};

/// Per-layer gradients of one backward pass, parallel to model.layers.
struct GradientReport {
  std::vector<LayerGradient> layers;
  double loss = 0.0;

  const LayerGradient* find(LayerId id) const;
  LayerGradient* find(LayerId id);
};

ForwardTrace forward(const Model& model, const Tensor& batch, Exec exec = Exec::serial);

// Runs layers [begin, end) on `input`, which must be the input of layer `begin`.
Tensor forward_range(const Model& model, const Tensor& input, std::size_t begin, std::size_t end,
                     Exec exec = Exec::serial);

// Mean negative log-probability of the true classes.
double nll_loss(const Tensor& log_probs, std::span<const int> labels);

// Gradient of nll_loss with respect to every parameter and layer input.
GradientReport backward(const Model& model, const ForwardTrace& trace, std::span<const int> labels,
                        Exec exec = Exec::serial);

// Backpropagates `output_grad`, the gradient with respect to the output of
// layer `end - 1`, down to the model input. Layers at or after `end` get empty
// entries. `loss` is left at zero.
GradientReport backpropagate(const Model& model, const ForwardTrace& trace, Tensor output_grad,
                             std::size_t end, Exec exec = Exec::serial);

// Gradient of each sample's target logit (the input of a terminal LogSoftmax,
// or the final output otherwise) with respect to every layer input.
GradientReport target_gradients(const Model& model, const ForwardTrace& trace,
                                std::span<const int> targets, Exec exec = Exec::serial);

// Central differences of nll_loss for every parameter, plus dL/dInput of the
// model input (layer 0). Test oracle only: O(#params) forward passes.
GradientReport finite_diff_grad(const Model& model, const Tensor& batch, std::span<const int> labels,
                                double h);

// Central differences of nll_loss with respect to the input of layer `layer`.
Tensor finite_diff_input_grad(const Model& model, const ForwardTrace& trace, std::span<const int> labels,
                              std::size_t layer, double h);

// W <- W - lr * dL/dW for every parameterized layer present in `grads`
// (matched by layer id). Returns a new model.
Model sgd_step(const Model& model, const GradientReport& grads, double lr);

// Uniform He-style initialization, var(W) = 2 / fan_in, zero biases. Layer ids
// are assigned 0..n-1. Throws ConfigError for an incompatible chain.
Model init_model(const std::vector<LayerKind>& kinds, const Shape& input_shape, std::uint64_t seed);

}  // namespace drarmor
