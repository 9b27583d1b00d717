#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "drarmor/tensor.hpp"

namespace drarmor {

enum class Padding : std::uint8_t { valid = 0, same = 1 };

struct Dense {
  std::size_t in_dim;
  std::size_t out_dim;
  bool has_bias = true;
  bool operator==(const Dense&) const = default;
};

struct Conv2D {
  std::size_t in_ch;
  std::size_t out_ch;
  std::size_t kernel;
  std::size_t stride = 1;
  Padding padding = Padding::valid;
  bool operator==(const Conv2D&) const = default;

  std::size_t pad() const { return padding == Padding::same ? (kernel - 1) / 2 : 0; }
};

struct ReLU {
  bool operator==(const ReLU&) const = default;
};

struct Flatten {
  bool operator==(const Flatten&) const = default;
};

// Non-overlapping window x window average over each channel.
struct AvgPool {
  std::size_t window;
  bool operator==(const AvgPool&) const = default;
};

struct LogSoftmax {
  bool operator==(const LogSoftmax&) const = default;
};

// Reinterprets a flat feature vector as `shape` (per sample). Needed to hand a
// dense block's output back to convolutional layers.
struct Reshape {
  Shape shape;
  bool operator==(const Reshape&) const = default;
};

using LayerKind = std::variant<Dense, Conv2D, ReLU, Flatten, AvgPool, LogSoftmax, Reshape>;

std::string kind_name(const LayerKind& kind);
bool is_parameterized(const LayerKind& kind);

using LayerId = std::uint32_t;

struct Layer {
  LayerKind kind;
  Tensor weight;  // Dense: (out, in); Conv2D: (out_ch, in_ch, k, k); absent otherwise
  Tensor bias;    // (out) when present
  LayerId id = 0;

  bool parameterized() const { return is_parameterized(kind); }
  bool operator==(const Layer&) const = default;
};

struct Model {
  Shape input_shape;  // per-sample shape, no batch dimension
  std::vector<Layer> layers;

  bool operator==(const Model&) const = default;

  std::size_t size() const { return layers.size(); }
  const Layer* find(LayerId id) const;
  std::size_t index_of(LayerId id) const;  // layers.size() when absent
  LayerId next_free_id() const;
};

// Per-sample output shape of one layer. Throws ConfigError on incompatibility.
Shape layer_output_shape(const LayerKind& kind, const Shape& input, std::size_t layer_index);

// Per-sample input shape of every layer plus the final output shape.
std::vector<Shape> infer_shapes(const Model& model);

// Checks every structural invariant (shapes chain, parameter shapes, finite
// parameters, unique ids). Throws ConfigError naming the offending layer.
void validate(const Model& model);

std::uint64_t parameter_hash(const Model& model);

// Ground truth about which layers were inserted by the attacker. Lives next
// to, never inside, the model so the client-side detector cannot see it.
enum class LayerTag : std::uint8_t { benign = 0, malicious = 1 };

struct TaggedModel {
  Model model;
  std::vector<LayerTag> tags;  // parallel to model.layers
};

}  // namespace drarmor
