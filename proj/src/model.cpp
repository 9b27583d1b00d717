#include "drarmor/model.hpp"

#include <algorithm>
#include <set>

#include "drarmor/errors.hpp"

namespace drarmor {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

[[noreturn]] void shape_error(std::size_t index, const std::string& kind, const std::string& msg) {
  throw ConfigError("layer " + std::to_string(index) + " (" + kind + "): " + msg);
}

}  // namespace

std::string kind_name(const LayerKind& kind) {
  return std::visit(overloaded{
                        [](const Dense&) { return std::string("Dense"); },
                        [](const Conv2D&) { return std::string("Conv2D"); },
                        [](const ReLU&) { return std::string("ReLU"); },
                        [](const Flatten&) { return std::string("Flatten"); },
                        [](const AvgPool&) { return std::string("AvgPool"); },
                        [](const LogSoftmax&) { return std::string("LogSoftmax"); },
                        [](const Reshape&) { return std::string("Reshape"); },
                    },
                    kind);
}

bool is_parameterized(const LayerKind& kind) {
  return std::holds_alternative<Dense>(kind) || std::holds_alternative<Conv2D>(kind);
}

const Layer* Model::find(LayerId id) const {
  auto it = std::find_if(layers.begin(), layers.end(), [id](const Layer& l) { return l.id == id; });
  return it == layers.end() ? nullptr : &*it;
}

std::size_t Model::index_of(LayerId id) const {
  auto it = std::find_if(layers.begin(), layers.end(), [id](const Layer& l) { return l.id == id; });
  return static_cast<std::size_t>(it - layers.begin());
}

LayerId Model::next_free_id() const {
  LayerId next = 0;
  for (const Layer& l : layers) next = std::max(next, static_cast<LayerId>(l.id + 1));
  return next;
}

Shape layer_output_shape(const LayerKind& kind, const Shape& input, std::size_t index) {
  const std::string name = kind_name(kind);
  return std::visit(
      overloaded{
          [&](const Dense& d) -> Shape {
            if (input.size() != 1 || input[0] != d.in_dim) {
              shape_error(index, name,
                          "expects flat input of " + std::to_string(d.in_dim) + ", got " +
                              to_string(input));
            }
            return {d.out_dim};
          },
          [&](const Conv2D& c) -> Shape {
            if (input.size() != 3 || input[0] != c.in_ch) {
              shape_error(index, name,
                          "expects (" + std::to_string(c.in_ch) + ", H, W), got " + to_string(input));
            }
            if (c.kernel == 0 || c.stride == 0) shape_error(index, name, "kernel and stride must be positive");
            const std::size_t pad = c.pad();
            if (input[1] + 2 * pad < c.kernel || input[2] + 2 * pad < c.kernel) {
              shape_error(index, name, "kernel larger than padded input " + to_string(input));
            }
            return {c.out_ch, (input[1] + 2 * pad - c.kernel) / c.stride + 1,
                    (input[2] + 2 * pad - c.kernel) / c.stride + 1};
          },
          [&](const ReLU&) -> Shape { return input; },
          [&](const Flatten&) -> Shape { return {numel(input)}; },
          [&](const AvgPool& p) -> Shape {
            if (input.size() != 3) shape_error(index, name, "expects (C, H, W), got " + to_string(input));
            if (p.window == 0 || input[1] % p.window != 0 || input[2] % p.window != 0) {
              shape_error(index, name,
                          "window " + std::to_string(p.window) + " does not tile " + to_string(input));
            }
            return {input[0], input[1] / p.window, input[2] / p.window};
          },
          [&](const LogSoftmax&) -> Shape {
            if (input.size() != 1) shape_error(index, name, "expects flat input, got " + to_string(input));
            return input;
          },
          [&](const Reshape& r) -> Shape {
            if (numel(r.shape) != numel(input)) {
              shape_error(index, name, "cannot reshape " + to_string(input) + " to " + to_string(r.shape));
            }
            return r.shape;
          },
      },
      kind);
}

std::vector<Shape> infer_shapes(const Model& model) {
  if (model.input_shape.empty() || numel(model.input_shape) == 0) {
    throw ConfigError("model input shape is empty");
  }
  std::vector<Shape> shapes;
  shapes.reserve(model.layers.size() + 1);
  shapes.push_back(model.input_shape);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    shapes.push_back(layer_output_shape(model.layers[i].kind, shapes.back(), i));
  }
  return shapes;
}

void validate(const Model& model) {
  infer_shapes(model);
  std::set<LayerId> ids;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& layer = model.layers[i];
    const std::string name = kind_name(layer.kind);
    if (!ids.insert(layer.id).second) shape_error(i, name, "duplicate layer id " + std::to_string(layer.id));
    Shape want_w, want_b;
    if (const auto* d = std::get_if<Dense>(&layer.kind)) {
      want_w = {d->out_dim, d->in_dim};
      if (d->has_bias) want_b = {d->out_dim};
    } else if (const auto* c = std::get_if<Conv2D>(&layer.kind)) {
      want_w = {c->out_ch, c->in_ch, c->kernel, c->kernel};
      want_b = {c->out_ch};
    }
    if (layer.weight.shape() != want_w) {
      shape_error(i, name, "weight shape " + to_string(layer.weight.shape()) + " != " + to_string(want_w));
    }
    if (layer.bias.shape() != want_b) {
      shape_error(i, name, "bias shape " + to_string(layer.bias.shape()) + " != " + to_string(want_b));
    }
    if (!layer.weight.all_finite() || !layer.bias.all_finite()) shape_error(i, name, "non-finite parameters");
  }
}

std::uint64_t parameter_hash(const Model& model) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Layer& layer : model.layers) {
    h = content_hash(layer.weight, h);
    h = content_hash(layer.bias, h);
  }
  return h;
}

}  // namespace drarmor
