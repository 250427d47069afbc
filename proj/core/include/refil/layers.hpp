#pragma once

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "refil/tensor.hpp"

namespace refil {

struct Layer;
using LayerList = std::vector<Layer>;

/// y = W flat(x) + b with W of shape [out, in].
struct Dense {
  Tensor weight;
  Tensor bias;

  bool operator==(const Dense&) const = default;
};

/// Cross-correlation over a [c, h, w] input with zero padding. A 1x1 kernel
/// gives the per-pixel channel map used for split-layer compression.
struct Conv2d {
  Tensor kernel;  // [out_channels, in_channels, kh, kw]
  Tensor bias;    // [out_channels]
  std::size_t stride = 1;
  std::size_t padding = 0;

  bool operator==(const Conv2d&) const = default;
};

/// max(0, x); the derivative at exactly 0 is taken as 0.
struct Relu {
  bool operator==(const Relu&) const = default;
};

/// Non-overlapping mean pooling over [c, h, w] with a square window.
struct AvgPool {
  std::size_t window = 2;

  bool operator==(const AvgPool&) const = default;
};

struct Flatten {
  bool operator==(const Flatten&) const = default;
};

/// Reads input[field] as an integer row index into table [V, e].
struct EmbeddingLookup {
  Tensor table;
  std::size_t field = 0;

  bool operator==(const EmbeddingLookup&) const = default;
};

/// Applies every branch to the same input and concatenates the outputs
/// along `axis`.
struct Concat {
  std::size_t axis = 0;
  std::vector<LayerList> branches;

  bool operator==(const Concat&) const = default;
};

/// (x - mean[c]) / stddev[c], broadcasting over all dims after the first.
struct Standardize {
  Tensor mean;
  Tensor stddev;

  bool operator==(const Standardize&) const = default;
};

/// x + body(x).
struct Residual {
  LayerList body;

  bool operator==(const Residual&) const = default;
};

enum class LayerKind : std::uint8_t {
  Dense = 1,
  Conv2d = 2,
  Relu = 3,
  AvgPool = 4,
  Flatten = 5,
  EmbeddingLookup = 6,
  Concat = 7,
  Standardize = 8,
  Residual = 9,
};

struct Layer {
  using Op = std::variant<Dense, Conv2d, Relu, AvgPool, Flatten, EmbeddingLookup, Concat, Standardize, Residual>;
  Op op;

  template <typename T>
    requires(!std::same_as<std::decay_t<T>, Layer>)
  Layer(T value) : op(std::move(value)) {}  // NOLINT(google-explicit-constructor)

  LayerKind kind() const;
  std::string_view name() const;

  template <typename T>
  bool is() const {
    return std::holds_alternative<T>(op);
  }
  template <typename T>
  T& as() {
    return std::get<T>(op);
  }
  template <typename T>
  const T& as() const {
    return std::get<T>(op);
  }

  bool operator==(const Layer& other) const = default;
};

/// Output shape for a layer applied to `in`; throws ShapeError on mismatch.
Shape layer_output_shape(const Layer& layer, const Shape& in);
/// Output shape for a layer list; the error message names the offending
/// layer by position and kind.
Shape layers_output_shape(const LayerList& layers, const Shape& in);

/// Number of trainable parameter tensors in the layer (recursively).
std::size_t layer_param_count(const Layer& layer);
void collect_parameters(LayerList& layers, std::vector<Tensor*>& out);
void collect_parameters(const LayerList& layers, std::vector<const Tensor*>& out);

/// True when the layer consumes integer indices (embedding lookups, or a
/// Concat made only of lookups). Such layers have zero input Jacobian.
bool consumes_indices(const Layer& layer);

// Layer constructors with fan-in uniform initialization.
class Rng;
Dense make_dense(std::size_t in, std::size_t out, Rng& rng);
Conv2d make_conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                   std::size_t padding, Rng& rng);
EmbeddingLookup make_embedding(std::size_t rows, std::size_t dim, std::size_t field, Rng& rng, float scale = 0.1f);

}  // namespace refil
