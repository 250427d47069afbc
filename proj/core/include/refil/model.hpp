#pragma once

#include <cstddef>
#include <vector>

#include "refil/layers.hpp"
#include "refil/tensor.hpp"

namespace refil {

/// Ordered layer list with a fixed input shape. Construction validates that
/// adjacent layer shapes compose; an empty list is the identity model.
class Model {
 public:
  Model() = default;
  Model(Shape input_shape, LayerList layers);

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return output_shape_; }
  std::size_t input_size() const { return shape_size(input_shape_); }
  std::size_t output_size() const { return shape_size(output_shape_); }

  const LayerList& layers() const { return layers_; }
  std::size_t layer_count() const { return layers_.size(); }

  /// Layers [0, n) as a model on the same input.
  Model prefix(std::size_t n) const;
  /// Layers [n, end) as a model on the shape produced by layer n-1.
  Model suffix(std::size_t n) const;

  /// Trainable tensors in deterministic pre-order.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::size_t parameter_count() const;

  /// Number of leading index-consuming layers (embedding lookups). The input
  /// Jacobian of these layers is zero, so leakage is measured on the
  /// embedding vector they produce.
  std::size_t lookup_prefix_length() const;

  bool operator==(const Model& other) const = default;

 private:
  Shape input_shape_;
  Shape output_shape_;
  LayerList layers_;
};

}  // namespace refil
