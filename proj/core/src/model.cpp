#include "refil/model.hpp"

namespace refil {

Model::Model(Shape input_shape, LayerList layers) : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (input_shape_.empty()) throw ShapeError("model input shape must have rank >= 1");
  for (std::size_t d : input_shape_) {
    if (d == 0) throw ShapeError("model input dims must be positive");
  }
  output_shape_ = layers_output_shape(layers_, input_shape_);
}

Model Model::prefix(std::size_t n) const {
  if (n > layers_.size()) throw std::out_of_range("Model::prefix: n exceeds layer count");
  return Model(input_shape_, LayerList(layers_.begin(), layers_.begin() + static_cast<std::ptrdiff_t>(n)));
}

Model Model::suffix(std::size_t n) const {
  if (n > layers_.size()) throw std::out_of_range("Model::suffix: n exceeds layer count");
  LayerList head(layers_.begin(), layers_.begin() + static_cast<std::ptrdiff_t>(n));
  Shape mid = layers_output_shape(head, input_shape_);
  return Model(mid, LayerList(layers_.begin() + static_cast<std::ptrdiff_t>(n), layers_.end()));
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  collect_parameters(layers_, out);
  return out;
}

std::vector<const Tensor*> Model::parameters() const {
  std::vector<const Tensor*> out;
  collect_parameters(layers_, out);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : parameters()) n += t->size();
  return n;
}

std::size_t Model::lookup_prefix_length() const {
  std::size_t n = 0;
  while (n < layers_.size() && consumes_indices(layers_[n])) ++n;
  return n;
}

}  // namespace refil
