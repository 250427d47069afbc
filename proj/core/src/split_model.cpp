#include "refil/split_model.hpp"

#include <stdexcept>
#include <string>

namespace refil {

SplitModel::SplitModel(Model full, std::size_t split_index) : full_(std::move(full)), split_index_(split_index) {
  if (split_index_ == 0 || split_index_ >= full_.layer_count()) {
    throw std::invalid_argument("split index " + std::to_string(split_index_) + " must lie in (0, " +
                                std::to_string(full_.layer_count()) + ")");
  }
}

Shape SplitModel::split_shape() const {
  Shape s = full_.input_shape();
  for (std::size_t i = 0; i < split_index_; ++i) s = layer_output_shape(full_.layers()[i], s);
  return s;
}

SplitModel insert_compression(const SplitModel& split, const CompressionSpec& spec, Rng& rng) {
  if (spec.c2 == 0 || spec.c2 >= spec.c1) {
    throw std::invalid_argument("compression requires 0 < c2 < c1 (got c1=" + std::to_string(spec.c1) +
                                ", c2=" + std::to_string(spec.c2) + ")");
  }
  const Shape s = split.split_shape();
  Layer compress = Relu{};
  Layer decompress = Relu{};
  if (spec.kind == CompressionSpec::Kind::Conv1x1) {
    if (s.size() != 3 || s[0] != spec.c1) {
      throw std::invalid_argument("Conv1x1 compression expects a [" + std::to_string(spec.c1) +
                                  "xHxW] split activation, got " + shape_to_string(s));
    }
    compress = make_conv2d(spec.c1, spec.c2, 1, 1, 0, rng);
    decompress = make_conv2d(spec.c2, spec.c1, 1, 1, 0, rng);
  } else {
    if (s.size() != 1 || s[0] != spec.c1) {
      throw std::invalid_argument("fully connected compression expects a [" + std::to_string(spec.c1) +
                                  "] split activation, got " + shape_to_string(s));
    }
    compress = make_dense(spec.c1, spec.c2, rng);
    decompress = make_dense(spec.c2, spec.c1, rng);
  }
  const LayerList& old = split.full().layers();
  LayerList layers(old.begin(), old.begin() + static_cast<std::ptrdiff_t>(split.split_index()));
  layers.push_back(std::move(compress));
  layers.push_back(std::move(decompress));
  layers.insert(layers.end(), old.begin() + static_cast<std::ptrdiff_t>(split.split_index()), old.end());
  return SplitModel(Model(split.full().input_shape(), std::move(layers)), split.split_index() + 1);
}

}  // namespace refil
