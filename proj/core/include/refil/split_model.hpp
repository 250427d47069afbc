#pragma once

#include <cstddef>

#include "refil/model.hpp"
#include "refil/rng.hpp"

namespace refil {

/// A full model partitioned at `split_index`: the client runs
/// layers [0, split_index), the server the rest.
class SplitModel {
 public:
  SplitModel(Model full, std::size_t split_index);

  const Model& full() const { return full_; }
  Model& full() { return full_; }
  std::size_t split_index() const { return split_index_; }

  Model client() const { return full_.prefix(split_index_); }
  Model server() const { return full_.suffix(split_index_); }
  /// Shape of the activation crossing the split.
  Shape split_shape() const;

 private:
  Model full_;
  std::size_t split_index_;
};

struct CompressionSpec {
  enum class Kind { Conv1x1, FullyConnected };
  std::size_t c1 = 0;
  std::size_t c2 = 0;
  Kind kind = Kind::Conv1x1;
};

/// Appends a c1 -> c2 compression layer to the client and prepends the
/// c2 -> c1 decompression layer to the server. The new split sits after the
/// compression layer. New layers use fan-in uniform initialization.
SplitModel insert_compression(const SplitModel& split, const CompressionSpec& spec, Rng& rng);

}  // namespace refil
