#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "refil/rng.hpp"
#include "refil/split_model.hpp"

namespace refil {

/// MNIST-shaped MLP on [1, 28, 28]: Dense(784 -> width) on the client,
/// Relu, Dense(width -> 64), Relu, Dense(64 -> classes) on the server.
SplitModel mnist_mlp(std::size_t width, Rng& rng, std::size_t classes = 10);

enum class CnnSplit { Early, Middle, Late };

CnnSplit parse_cnn_split(std::string_view name);
std::string_view to_string(CnnSplit split);

struct CnnOptions {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t base_width = 8;
  std::size_t classes = 10;
  /// Per-channel input statistics for the leading Standardize layer.
  /// Empty means mean 0.5, stddev 0.25.
  std::vector<float> mean;
  std::vector<float> stddev;
};

/// Eight residual blocks: Standardize, Conv 3x3, Relu, four blocks at full
/// resolution, AvgPool(2), four blocks at half resolution, global AvgPool,
/// Flatten, Dense.
///
///   Early  : after the first convolution (client = Standardize + Conv)
///   Middle : after block 4
///   Late   : after block 6
SplitModel residual_cnn(CnnSplit split, const CnnOptions& options, Rng& rng);

/// Two-tower recommender on [uid, mid]: concatenated 32-wide user and movie
/// embeddings, then MLP [64, 32, 16, 1]. The client ends after the first
/// linear layer.
SplitModel ncf_mlp(std::size_t users, std::size_t movies, Rng& rng, std::size_t embedding_dim = 32);

struct CatalogEntry {
  std::string name;
  SplitModel split;
};

/// mlp-1000, mlp-10000, cnn-early, cnn-middle, cnn-late, ncf.
std::vector<CatalogEntry> build_reference_models(std::uint64_t seed = 0);

}  // namespace refil
