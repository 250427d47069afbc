#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <variant>
#include <vector>

#include "refil/tensor.hpp"

namespace refil {

struct Example {
  Tensor x;
  int label = 0;
};
using Dataset = std::vector<Example>;

/// Malformed or missing data. Messages name the file and the byte offset or
/// line number where parsing stopped.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MnistIdx {
  std::filesystem::path images;
  std::filesystem::path labels;
  std::size_t limit = 0;  // 0 = all
};

struct Cifar10Binary {
  std::vector<std::filesystem::path> files;
  std::size_t limit = 0;
  bool standardize = true;
};

struct MovieLensCsv {
  std::filesystem::path file;
  double like_threshold = 5.0;
  std::size_t limit = 0;
  /// Remap user/movie ids to dense [0, n) in order of first appearance.
  bool remap_ids = true;
};

/// Class-conditional smooth images built from Gaussian blobs, quantized to
/// 8-bit levels in [0, 1].
struct SyntheticImages {
  std::size_t classes = 10;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t count = 1000;
  std::uint64_t seed = 0;
  /// Seed for the class templates; examples sharing it share classes.
  std::uint64_t template_seed = 1;
  std::size_t max_shift = 2;
  float pixel_noise = 0.05f;
};

/// (uid, mid) pairs with like labels from a low-rank latent preference model.
struct SyntheticRatings {
  std::size_t users = 1000;
  std::size_t movies = 1000;
  std::size_t count = 20000;
  std::uint64_t seed = 0;
  std::size_t rank = 4;
};

using DatasetSource = std::variant<MnistIdx, Cifar10Binary, MovieLensCsv, SyntheticImages, SyntheticRatings>;

struct LoadedDataset {
  Dataset examples;
  Shape input_shape;
  std::size_t num_classes = 0;
  // Recommendation data only.
  std::size_t num_users = 0;
  std::size_t num_movies = 0;
  // Per-channel statistics used for standardization, when applied.
  std::vector<float> channel_mean;
  std::vector<float> channel_std;
};

LoadedDataset load_dataset(const DatasetSource& source);

/// Resolves relative paths against $REFIL_DATA_DIR when it is set.
std::filesystem::path resolve_data_path(const std::filesystem::path& p);

Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t limit = 0);
/// Writes [1, h, w] (or [h, w]) examples in [0, 1] as IDX3 images (pixel * 255
/// rounded) and IDX1 labels.
void write_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const Dataset& data);

LoadedDataset load_cifar10_binary(const Cifar10Binary& source);
LoadedDataset load_movielens_csv(const MovieLensCsv& source);
LoadedDataset make_synthetic_images(const SyntheticImages& spec);
LoadedDataset make_synthetic_ratings(const SyntheticRatings& spec);

/// Per-channel mean and population stddev over [c, ...] examples.
void channel_statistics(const Dataset& data, std::vector<float>& mean, std::vector<float>& stddev);

/// Split off the last `test_count` examples.
std::pair<Dataset, Dataset> split_train_test(Dataset data, std::size_t test_count);

}  // namespace refil
