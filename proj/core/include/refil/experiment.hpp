#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "refil/attacks.hpp"
#include "refil/datasets.hpp"
#include "refil/privacy.hpp"
#include "refil/reference_models.hpp"
#include "refil/report.hpp"
#include "refil/split_model.hpp"
#include "refil/train.hpp"

namespace refil {

enum class Recipe {
  UnbiasedBound,   // MSE of the unbiased attack against 1/dFIL
  Recommendation,  // embedding-id attack top-1 / top-5 success
  BiasedSsim,      // SSIM of the TV-prior attack
  Utility,         // accuracy with and without compression and SNR loss
};

Recipe parse_recipe(const std::string& name);
std::string to_string(Recipe r);

struct ModelRecipe {
  /// mlp-<width>, cnn-early, cnn-middle, cnn-late or ncf.
  std::string name = "mlp-1000";
  std::uint64_t init_seed = 0;
  std::size_t cnn_width = 8;
  std::size_t embedding_dim = 32;
  /// Replace the client's first Dense layer with a scaled orthogonal
  /// matrix (square layers only).
  bool orthogonal_client = false;
  /// Full-model RFLM checkpoint used instead of fresh initialization.
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::size_t> split_index;  // required with checkpoint
  /// Train before attacking. The utility recipe always trains.
  std::optional<TrainConfig> train;
};

struct UtilityOptions {
  std::size_t compressed_channels = 2;
  double snr_lambda = 0.1;
  /// Train each configuration with ReFIL noise at the evaluated dFIL.
  bool noise_aware = true;
  std::size_t noise_probes = 1;
};

struct ExperimentSpec {
  std::string name;
  Recipe recipe = Recipe::UnbiasedBound;
  ModelRecipe model;
  DatasetSource dataset = SyntheticImages{};
  /// Evaluation examples, taken from the end of the dataset. Earlier
  /// examples are the training set.
  std::size_t subsample = 100;
  std::vector<double> dfil_grid{0.01, 0.1, 1.0, 10.0, 100.0};  // 1/dFIL values
  AttackConfig attack;
  std::size_t trials = 10;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "results";
  std::optional<TraceEstimator> estimator;  // unset: default_estimator
  UtilityOptions utility;
  /// Write PGM/PPM images of the first N trials per grid point.
  std::size_t image_dumps = 0;
};

ExperimentSpec parse_experiment_spec(const std::string& json_text);
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);
void validate(const ExperimentSpec& spec);

/// Seed for (grid point, trial); independent of execution order.
std::uint64_t trial_seed(std::uint64_t spec_seed, std::size_t grid_index, std::size_t trial);

struct ExperimentOutput {
  ResultsTable results;
  std::filesystem::path results_csv;
  std::filesystem::path plot_svg;
  std::optional<std::filesystem::path> utility_csv;
};

/// Runs every grid point, then writes results.csv and plot.svg (plus
/// utility.csv for the utility recipe) into spec.output_dir. A failing trial
/// is recorded with its error and does not stop the run. Progress goes to
/// `log` when given.
ExperimentOutput run_experiment(const ExperimentSpec& spec, std::ostream* log = nullptr);

/// Builds the split model named by the recipe for the given data shape.
SplitModel build_model(const ModelRecipe& recipe, const LoadedDataset& data);

/// Scaled orthogonal square matrix from Gram-Schmidt on a Gaussian draw,
/// with Frobenius norm equal to that of `like`.
Tensor orthogonal_like(const Tensor& like, Rng& rng);

}  // namespace refil
