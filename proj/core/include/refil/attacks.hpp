#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <variant>
#include <vector>

#include "refil/model.hpp"
#include "refil/tensor.hpp"

namespace refil {

struct Unbiased {};
struct TvPrior {
  double lambda = 0.05;
};
using AttackMethod = std::variant<Unbiased, TvPrior>;

struct AttackAdam {
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ZerosInit {};
struct GaussianInit {
  std::uint64_t seed = 0;
  double stddev = 0.5;
};
using AttackInit = std::variant<ZerosInit, GaussianInit>;

struct AttackConfig {
  AttackMethod method = Unbiased{};
  AttackAdam optimizer{};
  std::size_t iterations = 5000;
  AttackInit init = GaussianInit{};
  std::size_t restarts = 3;
  /// Dynamic range used for SSIM when a ground truth is supplied.
  double ssim_range = 1.0;
};

struct AttackResult {
  Tensor x_hat;
  /// Objective at the init and after each iteration of the winning restart.
  std::vector<double> objective_trace;
  double objective = 0.0;
  std::size_t failed_restarts = 0;
  // Filled when the true input is supplied.
  std::optional<double> mse;
  std::optional<double> ssim;
  std::chrono::nanoseconds elapsed{0};
};

/// Every restart produced a non-finite objective.
class AttackFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void validate(const AttackConfig& cfg);

/// Anisotropic total variation of a [c, h, w] image.
double tv(const Tensor& x);
/// Adds lambda * (a subgradient of tv at x) to `grad`; 0 at kinks.
void tv_gradient(const Tensor& x, double lambda, Tensor& grad);

/// x_hat = argmin ||z' - M(x0)||^2 (+ lambda tv(x0)) by Adam, best of
/// `restarts` by final objective. Restart r draws its init from
/// derive(init.seed, r). SSIM is reported when `truth` is an image of at
/// least 11x11.
AttackResult reconstruct(const Tensor& z_noised, const Model& client, const AttackConfig& cfg,
                         const std::optional<Tensor>& truth = std::nullopt);

/// Row indices of `table` ordered by squared distance to emb_hat; ties go to
/// the lower index. At most k entries (0 = all).
std::vector<std::size_t> rank_embedding_rows(const Tensor& emb_hat, const Tensor& table, std::size_t k = 0);
std::size_t embedding_id_attack(const Tensor& emb_hat, const Tensor& table);

/// Binary PGM (1 channel) or PPM (3 channels) of a [c, h, w] image, values
/// clipped to [0, 1].
void write_pnm(const std::filesystem::path& path, const Tensor& image);

}  // namespace refil
