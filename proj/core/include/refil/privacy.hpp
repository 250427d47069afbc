#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <variant>

#include "refil/model.hpp"
#include "refil/rng.hpp"
#include "refil/tensor.hpp"

namespace refil {

struct ExactTrace {};
struct HutchinsonTrace {
  std::size_t probes = 64;
  std::uint64_t seed = 0;
};
using TraceEstimator = std::variant<ExactTrace, HutchinsonTrace>;

inline constexpr std::size_t kExactTraceLimit = 4096;

/// Exact when min(d, m) <= 4096, otherwise Hutchinson with 64 probes.
TraceEstimator default_estimator(const Model& model, std::uint64_t seed = 0);

/// Leakage is measured with respect to the differentiable input of the
/// client model. For models that start with embedding lookups this is the
/// looked-up embedding vector, not the raw indices.
struct LeakageView {
  std::size_t lookup_layers = 0;     // leading index-consuming layers
  std::shared_ptr<const Model> body;  // the differentiable remainder
  Tensor input;                       // body input for the given x

  std::size_t input_dim() const { return body->input_size(); }
};
LeakageView leakage_view(const Model& client, const Tensor& x);

/// trace(J^T J) of the client at x, on the leakage view.
double estimate_trace(const Model& client, const Tensor& x, const TraceEstimator& estimator);

/// dFIL = trace(J^T J) / (d sigma^2).
double compute_dfil(const Model& client, const Tensor& x, double sigma, const TraceEstimator& estimator);
double dfil_from_trace(double trace_jtj, std::size_t input_dim, double sigma);

struct Calibration {
  double sigma = 0.0;
  double trace_jtj = 0.0;
  std::size_t input_dim = 0;
  /// trace(J^T J) == 0: no sigma changes the leakage (it is zero), so no
  /// noise level is claimed.
  bool degenerate = false;
};

/// sigma = sqrt(trace(J^T J) / (d * target)). A target of +infinity
/// disables noise (sigma = 0) without computing the trace.
Calibration calibrate_sigma(const Model& client, const Tensor& x, double target_dfil,
                            const TraceEstimator& estimator);

struct RefilConfig {
  double target_dfil = 1.0;
  /// Unset selects default_estimator(model, seed).
  std::optional<TraceEstimator> estimator;
  std::uint64_t seed = 0;
  bool per_example = true;

  static RefilConfig no_noise() { return RefilConfig{std::numeric_limits<double>::infinity(), ExactTrace{}}; }
};

struct NoisyActivation {
  Tensor z_noised;
  double sigma = 0.0;
  double trace_jtj = 0.0;
  double achieved_dfil = 0.0;
  std::size_t input_dim_d = 0;
  bool degenerate = false;
};

/// z' = client(x) + N(0, sigma^2) per element with sigma calibrated at x.
/// Noise is drawn from `rng`.
NoisyActivation refil_forward(const Model& client, const Tensor& x, const RefilConfig& cfg, Rng& rng);

/// Per-dimension MSE lower bound 1/dFIL for unbiased reconstruction.
double reconstruction_error_bound(double dfil);

void validate(const RefilConfig& cfg);

}  // namespace refil
