#pragma once

#include <cstddef>
#include <span>

#include "refil/model.hpp"
#include "refil/rng.hpp"
#include "refil/tensor.hpp"

namespace refil {

struct SnrLossOptions {
  std::size_t probes = 4;
  /// Central-difference step for the directional derivatives.
  float step = 1e-3f;
  /// Floor for z^T z in the denominator.
  double min_signal = 1e-8;
};

struct SnrLossValue {
  double loss = 0.0;
  double trace_estimate = 0.0;
  double signal = 0.0;  // z^T z
  bool clamped = false;
};

/// trace(J^T J) / (z^T z) with the trace estimated as
///   (1/k) sum_j || (f(x + h v_j) - f(x - h v_j)) / 2h ||^2,  v_j Rademacher.
/// The estimate only uses forward passes, so its parameter gradient needs
/// first-order reverse mode only. When `param_grads` is non-empty (aligned
/// with client.parameters()), weight * d(loss)/d(theta) is accumulated.
/// For embedding-first clients the probes perturb the embedding vector.
SnrLossValue snr_loss(const Model& client, const Tensor& x, const SnrLossOptions& options, Rng& rng,
                      std::span<Tensor> param_grads = {}, double weight = 1.0);

}  // namespace refil
