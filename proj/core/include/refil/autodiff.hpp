#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "refil/model.hpp"
#include "refil/rng.hpp"
#include "refil/tensor.hpp"

namespace refil {

/// Intermediate values of one forward pass. values[0] is the input and
/// values[i + 1] the output of layer i. Composite layers (Residual, Concat)
/// keep the tapes of their sub-lists in `inner[i]`.
struct Tape {
  std::vector<Tensor> values;
  std::vector<std::vector<Tape>> inner;

  const Tensor& output() const { return values.back(); }
};

// Layer-list primitives. Models are thin wrappers over these.
Tensor forward_layers(std::span<const Layer> layers, const Tensor& x);
Tape record_layers(std::span<const Layer> layers, const Tensor& x);
/// J v at the recorded point.
Tensor tangent_layers(std::span<const Layer> layers, const Tape& tape, const Tensor& v);
/// J^T u at the recorded point. When `param_grads` is non-empty it must be
/// aligned with collect_parameters(layers); parameter gradients for u are
/// accumulated into it.
Tensor cotangent_layers(std::span<const Layer> layers, const Tape& tape, const Tensor& u,
                        std::span<Tensor> param_grads = {});

Tensor forward(const Model& model, const Tensor& x);
Tensor vjp(const Model& model, const Tensor& x, const Tensor& u);
Tensor jvp(const Model& model, const Tensor& x, const Tensor& v);

/// Parameter-gradient buffers shaped like model.parameters(), zero-filled.
std::vector<Tensor> zero_param_grads(const Model& model);

/// One forward pass kept for any number of JVP/VJP evaluations at the same
/// input. Holds a reference to the model; the model must outlive it.
class Linearization {
 public:
  Linearization(const Model& model, const Tensor& x);

  const Tensor& output() const { return tape_.output(); }
  const Tape& tape() const { return tape_; }
  Tensor jvp(const Tensor& v) const;
  Tensor vjp(const Tensor& u) const;
  /// J^T u plus parameter gradients accumulated into `param_grads`.
  Tensor vjp(const Tensor& u, std::span<Tensor> param_grads) const;

 private:
  const Model& model_;
  Tape tape_;
};

inline constexpr std::size_t kDefaultJacobianCap = std::size_t{1} << 22;

/// Dense Jacobian [m, d]; row i equals vjp with e_i. Refuses (throws
/// std::length_error) when m * d exceeds `cap`.
Tensor full_jacobian(const Model& model, const Tensor& x, std::size_t cap = kDefaultJacobianCap);

/// ||J||_F^2 by min(d, m) basis sweeps (JVPs over inputs when d <= m,
/// VJPs over outputs otherwise).
double trace_jtj_exact(const Model& model, const Tensor& x);

/// (1/k) sum_j ||J v_j||^2 with Rademacher probes v_j.
double trace_jtj_hutchinson(const Model& model, const Tensor& x, std::size_t probes, Rng& rng);

}  // namespace refil
