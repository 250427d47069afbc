#include "refil/snr_loss.hpp"

#include <algorithm>
#include <stdexcept>

#include "refil/autodiff.hpp"

namespace refil {

SnrLossValue snr_loss(const Model& client, const Tensor& x, const SnrLossOptions& options, Rng& rng,
                      std::span<Tensor> param_grads, double weight) {
  if (options.probes == 0) throw std::invalid_argument("snr_loss: probes must be >= 1");
  if (x.shape() != client.input_shape()) throw ShapeError("snr_loss: input shape mismatch");
  const bool want_grads = !param_grads.empty();
  const std::span<const Layer> layers(client.layers());
  const std::size_t n_lookup = client.lookup_prefix_length();
  const auto prefix = layers.first(n_lookup);
  const auto body = layers.subspan(n_lookup);

  std::size_t prefix_params = 0;
  for (const Layer& l : prefix) prefix_params += layer_param_count(l);
  std::span<Tensor> prefix_grads, body_grads;
  if (want_grads) {
    prefix_grads = param_grads.first(prefix_params);
    body_grads = param_grads.subspan(prefix_params);
  }

  const Tape prefix_tape = record_layers(prefix, x);
  const Tensor& e = prefix_tape.output();
  const Tape z_tape = record_layers(body, e);
  const Tensor& z = z_tape.output();

  SnrLossValue out;
  out.signal = squared_norm(z);
  out.clamped = out.signal < options.min_signal;
  const double denom = std::max(out.signal, options.min_signal);

  const float h = options.step;
  const double k = static_cast<double>(options.probes);
  Tensor e_grad(e.shape());
  double numerator = 0.0;
  for (std::size_t j = 0; j < options.probes; ++j) {
    const Tensor v = rng.rademacher_tensor(e.shape());
    Tensor e_plus = e, e_minus = e;
    axpy(h, v, e_plus);
    axpy(-h, v, e_minus);
    const Tape t_plus = record_layers(body, e_plus);
    const Tape t_minus = record_layers(body, e_minus);
    Tensor g = t_plus.output() - t_minus.output();
    g *= 1.0f / (2.0f * h);
    numerator += squared_norm(g) / k;
    if (want_grads) {
      // d/dtheta of ||g||^2 / (k D) = 2 g^T (df+ - df-) / (2h k D)
      Tensor cot = g * static_cast<float>(weight / (k * h * denom));
      e_grad += cotangent_layers(body, t_plus, cot, body_grads);
      cot *= -1.0f;
      e_grad += cotangent_layers(body, t_minus, cot, body_grads);
    }
  }
  out.trace_estimate = numerator;
  out.loss = numerator / denom;

  if (want_grads) {
    if (!out.clamped) {
      // d/dtheta of N / (z^T z) through the denominator: -N / D^2 * 2 z.
      Tensor cot = z * static_cast<float>(-2.0 * weight * numerator / (denom * denom));
      e_grad += cotangent_layers(body, z_tape, cot, body_grads);
    }
    if (n_lookup > 0) cotangent_layers(prefix, prefix_tape, e_grad, prefix_grads);
  }
  return out;
}

}  // namespace refil
