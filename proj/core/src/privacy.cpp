#include "refil/privacy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "refil/autodiff.hpp"

namespace refil {

TraceEstimator default_estimator(const Model& model, std::uint64_t seed) {
  const std::size_t lookup = model.lookup_prefix_length();
  Shape body_in = model.input_shape();
  for (std::size_t i = 0; i < lookup; ++i) body_in = layer_output_shape(model.layers()[i], body_in);
  const std::size_t d = shape_size(body_in), m = model.output_size();
  if (std::min(d, m) <= kExactTraceLimit) return ExactTrace{};
  return HutchinsonTrace{64, seed};
}

LeakageView leakage_view(const Model& client, const Tensor& x) {
  const std::size_t n = client.lookup_prefix_length();
  if (n == 0) return LeakageView{0, std::shared_ptr<const Model>(&client, [](const Model*) {}), x};
  Tensor emb = forward_layers(std::span<const Layer>(client.layers()).first(n), x);
  return LeakageView{n, std::make_shared<const Model>(client.suffix(n)), std::move(emb)};
}

double estimate_trace(const Model& client, const Tensor& x, const TraceEstimator& estimator) {
  const LeakageView view = leakage_view(client, x);
  if (const auto* h = std::get_if<HutchinsonTrace>(&estimator)) {
    Rng rng(h->seed);
    return trace_jtj_hutchinson(*view.body, view.input, h->probes, rng);
  }
  return trace_jtj_exact(*view.body, view.input);
}

double dfil_from_trace(double trace_jtj, std::size_t input_dim, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("dFIL requires sigma > 0");
  return trace_jtj / (static_cast<double>(input_dim) * sigma * sigma);
}

double compute_dfil(const Model& client, const Tensor& x, double sigma, const TraceEstimator& estimator) {
  if (!(sigma > 0.0)) throw std::invalid_argument("compute_dfil: sigma must be > 0");
  const LeakageView view = leakage_view(client, x);
  return dfil_from_trace(estimate_trace(client, x, estimator), view.input_dim(), sigma);
}

Calibration calibrate_sigma(const Model& client, const Tensor& x, double target_dfil,
                            const TraceEstimator& estimator) {
  if (!(target_dfil > 0.0)) throw std::invalid_argument("calibrate_sigma: target dFIL must be > 0");
  Calibration cal;
  cal.input_dim = leakage_view(client, x).input_dim();
  if (std::isinf(target_dfil)) return cal;
  cal.trace_jtj = estimate_trace(client, x, estimator);
  if (cal.trace_jtj <= 0.0) {
    cal.degenerate = true;
    return cal;
  }
  cal.sigma = std::sqrt(cal.trace_jtj / (static_cast<double>(cal.input_dim) * target_dfil));
  return cal;
}

void validate(const RefilConfig& cfg) {
  if (!(cfg.target_dfil > 0.0)) throw std::invalid_argument("RefilConfig: target_dfil must be > 0");
  if (cfg.estimator) {
    if (const auto* h = std::get_if<HutchinsonTrace>(&*cfg.estimator); h && h->probes == 0) {
      throw std::invalid_argument("RefilConfig: Hutchinson probes must be >= 1");
    }
  }
}

NoisyActivation refil_forward(const Model& client, const Tensor& x, const RefilConfig& cfg, Rng& rng) {
  validate(cfg);
  const TraceEstimator est = cfg.estimator.value_or(default_estimator(client, cfg.seed));
  const Calibration cal = calibrate_sigma(client, x, cfg.target_dfil, est);
  NoisyActivation out;
  out.z_noised = forward(client, x);
  out.sigma = cal.sigma;
  out.trace_jtj = cal.trace_jtj;
  out.input_dim_d = cal.input_dim;
  out.degenerate = cal.degenerate;
  if (cal.sigma > 0.0) {
    for (float& v : out.z_noised.data()) v += static_cast<float>(rng.normal() * cal.sigma);
    out.achieved_dfil = dfil_from_trace(cal.trace_jtj, cal.input_dim, cal.sigma);
  } else {
    out.achieved_dfil = cal.degenerate ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return out;
}

double reconstruction_error_bound(double dfil) {
  if (!(dfil > 0.0)) throw std::invalid_argument("reconstruction_error_bound: dFIL must be > 0");
  return 1.0 / dfil;
}

}  // namespace refil
