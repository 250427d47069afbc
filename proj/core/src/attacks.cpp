#include "refil/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "refil/autodiff.hpp"
#include "refil/metrics.hpp"
#include "refil/rng.hpp"

namespace refil {

void validate(const AttackConfig& cfg) {
  if (cfg.iterations == 0) throw std::invalid_argument("AttackConfig: iterations must be >= 1");
  if (cfg.restarts == 0) throw std::invalid_argument("AttackConfig: restarts must be >= 1");
  if (const auto* t = std::get_if<TvPrior>(&cfg.method); t && !(t->lambda >= 0.0)) {
    throw std::invalid_argument("AttackConfig: TV lambda must be >= 0");
  }
  if (!(cfg.optimizer.lr > 0.0)) throw std::invalid_argument("AttackConfig: lr must be > 0");
}

namespace {

void require_image(const Tensor& x, const char* what) {
  if (x.rank() != 3) throw ShapeError(std::string(what) + ": expected a [c, h, w] image, got " +
                                      shape_to_string(x.shape()));
}

// Calls f(i, j) for every horizontally and vertically adjacent index pair.
template <typename F>
void for_each_neighbor_pair(const Tensor& x, F&& f) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const std::size_t base = ch * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t at = base + i * w + j;
        if (i + 1 < h) f(at, at + w);
        if (j + 1 < w) f(at, at + 1);
      }
    }
  }
}

}  // namespace

double tv(const Tensor& x) {
  require_image(x, "tv");
  double s = 0.0;
  for_each_neighbor_pair(x, [&](std::size_t a, std::size_t b) { s += std::abs(static_cast<double>(x[b]) - x[a]); });
  return s;
}

void tv_gradient(const Tensor& x, double lambda, Tensor& grad) {
  require_image(x, "tv_gradient");
  require_same_shape(x, grad, "tv_gradient");
  const float l = static_cast<float>(lambda);
  for_each_neighbor_pair(x, [&](std::size_t a, std::size_t b) {
    const float d = x[b] - x[a];
    const float s = d > 0.0f ? l : d < 0.0f ? -l : 0.0f;
    grad[b] += s;
    grad[a] -= s;
  });
}

namespace {

struct RunOutcome {
  Tensor x;
  std::vector<double> trace;
  double objective = std::numeric_limits<double>::infinity();
  bool finite = true;
};

double objective_and_gradient(const Model& client, const Tensor& z, double lambda, const Tensor& x, Tensor& grad) {
  const Linearization lin(client, x);
  Tensor r = lin.output() - z;
  double obj = squared_norm(r);
  r *= 2.0f;
  grad = lin.vjp(r);
  if (lambda > 0.0) {
    obj += lambda * tv(x);
    tv_gradient(x, lambda, grad);
  }
  return obj;
}

RunOutcome run_adam(const Model& client, const Tensor& z, const AttackConfig& cfg, double lambda, Tensor x) {
  RunOutcome out;
  out.trace.reserve(cfg.iterations + 1);
  const AttackAdam& a = cfg.optimizer;
  Tensor m(x.shape()), v(x.shape()), grad;
  const float b1 = static_cast<float>(a.beta1), b2 = static_cast<float>(a.beta2), eps = static_cast<float>(a.eps);
  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    const double obj = objective_and_gradient(client, z, lambda, x, grad);
    if (!std::isfinite(obj)) {
      out.finite = false;
      return out;
    }
    out.trace.push_back(obj);
    const float step = static_cast<float>(a.lr / (1.0 - std::pow(a.beta1, static_cast<double>(t))));
    const float inv_c2 = static_cast<float>(1.0 / (1.0 - std::pow(a.beta2, static_cast<double>(t))));
    float* px = x.ptr();
    float* pm = m.ptr();
    float* pv = v.ptr();
    const float* pg = grad.ptr();
    for (std::size_t k = 0, n = x.size(); k < n; ++k) {
      pm[k] = b1 * pm[k] + (1.0f - b1) * pg[k];
      pv[k] = b2 * pv[k] + (1.0f - b2) * pg[k] * pg[k];
      px[k] -= step * pm[k] / (std::sqrt(pv[k] * inv_c2) + eps);
    }
  }
  // Objective at the returned point.
  out.objective = objective_and_gradient(client, z, lambda, x, grad);
  out.finite = std::isfinite(out.objective);
  out.trace.push_back(out.objective);
  out.x = std::move(x);
  return out;
}

}  // namespace

AttackResult reconstruct(const Tensor& z_noised, const Model& client, const AttackConfig& cfg,
                         const std::optional<Tensor>& truth) {
  validate(cfg);
  if (z_noised.shape() != client.output_shape()) {
    throw ShapeError("reconstruct: activation shape " + shape_to_string(z_noised.shape()) +
                     " does not match client output " + shape_to_string(client.output_shape()));
  }
  if (client.lookup_prefix_length() > 0) {
    throw std::invalid_argument("reconstruct: client starts with embedding lookups; attack its differentiable body");
  }
  const double lambda = std::holds_alternative<TvPrior>(cfg.method) ? std::get<TvPrior>(cfg.method).lambda : 0.0;
  if (lambda > 0.0) require_image(Tensor(client.input_shape()), "reconstruct (TV prior)");

  const auto start = std::chrono::steady_clock::now();
  AttackResult res;
  std::optional<RunOutcome> best;
  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    Tensor x0(client.input_shape());
    if (const auto* g = std::get_if<GaussianInit>(&cfg.init)) {
      Rng rng(Rng::derive(g->seed, r));
      x0 = rng.normal_tensor(client.input_shape(), static_cast<float>(g->stddev));
    }
    RunOutcome run = run_adam(client, z_noised, cfg, lambda, std::move(x0));
    if (!run.finite) {
      ++res.failed_restarts;
      continue;
    }
    if (!best || run.objective < best->objective) best = std::move(run);
  }
  if (!best) throw AttackFailed("reconstruct: all " + std::to_string(cfg.restarts) + " restarts diverged");
  res.x_hat = std::move(best->x);
  res.objective_trace = std::move(best->trace);
  res.objective = best->objective;
  if (truth) {
    res.mse = mse(res.x_hat, *truth);
    const Shape& s = truth->shape();
    if ((s.size() == 2 || s.size() == 3) && s[s.size() - 1] >= kSsimWindow && s[s.size() - 2] >= kSsimWindow) {
      res.ssim = ssim(res.x_hat, *truth, cfg.ssim_range);
    }
  }
  res.elapsed = std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - start);
  return res;
}

std::vector<std::size_t> rank_embedding_rows(const Tensor& emb_hat, const Tensor& table, std::size_t k) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, e]");
  const std::size_t rows = table.dim(0), e = table.dim(1);
  if (emb_hat.size() != e) {
    throw ShapeError("embedding estimate has " + std::to_string(emb_hat.size()) + " entries, table rows have " +
                     std::to_string(e));
  }
  std::vector<double> dist(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const float* row = table.ptr() + i * e;
    double s = 0.0;
    for (std::size_t j = 0; j < e; ++j) {
      const double d = static_cast<double>(emb_hat[j]) - row[j];
      s += d * d;
    }
    dist[i] = s;
  }
  std::vector<std::size_t> ids(rows);
  std::iota(ids.begin(), ids.end(), 0);
  const auto less = [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); };
  const std::size_t keep = k == 0 ? rows : std::min(k, rows);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep), ids.end(), less);
  ids.resize(keep);
  return ids;
}

std::size_t embedding_id_attack(const Tensor& emb_hat, const Tensor& table) {
  return rank_embedding_rows(emb_hat, table, 1).front();
}

void write_pnm(const std::filesystem::path& path, const Tensor& image) {
  require_image(image, "write_pnm");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (c != 1 && c != 3) throw ShapeError("write_pnm: expected 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (c == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float v = std::clamp(image[ch * h * w + i], 0.0f, 1.0f);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
  }
}

}  // namespace refil
