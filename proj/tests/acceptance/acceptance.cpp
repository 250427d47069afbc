// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failing criteria (capped at 100).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "reference_forward.hpp"
#include "refil/autodiff.hpp"
#include "refil/experiment.hpp"
#include "refil/privacy.hpp"
#include "refil/reference_models.hpp"
#include "refil/report.hpp"
#include "refil/service.hpp"
#include "refil/wire.hpp"

namespace fs = std::filesystem;
using namespace refil;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path workdir;
  bool verbose = false;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

std::vector<double> to_double(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

double rel_vec(const Tensor& got, const std::vector<double>& want) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    const double d = static_cast<double>(got[i]) - want[i];
    num += d * d;
    den += want[i] * want[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

Tensor unit(const Tensor& v) { return v * static_cast<float>(1.0 / std::sqrt(squared_norm(v))); }

// ---------------------------------------------------------------- models

Model random_mlp(Rng& rng) {
  const std::size_t d = 2 + rng.below(10), h = 2 + rng.below(12), m = 1 + rng.below(8);
  return Model({d}, {make_dense(d, h, rng), Relu{}, make_dense(h, m, rng)});
}

Model random_cnn(Rng& rng) {
  const std::size_t c = 1 + rng.below(3), n = 6 + rng.below(5), k = 2 + rng.below(3);
  std::vector<float> mean(c), sd(c);
  for (std::size_t i = 0; i < c; ++i) {
    mean[i] = static_cast<float>(rng.uniform(0.3, 0.7));
    sd[i] = static_cast<float>(rng.uniform(0.2, 0.5));
  }
  Standardize st{Tensor(Shape{c}, mean), Tensor(Shape{c}, sd)};
  LayerList block{make_conv2d(k, k, 3, 1, 1, rng), Relu{}, make_conv2d(k, k, 3, 1, 1, rng)};
  LayerList layers{st, make_conv2d(c, k, 3, 1 + rng.below(2), 1, rng), Relu{}, Residual{block}};
  Shape s = layers_output_shape(layers, {c, n, n});
  if (s[1] >= 2) layers.push_back(AvgPool{2});
  s = layers_output_shape(layers, {c, n, n});
  // Two differentiable branches joined along channels.
  layers.push_back(Concat{0, {{make_conv2d(k, 1, 1, 1, 0, rng)}, {make_conv2d(k, 2, 3, 1, 1, rng), Relu{}}}});
  layers.push_back(Flatten{});
  const std::size_t flat = shape_size(layers_output_shape(layers, {c, n, n}));
  layers.push_back(make_dense(flat, 1 + rng.below(6), rng));
  return Model({c, n, n}, layers);
}

Model random_embedding_mix(Rng& rng) {
  const std::size_t e1 = 2 + rng.below(4), e2 = 2 + rng.below(4), h = 3 + rng.below(6);
  EmbeddingLookup a = make_embedding(5 + rng.below(20), e1, 0, rng, 1.0f);
  EmbeddingLookup b = make_embedding(5 + rng.below(20), e2, 1, rng, 1.0f);
  return Model({2}, {Concat{0, {{a}, {b}}}, make_dense(e1 + e2, h, rng), Relu{}, make_dense(h, 1 + rng.below(4), rng)});
}

Tensor random_indices(const Model& m, Rng& rng) {
  const auto& c = m.layers().front().as<Concat>();
  Tensor x(m.input_shape());
  for (const auto& br : c.branches) {
    const auto& e = br.front().as<EmbeddingLookup>();
    x[e.field] = static_cast<float>(rng.below(e.table.dim(0)));
  }
  return x;
}

/// Input from which every basis-direction step of size h stays in one ReLU
/// pattern, so that central differences are exact for the piecewise-linear
/// layer set.
bool smooth_input(const Model& m, Rng& rng, double h, Tensor& out) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    Tensor x = rng.uniform_tensor(m.input_shape(), 0.05f, 0.95f);
    bool ok = true;
    std::vector<double> d;
    for (std::size_t i = 0; ok && i < m.input_size(); ++i) {
      ok = reference::central_difference(m, to_double(x), to_double(basis(m.input_shape(), i)), h, d);
    }
    if (ok) {
      out = std::move(x);
      return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------- criterion 1

Outcome differentiation(const Context&) {
  Rng rng(20240601);
  const double h = 1e-3;
  double worst_jvp = 0, worst_vjp = 0, worst_adj = 0;
  std::size_t models = 0, index_leaks = 0, unusable = 0;
  for (int i = 0; i < 50; ++i) {
    Model full;
    Tensor index_input;
    const int kind = i % 3;
    if (kind == 0) full = random_mlp(rng);
    if (kind == 1) full = random_cnn(rng);
    if (kind == 2) {
      full = random_embedding_mix(rng);
      index_input = random_indices(full, rng);
      // Index inputs have zero Jacobian; derivatives act on the embedding.
      const Tensor g = vjp(full, index_input, rng.normal_tensor(full.output_shape()));
      if (squared_norm(g) != 0.0) ++index_leaks;
    }
    const Model m = kind == 2 ? full.suffix(full.lookup_prefix_length()) : full;
    Tensor x;
    if (!smooth_input(m, rng, h, x)) {
      ++unusable;
      continue;
    }
    ++models;
    for (int t = 0; t < 4; ++t) {
      Tensor v = unit(rng.normal_tensor(m.input_shape()));
      std::vector<double> fd;
      int tries = 0;
      while (!reference::central_difference(m, to_double(x), to_double(v), h, fd) && tries++ < 100) {
        v = unit(rng.normal_tensor(m.input_shape()));
      }
      worst_jvp = std::max(worst_jvp, rel_vec(jvp(m, x, v), fd));
      const Tensor u = rng.normal_tensor(m.output_shape());
      worst_adj = std::max(worst_adj, rel(dot(u, jvp(m, x, v)), dot(vjp(m, x, u), v)));
    }
    const Tensor u = rng.normal_tensor(m.output_shape());
    std::vector<double> want(m.input_size());
    for (std::size_t k = 0; k < m.input_size(); ++k) {
      std::vector<double> col;
      reference::central_difference(m, to_double(x), to_double(basis(m.input_shape(), k)), h, col);
      double acc = 0.0;
      for (std::size_t r = 0; r < col.size(); ++r) acc += u[r] * col[r];
      want[k] = acc;
    }
    worst_vjp = std::max(worst_vjp, rel_vec(vjp(m, x, u), want));
  }
  const bool pass = models == 50 && index_leaks == 0 && worst_jvp <= 1e-3 && worst_vjp <= 1e-3 && worst_adj <= 1e-5;
  return {pass, std::to_string(models) + " models; max rel err jvp " + fmt(worst_jvp) + ", vjp " + fmt(worst_vjp) +
                    " (<= 1e-3); adjoint " + fmt(worst_adj) + " (<= 1e-5)" +
                    (unusable ? "; " + std::to_string(unusable) + " models without a kink-free input" : "")};
}

// ---------------------------------------------------------------- criterion 2

Outcome trace_oracles(const Context&) {
  Rng rng(77);
  double worst_exact = 0.0, worst_hutch = 0.0;
  std::size_t count = 0;
  for (int i = 0; i < 40; ++i) {
    Model m = i % 3 == 1 ? random_cnn(rng) : random_mlp(rng);
    if (i % 3 == 2) {
      const std::size_t d = 8 + rng.below(57), mo = 8 + rng.below(57);
      m = Model({d}, {make_dense(d, 32, rng), Relu{}, make_dense(32, mo, rng)});
    }
    if (m.input_size() > 64 || m.output_size() > 64) continue;
    const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
    const double exact = trace_jtj_exact(m, x);
    if (exact == 0.0) continue;
    ++count;
    worst_exact = std::max(worst_exact, rel(exact, squared_norm(full_jacobian(m, x))));
    Rng probe(42);
    worst_hutch = std::max(worst_hutch, rel(trace_jtj_hutchinson(m, x, 1000, probe), exact));
  }
  const bool pass = count >= 20 && worst_exact <= 1e-5 && worst_hutch <= 0.05;
  return {pass, std::to_string(count) + " models with d, m <= 64; exact vs ||J||_F^2 max rel " + fmt(worst_exact) +
                    " (<= 1e-5); Hutchinson k=1000 max rel " + fmt(worst_hutch) + " (<= 0.05)"};
}

// ---------------------------------------------------------------- criterion 3

Outcome calibration(const Context&) {
  const auto catalog = build_reference_models(5);
  Rng rng(3);
  double worst = 0.0;
  std::size_t checks = 0;
  std::string names;
  for (const auto& entry : catalog) {
    const Model client = entry.split.client();
    Tensor x;
    if (client.lookup_prefix_length() > 0) {
      x = Tensor(client.input_shape());
      const auto& c = client.layers().front().as<Concat>();
      for (const auto& br : c.branches) {
        const auto& e = br.front().as<EmbeddingLookup>();
        x[e.field] = static_cast<float>(rng.below(e.table.dim(0)));
      }
    } else {
      x = rng.uniform_tensor(client.input_shape(), 0, 1);
    }
    for (double target : {0.01, 1.0, 100.0}) {
      const Calibration cal = calibrate_sigma(client, x, target, ExactTrace{});
      if (cal.degenerate) return {false, entry.name + ": degenerate trace"};
      worst = std::max(worst, rel(compute_dfil(client, x, cal.sigma, ExactTrace{}), target));
      ++checks;
    }
    names += (names.empty() ? "" : ", ") + entry.name;
  }
  return {worst <= 1e-6, std::to_string(checks) + " round trips over " + names + "; max rel err " + fmt(worst) +
                             " (<= 1e-6)"};
}

// ---------------------------------------------------------------- experiments

fs::path write_spec(const Context& ctx, const std::string& name, const std::string& json_text, const fs::path& out) {
  fs::create_directories(ctx.workdir / "specs");
  const fs::path p = ctx.workdir / "specs" / (name + ".json");
  std::string text = json_text;
  const std::string key = "@OUT@";
  text.replace(text.find(key), key.size(), out.generic_string());
  std::ofstream(p) << text;
  return p;
}

ExperimentOutput run_spec(const Context& ctx, const std::string& name, const std::string& json_text,
                          const std::string& run = "") {
  const fs::path out = ctx.workdir / "runs" / (name + run);
  fs::remove_all(out);
  const fs::path spec = write_spec(ctx, name + run, json_text, out);
  std::ostringstream sink;
  return run_experiment(load_experiment_spec(spec), ctx.verbose ? &std::cerr : &sink);
}

struct Column {
  std::vector<PointSummary> points;
  std::size_t index = 0;
  std::optional<double> mean_at(double inv) const {
    for (const auto& p : points)
      if (std::abs(p.inv_dfil - inv) <= 1e-12 * std::max(1.0, inv)) return p.mean[index];
    return std::nullopt;
  }
  std::optional<double> stderr_at(double inv) const {
    for (const auto& p : points)
      if (std::abs(p.inv_dfil - inv) <= 1e-12 * std::max(1.0, inv)) return p.stderr_[index];
    return std::nullopt;
  }
  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& p : points) n += p.failures;
    return n;
  }
};

Column column(const ResultsTable& t, const std::string& metric) {
  Column c;
  c.points = summarize(t);
  c.index = static_cast<std::size_t>(std::find(t.metrics.begin(), t.metrics.end(), metric) - t.metrics.begin());
  if (c.index >= t.metrics.size()) throw std::runtime_error("no metric " + metric);
  return c;
}

const char* kBoundSpec = R"({
  "name": "unbiased-bound",
  "recipe": "unbiased-bound",
  "model": {"name": "mlp-1000", "init_seed": 1},
  "dataset": {"kind": "synthetic-images", "channels": 1, "height": 28, "width": 28, "count": 100, "seed": 4},
  "subsample": 100,
  "dfil_grid": [0.01, 0.1, 1, 10],
  "trials": 100,
  "seed": 11,
  "attack": {"method": "unbiased", "iterations": 2000, "restarts": 1, "init": "gaussian"},
  "estimator": {"kind": "exact"},
  "output_dir": "@OUT@"
})";

const char* kSsimSpec = R"({
  "name": "biased-ssim",
  "recipe": "biased-ssim",
  "model": {"name": "cnn-early", "init_seed": 2},
  "dataset": {"kind": "synthetic-images", "channels": 3, "height": 32, "width": 32, "count": 10, "seed": 6},
  "subsample": 10,
  "dfil_grid": [0.01, 0.1, 1, 10, 100],
  "trials": 10,
  "seed": 12,
  "attack": {"method": "tv", "lambda": 0.05, "lr": 0.1},
  "estimator": {"kind": "exact"},
  "image_dumps": 2,
  "output_dir": "@OUT@"
})";

const char* kRecSpec = R"({
  "name": "recommendation",
  "recipe": "recommendation",
  "model": {"name": "ncf", "init_seed": 3, "orthogonal_client": true},
  "dataset": {"kind": "synthetic-ratings", "users": 10000, "movies": 1000, "count": 20000, "seed": 7},
  "subsample": 200,
  "dfil_grid": [0.001, 1],
  "trials": 200,
  "seed": 13,
  "attack": {"method": "unbiased", "iterations": 2000, "restarts": 1},
  "estimator": {"kind": "exact"},
  "output_dir": "@OUT@"
})";

const char* kUtilitySpec = R"({
  "name": "utility",
  "recipe": "utility",
  "model": {"name": "cnn-middle", "init_seed": 0,
            "train": {"optimizer": "adam", "lr": 0.001, "epochs": 8, "batch_size": 32, "seed": 5}},
  "dataset": {"kind": "synthetic-images", "channels": 3, "height": 16, "width": 16, "count": 3000, "seed": 3},
  "subsample": 1000,
  "dfil_grid": [10],
  "trials": 1,
  "seed": 1,
  "estimator": {"kind": "hutchinson", "probes": 16},
  "utility": {"compressed_channels": 2, "snr_lambda": 0.1, "noise_aware": true, "noise_probes": 4},
  "output_dir": "@OUT@"
})";

struct Runs {
  std::optional<ExperimentOutput> bound, ssim, rec, utility;
  std::string bound_error, ssim_error, rec_error, utility_error;
};

Runs& runs() {
  static Runs r;
  return r;
}

template <typename F>
bool ensure(std::optional<ExperimentOutput>& slot, std::string& error, F&& run) {
  if (slot) return true;
  if (!error.empty()) return false;
  try {
    slot = run();
  } catch (const std::exception& e) {
    error = e.what();
  }
  return slot.has_value();
}

// ---------------------------------------------------------------- criteria 4, 5

Outcome unbiased_bound(const Context& ctx) {
  auto& r = runs();
  if (!ensure(r.bound, r.bound_error, [&] { return run_spec(ctx, "unbiased-bound", kBoundSpec); }))
    return {false, "experiment failed: " + r.bound_error};
  const Column mse = column(r.bound->results, "mse");
  bool pass = mse.failures() == 0;
  std::string detail;
  for (double g : {0.01, 0.1, 1.0, 10.0}) {
    const auto m = mse.mean_at(g);
    const bool ok = m && *m >= 0.9 * g;
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + ("1/dFIL=" + fmt(g) + " mse " + (m ? fmt(*m) : "n/a") + " vs " +
                                              fmt(0.9 * g));
  }
  return {pass, "100 trials/point; " + detail +
                    (mse.failures() ? "; " + std::to_string(mse.failures()) + " failed trials" : "")};
}

Outcome perfect_privacy(const Context& ctx) {
  auto& r = runs();
  if (!ensure(r.bound, r.bound_error, [&] { return run_spec(ctx, "unbiased-bound", kBoundSpec); }))
    return {false, "experiment failed: " + r.bound_error};
  const Column mse = column(r.bound->results, "mse");
  const auto m = mse.mean_at(1.0);
  const auto se = mse.stderr_at(1.0);
  if (!m || !se) return {false, "no data at 1/dFIL=1"};
  // One-sided: reject "mean >= 1" only when the mean sits below the 10%
  // slack and more than 1.645 standard errors below 1.
  const bool pass = *m >= 0.9 && *m + 1.645 * *se >= 1.0;
  return {pass, "1/dFIL=1 mean mse " + fmt(*m) + " +- " + fmt(*se) + " over 100 trials (need >= 1 within 10%)"};
}

// ---------------------------------------------------------------- criterion 6

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (static_cast<double>(i + j) / 2.0) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

Outcome biased_monotonicity(const Context& ctx) {
  auto& r = runs();
  if (!ensure(r.ssim, r.ssim_error, [&] { return run_spec(ctx, "biased-ssim", kSsimSpec); }))
    return {false, "experiment failed: " + r.ssim_error};
  const Column ssim = column(r.ssim->results, "ssim");
  std::vector<double> grid, means;
  std::string series;
  for (double g : {0.01, 0.1, 1.0, 10.0, 100.0}) {
    const auto m = ssim.mean_at(g);
    if (!m) return {false, "no data at 1/dFIL=" + fmt(g)};
    grid.push_back(g);
    means.push_back(*m);
    series += (series.empty() ? "" : " ") + fmt(*m, 3);
  }
  const double rho = spearman(grid, means);
  // The gap is taken between the most leaky point (dFIL = 100, i.e.
  // 1/dFIL = 0.01) and 1/dFIL = 1; the literal 1/dFIL = 100 reading is
  // printed alongside.
  const double gap = means[0] - means[2];
  const double literal = means[4] - means[2];
  const bool pass = rho <= -0.9 && gap >= 0.1 && ssim.failures() == 0;
  return {pass, "split-early SSIM over 1/dFIL {0.01..100}: " + series + "; Spearman " + fmt(rho) +
                    " (<= -0.9); SSIM(dFIL=100) - SSIM(1/dFIL=1) = " + fmt(gap) + " (>= 0.1); literal " +
                    "SSIM(1/dFIL=100) - SSIM(1/dFIL=1) = " + fmt(literal)};
}

// ---------------------------------------------------------------- criterion 7

Outcome recommendation(const Context& ctx) {
  auto& r = runs();
  if (!ensure(r.rec, r.rec_error, [&] { return run_spec(ctx, "recommendation", kRecSpec); }))
    return {false, "experiment failed: " + r.rec_error};
  const Column top1 = column(r.rec->results, "top1");
  const auto hi = top1.mean_at(0.001), lo = top1.mean_at(1.0);
  if (!hi || !lo) return {false, "missing grid points"};
  const double chance = 1.0 / 10000.0;
  const bool pass = *hi >= 0.95 && *lo <= 2.0 * chance && top1.failures() == 0;
  // 200 trials resolve rates only in steps of 0.005, so the 1/dFIL = 1 rate
  // is also estimated from 10^4 distinct users. Diagnostic only.
  std::string precise;
  try {
    std::string big = kRecSpec;
    const auto swap = [&](const std::string& a, const std::string& b) { big.replace(big.find(a), a.size(), b); };
    swap("\"subsample\": 200", "\"subsample\": 10000");
    swap("\"dfil_grid\": [0.001, 1]", "\"dfil_grid\": [1]");
    swap("\"trials\": 200", "\"trials\": 10000");
    const Column c = column(run_spec(ctx, "recommendation", big, "-10k").results, "top1");
    precise = "; diagnostic 10^4 trials at 1/dFIL=1: top-1 " + fmt(*c.mean_at(1.0)) + " +- " +
              fmt(*c.stderr_at(1.0)) + " (" + fmt(*c.mean_at(1.0) / chance, 3) + "x chance)";
  } catch (const std::exception& e) {
    precise = std::string("; diagnostic run failed: ") + e.what();
  }
  return {pass, "10k-row table, 200 trials; top-1 " + fmt(*hi) + " at 1/dFIL=0.001 (>= 0.95), " + fmt(*lo) +
                    " at 1/dFIL=1 (<= " + fmt(2.0 * chance) + ")" + precise};
}

// ---------------------------------------------------------------- criterion 8

Outcome utility(const Context& ctx) {
  auto& r = runs();
  const auto t0 = std::chrono::steady_clock::now();
  if (!ensure(r.utility, r.utility_error, [&] { return run_spec(ctx, "utility", kUtilitySpec); }))
    return {false, "experiment failed: " + r.utility_error};
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  const auto& t = r.utility->results;
  const auto no_opt = column(t, "no_opt").mean_at(10.0);
  const auto comp = column(t, "comp").mean_at(10.0);
  const auto snr = column(t, "comp+snr").mean_at(10.0);
  if (!no_opt || !comp || !snr) return {false, "missing accuracy at 1/dFIL=10"};
  const double gain = 100.0 * (*comp - *no_opt), drop = 100.0 * (*comp - *snr);
  const bool pass = gain >= 10.0 && drop <= 2.0 && minutes < 60.0;
  return {pass, "split-middle, 1/dFIL=10: no_opt " + fmt(*no_opt) + ", comp " + fmt(*comp) + ", comp+snr " +
                    fmt(*snr) + "; comp - no_opt = " + fmt(gain, 3) + " points (>= 10); comp - comp+snr = " +
                    fmt(drop, 3) + " points (<= 2); " + fmt(minutes, 3) + " min incl. training (< 60)"};
}

// ---------------------------------------------------------------- criterion 9

WireMessage random_message(Rng& rng) {
  auto str = [&](std::size_t n) {
    std::string s(rng.below(n + 1), '\0');
    for (char& c : s) c = static_cast<char>(rng.below(256));
    return s;
  };
  auto tensor = [&] {
    Shape s(1 + rng.below(3));
    for (auto& d : s) d = 1 + rng.below(6);
    Tensor t(s);
    for (float& v : t.data()) {
      const auto bits = static_cast<std::uint32_t>(rng.next_u64());
      std::memcpy(&v, &bits, sizeof v);
    }
    return t;
  };
  switch (rng.below(4)) {
    case 0: {
      HelloPayload h;
      for (std::size_t i = rng.below(5); i > 0; --i) h.model_ids.push_back(str(10));
      return h;
    }
    case 1:
      return ActivationPayload{str(12), tensor(), static_cast<float>(rng.uniform()),
                               static_cast<float>(rng.uniform(0, 100)), rng.next_u64()};
    case 2: return PredictionPayload{rng.next_u64(), tensor()};
    default: return ErrorPayload{rng.next_u64(), static_cast<ErrorCode>(1 + rng.below(5)), str(30)};
  }
}

Outcome service(const Context&) {
  const auto catalog = build_reference_models(9);
  ServerCatalog served;
  std::vector<const CatalogEntry*> used;
  for (const auto& e : catalog) {
    if (e.name == "mlp-10000") continue;
    served[e.name] = e.split.server();
    used.push_back(&e);
  }
  Server server(served, "127.0.0.1:0");
  server.start();
  const std::string addr = "127.0.0.1:" + std::to_string(server.port());

  Rng rng(99);
  std::size_t identical = 0;
  {
    ServiceClient conn(addr);
    for (std::size_t i = 0; i < 1000; ++i) {
      const CatalogEntry& e = *used[i % used.size()];
      const Model client = e.split.client();
      Tensor x;
      if (client.lookup_prefix_length() > 0) {
        x = Tensor(client.input_shape());
        x[0] = static_cast<float>(rng.below(1000));
        x[1] = static_cast<float>(rng.below(1000));
      } else {
        x = rng.uniform_tensor(client.input_shape(), 0, 1);
      }
      const auto r = client_infer(client, RefilConfig::no_noise(), x, conn, e.name, rng, i);
      if (r.prediction == forward(e.split.full(), x)) ++identical;
    }
  }

  std::size_t codec_ok = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto bytes = encode(random_message(rng));
    if (encode(decode(bytes)) == bytes) ++codec_ok;
  }

  const CatalogEntry& mlp = *used.front();
  std::atomic<int> matched{0};
  std::set<std::uint64_t> ids;
  std::mutex ids_mu;
  std::vector<std::thread> clients;
  for (int c = 0; c < 100; ++c) {
    clients.emplace_back([&, c] {
      try {
        ServiceClient conn(addr);
        Rng local(5000 + c);
        const Tensor x = local.uniform_tensor(mlp.split.client().input_shape(), 0, 1);
        const auto id = static_cast<std::uint64_t>(100000 + c);
        const auto r = client_infer(mlp.split.client(), RefilConfig::no_noise(), x, conn, mlp.name, local, id);
        if (r.prediction == forward(mlp.split.full(), x)) {
          ++matched;
          std::lock_guard lock(ids_mu);
          ids.insert(id);
        }
      } catch (const std::exception&) {
      }
    });
  }
  for (auto& t : clients) t.join();
  server.stop();
  const bool pass = identical == 1000 && codec_ok == 10000 && matched == 100 && ids.size() == 100;
  return {pass, std::to_string(identical) + "/1000 networked predictions bit-identical; " + std::to_string(codec_ok) +
                    "/10000 frames round-trip; " + std::to_string(matched.load()) + "/100 concurrent clients matched"};
}

// ---------------------------------------------------------------- criterion 10

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism(const Context& ctx) {
  auto& r = runs();
  struct Item {
    const char* name;
    const char* spec;
    std::optional<ExperimentOutput>* first;
    std::string* error;
  };
  const Item items[] = {{"unbiased-bound", kBoundSpec, &r.bound, &r.bound_error},
                        {"biased-ssim", kSsimSpec, &r.ssim, &r.ssim_error},
                        {"recommendation", kRecSpec, &r.rec, &r.rec_error},
                        {"utility", kUtilitySpec, &r.utility, &r.utility_error}};
  bool pass = true;
  std::string detail;
  for (const Item& item : items) {
    if (!ensure(*item.first, *item.error, [&] { return run_spec(ctx, item.name, item.spec); })) {
      pass = false;
      detail += std::string(detail.empty() ? "" : "; ") + item.name + " failed";
      continue;
    }
    bool same = false;
    try {
      const ExperimentOutput again = run_spec(ctx, item.name, item.spec, "-rerun");
      same = slurp((*item.first)->results_csv) == slurp(again.results_csv) &&
             !slurp(again.results_csv).empty();
    } catch (const std::exception& e) {
      detail += std::string(detail.empty() ? "" : "; ") + item.name + " rerun threw " + e.what();
    }
    pass = pass && same;
    detail += std::string(detail.empty() ? "" : "; ") + item.name + (same ? " identical" : " differs");
  }
  return {pass, "results.csv byte comparison: " + detail};
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome(const Context&)> run;
  double limit_s = 0.0;  // 0: no runtime bound
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Context ctx;
  std::string workdir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory for specs and results");
  app.add_option("--only", only, "Run a subset of criteria by number");
  app.add_flag("--verbose", ctx.verbose, "Stream experiment logs to stderr");
  CLI11_PARSE(app, argc, argv);
  ctx.workdir = fs::absolute(workdir);
  fs::create_directories(ctx.workdir);

  const std::vector<Criterion> criteria = {
      {1, "JVP/VJP match finite differences", differentiation, 60},
      {2, "trace(J^T J) oracles", trace_oracles, 60},
      {3, "dFIL calibration round trip", calibration, 60},
      {4, "unbiased attack respects the 1/dFIL bound", unbiased_bound, 600},
      {5, "perfect privacy at dFIL = 1", perfect_privacy},
      {6, "biased attack SSIM tracks dFIL", biased_monotonicity, 1800},
      {7, "embedding identification vs dFIL", recommendation, 600},
      {8, "compression and SNR loss utility", utility},
      {9, "networked inference and wire codec", service, 300},
      {10, "experiment determinism", determinism},
  };

  int failed = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0.0 && secs > c.limit_s) {
      o.pass = false;
      o.detail += "; over the " + fmt(c.limit_s, 4) + " s budget";
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.title << " | " << o.detail
              << " | " << fmt(secs, 3) << " s" << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return std::min(failed, 100);
}
