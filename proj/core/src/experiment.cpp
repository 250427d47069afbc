#include "refil/experiment.hpp"

#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "refil/autodiff.hpp"
#include "refil/checkpoint.hpp"
#include "refil/metrics.hpp"

namespace refil {

using json = nlohmann::json;

Recipe parse_recipe(const std::string& name) {
  if (name == "unbiased-bound") return Recipe::UnbiasedBound;
  if (name == "recommendation") return Recipe::Recommendation;
  if (name == "biased-ssim") return Recipe::BiasedSsim;
  if (name == "utility") return Recipe::Utility;
  throw std::invalid_argument("unknown recipe '" + name +
                              "' (expected unbiased-bound, recommendation, biased-ssim or utility)");
}

std::string to_string(Recipe r) {
  switch (r) {
    case Recipe::UnbiasedBound: return "unbiased-bound";
    case Recipe::Recommendation: return "recommendation";
    case Recipe::BiasedSsim: return "biased-ssim";
    case Recipe::Utility: return "utility";
  }
  return "?";
}

namespace {

[[noreturn]] void spec_error(const std::string& msg) { throw std::invalid_argument("experiment spec: " + msg); }

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) spec_error(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) spec_error("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    spec_error(std::string("bad value for '") + key + "': " + e.what());
  }
}

DatasetSource parse_dataset(const json& j) {
  const std::string kind = get_or<std::string>(j, "kind", "");
  if (kind == "mnist") {
    check_keys(j, {"kind", "images", "labels", "limit"}, "dataset");
    return MnistIdx{get_or<std::string>(j, "images", ""), get_or<std::string>(j, "labels", ""),
                    get_or<std::size_t>(j, "limit", 0)};
  }
  if (kind == "cifar10") {
    check_keys(j, {"kind", "files", "limit", "standardize"}, "dataset");
    Cifar10Binary c;
    for (const auto& f : get_or<std::vector<std::string>>(j, "files", {})) c.files.emplace_back(f);
    c.limit = get_or<std::size_t>(j, "limit", 0);
    c.standardize = get_or<bool>(j, "standardize", true);
    return c;
  }
  if (kind == "movielens") {
    check_keys(j, {"kind", "file", "like_threshold", "limit", "remap_ids"}, "dataset");
    MovieLensCsv m;
    m.file = get_or<std::string>(j, "file", "");
    m.like_threshold = get_or<double>(j, "like_threshold", 5.0);
    m.limit = get_or<std::size_t>(j, "limit", 0);
    m.remap_ids = get_or<bool>(j, "remap_ids", true);
    return m;
  }
  if (kind == "synthetic-images") {
    check_keys(j, {"kind", "classes", "channels", "height", "width", "count", "seed", "template_seed", "max_shift",
                   "pixel_noise"},
               "dataset");
    SyntheticImages s;
    s.classes = get_or(j, "classes", s.classes);
    s.channels = get_or(j, "channels", s.channels);
    s.height = get_or(j, "height", s.height);
    s.width = get_or(j, "width", s.width);
    s.count = get_or(j, "count", s.count);
    s.seed = get_or(j, "seed", s.seed);
    s.template_seed = get_or(j, "template_seed", s.template_seed);
    s.max_shift = get_or(j, "max_shift", s.max_shift);
    s.pixel_noise = get_or(j, "pixel_noise", s.pixel_noise);
    return s;
  }
  if (kind == "synthetic-ratings") {
    check_keys(j, {"kind", "users", "movies", "count", "seed", "rank"}, "dataset");
    SyntheticRatings s;
    s.users = get_or(j, "users", s.users);
    s.movies = get_or(j, "movies", s.movies);
    s.count = get_or(j, "count", s.count);
    s.seed = get_or(j, "seed", s.seed);
    s.rank = get_or(j, "rank", s.rank);
    return s;
  }
  spec_error("unknown dataset kind '" + kind +
             "' (expected mnist, cifar10, movielens, synthetic-images or synthetic-ratings)");
}

TrainConfig parse_train(const json& j) {
  check_keys(j, {"optimizer", "lr", "momentum", "cosine_decay", "beta1", "beta2", "eps", "epochs", "batch_size",
                 "snr_lambda", "snr_probes", "seed"},
             "train");
  TrainConfig c;
  const std::string opt = get_or<std::string>(j, "optimizer", "sgd");
  if (opt == "sgd") {
    SgdConfig s;
    s.lr = get_or(j, "lr", s.lr);
    s.momentum = get_or(j, "momentum", s.momentum);
    s.cosine_decay = get_or(j, "cosine_decay", s.cosine_decay);
    c.optimizer = s;
  } else if (opt == "adam") {
    AdamConfig a;
    a.lr = get_or(j, "lr", a.lr);
    a.beta1 = get_or(j, "beta1", a.beta1);
    a.beta2 = get_or(j, "beta2", a.beta2);
    a.eps = get_or(j, "eps", a.eps);
    c.optimizer = a;
  } else {
    spec_error("unknown optimizer '" + opt + "' (expected sgd or adam)");
  }
  c.epochs = get_or(j, "epochs", c.epochs);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.snr_lambda = get_or(j, "snr_lambda", c.snr_lambda);
  c.snr_probe_count = get_or(j, "snr_probes", c.snr_probe_count);
  c.seed = get_or(j, "seed", c.seed);
  return c;
}

AttackConfig parse_attack(const json& j, Recipe recipe) {
  check_keys(j, {"method", "lambda", "lr", "beta1", "beta2", "eps", "iterations", "restarts", "init", "init_stddev",
                 "ssim_range"},
             "attack");
  AttackConfig a;
  const std::string method = get_or<std::string>(j, "method", recipe == Recipe::BiasedSsim ? "tv" : "unbiased");
  if (method == "unbiased") {
    a.method = Unbiased{};
  } else if (method == "tv") {
    a.method = TvPrior{get_or(j, "lambda", 0.05)};
  } else {
    spec_error("unknown attack method '" + method + "' (expected unbiased or tv)");
  }
  a.optimizer.lr = get_or(j, "lr", a.optimizer.lr);
  a.optimizer.beta1 = get_or(j, "beta1", a.optimizer.beta1);
  a.optimizer.beta2 = get_or(j, "beta2", a.optimizer.beta2);
  a.optimizer.eps = get_or(j, "eps", a.optimizer.eps);
  a.iterations = get_or(j, "iterations", a.iterations);
  a.restarts = get_or(j, "restarts", a.restarts);
  const std::string init = get_or<std::string>(j, "init", "gaussian");
  if (init == "zeros") {
    a.init = ZerosInit{};
  } else if (init == "gaussian") {
    a.init = GaussianInit{0, get_or(j, "init_stddev", 0.5)};
  } else {
    spec_error("unknown attack init '" + init + "' (expected zeros or gaussian)");
  }
  a.ssim_range = get_or(j, "ssim_range", a.ssim_range);
  return a;
}

TraceEstimator parse_estimator(const json& j) {
  check_keys(j, {"kind", "probes"}, "estimator");
  const std::string kind = get_or<std::string>(j, "kind", "");
  if (kind == "exact") return ExactTrace{};
  if (kind == "hutchinson") return HutchinsonTrace{get_or<std::size_t>(j, "probes", 64), 0};
  spec_error("unknown estimator kind '" + kind + "' (expected exact or hutchinson)");
}

ModelRecipe parse_model(const json& j) {
  ModelRecipe m;
  if (j.is_string()) {
    m.name = j.get<std::string>();
    return m;
  }
  check_keys(j, {"name", "init_seed", "cnn_width", "embedding_dim", "orthogonal_client", "checkpoint", "split_index",
                 "train"},
             "model");
  m.name = get_or(j, "name", m.name);
  m.init_seed = get_or(j, "init_seed", m.init_seed);
  m.cnn_width = get_or(j, "cnn_width", m.cnn_width);
  m.embedding_dim = get_or(j, "embedding_dim", m.embedding_dim);
  m.orthogonal_client = get_or(j, "orthogonal_client", m.orthogonal_client);
  if (j.contains("checkpoint")) m.checkpoint = j.at("checkpoint").get<std::string>();
  if (j.contains("split_index")) m.split_index = j.at("split_index").get<std::size_t>();
  if (j.contains("train")) m.train = parse_train(j.at("train"));
  return m;
}

}  // namespace

ExperimentSpec parse_experiment_spec(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    spec_error(std::string("invalid JSON: ") + e.what());
  }
  check_keys(j, {"name", "recipe", "model", "dataset", "subsample", "dfil_grid", "attack", "trials", "seed",
                 "output_dir", "estimator", "utility", "image_dumps"},
             "spec");
  ExperimentSpec s;
  if (!j.contains("recipe")) spec_error("missing 'recipe'");
  s.recipe = parse_recipe(j.at("recipe").get<std::string>());
  s.name = get_or<std::string>(j, "name", to_string(s.recipe));
  if (j.contains("model")) s.model = parse_model(j.at("model"));
  if (j.contains("dataset")) s.dataset = parse_dataset(j.at("dataset"));
  s.subsample = get_or(j, "subsample", s.subsample);
  s.dfil_grid = get_or(j, "dfil_grid", s.dfil_grid);
  s.attack = parse_attack(j.contains("attack") ? j.at("attack") : json::object(), s.recipe);
  s.trials = get_or(j, "trials", s.trials);
  s.seed = get_or(j, "seed", s.seed);
  s.output_dir = get_or<std::string>(j, "output_dir", s.name);
  if (j.contains("estimator")) s.estimator = parse_estimator(j.at("estimator"));
  if (j.contains("utility")) {
    const json& u = j.at("utility");
    check_keys(u, {"compressed_channels", "snr_lambda", "noise_aware", "noise_probes"}, "utility");
    s.utility.compressed_channels = get_or(u, "compressed_channels", s.utility.compressed_channels);
    s.utility.snr_lambda = get_or(u, "snr_lambda", s.utility.snr_lambda);
    s.utility.noise_aware = get_or(u, "noise_aware", s.utility.noise_aware);
    s.utility.noise_probes = get_or(u, "noise_probes", s.utility.noise_probes);
  }
  s.image_dumps = get_or(j, "image_dumps", s.image_dumps);
  validate(s);
  return s;
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open experiment spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_spec(ss.str());
}

void validate(const ExperimentSpec& spec) {
  if (spec.dfil_grid.empty()) spec_error("dfil_grid is empty");
  for (double v : spec.dfil_grid) {
    if (!(v > 0.0) || !std::isfinite(v)) spec_error("dfil_grid values must be positive and finite");
  }
  if (spec.trials == 0) spec_error("trials must be >= 1");
  if (spec.subsample == 0) spec_error("subsample must be >= 1");
  validate(spec.attack);
  if (spec.model.train) validate(*spec.model.train);
  if (spec.model.checkpoint && !spec.model.split_index) spec_error("model.checkpoint requires model.split_index");
  if (spec.recipe == Recipe::Utility) {
    if (!spec.model.train) spec_error("the utility recipe requires model.train");
    if (spec.utility.compressed_channels == 0) spec_error("utility.compressed_channels must be >= 1");
    if (spec.utility.snr_lambda <= 0.0) spec_error("utility.snr_lambda must be > 0");
  }
  if (const auto* h = spec.estimator ? std::get_if<HutchinsonTrace>(&*spec.estimator) : nullptr; h && h->probes == 0) {
    spec_error("estimator.probes must be >= 1");
  }
}

std::uint64_t trial_seed(std::uint64_t spec_seed, std::size_t grid_index, std::size_t trial) {
  return Rng::derive(spec_seed, grid_index, trial);
}

Tensor orthogonal_like(const Tensor& like, Rng& rng) {
  if (like.rank() != 2 || like.dim(0) != like.dim(1)) throw ShapeError("orthogonal_like: expected a square matrix");
  const std::size_t n = like.dim(0);
  std::vector<double> q(n * n);
  for (double& v : q) v = rng.normal();
  // Modified Gram-Schmidt over rows, in double.
  for (std::size_t i = 0; i < n; ++i) {
    double* row = &q[i * n];
    for (std::size_t k = 0; k < i; ++k) {
      const double* prev = &q[k * n];
      double d = 0.0;
      for (std::size_t j = 0; j < n; ++j) d += row[j] * prev[j];
      for (std::size_t j = 0; j < n; ++j) row[j] -= d * prev[j];
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < n; ++j) norm += row[j] * row[j];
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < n; ++j) row[j] /= norm;
  }
  const double scale = std::sqrt(squared_norm(like) / static_cast<double>(n));
  Tensor out(like.shape());
  for (std::size_t i = 0; i < n * n; ++i) out[i] = static_cast<float>(q[i] * scale);
  return out;
}

SplitModel build_model(const ModelRecipe& recipe, const LoadedDataset& data) {
  Rng rng(recipe.init_seed);
  std::optional<SplitModel> split;
  if (recipe.checkpoint) {
    split.emplace(load_model(resolve_data_path(*recipe.checkpoint)), recipe.split_index.value_or(0));
  } else if (recipe.name.starts_with("mlp-")) {
    std::size_t width = 0;
    try {
      width = std::stoul(recipe.name.substr(4));
    } catch (const std::exception&) {
      spec_error("bad MLP width in '" + recipe.name + "'");
    }
    if (data.input_shape != Shape{1, 28, 28}) {
      throw ShapeError("mlp models expect [1x28x28] inputs, dataset has " + shape_to_string(data.input_shape));
    }
    split.emplace(mnist_mlp(width, rng, std::max<std::size_t>(data.num_classes, 2)));
  } else if (recipe.name.starts_with("cnn-")) {
    if (data.input_shape.size() != 3) throw ShapeError("cnn models expect [c, h, w] inputs");
    CnnOptions o;
    o.channels = data.input_shape[0];
    o.height = data.input_shape[1];
    o.width = data.input_shape[2];
    o.base_width = recipe.cnn_width;
    o.classes = std::max<std::size_t>(data.num_classes, 2);
    if (!data.examples.empty()) channel_statistics(data.examples, o.mean, o.stddev);
    for (float& s : o.stddev) s = std::max(s, 1e-3f);
    split.emplace(residual_cnn(parse_cnn_split(recipe.name.substr(4)), o, rng));
  } else if (recipe.name == "ncf") {
    if (data.num_users == 0 || data.num_movies == 0) throw DataError("ncf requires a ratings dataset");
    split.emplace(ncf_mlp(data.num_users, data.num_movies, rng, recipe.embedding_dim));
  } else {
    spec_error("unknown model '" + recipe.name + "'");
  }
  if (recipe.orthogonal_client) {
    Model& full = split->full();
    const std::size_t skip = full.prefix(split->split_index()).lookup_prefix_length();
    std::vector<Tensor*> params = full.parameters();
    // The first parameter after the lookup tables is the first Dense weight.
    std::size_t index = 0;
    for (std::size_t i = 0; i < skip; ++i) index += layer_param_count(full.layers()[i]);
    if (index >= params.size() || !full.layers()[skip].is<Dense>()) {
      spec_error("orthogonal_client needs a Dense layer after the lookup prefix");
    }
    *params[index] = orthogonal_like(*params[index], rng);
  }
  return std::move(*split);
}

namespace {

struct Progress {
  std::ostream* out;
  template <typename... Args>
  void operator()(const Args&... args) const {
    if (!out) return;
    ((*out) << ... << args) << '\n';
    out->flush();
  }
};

RefilConfig refil_config(const ExperimentSpec& spec, double inv_dfil, std::uint64_t seed) {
  RefilConfig rc;
  rc.target_dfil = 1.0 / inv_dfil;
  rc.seed = seed;
  rc.estimator = spec.estimator;
  if (rc.estimator) {
    if (auto* h = std::get_if<HutchinsonTrace>(&*rc.estimator)) h->seed = seed;
  }
  return rc;
}

AttackConfig attack_config(const ExperimentSpec& spec, std::uint64_t seed) {
  AttackConfig a = spec.attack;
  if (auto* g = std::get_if<GaussianInit>(&a.init)) g->seed = seed;
  return a;
}

TaskLoss task_loss_for(const ModelRecipe& m) {
  return m.name == "ncf" ? TaskLoss::BinaryCrossEntropy : TaskLoss::CrossEntropy;
}

void write_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  write_train_log_csv(out, log);
}

void save_split(const std::filesystem::path& dir, const std::string& name, const SplitModel& split) {
  std::filesystem::create_directories(dir);
  save_model(dir / (name + ".rflm"), split.full());
  save_model(dir / (name + ".client.rflm"), split.client());
  save_model(dir / (name + ".server.rflm"), split.server());
}

SplitModel prepare_model(const ExperimentSpec& spec, const LoadedDataset& data, const Dataset& train_set,
                         const Progress& log) {
  SplitModel split = build_model(spec.model, data);
  if (spec.model.train) {
    if (train_set.empty()) throw DataError("training requested but no examples remain after the subsample");
    TrainConfig cfg = *spec.model.train;
    cfg.task_loss = task_loss_for(spec.model);
    log("training ", spec.model.name, " on ", train_set.size(), " examples");
    TrainResult r = train(std::move(split), train_set, cfg);
    write_log(spec.output_dir / "train_log.csv", r.log);
    split = std::move(r.model);
    if (!r.log.empty()) log("  final task metric ", r.log.back().task_metric);
  }
  save_split(spec.output_dir / "models", spec.model.name, split);
  return split;
}

ResultRow failed_row(double inv, std::size_t trial, std::size_t width, const std::exception& e) {
  return ResultRow{"trial", inv, trial, std::vector<std::optional<double>>(width), std::string("error: ") + e.what()};
}

ResultsTable run_reconstruction(const ExperimentSpec& spec, const SplitModel& split, const Dataset& eval,
                                const Progress& log) {
  ResultsTable t;
  t.metrics = {"mse", "ssim", "sigma", "achieved_dfil", "bound", "objective"};
  const Model client = split.client();
  if (client.lookup_prefix_length() > 0) spec_error(to_string(spec.recipe) + " needs a client without lookups");
  for (std::size_t gi = 0; gi < spec.dfil_grid.size(); ++gi) {
    const double inv = spec.dfil_grid[gi];
    log("1/dFIL = ", inv);
    for (std::size_t trial = 0; trial < spec.trials; ++trial) {
      const std::uint64_t seed = trial_seed(spec.seed, gi, trial);
      const Tensor& x = eval[trial % eval.size()].x;
      try {
        Rng noise(Rng::derive(seed, 1));
        const NoisyActivation act = refil_forward(client, x, refil_config(spec, inv, Rng::derive(seed, 3)), noise);
        const AttackResult res = reconstruct(act.z_noised, client, attack_config(spec, Rng::derive(seed, 2)), x);
        ResultRow r{"trial", inv, trial, {}, "ok"};
        r.values = {res.mse, res.ssim, act.sigma, act.achieved_dfil, reconstruction_error_bound(act.achieved_dfil),
                    res.objective};
        if (act.degenerate) r.status = "degenerate";
        t.rows.push_back(std::move(r));
        if (trial < spec.image_dumps && x.rank() == 3 && (x.dim(0) == 1 || x.dim(0) == 3)) {
          const auto dir = spec.output_dir / "images";
          std::filesystem::create_directories(dir);
          const std::string ext = x.dim(0) == 1 ? ".pgm" : ".ppm";
          const std::string stem = "g" + std::to_string(gi) + "_t" + std::to_string(trial);
          write_pnm(dir / (stem + "_truth" + ext), x);
          write_pnm(dir / (stem + "_recon" + ext), res.x_hat);
        }
      } catch (const std::exception& e) {
        t.rows.push_back(failed_row(inv, trial, t.metrics.size(), e));
      }
    }
  }
  return t;
}

// Index of the user tower's table and its offset in the concatenated
// embedding vector.
std::pair<const Tensor*, std::size_t> user_table(const Model& client) {
  if (client.layer_count() == 0 || !client.layers()[0].is<Concat>()) {
    spec_error("recommendation needs a client starting with a Concat of embedding towers");
  }
  std::size_t offset = 0;
  for (const LayerList& branch : client.layers()[0].as<Concat>().branches) {
    if (branch.size() != 1 || !branch[0].is<EmbeddingLookup>()) spec_error("towers must be single lookups");
    const auto& emb = branch[0].as<EmbeddingLookup>();
    if (emb.field == 0) return {&emb.table, offset};
    offset += emb.table.dim(1);
  }
  spec_error("no embedding tower reads field 0 (the user id)");
}

ResultsTable run_recommendation(const ExperimentSpec& spec, const SplitModel& split, const Dataset& eval,
                                const Progress& log) {
  ResultsTable t;
  t.metrics = {"top1", "top5", "mse", "sigma", "achieved_dfil"};
  const Model client = split.client();
  const std::size_t n_lookup = client.lookup_prefix_length();
  if (n_lookup == 0) spec_error("recommendation needs an embedding-first client");
  const Model body = client.suffix(n_lookup);
  const std::span<const Layer> prefix(client.layers().data(), n_lookup);
  const auto [table, offset] = user_table(client);
  const std::size_t e = table->dim(1);
  for (std::size_t gi = 0; gi < spec.dfil_grid.size(); ++gi) {
    const double inv = spec.dfil_grid[gi];
    log("1/dFIL = ", inv);
    for (std::size_t trial = 0; trial < spec.trials; ++trial) {
      const std::uint64_t seed = trial_seed(spec.seed, gi, trial);
      const Example& ex = eval[trial % eval.size()];
      try {
        Rng noise(Rng::derive(seed, 1));
        const NoisyActivation act =
            refil_forward(client, ex.x, refil_config(spec, inv, Rng::derive(seed, 3)), noise);
        const Tensor emb = forward_layers(prefix, ex.x);
        const AttackResult res = reconstruct(act.z_noised, body, attack_config(spec, Rng::derive(seed, 2)), emb);
        Tensor user_hat(Shape{e});
        std::copy_n(res.x_hat.ptr() + offset, e, user_hat.ptr());
        const auto ranked = rank_embedding_rows(user_hat, *table, 5);
        const auto uid = static_cast<std::size_t>(ex.x[0]);
        ResultRow r{"trial", inv, trial, {}, "ok"};
        r.values = {static_cast<double>(topk_success(ranked, uid, 1)), static_cast<double>(topk_success(ranked, uid, 5)),
                    res.mse, act.sigma, act.achieved_dfil};
        t.rows.push_back(std::move(r));
      } catch (const std::exception& ex_err) {
        t.rows.push_back(failed_row(inv, trial, t.metrics.size(), ex_err));
      }
    }
  }
  return t;
}

ResultsTable run_utility(const ExperimentSpec& spec, const LoadedDataset& data, const Dataset& train_set,
                         const Dataset& eval, const Progress& log) {
  ResultsTable t;
  t.metrics = {"no_opt", "comp", "comp+snr"};
  if (train_set.empty()) throw DataError("utility recipe: no training examples remain after the subsample");
  const SplitModel base = build_model(spec.model, data);
  const Shape s = base.split_shape();
  CompressionSpec comp;
  comp.c1 = s[0];
  comp.c2 = spec.utility.compressed_channels;
  comp.kind = s.size() == 3 ? CompressionSpec::Kind::Conv1x1 : CompressionSpec::Kind::FullyConnected;
  Rng comp_rng(Rng::derive(spec.model.init_seed, 7));
  const SplitModel compressed = insert_compression(base, comp, comp_rng);

  const auto train_all = [&](std::optional<double> inv) {
    TrainConfig cfg = *spec.model.train;
    cfg.task_loss = task_loss_for(spec.model);
    cfg.snr_lambda = 0.0;
    if (inv) cfg.noise = TrainNoise{1.0 / *inv, spec.utility.noise_probes};
    const std::string suffix = inv ? "_inv" + format_number(*inv) : "";
    std::vector<SplitModel> out;
    const std::pair<const char*, const SplitModel*> configs[] = {
        {"no_opt", &base}, {"comp", &compressed}, {"comp_snr", &compressed}};
    for (const auto& [name, start] : configs) {
      TrainConfig c = cfg;
      if (std::string(name) == "comp_snr") c.snr_lambda = spec.utility.snr_lambda;
      log("training ", name, inv ? " at 1/dFIL = " + format_number(*inv) : std::string());
      TrainResult r = train(*start, train_set, c);
      write_log(spec.output_dir / ("train_" + std::string(name) + suffix + ".csv"), r.log);
      save_split(spec.output_dir / "models", std::string(name) + suffix, r.model);
      if (!r.log.empty()) log("  final train metric ", r.log.back().task_metric);
      out.push_back(std::move(r.model));
    }
    return out;
  };

  std::vector<SplitModel> shared;
  if (!spec.utility.noise_aware) shared = train_all(std::nullopt);
  for (std::size_t gi = 0; gi < spec.dfil_grid.size(); ++gi) {
    const double inv = spec.dfil_grid[gi];
    std::vector<SplitModel> local;
    try {
      if (spec.utility.noise_aware) local = train_all(inv);
    } catch (const std::exception& e) {
      for (std::size_t trial = 0; trial < spec.trials; ++trial) {
        t.rows.push_back(failed_row(inv, trial, t.metrics.size(), e));
      }
      continue;
    }
    const std::vector<SplitModel>& models = spec.utility.noise_aware ? local : shared;
    for (std::size_t trial = 0; trial < spec.trials; ++trial) {
      const std::uint64_t seed = trial_seed(spec.seed, gi, trial);
      try {
        ResultRow r{"trial", inv, trial, {}, "ok"};
        for (const SplitModel& m : models) {
          const EvalResult ev = evaluate(m, eval, task_loss_for(spec.model), refil_config(spec, inv, seed), seed);
          r.values.emplace_back(ev.metric);
        }
        log("1/dFIL = ", inv, " trial ", trial, ": no_opt ", *r.values[0], " comp ", *r.values[1], " comp+snr ",
            *r.values[2]);
        t.rows.push_back(std::move(r));
      } catch (const std::exception& e) {
        t.rows.push_back(failed_row(inv, trial, t.metrics.size(), e));
      }
    }
  }
  return t;
}

}  // namespace

ExperimentOutput run_experiment(const ExperimentSpec& spec, std::ostream* out) {
  validate(spec);
  const Progress log{out};
  std::filesystem::create_directories(spec.output_dir);
  LoadedDataset data = load_dataset(spec.dataset);
  if (data.examples.empty()) throw DataError("dataset is empty");
  const std::size_t n_eval = std::min(spec.subsample, data.examples.size());
  auto [train_set, eval] = split_train_test(data.examples, n_eval);
  log(spec.name, ": ", to_string(spec.recipe), ", ", train_set.size(), " train / ", eval.size(), " eval examples");

  ExperimentOutput result;
  ResultsTable trials;
  PlotOptions plot;
  plot.title = spec.name;
  switch (spec.recipe) {
    case Recipe::UnbiasedBound: {
      const SplitModel split = prepare_model(spec, data, train_set, log);
      trials = run_reconstruction(spec, split, eval, log);
      plot.series = {"mse"};
      plot.y_label = "reconstruction MSE";
      plot.bound_line = true;
      break;
    }
    case Recipe::BiasedSsim: {
      const SplitModel split = prepare_model(spec, data, train_set, log);
      trials = run_reconstruction(spec, split, eval, log);
      plot.series = {"ssim"};
      plot.y_label = "SSIM";
      break;
    }
    case Recipe::Recommendation: {
      const SplitModel split = prepare_model(spec, data, train_set, log);
      trials = run_recommendation(spec, split, eval, log);
      plot.series = {"top1", "top5"};
      plot.y_label = "attack success rate";
      break;
    }
    case Recipe::Utility: {
      trials = run_utility(spec, data, train_set, eval, log);
      plot.y_label = "accuracy";
      break;
    }
  }

  result.results = with_aggregates(trials);
  result.results_csv = spec.output_dir / "results.csv";
  result.plot_svg = spec.output_dir / "plot.svg";
  write_results_csv(result.results_csv, result.results);
  {
    std::ofstream svg(result.plot_svg, std::ios::binary | std::ios::trunc);
    svg << render_svg(result.results, plot);
  }
  if (spec.recipe == Recipe::Utility) {
    result.utility_csv = spec.output_dir / "utility.csv";
    std::ofstream u(*result.utility_csv, std::ios::binary | std::ios::trunc);
    u << "1/dFIL,no_opt,comp,comp+snr\n";
    for (const PointSummary& p : summarize(result.results)) {
      u << format_number(p.inv_dfil);
      for (const auto& m : p.mean) u << ',' << (m ? format_number(*m) : std::string());
      u << '\n';
    }
  }
  return result;
}

}  // namespace refil
