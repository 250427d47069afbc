// refil: command-line front end for split-inference leakage measurement,
// noise calibration, attacks, the split service and experiment recipes.
//
// Exit codes: 0 success, 1 usage, 2 data or I/O error, 3 numerical failure.

#include <csignal>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "refil/attacks.hpp"
#include "refil/autodiff.hpp"
#include "refil/checkpoint.hpp"
#include "refil/experiment.hpp"
#include "refil/privacy.hpp"
#include "refil/report.hpp"
#include "refil/service.hpp"
#include "refil/wire.hpp"

namespace {

using namespace refil;

constexpr int kUsage = 1;
constexpr int kDataError = 2;
constexpr int kNumericalFailure = 3;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Whitespace-separated floats, reshaped to `shape`.
Tensor read_text_tensor(const std::string& path, const Shape& shape) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open input " + path);
  std::vector<float> values;
  std::string tok;
  while (in >> tok) {
    try {
      values.push_back(std::stof(tok));
    } catch (const std::exception&) {
      throw DataError(path + ": bad number '" + tok + "' at value " + std::to_string(values.size()));
    }
  }
  if (values.size() != shape_size(shape)) {
    throw DataError(path + ": " + std::to_string(values.size()) + " values, model input " + shape_to_string(shape) +
                    " needs " + std::to_string(shape_size(shape)));
  }
  return Tensor(shape, std::move(values));
}

void print_tensor(std::ostream& out, const Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) out << (i ? " " : "") << format_number(t[i]);
  out << '\n';
}

struct EstimatorFlags {
  std::string kind = "auto";
  std::size_t probes = 64;

  void add(CLI::App* app) {
    app->add_option("--estimator", kind, "Trace estimator: auto, exact or hutchinson")
        ->check(CLI::IsMember({"auto", "exact", "hutchinson"}));
    app->add_option("--probes", probes, "Hutchinson probe count")->check(CLI::PositiveNumber);
  }
  std::optional<TraceEstimator> get(std::uint64_t seed) const {
    if (kind == "exact") return ExactTrace{};
    if (kind == "hutchinson") return HutchinsonTrace{probes, seed};
    return std::nullopt;
  }
};

double parse_dfil(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  double v = 0.0;
  try {
    v = std::stod(s);
  } catch (const std::exception&) {
    throw UsageError("--dfil expects a positive number or 'inf'");
  }
  if (!(v > 0.0)) throw UsageError("--dfil must be > 0");
  return v;
}

int cmd_train(const std::string& spec_path, const std::string& out_dir) {
  ExperimentSpec spec = load_experiment_spec(spec_path);
  if (!spec.model.train) throw UsageError("spec has no model.train section");
  const LoadedDataset data = load_dataset(spec.dataset);
  auto [train_set, test_set] = split_train_test(data.examples, std::min(spec.subsample, data.examples.size()));
  SplitModel split = build_model(spec.model, data);
  TrainConfig cfg = *spec.model.train;
  cfg.task_loss = spec.model.name == "ncf" ? TaskLoss::BinaryCrossEntropy : TaskLoss::CrossEntropy;
  TrainResult r = train(std::move(split), train_set, cfg);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  save_model(dir / (spec.model.name + ".rflm"), r.model.full());
  save_model(dir / (spec.model.name + ".client.rflm"), r.model.client());
  save_model(dir / (spec.model.name + ".server.rflm"), r.model.server());
  std::ofstream log(dir / (spec.model.name + ".train_log.csv"));
  write_train_log_csv(log, r.log);
  write_train_log_csv(std::cout, r.log);
  if (!test_set.empty()) {
    const EvalResult ev = evaluate(r.model, test_set, cfg.task_loss, RefilConfig::no_noise(), 0);
    std::cout << "held-out metric (no noise): " << format_number(ev.metric) << '\n';
  }
  return 0;
}

int cmd_calibrate(const std::string& model_path, const std::string& input, const std::string& dfil_text,
                  const EstimatorFlags& est, std::uint64_t seed) {
  const Model client = load_model(model_path);
  const Tensor x = read_text_tensor(input, client.input_shape());
  const double target = parse_dfil(dfil_text);
  const TraceEstimator e = est.get(seed).value_or(default_estimator(client, seed));
  const Calibration c = calibrate_sigma(client, x, target, e);
  std::cout << "{\"sigma\": " << format_number(c.sigma) << ", \"trace_jtj\": " << format_number(c.trace_jtj)
            << ", \"input_dim\": " << c.input_dim << ", \"target_dfil\": " << format_number(target)
            << ", \"degenerate\": " << (c.degenerate ? "true" : "false") << "}\n";
  if (c.degenerate) {
    std::cerr << "warning: trace(J^T J) is zero at this input; no noise level changes the leakage\n";
    return kNumericalFailure;
  }
  return 0;
}

int cmd_attack(const std::string& log_path, const std::string& model_path, const AttackConfig& cfg,
               const std::string& out_dir) {
  const Model client = load_model(model_path);
  const auto entries = read_activation_log(log_path);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  std::ofstream csv(dir / "attack.csv");
  csv << "request_id,sigma,achieved_dfil,objective\n";
  for (const ActivationPayload& p : entries) {
    const AttackResult r = reconstruct(p.tensor, client, cfg);
    csv << p.request_id << ',' << format_number(p.sigma) << ',' << format_number(p.achieved_dfil) << ','
        << format_number(r.objective) << '\n';
    const Tensor& x = r.x_hat;
    if (x.rank() == 3 && (x.dim(0) == 1 || x.dim(0) == 3)) {
      write_pnm(dir / ("recon_" + std::to_string(p.request_id) + (x.dim(0) == 1 ? ".pgm" : ".ppm")), x);
    }
  }
  std::cout << "reconstructed " << entries.size() << " activations into " << out_dir << '\n';
  return 0;
}

int cmd_serve(const std::string& bind, const std::string& models_dir, const std::string& log_path) {
  ServerCatalog catalog = load_server_catalog(models_dir);
  LogMode mode = LogOff{};
  if (!log_path.empty()) mode = HonestButCurious{log_path};
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);  // before any thread starts
  Server server(std::move(catalog), bind, mode);
  std::cout << "serving on " << server.endpoint().to_string() << std::endl;
  server.start();
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  std::cout << "stopped after " << server.requests_served() << " requests\n";
  return 0;
}

int cmd_infer(const std::string& server, const std::string& model_path, const std::string& model_id,
              const std::string& input, const std::string& dfil_text, const EstimatorFlags& est, std::uint64_t seed,
              bool telemetry, std::uint64_t request_id) {
  const Model client = load_model(model_path);
  const Tensor x = read_text_tensor(input, client.input_shape());
  RefilConfig cfg;
  cfg.target_dfil = parse_dfil(dfil_text);
  cfg.seed = seed;
  cfg.estimator = est.get(seed);
  Rng rng(seed);
  const InferResult r = client_infer(client, cfg, x, server, model_id, rng, request_id, ClientTelemetry{telemetry});
  std::cerr << "sigma " << format_number(r.activation.sigma) << ", achieved dFIL "
            << format_number(r.activation.achieved_dfil) << '\n';
  print_tensor(std::cout, r.prediction);
  return 0;
}

int cmd_experiment(const std::string& spec_path, const std::string& out_override, bool quiet) {
  ExperimentSpec spec = load_experiment_spec(spec_path);
  if (!out_override.empty()) spec.output_dir = out_override;
  const ExperimentOutput out = run_experiment(spec, quiet ? nullptr : &std::cerr);
  print_summary(std::cout, out.results);
  std::cout << "wrote " << out.results_csv.string() << '\n';
  if (out.utility_csv) std::cout << "wrote " << out.utility_csv->string() << '\n';
  return 0;
}

int cmd_report(const std::string& dir) {
  const ReportSummary s = report(dir, std::cout);
  if (s.empty) std::cerr << "warning: no results to report\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split-inference privacy toolkit: dFIL measurement, ReFIL noise, attacks and experiments"};
  app.require_subcommand(1);

  std::string spec_path, out_dir = "models";
  auto* train = app.add_subcommand("train", "Train the model described by an experiment spec");
  train->add_option("--spec", spec_path, "Experiment spec JSON (model, dataset, model.train)")->required();
  train->add_option("--out", out_dir, "Directory for the RFLM checkpoints");

  std::string model_path, input_path, dfil_text = "1";
  std::uint64_t seed = 0;
  EstimatorFlags est;
  auto* calibrate = app.add_subcommand("calibrate", "Noise level for a target dFIL at one input");
  calibrate->add_option("--model", model_path, "Client RFLM checkpoint")->required();
  calibrate->add_option("--input", input_path, "Text file of input values")->required();
  calibrate->add_option("--dfil", dfil_text, "Target dFIL (or inf)");
  calibrate->add_option("--seed", seed);
  est.add(calibrate);

  std::string log_path, method = "tv", init = "gaussian", attack_out = "attack";
  AttackConfig attack_cfg;
  double lambda = 0.05;
  auto* attack = app.add_subcommand("attack", "Reconstruct inputs from an activation log");
  attack->add_option("--log", log_path, "Activation log written by serve --log-activations")->required();
  attack->add_option("--model", model_path, "Client RFLM checkpoint")->required();
  attack->add_option("--method", method, "unbiased or tv")->check(CLI::IsMember({"unbiased", "tv"}));
  attack->add_option("--lambda", lambda, "TV weight");
  attack->add_option("--iterations", attack_cfg.iterations)->check(CLI::PositiveNumber);
  attack->add_option("--restarts", attack_cfg.restarts)->check(CLI::PositiveNumber);
  attack->add_option("--lr", attack_cfg.optimizer.lr);
  attack->add_option("--init", init, "zeros or gaussian")->check(CLI::IsMember({"zeros", "gaussian"}));
  attack->add_option("--seed", seed);
  attack->add_option("--out", attack_out, "Output directory");

  std::string bind = "127.0.0.1:7070", models_dir = "models", activation_log;
  auto* serve = app.add_subcommand("serve", "Run the split-inference server");
  serve->add_option("--bind", bind, "host:port");
  serve->add_option("--models", models_dir, "Directory of <id>.server.rflm checkpoints");
  serve->add_option("--log-activations", activation_log, "Append received activations to this log");

  std::string server = "127.0.0.1:7070", model_id;
  bool no_telemetry = false;
  std::uint64_t request_id = 0;
  auto* infer = app.add_subcommand("infer", "Run the client half with ReFIL and query a server");
  infer->add_option("--server", server, "host:port");
  infer->add_option("--model", model_path, "Client RFLM checkpoint")->required();
  infer->add_option("--model-id", model_id, "Server-side model id")->required();
  infer->add_option("--input", input_path, "Text file of input values")->required();
  infer->add_option("--dfil", dfil_text, "Target dFIL (or inf for no noise)");
  infer->add_option("--seed", seed);
  infer->add_option("--request-id", request_id);
  infer->add_flag("--no-telemetry", no_telemetry, "Send NaN instead of sigma and dFIL");
  est.add(infer);

  std::string exp_spec, exp_out;
  bool quiet = false;
  auto* experiment = app.add_subcommand("experiment", "Run an experiment recipe from a JSON spec");
  experiment->add_option("spec", exp_spec, "Experiment spec JSON")->required();
  experiment->add_option("--out", exp_out, "Override the spec's output_dir");
  experiment->add_flag("--quiet", quiet, "No progress output");

  std::string report_dir;
  auto* report_cmd = app.add_subcommand("report", "Summarize results.csv and redraw plot.svg");
  report_cmd->add_option("dir", report_dir, "Results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*train) return cmd_train(spec_path, out_dir);
    if (*calibrate) return cmd_calibrate(model_path, input_path, dfil_text, est, seed);
    if (*attack) {
      attack_cfg.method = method == "tv" ? AttackMethod{TvPrior{lambda}} : AttackMethod{Unbiased{}};
      attack_cfg.init = init == "zeros" ? AttackInit{ZerosInit{}} : AttackInit{GaussianInit{seed}};
      return cmd_attack(log_path, model_path, attack_cfg, attack_out);
    }
    if (*serve) return cmd_serve(bind, models_dir, activation_log);
    if (*infer) return cmd_infer(server, model_path, model_id, input_path, dfil_text, est, seed, !no_telemetry,
                                 request_id);
    if (*experiment) return cmd_experiment(exp_spec, exp_out, quiet);
    if (*report_cmd) return cmd_report(report_dir);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const AttackFailed& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}
