#include "refil/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <string>

#include "refil/autodiff.hpp"
#include "refil/snr_loss.hpp"

namespace refil {

TrainingDiverged::TrainingDiverged(std::size_t epoch, std::size_t batch)
    : std::runtime_error("training diverged (non-finite loss) at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch)),
      epoch_(epoch),
      batch_(batch) {}

void validate(const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (cfg.snr_lambda < 0.0) throw std::invalid_argument("TrainConfig: snr_lambda must be >= 0");
  if (cfg.snr_lambda > 0.0 && cfg.snr_probe_count == 0) {
    throw std::invalid_argument("TrainConfig: snr_probe_count must be >= 1");
  }
  if (cfg.noise && !(cfg.noise->target_dfil > 0.0)) throw std::invalid_argument("TrainConfig: noise dFIL must be > 0");
}

double cross_entropy(const Tensor& logits, int label, Tensor* grad) {
  const std::size_t n = logits.size();
  if (label < 0 || static_cast<std::size_t>(label) >= n) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(n) +
                            ")");
  }
  const float mx = *std::max_element(logits.data().begin(), logits.data().end());
  double total = 0.0;
  for (float v : logits.data()) total += std::exp(static_cast<double>(v - mx));
  const double lse = std::log(total) + mx;
  if (grad) {
    *grad = Tensor(logits.shape());
    for (std::size_t i = 0; i < n; ++i) (*grad)[i] = static_cast<float>(std::exp(logits[i] - lse));
    (*grad)[static_cast<std::size_t>(label)] -= 1.0f;
  }
  return lse - logits[static_cast<std::size_t>(label)];
}

double binary_cross_entropy(const Tensor& logit, int label, Tensor* grad) {
  if (logit.size() != 1) throw ShapeError("binary_cross_entropy: expected a single logit");
  if (label != 0 && label != 1) throw std::out_of_range("binary_cross_entropy: label must be 0 or 1");
  const double s = logit[0], y = label;
  if (grad) {
    *grad = Tensor(logit.shape());
    (*grad)[0] = static_cast<float>(1.0 / (1.0 + std::exp(-s)) - y);
  }
  return std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::abs(s)));
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j + 1);  // 1-based average rank of the tie block
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] == 1) {
        pos_rank_sum += avg_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) return 0.5;
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

namespace {

double task_loss(TaskLoss kind, const Tensor& out, int label, Tensor* grad) {
  return kind == TaskLoss::CrossEntropy ? cross_entropy(out, label, grad) : binary_cross_entropy(out, label, grad);
}

class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const std::vector<Tensor*>& params, std::size_t total_steps)
      : cfg_(cfg), total_steps_(std::max<std::size_t>(total_steps, 1)) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape());
      if (std::holds_alternative<AdamConfig>(cfg_)) v_.emplace_back(p->shape());
    }
  }

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    ++t_;
    if (const auto* sgd = std::get_if<SgdConfig>(&cfg_)) {
      double lr = sgd->lr;
      if (sgd->cosine_decay) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t_ - 1) / static_cast<double>(total_steps_)));
      }
      const float mu = static_cast<float>(sgd->momentum), rate = static_cast<float>(lr);
      for (std::size_t i = 0; i < params.size(); ++i) {
        float* p = params[i]->ptr();
        float* buf = m_[i].ptr();
        const float* g = grads[i].ptr();
        for (std::size_t k = 0, n = params[i]->size(); k < n; ++k) {
          buf[k] = mu * buf[k] + g[k];
          p[k] -= rate * buf[k];
        }
      }
      return;
    }
    const auto& adam = std::get<AdamConfig>(cfg_);
    const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(t_));
    const float b1 = static_cast<float>(adam.beta1), b2 = static_cast<float>(adam.beta2);
    const float step = static_cast<float>(adam.lr / c1), inv_c2 = static_cast<float>(1.0 / c2);
    const float eps = static_cast<float>(adam.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      float* p = params[i]->ptr();
      float* m = m_[i].ptr();
      float* v = v_[i].ptr();
      const float* g = grads[i].ptr();
      for (std::size_t k = 0, n = params[i]->size(); k < n; ++k) {
        m[k] = b1 * m[k] + (1.0f - b1) * g[k];
        v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
        p[k] -= step * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::size_t total_steps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace

TrainResult train(SplitModel split, const Dataset& data, const TrainConfig& cfg) {
  validate(cfg);
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  Model& full = split.full();
  for (const Example& e : data) {
    if (e.x.shape() != full.input_shape()) {
      throw ShapeError("train: example shape " + shape_to_string(e.x.shape()) + " does not match model input " +
                       shape_to_string(full.input_shape()));
    }
  }

  const std::span<const Layer> layers(full.layers());
  const auto client_layers = layers.first(split.split_index());
  const auto server_layers = layers.subspan(split.split_index());
  std::size_t client_param_count = 0;
  for (const Layer& l : client_layers) client_param_count += layer_param_count(l);

  std::vector<Tensor*> params = full.parameters();
  std::vector<Tensor> grads;
  for (const Tensor* p : params) grads.emplace_back(p->shape());
  const std::span<Tensor> client_grads = std::span<Tensor>(grads).first(client_param_count);
  const std::span<Tensor> server_grads = std::span<Tensor>(grads).subspan(client_param_count);

  const std::size_t batches = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  Optimizer opt(cfg.optimizer, params, batches * cfg.epochs);
  Rng rng(cfg.seed);
  const bool need_client_model = cfg.snr_lambda > 0.0 || cfg.noise.has_value();
  const SnrLossOptions snr_opts{cfg.snr_probe_count};

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> log;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    EpochLog entry;
    entry.epoch = epoch + 1;
    double loss_sum = 0.0, snr_sum = 0.0;
    std::size_t correct = 0;
    std::vector<double> scores;
    std::vector<int> labels;

    for (std::size_t b = 0; b < batches; ++b, ++step) {
      for (Tensor& g : grads) g.fill(0.0f);
      const std::size_t begin = b * cfg.batch_size, end = std::min(begin + cfg.batch_size, data.size());
      std::optional<Model> client;
      if (need_client_model) client.emplace(full.prefix(split.split_index()));
      double batch_loss = 0.0;
      for (std::size_t idx = begin; idx < end; ++idx) {
        const Example& ex = data[order[idx]];
        const Tape ct = record_layers(client_layers, ex.x);
        Tensor z = ct.output();
        if (cfg.noise) {
          const HutchinsonTrace est{cfg.noise->probes, Rng::derive(cfg.seed, step, idx)};
          const Calibration cal = calibrate_sigma(*client, ex.x, cfg.noise->target_dfil, est);
          for (float& v : z.data()) v += static_cast<float>(rng.normal() * cal.sigma);
        }
        const Tape st = record_layers(server_layers, z);
        Tensor dout;
        const double loss = task_loss(cfg.task_loss, st.output(), ex.label, &dout);
        batch_loss += loss;
        if (cfg.task_loss == TaskLoss::CrossEntropy) {
          const auto& out = st.output().data();
          const auto pred = std::max_element(out.begin(), out.end()) - out.begin();
          correct += pred == ex.label ? 1 : 0;
        } else {
          scores.push_back(st.output()[0]);
          labels.push_back(ex.label);
        }
        const Tensor dz = cotangent_layers(server_layers, st, dout, server_grads);
        cotangent_layers(client_layers, ct, dz, client_grads);
        if (cfg.snr_lambda > 0.0) {
          const SnrLossValue s = snr_loss(*client, ex.x, snr_opts, rng, client_grads, cfg.snr_lambda);
          snr_sum += s.loss;
          entry.snr_clamped += s.clamped ? 1 : 0;
          batch_loss += cfg.snr_lambda * s.loss;
        }
      }
      if (!std::isfinite(batch_loss)) throw TrainingDiverged(epoch + 1, b);
      loss_sum += batch_loss;
      const float inv = 1.0f / static_cast<float>(end - begin);
      for (Tensor& g : grads) g *= inv;
      opt.step(params, grads);
    }
    const double n = static_cast<double>(data.size());
    entry.task_loss = loss_sum / n;
    entry.mean_snr_loss = snr_sum / n;
    entry.task_metric = cfg.task_loss == TaskLoss::CrossEntropy ? static_cast<double>(correct) / n
                                                                : roc_auc(scores, labels);
    log.push_back(entry);
  }
  return TrainResult{std::move(split), std::move(log)};
}

void write_train_log_csv(std::ostream& out, const std::vector<EpochLog>& log) {
  out << "epoch,task_loss,task_metric,mean_snr_loss\n";
  out.precision(9);
  for (const EpochLog& e : log) {
    out << e.epoch << ',' << e.task_loss << ',' << e.task_metric << ',' << e.mean_snr_loss << '\n';
  }
}

EvalResult evaluate(const SplitModel& split, const Dataset& data, TaskLoss loss, const RefilConfig& refil,
                    std::uint64_t noise_seed) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const Model client = split.client();
  const Model server = split.server();
  std::size_t correct = 0;
  std::vector<double> scores;
  std::vector<int> labels;
  EvalResult res;
  for (std::size_t i = 0; i < data.size(); ++i) {
    RefilConfig cfg = refil;
    cfg.seed = Rng::derive(noise_seed, i, 1);
    if (cfg.estimator) {
      if (auto* h = std::get_if<HutchinsonTrace>(&*cfg.estimator)) h->seed = cfg.seed;
    }
    Rng rng(Rng::derive(noise_seed, i, 2));
    const NoisyActivation act = refil_forward(client, data[i].x, cfg, rng);
    const Tensor out = forward(server, act.z_noised);
    res.mean_sigma += act.sigma;
    res.mean_dfil += std::isfinite(act.achieved_dfil) ? act.achieved_dfil : 0.0;
    if (loss == TaskLoss::CrossEntropy) {
      const auto pred = std::max_element(out.data().begin(), out.data().end()) - out.data().begin();
      correct += pred == data[i].label ? 1 : 0;
    } else {
      scores.push_back(out[0]);
      labels.push_back(data[i].label);
    }
  }
  const double n = static_cast<double>(data.size());
  res.mean_sigma /= n;
  res.mean_dfil /= n;
  res.metric = loss == TaskLoss::CrossEntropy ? static_cast<double>(correct) / n : roc_auc(scores, labels);
  return res;
}

}  // namespace refil
