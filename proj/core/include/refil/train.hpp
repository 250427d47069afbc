#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <variant>
#include <vector>

#include "refil/datasets.hpp"
#include "refil/privacy.hpp"
#include "refil/split_model.hpp"

namespace refil {

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  bool cosine_decay = true;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using OptimizerConfig = std::variant<SgdConfig, AdamConfig>;

enum class TaskLoss { CrossEntropy, BinaryCrossEntropy };

/// ReFIL noise applied at the split during training. sigma is calibrated
/// per example with a Hutchinson trace and treated as a constant.
struct TrainNoise {
  double target_dfil = 1.0;
  std::size_t probes = 1;
};

struct TrainConfig {
  OptimizerConfig optimizer = SgdConfig{};
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  TaskLoss task_loss = TaskLoss::CrossEntropy;
  double snr_lambda = 0.0;  // 0 disables the SNR term
  std::size_t snr_probe_count = 4;
  std::uint64_t seed = 0;
  std::optional<TrainNoise> noise;
};

struct EpochLog {
  std::size_t epoch = 0;
  double task_loss = 0.0;
  /// Accuracy for cross-entropy, ROC-AUC for binary cross-entropy.
  double task_metric = 0.0;
  double mean_snr_loss = 0.0;
  std::size_t snr_clamped = 0;
};

struct TrainResult {
  SplitModel model;
  std::vector<EpochLog> log;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch);
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

void validate(const TrainConfig& cfg);

/// Minimizes task_loss + snr_lambda * snr_loss(client) with the configured
/// optimizer. Deterministic for a fixed seed.
TrainResult train(SplitModel split, const Dataset& data, const TrainConfig& cfg);

/// Writes "epoch,task_loss,task_metric,mean_snr_loss" rows.
void write_train_log_csv(std::ostream& out, const std::vector<EpochLog>& log);

// Loss helpers, exposed for tests.
double cross_entropy(const Tensor& logits, int label, Tensor* grad = nullptr);
double binary_cross_entropy(const Tensor& logit, int label, Tensor* grad = nullptr);

/// Fraction of (score, label) pairs ranked correctly; ties count one half.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct EvalResult {
  double metric = 0.0;  // accuracy or AUC
  double mean_sigma = 0.0;
  double mean_dfil = 0.0;
};

/// Task metric of the split model with ReFIL applied at the split.
EvalResult evaluate(const SplitModel& split, const Dataset& data, TaskLoss loss, const RefilConfig& refil,
                    std::uint64_t noise_seed);

}  // namespace refil
