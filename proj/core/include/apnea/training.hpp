#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "apnea/dataset.hpp"
#include "apnea/model.hpp"

namespace apnea::train {

struct TrainConfig {
  double base_lr = 3e-4;
  double max_lr = 1e-2;
  int epochs = 191;
  int max_epochs = 200;
  double base_momentum = 0.78;
  double max_momentum = 0.99;
  int batch_size = 32;
  double clip_norm = 1.0;
  /// Unset: negative/positive label ratio of the training instances.
  std::optional<double> class_weight_positive;
  std::uint64_t seed = 0;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_fraction = 0.3;
  double final_lr_ratio = 1e-2;
  /// Probability threshold for the validation F1 in the history.
  double threshold = 0.5875;

  static TrainConfig apnea_ecg();
  static TrainConfig stroke();

  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

/// -------------------------------------------------------------------------
/// Loss

/// Mean of w(y) max(0, 1 - y s)^2 with w(+1) = w_pos and w(-1) = 1.
/// Throws InputError for labels other than +1/-1.
double weighted_squared_hinge(std::span<const double> scores, std::span<const double> labels, double w_pos);

/// negative/positive label count; 1 when no positive label exists.
double inverse_frequency_weight(std::span<const data::WindowInstance> instances);

/// -------------------------------------------------------------------------
/// Optimizer

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of a flat parameter block. `step` is the
/// 1-based update count.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t step, const AdamHyper& h);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

/// Updates every parameter of the store from its accumulated gradient.
/// Parameters without a gradient are treated as having a zero gradient.
void adam_step(nn::ParameterStore& params, AdamState& state, const AdamHyper& h);

struct Schedule {
  double lr;
  double momentum;
};

/// Cosine warmup base->max over warmup_fraction of the steps, then cosine
/// anneal to base*final_lr_ratio. Momentum moves the opposite way.
/// Throws InputError unless 0 <= step < total_steps.
Schedule one_cycle(std::uint64_t step, std::uint64_t total_steps, const TrainConfig& cfg);

/// Scales the gradients so their global L2 norm is at most clip_norm.
/// Returns the norm before clipping.
double clip_gradients(std::span<nn::Tensor* const> grads, double clip_norm);
double clip_gradients(nn::ParameterStore& params, double clip_norm);

/// -------------------------------------------------------------------------
/// Loop

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_f1 = 0.0;  ///< NaN without validation data
  double val_auc = 0.0; ///< NaN when undefined
  double lr = 0.0;      ///< rate at the last step of the epoch
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double class_weight = 1.0;
  std::uint64_t steps = 0;
};

/// Batch boundaries for n instances: full batches of batch_size with a
/// trailing single instance merged into the previous batch.
std::vector<std::size_t> batch_sizes(std::size_t n, std::size_t batch_size);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains in place. Deterministic for fixed (model seed, cfg, data).
/// Throws DivergenceError when the loss stops being finite.
TrainResult train(nn::Model& model, std::span<const data::WindowInstance> train_set,
                  std::span<const data::WindowInstance> val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Eval-mode raw scores for each instance, batched.
std::vector<std::vector<double>> predict_scores(const nn::Model& model, std::span<const data::WindowInstance> set,
                                                std::size_t batch_size = 32);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

} // namespace apnea::train
