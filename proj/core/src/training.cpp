#include "apnea/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include "apnea/errors.hpp"
#include "apnea/layers.hpp"
#include "apnea/scoring.hpp"

namespace apnea::train {

TrainConfig TrainConfig::apnea_ecg() {
  TrainConfig c;
  c.base_lr = 3e-4;
  c.max_lr = 1e-1;
  c.epochs = 239;
  c.max_epochs = 300;
  c.base_momentum = 0.85;
  c.max_momentum = 0.95;
  return c;
}

TrainConfig TrainConfig::stroke() { return TrainConfig{}; }

void TrainConfig::validate() const {
  if (!(base_lr > 0.0 && base_lr < max_lr)) {
    throw ConfigError("train: need 0 < base_lr < max_lr");
  }
  if (epochs < 0 || max_epochs < 1 || epochs > max_epochs) {
    throw ConfigError("train: need 0 <= epochs <= max_epochs and max_epochs >= 1");
  }
  auto in_unit = [](double m) { return m > 0.0 && m < 1.0; };
  if (!in_unit(base_momentum) || !in_unit(max_momentum) || base_momentum > max_momentum) {
    throw ConfigError("train: momenta must lie in (0,1) with base_momentum <= max_momentum");
  }
  if (!in_unit(beta2) || !(eps > 0.0)) {
    throw ConfigError("train: beta2 must lie in (0,1) and eps must be positive");
  }
  if (batch_size < 2) {
    throw ConfigError("train: batch_size must be at least 2 (batch norm needs batch statistics)");
  }
  if (!(clip_norm > 0.0)) {
    throw ConfigError("train: clip_norm must be positive");
  }
  if (class_weight_positive && !(*class_weight_positive > 0.0)) {
    throw ConfigError("train: class_weight_positive must be positive");
  }
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0) || !(final_lr_ratio > 0.0)) {
    throw ConfigError("train: warmup_fraction must lie in (0,1) and final_lr_ratio must be positive");
  }
}

// max(0, 1 - y s), but a NaN score stays NaN so divergence is visible in the loss.
inline double hinge_margin(double y, double s) noexcept {
  const double m = 1.0 - y * s;
  return m < 0.0 ? 0.0 : m;
}

double weighted_squared_hinge(std::span<const double> scores, std::span<const double> labels, double w_pos) {
  if (scores.size() != labels.size()) {
    throw ShapeError("weighted_squared_hinge: scores and labels differ in length");
  }
  if (scores.empty()) {
    throw InputError("weighted_squared_hinge: empty input");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double y = labels[i];
    if (y != 1.0 && y != -1.0) {
      throw InputError("weighted_squared_hinge: label must be +1 or -1");
    }
    const double margin = hinge_margin(y, scores[i]);
    sum += (y > 0 ? w_pos : 1.0) * margin * margin;
  }
  return sum / static_cast<double>(scores.size());
}

double inverse_frequency_weight(std::span<const data::WindowInstance> instances) {
  std::uint64_t pos = 0, total = 0;
  for (const auto& inst : instances) {
    pos += inst.positive_count();
    total += inst.labels.size();
  }
  if (pos == 0) {
    return 1.0;
  }
  return static_cast<double>(total - pos) / static_cast<double>(pos);
}

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t step, const AdamHyper& h) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam_update: parameter, gradient and moment sizes differ");
  }
  const double t = static_cast<double>(step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  const double step_size = h.lr / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    param[i] -= step_size * m[i] / (std::sqrt(v[i]) / sqrt_bc2 + h.eps);
  }
}

void adam_step(nn::ParameterStore& params, AdamState& state, const AdamHyper& h) {
  auto& entries = params.params();
  if (state.m.empty()) {
    for (const auto& e : entries) {
      state.m.emplace_back(e.var.value().size(), 0.0);
      state.v.emplace_back(e.var.value().size(), 0.0);
    }
  }
  if (state.m.size() != entries.size()) {
    throw StateError("adam_step: optimizer state belongs to a different parameter set");
  }
  ++state.step;
  std::vector<double> zeros;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& var = entries[i].var;
    std::span<const double> g = var.grad().values();
    if (var.grad().empty()) {
      zeros.assign(var.value().size(), 0.0);
      g = zeros;
    }
    adam_update(var.mutable_value().values(), g, state.m[i], state.v[i], state.step, h);
  }
}

namespace {
double cosine(double from, double to, double pct) { return to + (from - to) / 2.0 * (1.0 + std::cos(std::numbers::pi * pct)); }
} // namespace

Schedule one_cycle(std::uint64_t step, std::uint64_t total_steps, const TrainConfig& cfg) {
  if (step >= total_steps) {
    throw InputError("one_cycle: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  const double warm = cfg.warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s <= warm) {
    const double pct = s / warm;
    return {cosine(cfg.base_lr, cfg.max_lr, pct), cosine(cfg.max_momentum, cfg.base_momentum, pct)};
  }
  const double pct = (s - warm) / (static_cast<double>(total_steps) - warm);
  return {cosine(cfg.max_lr, cfg.base_lr * cfg.final_lr_ratio, pct), cosine(cfg.base_momentum, cfg.max_momentum, pct)};
}

double clip_gradients(std::span<nn::Tensor* const> grads, double clip_norm) {
  if (!(clip_norm > 0.0)) {
    throw InputError("clip_gradients: clip_norm must be positive");
  }
  double sq = 0.0;
  for (const auto* g : grads) {
    for (double x : g->values()) {
      sq += x * x;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > clip_norm) {
    const double scale = clip_norm / norm;
    for (auto* g : grads) {
      for (double& x : g->values()) {
        x *= scale;
      }
    }
  }
  return norm;
}

double clip_gradients(nn::ParameterStore& params, double clip_norm) {
  std::vector<nn::Tensor*> grads;
  for (auto& e : params.params()) {
    if (e.var.node() && !e.var.grad().empty()) {
      grads.push_back(&e.var.node()->grad);
    }
  }
  return clip_gradients(grads, clip_norm);
}

std::vector<std::size_t> batch_sizes(std::size_t n, std::size_t batch_size) {
  std::vector<std::size_t> out;
  if (batch_size == 0) {
    throw InputError("batch_sizes: batch_size must be positive");
  }
  for (std::size_t done = 0; done < n; done += batch_size) {
    out.push_back(std::min(batch_size, n - done));
  }
  if (out.size() > 1 && out.back() == 1) {
    out.pop_back();
    out.back() += 1;
  }
  return out;
}

namespace {

std::vector<const data::WindowInstance*> pointers(std::span<const data::WindowInstance> set,
                                                  std::span<const std::size_t> idx) {
  std::vector<const data::WindowInstance*> out;
  out.reserve(idx.size());
  for (auto i : idx) {
    out.push_back(&set[i]);
  }
  return out;
}

void check_labels(const nn::Model& model, std::span<const data::WindowInstance> set) {
  const auto out_len = static_cast<std::size_t>(model.spec().output_len);
  for (const auto& inst : set) {
    if (inst.labels.size() != out_len) {
      throw ConfigError("instance of patient '" + inst.patient_id + "' carries " + std::to_string(inst.labels.size()) +
                        " labels but the model emits " + std::to_string(out_len) + " scores");
    }
  }
}

struct ValidationScore {
  double f1 = std::numeric_limits<double>::quiet_NaN();
  double auc = std::numeric_limits<double>::quiet_NaN();
};

ValidationScore validate_epoch(const nn::Model& model, std::span<const data::WindowInstance> val, double tau,
                               std::size_t batch_size) {
  ValidationScore out;
  if (val.empty()) {
    return out;
  }
  const auto scores = predict_scores(model, val, batch_size);
  std::vector<double> flat;
  std::vector<bool> truth;
  for (std::size_t i = 0; i < val.size(); ++i) {
    flat.insert(flat.end(), scores[i].begin(), scores[i].end());
    for (auto l : val[i].labels) {
      truth.push_back(l != 0);
    }
  }
  const auto pred = score::threshold_probs(score::scores_to_probs(flat), tau);
  out.f1 = score::metrics(score::confusion_counts(pred, truth)).f1;
  const bool both = std::find(truth.begin(), truth.end(), true) != truth.end() &&
                    std::find(truth.begin(), truth.end(), false) != truth.end();
  if (both) {
    out.auc = score::auc(flat, truth);
  }
  return out;
}

} // namespace

std::vector<std::vector<double>> predict_scores(const nn::Model& model, std::span<const data::WindowInstance> set,
                                                std::size_t batch_size) {
  std::vector<std::vector<double>> out;
  out.reserve(set.size());
  std::vector<const data::WindowInstance*> ptrs;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    const auto end = std::min(set.size(), start + batch_size);
    ptrs.clear();
    for (std::size_t i = start; i < end; ++i) {
      ptrs.push_back(&set[i]);
    }
    const nn::Tensor scores = model.predict(model.make_batch(ptrs));
    const std::size_t width = scores.dim(1);
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      out.emplace_back(scores.data() + i * width, scores.data() + (i + 1) * width);
    }
  }
  return out;
}

TrainResult train(nn::Model& model, std::span<const data::WindowInstance> train_set,
                  std::span<const data::WindowInstance> val_set, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) {
    throw InputError("train: no training instances");
  }
  if (train_set.size() < 2) {
    throw InputError("train: batch norm needs at least two training instances");
  }
  check_labels(model, train_set);
  check_labels(model, val_set);

  TrainResult result;
  result.class_weight = cfg.class_weight_positive.value_or(inverse_frequency_weight(train_set));
  const auto sizes = batch_sizes(train_set.size(), static_cast<std::size_t>(cfg.batch_size));
  const auto total_steps = static_cast<std::uint64_t>(cfg.max_epochs) * sizes.size();

  std::mt19937_64 rng(cfg.seed);
  model.reseed_dropout(cfg.seed + 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  AdamState adam;
  auto& params = model.parameters();
  const auto out_len = static_cast<std::size_t>(model.spec().output_len);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    double lr = cfg.base_lr;
    std::size_t offset = 0;
    for (const auto n : sizes) {
      const auto sched = one_cycle(result.steps, total_steps, cfg);
      lr = sched.lr;
      const std::span<const std::size_t> idx(order.data() + offset, n);
      offset += n;
      const auto batch_ptrs = pointers(train_set, idx);

      nn::Tensor labels({n, out_len});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < out_len; ++t) {
          labels[i * out_len + t] = batch_ptrs[i]->labels[t] ? 1.0 : -1.0;
        }
      }
      params.zero_grad();
      const nn::Var scores = model.forward(model.make_batch(batch_ptrs), nn::Mode::train);
      const nn::Var loss = nn::weighted_squared_hinge(scores, labels, result.class_weight);
      const double loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(result.steps) + ": loss is " + std::to_string(loss_value) +
                              " (lr " + std::to_string(lr) + ")");
      }
      model.backward(loss);
      clip_gradients(params, cfg.clip_norm);
      adam_step(params, adam, {sched.lr, sched.momentum, cfg.beta2, cfg.eps});
      loss_sum += loss_value * static_cast<double>(n);
      ++result.steps;
    }
    params.zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.lr = lr;
    const auto v = validate_epoch(model, val_set, cfg.threshold, static_cast<std::size_t>(cfg.batch_size));
    rec.val_f1 = v.f1;
    rec.val_auc = v.auc;
    result.history.push_back(rec);
    if (on_epoch) {
      on_epoch(rec);
    }
  }
  return result;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) {
    throw InputError("cannot write '" + path.string() + "'");
  }
  out.precision(17);
  out << "epoch,train_loss,val_f1,val_auc,lr\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_f1 << ',' << r.val_auc << ',' << r.lr << '\n';
  }
}

} // namespace apnea::train
