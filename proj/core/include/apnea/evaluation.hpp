#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "apnea/dataset.hpp"
#include "apnea/model.hpp"
#include "apnea/scoring.hpp"
#include "apnea/training.hpp"

namespace apnea::score {

/// Raw scores for a run of instances, one vector per instance.
using Scorer = std::function<std::vector<std::vector<double>>(std::span<const data::WindowInstance>)>;

Scorer model_scorer(const nn::Model& model, std::size_t batch_size = 32);
/// Emits +saturation for positive labels and -saturation otherwise.
Scorer oracle_scorer(double saturation = 1e3);

struct ScoringConfig {
  double threshold = kDefaultThreshold;
  std::int64_t min_event_s = kMinEventSeconds;
};

struct PatientReport {
  std::string patient_id;
  double hours = 0.0;      ///< full recording
  double kept_hours = 0.0; ///< after null-window filtering
  std::size_t total_windows = 0;
  std::size_t kept_windows = 0;
  bool empty = false; ///< no kept windows; metrics are meaningless
  bool minute_mode = false;

  EventList events_true;
  EventList events_pred;
  double ahi_true = 0.0;
  double ahi_pred = 0.0;
  Severity class_true = Severity::none;
  Severity class_pred = Severity::none;

  Confusion confusion;
  Metrics metrics;
  double auc = 0.0; ///< NaN when only one class is present

  /// Per output unit in time order: start second, raw score, truth.
  std::vector<std::int64_t> unit_start_s;
  std::vector<double> scores;
  std::vector<bool> truth;
  std::vector<bool> predicted;
};

/// Scores every kept window, concatenates the outputs in time order and runs
/// sigmoid, threshold, event extraction and the short-event filter. Events
/// never bridge a dropped window.
PatientReport per_patient_report(const Scorer& scorer, const data::PreparedRecording& rec,
                                 const ScoringConfig& cfg = {});

struct PooledSummary {
  std::size_t n_patients = 0;
  Confusion confusion;
  Metrics metrics;
  double auc = 0.0;
  double acc_at_1 = 0.0;
  double acc_at_2 = 0.0;
  double osa_accuracy = 0.0;
};

/// Micro-averaged per-unit metrics from pooled confusion counts, AUC over the
/// pooled scores, and per-patient class agreement.
PooledSummary pool_reports(const std::vector<PatientReport>& reports);

struct Fold {
  std::string test_patient;
  std::vector<std::string> train_patients;
  train::TrainResult training;
  PatientReport report;
};

struct CvResult {
  std::vector<Fold> folds;
  PooledSummary summary;
};

struct CvOptions {
  ScoringConfig scoring;
  std::size_t workers = 0; ///< 0: worker_count()
  train::EpochCallback on_epoch;
};

/// Leave-one-patient-out: each patient is scored by a model trained on all
/// the others. Throws StateError if a fold's training data contains the test
/// patient.
CvResult loocv(const std::vector<data::PreparedRecording>& recordings, const nn::ModelSpec& spec,
               const train::TrainConfig& cfg, const CvOptions& options = {});

struct SweepRow {
  double fraction = 0.0;
  std::size_t n_patients = 0;
  std::size_t runs = 0;
  double acc = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<std::string> warnings;
};

/// For each fraction: `repeats` random training-patient subsets of size
/// floor(fraction * n), each trained with the same cfg and scored on the
/// fixed validation patients; metrics are averaged over repeats.
SweepResult training_fraction_sweep(const std::vector<data::PreparedRecording>& train_pool,
                                    const std::vector<data::PreparedRecording>& validation,
                                    const std::vector<double>& fractions, std::size_t repeats,
                                    const nn::ModelSpec& spec, const train::TrainConfig& cfg,
                                    std::uint64_t sample_seed, const CvOptions& options = {});

/// Instances of several recordings concatenated in order.
std::vector<data::WindowInstance> gather_instances(const std::vector<data::PreparedRecording>& recordings);

void write_report_csv(const std::filesystem::path& path, const std::vector<PatientReport>& reports,
                      const PooledSummary& pooled);
void write_summary(const std::filesystem::path& path, const PooledSummary& pooled);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);

} // namespace apnea::score
