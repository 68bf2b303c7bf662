#include "apnea/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "apnea/errors.hpp"
#include "apnea/parallel.hpp"

namespace apnea::score {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool has_both(const std::vector<bool>& v) {
  return std::find(v.begin(), v.end(), true) != v.end() && std::find(v.begin(), v.end(), false) != v.end();
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw InputError("cannot write '" + path.string() + "'");
  }
  out.precision(10);
  return out;
}

std::size_t resolve_workers(const CvOptions& o) { return o.workers ? o.workers : worker_count(); }

} // namespace

Scorer model_scorer(const nn::Model& model, std::size_t batch_size) {
  return [&model, batch_size](std::span<const data::WindowInstance> set) {
    return train::predict_scores(model, set, batch_size);
  };
}

Scorer oracle_scorer(double saturation) {
  return [saturation](std::span<const data::WindowInstance> set) {
    std::vector<std::vector<double>> out;
    out.reserve(set.size());
    for (const auto& inst : set) {
      std::vector<double> s(inst.labels.size());
      std::transform(inst.labels.begin(), inst.labels.end(), s.begin(),
                     [saturation](std::uint8_t l) { return l ? saturation : -saturation; });
      out.push_back(std::move(s));
    }
    return out;
  };
}

PatientReport per_patient_report(const Scorer& scorer, const data::PreparedRecording& rec, const ScoringConfig& cfg) {
  PatientReport r;
  r.patient_id = rec.patient_id;
  r.hours = rec.duration_s / 3600.0;
  r.kept_hours = rec.kept_duration_s / 3600.0;
  r.total_windows = rec.total_windows;
  r.kept_windows = rec.instances.size();
  r.auc = kNaN;
  if (rec.instances.empty()) {
    r.empty = true;
    return r;
  }

  const auto& insts = rec.instances;
  const std::size_t label_len = insts.front().labels.size();
  const auto window_s = static_cast<std::int64_t>(label_len == 1 ? 0 : label_len);
  r.minute_mode = label_len == 1;
  const auto all_scores = scorer(insts);
  if (all_scores.size() != insts.size()) {
    throw ShapeError("per_patient_report: scorer returned " + std::to_string(all_scores.size()) + " rows for " +
                     std::to_string(insts.size()) + " windows");
  }
  for (std::size_t i = 0; i < insts.size(); ++i) {
    if (all_scores[i].size() != insts[i].labels.size()) {
      throw ShapeError("per_patient_report: " + std::to_string(all_scores[i].size()) + " scores for " +
                       std::to_string(insts[i].labels.size()) + " labels in a window of '" + rec.patient_id + "'");
    }
    const auto start = static_cast<std::int64_t>(insts[i].target_start_s);
    for (std::size_t t = 0; t < all_scores[i].size(); ++t) {
      r.unit_start_s.push_back(start + static_cast<std::int64_t>(t));
      r.scores.push_back(all_scores[i][t]);
      r.truth.push_back(insts[i].labels[t] != 0);
    }
  }
  r.predicted = threshold_probs(scores_to_probs(r.scores), cfg.threshold);

  if (r.minute_mode) {
    // One unit per window: positive windows count as apnea minutes.
    const std::int64_t minute = static_cast<std::int64_t>(rec.kept_duration_s) / static_cast<std::int64_t>(insts.size());
    for (std::size_t i = 0; i < r.predicted.size(); ++i) {
      if (r.predicted[i]) {
        r.events_pred.push_back({r.unit_start_s[i], r.unit_start_s[i] + minute});
      }
      if (r.truth[i]) {
        r.events_true.push_back({r.unit_start_s[i], r.unit_start_s[i] + minute});
      }
    }
  } else {
    // Runs are extracted inside contiguous stretches of kept windows only.
    std::size_t seg_begin = 0;
    for (std::size_t i = 1; i <= insts.size(); ++i) {
      const bool breaks = i == insts.size() ||
                          static_cast<std::int64_t>(insts[i].target_start_s) !=
                              static_cast<std::int64_t>(insts[i - 1].target_start_s) + window_s;
      if (!breaks) {
        continue;
      }
      const auto lo = seg_begin * label_len;
      const auto hi = i * label_len;
      const std::vector<bool> flags(r.predicted.begin() + static_cast<long>(lo), r.predicted.begin() + static_cast<long>(hi));
      for (const auto& e : filter_short_events(extract_events(flags, r.unit_start_s[lo]), cfg.min_event_s)) {
        r.events_pred.push_back(e);
      }
      seg_begin = i;
    }
    // Ground truth: annotation events touching a kept window.
    for (const auto& ev : rec.events) {
      const bool touches = std::any_of(insts.begin(), insts.end(), [&](const data::WindowInstance& w) {
        return ev.start_s < w.target_start_s + static_cast<double>(window_s) && ev.end_s > w.target_start_s;
      });
      if (touches) {
        r.events_true.push_back({static_cast<std::int64_t>(std::floor(ev.start_s)),
                                 static_cast<std::int64_t>(std::ceil(ev.end_s))});
      }
    }
  }
  r.ahi_true = compute_ahi(r.events_true, r.kept_hours);
  r.ahi_pred = compute_ahi(r.events_pred, r.kept_hours);
  r.class_true = ahi_class(r.ahi_true);
  r.class_pred = ahi_class(r.ahi_pred);
  r.confusion = confusion_counts(r.predicted, r.truth);
  r.metrics = metrics(r.confusion);
  if (has_both(r.truth)) {
    r.auc = auc(r.scores, r.truth);
  }
  return r;
}

PooledSummary pool_reports(const std::vector<PatientReport>& reports) {
  PooledSummary s;
  s.auc = kNaN;
  std::vector<double> scores;
  std::vector<bool> truth;
  std::vector<Severity> c_true, c_pred;
  std::size_t osa_hits = 0;
  for (const auto& r : reports) {
    if (r.empty) {
      continue;
    }
    ++s.n_patients;
    s.confusion += r.confusion;
    scores.insert(scores.end(), r.scores.begin(), r.scores.end());
    truth.insert(truth.end(), r.truth.begin(), r.truth.end());
    c_true.push_back(r.class_true);
    c_pred.push_back(r.class_pred);
    osa_hits += osa_binary(r.ahi_true) == osa_binary(r.ahi_pred) ? 1 : 0;
  }
  if (s.n_patients == 0) {
    throw InputError("pool_reports: no non-empty patient reports");
  }
  s.metrics = metrics(s.confusion);
  if (has_both(truth)) {
    s.auc = auc(scores, truth);
  }
  s.acc_at_1 = acc_at_k(c_true, c_pred, 1);
  s.acc_at_2 = acc_at_k(c_true, c_pred, 2);
  s.osa_accuracy = static_cast<double>(osa_hits) / static_cast<double>(s.n_patients);
  return s;
}

std::vector<data::WindowInstance> gather_instances(const std::vector<data::PreparedRecording>& recordings) {
  std::vector<data::WindowInstance> out;
  for (const auto& r : recordings) {
    out.insert(out.end(), r.instances.begin(), r.instances.end());
  }
  return out;
}

CvResult loocv(const std::vector<data::PreparedRecording>& recordings, const nn::ModelSpec& spec,
               const train::TrainConfig& cfg, const CvOptions& options) {
  if (recordings.size() < 2) {
    throw InputError("loocv: need at least two patients");
  }
  CvResult result;
  result.folds.resize(recordings.size());
  parallel_for(
      recordings.size(),
      [&](std::size_t f) {
        Fold& fold = result.folds[f];
        fold.test_patient = recordings[f].patient_id;
        std::vector<data::WindowInstance> train_set;
        for (std::size_t p = 0; p < recordings.size(); ++p) {
          if (p != f) {
            fold.train_patients.push_back(recordings[p].patient_id);
            train_set.insert(train_set.end(), recordings[p].instances.begin(), recordings[p].instances.end());
          }
        }
        for (const auto& inst : train_set) {
          if (inst.patient_id == fold.test_patient) {
            throw StateError("loocv: test patient '" + fold.test_patient + "' leaked into its training fold");
          }
        }
        nn::Model model(spec);
        fold.training = train::train(model, train_set, {}, cfg, options.on_epoch);
        fold.report = per_patient_report(model_scorer(model, static_cast<std::size_t>(cfg.batch_size)), recordings[f],
                                         options.scoring);
      },
      resolve_workers(options));

  std::vector<PatientReport> reports;
  for (const auto& f : result.folds) {
    reports.push_back(f.report);
  }
  result.summary = pool_reports(reports);
  return result;
}

SweepResult training_fraction_sweep(const std::vector<data::PreparedRecording>& train_pool,
                                    const std::vector<data::PreparedRecording>& validation,
                                    const std::vector<double>& fractions, std::size_t repeats,
                                    const nn::ModelSpec& spec, const train::TrainConfig& cfg,
                                    std::uint64_t sample_seed, const CvOptions& options) {
  if (train_pool.empty() || validation.empty()) {
    throw InputError("sweep: need training and validation patients");
  }
  if (repeats == 0) {
    throw InputError("sweep: repeats must be positive");
  }
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) {
      throw InputError("sweep: fractions must lie in (0, 1]");
    }
  }
  SweepResult result;
  std::mt19937_64 rng(sample_seed);
  const std::size_t n = train_pool.size();

  // Subsets are drawn up front so the sampling stream does not depend on
  // training order; identical subsets are trained once.
  struct Job {
    std::size_t row;
    std::vector<std::size_t> subset;
  };
  std::vector<Job> jobs;
  std::vector<std::size_t> rows_used;
  for (double f : fractions) {
    const auto k = static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
    if (k == 0) {
      result.warnings.push_back("fraction " + std::to_string(f) + " selects no patients out of " + std::to_string(n) +
                                "; skipped");
      continue;
    }
    SweepRow row;
    row.fraction = f;
    row.n_patients = k;
    row.runs = repeats;
    result.rows.push_back(row);
    for (std::size_t rep = 0; rep < repeats; ++rep) {
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(k);
      std::sort(idx.begin(), idx.end());
      jobs.push_back({result.rows.size() - 1, std::move(idx)});
    }
  }

  std::map<std::vector<std::size_t>, std::size_t> unique_index;
  std::vector<std::vector<std::size_t>> unique_subsets;
  for (const auto& j : jobs) {
    if (unique_index.emplace(j.subset, unique_subsets.size()).second) {
      unique_subsets.push_back(j.subset);
    }
  }
  std::vector<PooledSummary> outcomes(unique_subsets.size());
  parallel_for(
      unique_subsets.size(),
      [&](std::size_t u) {
        std::vector<data::WindowInstance> train_set;
        for (auto p : unique_subsets[u]) {
          train_set.insert(train_set.end(), train_pool[p].instances.begin(), train_pool[p].instances.end());
        }
        nn::Model model(spec);
        train::train(model, train_set, {}, cfg, options.on_epoch);
        const auto scorer = model_scorer(model, static_cast<std::size_t>(cfg.batch_size));
        std::vector<PatientReport> reports;
        for (const auto& v : validation) {
          reports.push_back(per_patient_report(scorer, v, options.scoring));
        }
        outcomes[u] = pool_reports(reports);
      },
      resolve_workers(options));

  for (const auto& j : jobs) {
    const auto& o = outcomes[unique_index.at(j.subset)];
    auto& row = result.rows[j.row];
    row.acc += o.metrics.acc / static_cast<double>(repeats);
    row.f1 += o.metrics.f1 / static_cast<double>(repeats);
    row.auc += o.auc / static_cast<double>(repeats);
  }
  return result;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<PatientReport>& reports,
                      const PooledSummary& pooled) {
  auto out = open_out(path);
  out << "patient_id,hours,kept_hours,windows,kept_windows,events_true,events_pred,ahi_true,ahi_pred,class_true,"
         "class_pred,sens,spec,prec,acc,f1,auc\n";
  double hours = 0, kept = 0;
  std::size_t windows = 0, kept_windows = 0, ev_true = 0, ev_pred = 0;
  for (const auto& r : reports) {
    out << r.patient_id << ',' << r.hours << ',' << r.kept_hours << ',' << r.total_windows << ',' << r.kept_windows
        << ',' << r.events_true.size() << ',' << r.events_pred.size() << ',' << r.ahi_true << ',' << r.ahi_pred << ','
        << to_string(r.class_true) << ',' << to_string(r.class_pred) << ',' << r.metrics.sens << ',' << r.metrics.spec
        << ',' << r.metrics.prec << ',' << r.metrics.acc << ',' << r.metrics.f1 << ',' << r.auc << '\n';
    hours += r.hours;
    kept += r.kept_hours;
    windows += r.total_windows;
    kept_windows += r.kept_windows;
    ev_true += r.events_true.size();
    ev_pred += r.events_pred.size();
  }
  const auto& m = pooled.metrics;
  out << "pooled," << hours << ',' << kept << ',' << windows << ',' << kept_windows << ',' << ev_true << ',' << ev_pred
      << ",,,,," << m.sens << ',' << m.spec << ',' << m.prec << ',' << m.acc << ',' << m.f1 << ',' << pooled.auc
      << '\n';
}

void write_summary(const std::filesystem::path& path, const PooledSummary& pooled) {
  auto out = open_out(path);
  const auto& m = pooled.metrics;
  const auto& c = pooled.confusion;
  out << "n_patients=" << pooled.n_patients << '\n'
      << "tp=" << c.tp << '\n'
      << "fp=" << c.fp << '\n'
      << "tn=" << c.tn << '\n'
      << "fn=" << c.fn << '\n'
      << "sens=" << m.sens << '\n'
      << "spec=" << m.spec << '\n'
      << "prec=" << m.prec << '\n'
      << "acc=" << m.acc << '\n'
      << "f1=" << m.f1 << '\n'
      << "auc=" << pooled.auc << '\n'
      << "metrics_undefined=" << (m.undefined ? 1 : 0) << '\n'
      << "acc_at_1=" << pooled.acc_at_1 << '\n'
      << "acc_at_2=" << pooled.acc_at_2 << '\n'
      << "osa_accuracy=" << pooled.osa_accuracy << '\n';
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  auto out = open_out(path);
  out << "fraction,n_patients,runs,acc,f1,auc\n";
  for (const auto& r : rows) {
    out << r.fraction << ',' << r.n_patients << ',' << r.runs << ',' << r.acc << ',' << r.f1 << ',' << r.auc << '\n';
  }
}

} // namespace apnea::score
