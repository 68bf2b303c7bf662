#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "apnea/config.hpp"
#include "apnea/dataset.hpp"
#include "apnea/errors.hpp"
#include "apnea/evaluation.hpp"
#include "apnea/model.hpp"
#include "apnea/parallel.hpp"
#include "apnea/scoring.hpp"
#include "apnea/synthetic.hpp"
#include "apnea/training.hpp"

namespace apnea::cli {

namespace fs = std::filesystem;

namespace {

void log(const std::string& msg) { std::cerr << msg << std::endl; }

RunConfig resolve(const CommonOptions& common) {
  std::map<std::string, std::string> file_keys;
  if (common.config_file) {
    file_keys = read_config_file(*common.config_file);
  }
  std::map<std::string, std::string> overrides;
  for (const auto& kv : common.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw UsageError("--set expects key=value, got '" + kv + "'");
    }
    overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  for (const auto& [k, v] : common.flag_keys) {
    overrides[k] = v;
  }
  return resolve_config(file_keys, overrides);
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw InputError("cannot write '" + path.string() + "'");
  }
  out.precision(10);
  return out;
}

void check_compatible(const RunConfig& cfg, const std::vector<data::Recording>& recordings) {
  const auto variant = cfg.variant;
  for (const auto& r : recordings) {
    if (nn::uses_spo2(variant) && !r.spo2) {
      throw ConfigError("variant " + std::string(nn::to_string(variant)) + " needs SpO2 but patient '" +
                        r.patient_id + "' has none");
    }
    if (nn::uses_ecg(variant) && std::lround(r.ecg.rate_hz) != cfg.ecg_rate_hz) {
      throw ConfigError("patient '" + r.patient_id + "' has ECG at " + std::to_string(r.ecg.rate_hz) +
                        " Hz but model.ecg_rate_hz is " + std::to_string(cfg.ecg_rate_hz));
    }
    const bool minute = r.convention() == data::LabelConvention::per_minute;
    const int want = minute ? 1 : cfg.preprocess.window.window_s;
    if (cfg.output_len != want) {
      throw ConfigError("patient '" + r.patient_id + "' has " + (minute ? "per-minute" : "per-second") +
                        " labels, which need model.output_len = " + std::to_string(want));
    }
  }
}

std::vector<data::Recording> select_split(std::vector<data::Recording> all, const std::string& split) {
  if (split.empty() || split == "all") {
    return all;
  }
  if (split != "train" && split != "test") {
    throw UsageError("--split must be train, test or all");
  }
  std::vector<data::Recording> out;
  for (auto& r : all) {
    const bool is_test = r.split == "test";
    if (is_test == (split == "test")) {
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<data::PreparedRecording> prepare_all(const std::vector<data::Recording>& recordings,
                                                 const data::PreprocessConfig& pc) {
  std::vector<data::PreparedRecording> out(recordings.size());
  parallel_for(recordings.size(), [&](std::size_t i) { out[i] = data::prepare_recording(recordings[i], pc); });
  for (const auto& p : out) {
    if (p.alignment && p.alignment->low_confidence) {
      log("warning: patient '" + p.patient_id + "': clock alignment has low confidence (correlation " +
          std::to_string(p.alignment->correlation) + ")");
    }
    if (p.instances.empty()) {
      log("warning: patient '" + p.patient_id + "' has no usable windows");
    }
  }
  return out;
}

std::vector<data::Recording> load_data(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.csv")) {
    throw UsageError("'" + dir.string() + "' is not a dataset directory (no manifest.csv)");
  }
  return data::load_dataset(dir);
}

train::EpochCallback epoch_logger(const std::string& tag, int epochs) {
  return [tag, epochs](const train::EpochRecord& e) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "[%s] epoch %d/%d loss %.6f val_f1 %.4f val_auc %.4f lr %.3g", tag.c_str(),
                  e.epoch, epochs, e.train_loss, e.val_f1, e.val_auc, e.lr);
    log(buf);
  };
}

void write_scores_csv(const fs::path& path, const score::PatientReport& r) {
  auto out = open_csv(path);
  out << "second,score,prob,label_pred\n";
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    out << r.unit_start_s[i] << ',' << r.scores[i] << ',' << score::sigmoid(r.scores[i]) << ','
        << (r.predicted[i] ? 1 : 0) << '\n';
  }
}

void write_events_csv(const fs::path& path, const score::EventList& events) {
  auto out = open_csv(path);
  out << "start_s,end_s\n";
  for (const auto& e : events) {
    out << e.start_s << ',' << e.end_s << '\n';
  }
}

void write_svg(const fs::path& path, const score::PatientReport& r) {
  std::ofstream out(path);
  if (!out) {
    throw InputError("cannot write '" + path.string() + "'");
  }
  out << score::render_timeline_svg(r.events_pred, r.events_true, r.hours * 3600.0, r.patient_id);
}

std::vector<score::PatientReport> non_empty(const std::vector<score::PatientReport>& reports) {
  std::vector<score::PatientReport> out;
  for (const auto& r : reports) {
    if (!r.empty) {
      out.push_back(r);
    }
  }
  return out;
}

void print_summary(const score::PooledSummary& s) {
  std::printf("patients %zu sens %.4f spec %.4f prec %.4f acc %.4f f1 %.4f auc %.4f acc@1 %.4f acc@2 %.4f\n",
              s.n_patients, s.metrics.sens, s.metrics.spec, s.metrics.prec, s.metrics.acc, s.metrics.f1, s.auc,
              s.acc_at_1, s.acc_at_2);
}

} // namespace

int cmd_import(const CommonOptions& common, const ImportOptions& opts) {
  const RunConfig cfg = resolve(common);
  if (fs::exists(opts.out / "manifest.csv") && !opts.force) {
    throw UsageError("refusing to overwrite existing dataset at '" + opts.out.string() + "' (pass --force)");
  }
  std::vector<data::Recording> recordings;
  if (opts.format == "apnea-ecg") {
    if (!fs::is_directory(opts.source) || fs::is_empty(opts.source)) {
      throw UsageError("import source '" + opts.source.string() + "' is missing or empty");
    }
    auto result = data::import_apnea_ecg(opts.source);
    for (const auto& w : result.warnings) {
      log("warning: " + w);
    }
    recordings = std::move(result.recordings);
  } else if (opts.format == "synthetic") {
    synth::SyntheticConfig sc;
    sc.ecg_rate_hz = opts.rate_hz;
    sc.duration_s = opts.duration_s;
    sc.with_spo2 = !opts.no_spo2;
    recordings = synth::generate_corpus(opts.patients, sc, opts.seed);
  } else {
    throw UsageError("unknown import format '" + opts.format + "' (expected apnea-ecg or synthetic)");
  }
  data::write_dataset(opts.out, recordings, opts.force);
  write_resolved_config(opts.out, cfg);
  std::size_t n_train = 0, n_test = 0;
  for (const auto& r : recordings) {
    (r.split == "test" ? n_test : n_train) += 1;
  }
  std::printf("imported %zu patients (%zu train, %zu test) into %s\n", recordings.size(), n_train, n_test,
              opts.out.string().c_str());
  return 0;
}

int cmd_preprocess(const CommonOptions& common, const DataOptions& opts) {
  const RunConfig cfg = resolve(common);
  const auto recordings = select_split(load_data(opts.data), opts.split);
  const auto prepared = prepare_all(recordings, cfg.preprocess);
  fs::create_directories(opts.out);
  auto summary = open_csv(opts.out / "preprocess.csv");
  summary << "patient_id,duration_s,total_windows,kept_windows,null_ecg_fraction,null_spo2_fraction,"
             "alignment_lag_s,alignment_correlation\n";
  for (const auto& p : prepared) {
    data::write_instance_cache(opts.out / (p.patient_id + ".awin"), p.instances);
    summary << p.patient_id << ',' << p.duration_s << ',' << p.total_windows << ',' << p.instances.size() << ','
            << p.null_ecg_fraction << ',' << p.null_spo2_fraction << ',';
    if (p.alignment) {
      summary << p.alignment->lag_s << ',' << p.alignment->correlation;
    } else {
      summary << ',';
    }
    summary << '\n';
  }
  write_resolved_config(opts.out, cfg);
  std::printf("preprocessed %zu patients into %s\n", prepared.size(), opts.out.string().c_str());
  return 0;
}

int cmd_train(const CommonOptions& common, const DataOptions& opts) {
  const RunConfig cfg = resolve(common);
  const auto recordings = select_split(load_data(opts.data), opts.split.empty() ? "train" : opts.split);
  if (recordings.empty()) {
    throw UsageError("no training patients in '" + opts.data.string() + "'");
  }
  check_compatible(cfg, recordings);
  const auto split = data::split_by_patient(recordings, cfg.n_validation, cfg.seed);
  const auto prepared = prepare_all(recordings, cfg.preprocess);
  std::vector<data::PreparedRecording> train_recs, val_recs;
  for (const auto& p : prepared) {
    const bool is_val = std::find(split.validation.begin(), split.validation.end(), p.patient_id) !=
                        split.validation.end();
    (is_val ? val_recs : train_recs).push_back(p);
  }
  const auto train_set = score::gather_instances(train_recs);
  const auto val_set = score::gather_instances(val_recs);
  log("[train] " + std::to_string(train_recs.size()) + " training patients (" + std::to_string(train_set.size()) +
      " windows), " + std::to_string(val_recs.size()) + " validation patients");

  fs::create_directories(opts.out);
  write_resolved_config(opts.out, cfg);
  nn::Model model(cfg.model_spec());
  const auto result = train::train(model, train_set, val_set, cfg.train, epoch_logger("train", cfg.train.epochs));
  nn::save_checkpoint(model, opts.out / "model.ckpt");
  train::write_history_csv(opts.out / "history.csv", result.history);
  std::printf("trained %d epochs (%llu steps, positive weight %.4f); checkpoint %s\n", cfg.train.epochs,
              static_cast<unsigned long long>(result.steps), result.class_weight,
              (opts.out / "model.ckpt").string().c_str());
  return 0;
}

int cmd_infer(const CommonOptions& common, const InferOptions& opts) {
  RunConfig cfg = resolve(common);
  if (!opts.oracle && !opts.checkpoint) {
    throw UsageError("infer needs --checkpoint or --oracle");
  }
  std::optional<nn::Model> model;
  if (opts.checkpoint) {
    model.emplace(nn::load_checkpoint(*opts.checkpoint));
    cfg.preprocess.window.window_s = model->spec().window_s;
  }
  auto recording = data::load_recording(data::recording_files_in(opts.recording));
  if (model) {
    const auto& spec = model->spec();
    if (nn::uses_ecg(spec.variant) && std::lround(recording.ecg.rate_hz) != spec.ecg_rate_hz) {
      throw ConfigError("recording ECG is " + std::to_string(recording.ecg.rate_hz) + " Hz but the checkpoint expects " +
                        std::to_string(spec.ecg_rate_hz) + " Hz");
    }
    if (nn::uses_spo2(spec.variant) && !recording.spo2) {
      throw ConfigError("checkpoint variant needs SpO2 but the recording has none");
    }
  }
  const auto prepared = data::prepare_recording(recording, cfg.preprocess);
  fs::create_directories(opts.out);
  write_resolved_config(opts.out, cfg);

  const auto scorer = opts.oracle ? score::oracle_scorer() : score::model_scorer(*model);
  const auto report = score::per_patient_report(scorer, prepared, cfg.scoring);
  if (report.empty) {
    log("warning: recording '" + recording.patient_id + "' yields no usable " +
        std::to_string(cfg.preprocess.window.window_s) + " s windows; outputs are empty");
  }
  write_scores_csv(opts.out / "scores.csv", report);
  write_events_csv(opts.out / "events.csv", report.events_pred);
  if (opts.svg) {
    write_svg(opts.out / (recording.patient_id + ".svg"), report);
  }
  if (report.empty) {
    std::printf("patient %s AHI n/a (no usable windows)\n", recording.patient_id.c_str());
  } else {
    std::printf("patient %s AHI %.3f class %s (events %zu over %.3f h)\n", recording.patient_id.c_str(),
                report.ahi_pred, std::string(score::to_string(report.class_pred)).c_str(), report.events_pred.size(),
                report.kept_hours);
  }
  return 0;
}

int cmd_evaluate(const CommonOptions& common, const EvaluateOptions& opts) {
  RunConfig cfg = resolve(common);
  if (!opts.oracle && !opts.checkpoint) {
    throw UsageError("evaluate needs --checkpoint or --oracle");
  }
  std::optional<nn::Model> model;
  if (opts.checkpoint) {
    model.emplace(nn::load_checkpoint(*opts.checkpoint));
    cfg.preprocess.window.window_s = model->spec().window_s;
  }
  auto all = load_data(opts.data.data);
  std::string split = opts.data.split;
  if (split.empty()) {
    const bool has_test = std::any_of(all.begin(), all.end(), [](const data::Recording& r) { return r.split == "test"; });
    split = has_test ? "test" : "all";
  }
  const auto recordings = select_split(std::move(all), split);
  if (recordings.empty()) {
    throw UsageError("no patients to evaluate");
  }
  if (model) {
    RunConfig check = cfg;
    check.variant = model->spec().variant;
    check.ecg_rate_hz = model->spec().ecg_rate_hz;
    check.output_len = model->spec().output_len;
    check_compatible(check, recordings);
  }
  const auto prepared = prepare_all(recordings, cfg.preprocess);
  const auto scorer = opts.oracle ? score::oracle_scorer() : score::model_scorer(*model);
  std::vector<score::PatientReport> reports(prepared.size());
  parallel_for(prepared.size(), [&](std::size_t i) { reports[i] = score::per_patient_report(scorer, prepared[i], cfg.scoring); });

  fs::create_directories(opts.data.out);
  write_resolved_config(opts.data.out, cfg);
  const auto pooled = score::pool_reports(reports);
  score::write_report_csv(opts.data.out / "report.csv", non_empty(reports), pooled);
  score::write_summary(opts.data.out / "summary.txt", pooled);
  if (opts.svg) {
    for (const auto& r : reports) {
      write_svg(opts.data.out / (r.patient_id + ".svg"), r);
    }
  }
  print_summary(pooled);
  return 0;
}

int cmd_cv(const CommonOptions& common, const DataOptions& opts) {
  const RunConfig cfg = resolve(common);
  const auto recordings = select_split(load_data(opts.data), opts.split);
  check_compatible(cfg, recordings);
  const auto prepared = prepare_all(recordings, cfg.preprocess);
  fs::create_directories(opts.out);
  write_resolved_config(opts.out, cfg);

  score::CvOptions cv;
  cv.scoring = cfg.scoring;
  cv.on_epoch = epoch_logger("cv", cfg.train.epochs);
  const auto result = score::loocv(prepared, cfg.model_spec(), cfg.train, cv);
  std::vector<score::PatientReport> reports;
  for (const auto& f : result.folds) {
    reports.push_back(f.report);
    train::write_history_csv(opts.out / ("history_" + f.test_patient + ".csv"), f.training.history);
  }
  score::write_report_csv(opts.out / "report.csv", non_empty(reports), result.summary);
  score::write_summary(opts.out / "summary.txt", result.summary);
  print_summary(result.summary);
  return 0;
}

int cmd_sweep(const CommonOptions& common, const DataOptions& opts) {
  const RunConfig cfg = resolve(common);
  auto all = load_data(opts.data);
  check_compatible(cfg, all);
  std::vector<data::Recording> pool, validation;
  const bool has_test = std::any_of(all.begin(), all.end(), [](const data::Recording& r) { return r.split == "test"; });
  if (has_test) {
    for (auto& r : all) {
      (r.split == "test" ? validation : pool).push_back(std::move(r));
    }
  } else {
    if (cfg.n_validation == 0) {
      throw UsageError("sweep needs validation patients: use a dataset with a test split or set eval.n_validation");
    }
    const auto split = data::split_by_patient(all, cfg.n_validation, cfg.seed);
    for (auto& r : all) {
      const bool is_val =
          std::find(split.validation.begin(), split.validation.end(), r.patient_id) != split.validation.end();
      (is_val ? validation : pool).push_back(std::move(r));
    }
  }
  const auto prepared_pool = prepare_all(pool, cfg.preprocess);
  const auto prepared_val = prepare_all(validation, cfg.preprocess);
  fs::create_directories(opts.out);
  write_resolved_config(opts.out, cfg);

  score::CvOptions cv;
  cv.scoring = cfg.scoring;
  cv.on_epoch = epoch_logger("sweep", cfg.train.epochs);
  const auto result = score::training_fraction_sweep(prepared_pool, prepared_val, cfg.sweep_fractions,
                                                     cfg.sweep_repeats, cfg.model_spec(), cfg.train,
                                                     cfg.seed + 1, cv);
  for (const auto& w : result.warnings) {
    log("warning: " + w);
  }
  score::write_sweep_csv(opts.out / "sweep.csv", result.rows);
  for (const auto& r : result.rows) {
    std::printf("fraction %.3f patients %zu acc %.4f f1 %.4f auc %.4f\n", r.fraction, r.n_patients, r.acc, r.f1,
                r.auc);
  }
  return 0;
}

} // namespace apnea::cli
