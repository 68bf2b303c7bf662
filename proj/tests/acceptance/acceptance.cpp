// Acceptance run: one PASS/FAIL/SKIP line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "apnea/config.hpp"
#include "apnea/evaluation.hpp"
#include "apnea/layers.hpp"
#include "apnea/model.hpp"
#include "apnea/scoring.hpp"
#include "apnea/synthetic.hpp"
#include "apnea/training.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace apnea;
using namespace apnea::nn;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetS = 60.0;
constexpr double kOracleTol = 1e-12;
constexpr int kOracleTrials = 120;
constexpr double kSynthF1 = 0.90;
constexpr double kSynthAuc = 0.97;
constexpr double kSynthBudgetS = 15 * 60.0;
constexpr double kEcgSegmentAcc = 0.80;
constexpr double kEcgOsaAcc = 0.90;

enum class Status { pass, fail, skip };

struct Outcome {
  Status status;
  std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::pass : Status::fail, std::move(detail)}; }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor randn(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

Var param(Tensor t) { return Var(std::move(t), true); }

std::vector<const data::WindowInstance*> ptrs(const std::vector<data::WindowInstance>& v) {
  std::vector<const data::WindowInstance*> out;
  for (const auto& i : v) out.push_back(&i);
  return out;
}

// 48 ECG samples, 12 steps, 4 channels.
ModelSpec toy_spec(Variant variant, int output_len) {
  ModelSpec s;
  s.variant = variant;
  s.window_s = 4;
  s.ecg_rate_hz = 4;
  s.output_len = output_len;
  s.lstm_hidden = 3;
  s.spo2_hidden = 2;
  s.dense_hidden = 5;
  s.seed = 11;
  for (int pool : {2, 2}) {
    ConvBlockSpec b;
    b.dilations = {1, 2};
    b.channels = 4;
    b.pool = pool;
    b.dropout_rate = 0.2;
    s.blocks.push_back(b);
  }
  return s;
}

data::WindowInstance random_instance(const ModelSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  data::WindowInstance inst;
  inst.ecg_ctx.resize(spec.ecg_input_len());
  for (auto& v : inst.ecg_ctx) v = u(rng);
  inst.spo2_ctx.resize(spec.sequence_len());
  for (auto& v : inst.spo2_ctx) v = u(rng);
  inst.labels.assign(static_cast<std::size_t>(spec.output_len), 0);
  return inst;
}

std::vector<data::PreparedRecording> prepared_corpus(std::size_t n, double seconds, std::uint64_t seed) {
  synth::SyntheticConfig cfg;
  cfg.duration_s = seconds;
  std::vector<data::PreparedRecording> out;
  for (const auto& r : synth::generate_corpus(n, cfg, seed)) out.push_back(data::prepare_recording(r, {}));
  return out;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(31);
  double worst = 0.0;
  std::size_t checks = 0;
  auto take = [&](const testing::GradCheckResult& r) {
    worst = std::max(worst, r.max_rel_error);
    ++checks;
  };

  {
    std::vector<Var> in{param(randn({2, 2, 9}, rng)), param(randn({2, 3}, rng))};
    const auto w = randn({2, 2, 9}, rng);
    take(testing::gradcheck(in, [&] { return dot(depthwise_conv1d(in[0], in[1], 2), w); }));
  }
  {
    std::vector<Var> in{param(randn({2, 3, 5}, rng)), param(randn({4, 3}, rng)), param(randn({4}, rng))};
    const auto w = randn({2, 4, 5}, rng);
    take(testing::gradcheck(in, [&] { return dot(pointwise_conv1d(in[0], in[1], in[2]), w); }));
  }
  {
    std::vector<Var> in{param(randn({3, 2, 6}, rng)), param(randn({2}, rng)), param(randn({2}, rng))};
    const auto w = randn({3, 2, 6}, rng);
    BatchNormStats stats(2);
    for (auto mode : {Mode::train, Mode::eval})
      take(testing::gradcheck(in, [&] { return dot(batchnorm1d(in[0], in[1], in[2], stats, mode), w); }));
  }
  {
    Tensor x({2, 3, 4});
    std::uniform_real_distribution<double> u(0.05, 1.5);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = i % 2 ? u(rng) : -u(rng);
    std::vector<Var> in{param(x)};
    const auto w = randn({2, 3, 4}, rng);
    take(testing::gradcheck(in, [&] { return dot(relu(in[0]), w); }));
  }
  {
    std::vector<Var> in{param(randn({2, 4, 5}, rng))};
    const auto w = randn({2, 4, 5}, rng);
    take(testing::gradcheck(in, [&] {
      std::mt19937_64 mask_rng(3);
      return dot(spatial_dropout(in[0], 0.4, Mode::train, mask_rng), w);
    }));
  }
  {
    std::vector<Var> in{param(randn({2, 3, 8}, rng)), param(randn({2, 3, 4}, rng))};
    const auto w = randn({2, 4, 3}, rng);
    take(testing::gradcheck(in, [&] {
      return dot(reshape(transpose_ct(add(avg_pool1d(in[0], 2), in[1])), {2, 4, 3}), w);
    }));
  }
  {
    std::vector<Var> in{param(randn({2, 6, 2}, rng)), param(randn({2, 6, 3}, rng)), param(randn({4, 5}, rng)),
                        param(randn({4}, rng))};
    const auto w = randn({2, 3, 4}, rng);
    take(testing::gradcheck(
        in, [&] { return dot(linear(slice_time(concat_features(in[0], in[1]), 2, 3), in[2], in[3]), w); }));
  }
  {
    const std::size_t h = 3, f = 2;
    std::vector<Var> in{param(randn({2, 5, f}, rng)), param(randn({4 * h, f}, rng, 0.5)),
                        param(randn({4 * h, h}, rng, 0.5)), param(randn({4 * h}, rng, 0.5))};
    const auto w = randn({2, 5, h}, rng);
    for (bool reverse : {false, true})
      take(testing::gradcheck(in, [&] { return dot(lstm(in[0], in[1], in[2], in[3], reverse), w); }));
  }
  {
    Tensor s({2, 5}), y({2, 5});
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (std::size_t i = 0; i < 10; ++i) {
      y[i] = i % 3 == 0 ? 1.0 : -1.0;
      double v = u(rng);
      while (std::abs(1.0 - y[i] * v) < 0.05) v = u(rng);
      s[i] = v;
    }
    std::vector<Var> in{param(s)};
    take(testing::gradcheck(in, [&] { return weighted_squared_hinge(in[0], y, 2.5); }));
  }

  for (auto v : {Variant::CNN_DENSE, Variant::CNN_LSTM, Variant::SPO2_BILSTM, Variant::CNN_LSTM_SPO2}) {
    for (int out_len : {4, 1}) {
      const auto spec = toy_spec(v, out_len);
      Model m(spec);
      const std::vector<data::WindowInstance> insts{random_instance(spec, rng), random_instance(spec, rng)};
      const auto batch = m.make_batch(ptrs(insts));
      Tensor labels({2, static_cast<std::size_t>(out_len)});
      for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 3 == 0 ? 1.0 : -1.0;
      std::vector<Var> inputs;
      for (auto& e : m.parameters().params()) inputs.push_back(e.var);
      take(testing::gradcheck(inputs, [&] {
        m.reseed_dropout(17);
        return weighted_squared_hinge(m.forward(batch, Mode::train), labels, 2.0);
      }));
    }
  }

  const double elapsed = seconds_since(t0);
  return verdict(worst <= kGradTol && elapsed < kGradBudgetS,
                 std::to_string(checks) + " checks, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f s", elapsed));
}

Outcome shapes() {
  std::mt19937_64 rng(1);
  std::string detail;
  bool ok = true;
  for (auto [spec, len] : {std::pair{ModelSpec::stroke_unit(Variant::CNN_LSTM), std::size_t{14400}},
                           std::pair{ModelSpec::apnea_ecg(Variant::CNN_LSTM), std::size_t{18000}}}) {
    Model m(spec);
    data::WindowInstance inst = random_instance(spec, rng);
    const std::vector<data::WindowInstance> one{inst};
    const auto batch = m.make_batch(ptrs(one));
    const auto feats = m.conv_features(batch);
    ok = ok && batch.ecg.shape() == Shape{1, 1, len} && feats.shape() == Shape{1, 16, 180};
    detail += (detail.empty() ? "" : ", ") + std::to_string(len) + " -> " + to_string(feats.shape());
  }
  return verdict(ok, detail);
}

Outcome oracles() {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> small(1, 4);
  double worst = 0.0;
  auto diff = [&worst](const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
      worst = INFINITY;
      return;
    }
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  };

  for (int trial = 0; trial < kOracleTrials; ++trial) {
    const std::size_t n = small(rng), c = small(rng), k = 2 * small(rng) - 1, dil = small(rng);
    const std::size_t pool = small(rng), t = pool * (3 + small(rng) * 3);
    const auto x = randn({n, c, t}, rng);
    const auto w = randn({c, k}, rng);
    diff(depthwise_conv1d(Var(x), Var(w), dil).value().vector(),
         testing::naive_depthwise(x.vector(), n, c, t, w.vector(), k, dil));
    const std::size_t cout = small(rng);
    const auto pw = randn({cout, c}, rng), pb = randn({cout}, rng);
    diff(pointwise_conv1d(Var(x), Var(pw), Var(pb)).value().vector(),
         testing::naive_pointwise(x.vector(), n, c, t, pw.vector(), pb.vector(), cout));
    diff(avg_pool1d(Var(x), pool).value().vector(), testing::naive_avg_pool(x.vector(), n * c, t, pool));

    const std::size_t f = small(rng), h = small(rng), steps = small(rng);
    const auto xs = randn({n, steps, f}, rng);
    const auto w_ih = randn({4 * h, f}, rng), w_hh = randn({4 * h, h}, rng), b = randn({4 * h}, rng);
    const auto y = lstm(Var(xs), Var(w_ih), Var(w_hh), Var(b), false).value().vector();
    std::vector<double> ref;
    for (std::size_t s = 0; s < n; ++s) {
      std::vector<double> hs(h, 0.0), cs(h, 0.0);
      for (std::size_t j = 0; j < steps; ++j) {
        std::vector<double> xt(xs.data() + (s * steps + j) * f, xs.data() + (s * steps + j + 1) * f);
        testing::lstm_cell(xt, hs, cs, w_ih.vector(), w_hh.vector(), b.vector());
        ref.insert(ref.end(), hs.begin(), hs.end());
      }
    }
    diff(y, ref);
  }

  std::size_t count_mismatch = 0, auc_mismatch = 0;
  std::uniform_int_distribution<int> len(2, 60), level(0, 6);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < kOracleTrials; ++trial) {
    const auto n = static_cast<std::size_t>(len(rng));
    std::vector<bool> pred(n), truth(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = coin(rng);
      truth[i] = coin(rng);
      s[i] = level(rng) * 0.5 - 1.0;
    }
    truth[0] = true;
    truth[1] = false;
    const auto c = score::confusion_counts(pred, truth);
    const auto o = testing::brute_counts(pred, truth);
    if (c.tp != o.tp || c.fp != o.fp || c.tn != o.tn || c.fn != o.fn) ++count_mismatch;
    if (score::auc(s, truth) != testing::brute_auc(s, truth)) ++auc_mismatch;
  }
  return verdict(worst <= kOracleTol && count_mismatch == 0 && auc_mismatch == 0,
                 std::to_string(kOracleTrials) + " trials per oracle, max float diff " + fmt("%.1e", worst) +
                     ", count mismatches " + std::to_string(count_mismatch) + ", auc mismatches " +
                     std::to_string(auc_mismatch));
}

Outcome learnability() {
  const auto t0 = std::chrono::steady_clock::now();
  synth::SyntheticConfig sc;
  sc.duration_s = 1200.0;
  const auto recs = synth::generate_corpus(8, sc, 7);
  const auto split = data::split_by_patient(recs, 2, 7);
  std::vector<data::PreparedRecording> train_recs, held_out;
  for (const auto& r : recs) {
    const bool test = std::count(split.validation.begin(), split.validation.end(), r.patient_id) > 0;
    (test ? held_out : train_recs).push_back(data::prepare_recording(r, {}));
  }

  auto spec = ModelSpec::stroke_unit(Variant::CNN_LSTM_SPO2);
  spec.seed = 7;
  Model model(spec);
  auto cfg = train::TrainConfig::stroke();
  cfg.epochs = 20;
  cfg.max_epochs = 20;
  cfg.batch_size = 16;
  cfg.seed = 7;
  const auto train_set = score::gather_instances(train_recs);
  train::train(model, train_set, {}, cfg);

  std::vector<score::PatientReport> reports;
  for (const auto& p : held_out) reports.push_back(score::per_patient_report(score::model_scorer(model), p));
  const auto pooled = score::pool_reports(reports);
  const double elapsed = seconds_since(t0);
  return verdict(pooled.metrics.f1 >= kSynthF1 && pooled.auc >= kSynthAuc && elapsed < kSynthBudgetS,
                 "held out " + split.validation[0] + "," + split.validation[1] + ": F1 " +
                     fmt("%.4f", pooled.metrics.f1) + ", AUC " + fmt("%.4f", pooled.auc) + ", " +
                     fmt("%.0f s", elapsed));
}

Outcome scoring_chain() {
  std::size_t mismatches = 0;
  for (const auto& rec : prepared_corpus(4, 1800.0, 41)) {
    const auto r = score::per_patient_report(score::oracle_scorer(), rec);
    const double expected = static_cast<double>(rec.events.size()) / r.kept_hours;
    if (r.ahi_pred != expected || r.ahi_true != expected || r.metrics.f1 != 1.0 ||
        r.events_pred.size() != rec.events.size())
      ++mismatches;
  }

  struct Row {
    double ahi;
    score::Severity cls;
  };
  using S = score::Severity;
  // (AHI, class) pairs, true and predicted, for the 30 reported patients.
  const Row table[] = {
      {40, S::severe},   {41, S::severe},   {10, S::mild},     {21, S::moderate}, {63, S::severe},
      {64, S::severe},   {10, S::mild},     {5, S::mild},      {35, S::severe},   {18, S::moderate},
      {58, S::severe},   {30, S::severe},   {30, S::severe},   {21, S::moderate}, {1, S::none},
      {3, S::none},      {8, S::mild},      {12, S::mild},     {41, S::severe},   {51, S::severe},
      {4, S::none},      {4, S::none},      {4, S::none},      {7, S::mild},      {26, S::moderate},
      {31, S::severe},   {9, S::mild},      {14, S::mild},     {43, S::severe},   {20, S::moderate},
      {37, S::severe},   {44, S::severe},   {28, S::moderate}, {33, S::severe},   {4, S::none},
      {1, S::none},      {10, S::mild},     {7, S::mild},      {48, S::severe},   {35, S::severe},
      {28, S::moderate}, {31, S::severe},   {2, S::none},      {2, S::none},      {0, S::none},
      {0, S::none},      {21, S::moderate}, {22, S::moderate}, {44, S::severe},   {22, S::moderate},
      {60, S::severe},   {57, S::severe},   {9, S::mild},      {11, S::mild},     {13, S::mild},
      {8, S::mild},      {4, S::none},      {6, S::mild},      {73, S::severe},   {39, S::severe},
  };
  std::size_t class_errors = 0;
  for (const auto& row : table)
    if (score::ahi_class(row.ahi) != row.cls) ++class_errors;
  return verdict(mismatches == 0 && class_errors == 0,
                 "oracle patients with mismatch " + std::to_string(mismatches) + ", table pairs wrong " +
                     std::to_string(class_errors) + "/" + std::to_string(std::size(table)));
}

// Every maximal run of strict exceedances, kept iff at least min_s long.
score::EventList enumerate_events(const std::vector<double>& probs, double tau, std::int64_t min_s) {
  score::EventList out;
  const auto n = static_cast<std::int64_t>(probs.size());
  auto above = [&](std::int64_t i) { return i >= 0 && i < n && probs[static_cast<std::size_t>(i)] > tau; };
  for (std::int64_t a = 0; a < n; ++a)
    for (std::int64_t b = a + 1; b <= n; ++b) {
      bool all = true;
      for (std::int64_t i = a; i < b && all; ++i) all = above(i);
      if (all && !above(a - 1) && !above(b) && b - a >= min_s) out.push_back({a, b});
    }
  return out;
}

Outcome post_processing() {
  const double tau = 0.5875;
  const double edge = std::log(tau / (1.0 - tau));
  std::mt19937_64 rng(61);
  std::uniform_int_distribution<int> run_len(1, 16);
  std::uniform_real_distribution<double> high(0.0, 4.0), low(-4.0, 0.0);
  std::size_t mismatches = 0, events = 0;
  for (int seq = 0; seq < 20; ++seq) {
    std::vector<double> s;
    bool on = seq % 2 == 0;
    while (s.size() < 120) {
      // Lengths 9, 10 and 11 sit on the filter boundary; values near the
      // threshold logit probe the strict comparison.
      const int len = seq < 10 ? 9 + static_cast<int>(s.size() / 10) % 3 : run_len(rng);
      for (int i = 0; i < len; ++i) {
        double v = on ? edge + high(rng) : edge + low(rng);
        if (i == 0 && seq % 3 == 0) v = on ? edge + 1e-9 : edge - 1e-9;
        s.push_back(v);
      }
      on = !on;
    }
    const auto probs = score::scores_to_probs(s);
    const auto got = score::filter_short_events(score::extract_events(score::threshold_probs(probs, tau)), 10);
    const auto want = enumerate_events(probs, tau, 10);
    if (got != want) ++mismatches;
    events += want.size();
  }
  return verdict(mismatches == 0,
                 "20 sequences, " + std::to_string(events) + " events, mismatches " + std::to_string(mismatches));
}

Outcome cv_hygiene() {
  const auto recs = prepared_corpus(4, 300.0, 24);
  auto cfg = train::TrainConfig::stroke();
  cfg.epochs = 1;
  cfg.max_epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = 3;
  score::CvOptions opt;
  const auto cv = score::loocv(recs, ModelSpec::stroke_unit(Variant::CNN_LSTM_SPO2), cfg, opt);
  bool disjoint = cv.folds.size() == recs.size();
  score::Confusion sum;
  for (const auto& f : cv.folds) {
    const std::set<std::string> tr(f.train_patients.begin(), f.train_patients.end());
    disjoint = disjoint && !tr.contains(f.test_patient) && tr.size() == recs.size() - 1;
    sum += f.report.confusion;
  }
  const auto m = score::metrics(sum);
  const auto& p = cv.summary.metrics;
  const bool pooled = cv.summary.confusion == sum && p.sens == m.sens && p.spec == m.spec && p.prec == m.prec &&
                      p.acc == m.acc && p.f1 == m.f1;
  return verdict(disjoint && pooled, std::to_string(cv.folds.size()) + " folds, disjoint " +
                                         (disjoint ? "yes" : "no") + ", pooled equal " + (pooled ? "yes" : "no"));
}

Outcome apnea_ecg() {
  const char* dir = std::getenv("APNEA_ECG_DIR");
  if (dir == nullptr || *dir == '\0') return {Status::skip, "APNEA_ECG_DIR not set"};
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = RunConfig::defaults("apnea_ecg");
  cfg.variant = Variant::CNN_LSTM;
  cfg.train.epochs = 40;
  cfg.train.max_epochs = 40;
  const auto imported = data::import_apnea_ecg(dir);
  std::vector<data::PreparedRecording> train_recs, test_recs;
  for (const auto& r : imported.recordings)
    (r.patient_id.starts_with("x") ? test_recs : train_recs).push_back(data::prepare_recording(r, cfg.preprocess));
  if (train_recs.empty() || test_recs.empty()) return {Status::fail, "import lacks a train or test split"};

  Model model(cfg.model_spec());
  train::train(model, score::gather_instances(train_recs), {}, cfg.train);
  std::vector<score::PatientReport> reports;
  for (const auto& p : test_recs) reports.push_back(score::per_patient_report(score::model_scorer(model), p));
  const auto pooled = score::pool_reports(reports);
  return verdict(pooled.metrics.acc >= kEcgSegmentAcc && pooled.osa_accuracy >= kEcgOsaAcc,
                 std::to_string(train_recs.size()) + "/" + std::to_string(test_recs.size()) + " records, acc " +
                     fmt("%.4f", pooled.metrics.acc) + ", OSA acc " + fmt("%.4f", pooled.osa_accuracy) + ", " +
                     fmt("%.0f s", seconds_since(t0)));
}

} // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"1 gradient correctness", gradients},      {"2 downsampling shapes", shapes},
      {"3 oracle equivalence", oracles},          {"4 synthetic learnability", learnability},
      {"5 scoring chain and classes", scoring_chain}, {"6 post-processing", post_processing},
      {"7 cross-validation hygiene", cv_hygiene}, {"8 Apnea-ECG reduced run", apnea_ecg},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {Status::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
    if (o.status == Status::fail) ++failures;
    std::printf("%s  %-30s %s\n", tag, name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
