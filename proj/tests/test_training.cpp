#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "apnea/errors.hpp"
#include "apnea/training.hpp"
#include "tempdir.hpp"

using namespace apnea;
using namespace apnea::train;
using nn::Tensor;

namespace {

nn::ModelSpec toy_spec() {
  nn::ModelSpec s;
  s.variant = nn::Variant::CNN_LSTM_SPO2;
  s.window_s = 4;
  s.ecg_rate_hz = 4;
  s.output_len = 4;
  s.lstm_hidden = 4;
  s.spo2_hidden = 3;
  s.seed = 5;
  for (int pool : {2, 2}) {
    nn::ConvBlockSpec b;
    b.dilations = {1, 2};
    b.channels = 4;
    b.pool = pool;
    s.blocks.push_back(b);
  }
  return s;
}

// 12-second contexts; anomalous seconds have a damped ECG and a low SpO2 value.
std::vector<data::WindowInstance> planted(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::bernoulli_distribution start(0.25), stay(0.8);
  std::vector<data::WindowInstance> out(n);
  for (auto& inst : out) {
    std::vector<bool> flag(12, false);
    for (std::size_t t = 0; t < 12; ++t) flag[t] = t > 0 && flag[t - 1] ? stay(rng) : start(rng);
    for (std::size_t t = 0; t < 12; ++t) {
      for (std::size_t j = 0; j < 4; ++j) {
        const double carrier = 0.5 + (j == 1 ? 0.45 : -0.1);
        const double amp = flag[t] ? 0.2 : 1.0;
        inst.ecg_ctx.push_back(static_cast<float>(std::clamp(0.5 + amp * (carrier - 0.5) + noise(rng), 0.0, 1.0)));
      }
      inst.spo2_ctx.push_back(static_cast<float>(std::clamp((flag[t] ? 0.3 : 0.9) + noise(rng), 0.0, 1.0)));
    }
    for (std::size_t t = 4; t < 8; ++t) inst.labels.push_back(flag[t] ? 1 : 0);
    inst.patient_id = "p";
  }
  return out;
}

TrainConfig toy_cfg() {
  TrainConfig c;
  c.base_lr = 3e-4;
  c.max_lr = 3e-3;
  c.epochs = 10;
  c.max_epochs = 10;
  c.batch_size = 20;
  c.seed = 9;
  return c;
}

std::vector<std::vector<double>> snapshot(const nn::Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& e : m.parameters().params()) out.push_back(e.var.value().vector());
  return out;
}

} // namespace

TEST_CASE("squared hinge examples") {
  auto one = [](double s, double y, double w) {
    const double sv[] = {s}, yv[] = {y};
    return weighted_squared_hinge(sv, yv, w);
  };
  CHECK(one(1.0, 1.0, 1.0) == 0.0);
  CHECK(one(0.0, 1.0, 1.0) == 1.0);
  CHECK(one(-1.0, 1.0, 3.0) == 12.0);
  const double s[] = {2.0, -3.0, 0.5, 0.0}, y[] = {1.0, -1.0, -1.0, 1.0};
  CHECK(weighted_squared_hinge(s, y, 2.0) == doctest::Approx((0.0 + 0.0 + 2.25 + 2.0) / 4.0));
  const double bad[] = {0.5};
  CHECK_THROWS_AS(weighted_squared_hinge(s, bad, 1.0), Error);
  const double zero[] = {0.0};
  CHECK_THROWS_AS(weighted_squared_hinge(bad, zero, 1.0), InputError);
  const double nan[] = {std::numeric_limits<double>::quiet_NaN()}, pos[] = {1.0};
  CHECK(std::isnan(weighted_squared_hinge(nan, pos, 1.0)));
}

TEST_CASE("adam update") {
  std::vector<double> p{1.0}, g{1.0}, m{0.0}, v{0.0};
  adam_update(p, g, m, v, 1, {0.1, 0.9, 0.999, 1e-8});
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-9));

  std::vector<double> q{0.3, -2.0}, zg{0.0, 0.0}, m2{0.0, 0.0}, v2{0.0, 0.0};
  adam_update(q, zg, m2, v2, 1, {0.1, 0.9, 0.999, 1e-8});
  CHECK(q == std::vector<double>{0.3, -2.0});

  // Second step against a hand-computed update.
  std::vector<double> r{0.0}, g1{2.0}, mr{0.0}, vr{0.0};
  adam_update(r, g1, mr, vr, 1, {0.01, 0.9, 0.999, 1e-8});
  std::vector<double> g2{-1.0};
  const double before = r[0];
  adam_update(r, g2, mr, vr, 2, {0.01, 0.9, 0.999, 1e-8});
  const double m_ = 0.9 * 0.2 + 0.1 * -1.0, v_ = 0.999 * 0.004 + 0.001 * 1.0;
  const double mhat = m_ / (1 - 0.81), vhat = v_ / (1 - 0.999 * 0.999);
  CHECK(r[0] - before == doctest::Approx(-0.01 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("one-cycle schedule") {
  const auto cfg = TrainConfig::stroke();
  CHECK(one_cycle(0, 100, cfg).lr == doctest::Approx(3e-4).epsilon(1e-15));
  CHECK(one_cycle(0, 100, cfg).momentum == doctest::Approx(cfg.max_momentum));
  CHECK(one_cycle(30, 100, cfg).lr == doctest::Approx(cfg.max_lr).epsilon(1e-15));
  CHECK(one_cycle(30, 100, cfg).momentum == doctest::Approx(cfg.base_momentum).epsilon(1e-15));
  CHECK(one_cycle(99, 100, cfg).lr < cfg.base_lr);
  CHECK(one_cycle(99, 100, cfg).lr >= cfg.base_lr * 1e-2);
  CHECK_THROWS_AS(one_cycle(100, 100, cfg), InputError);

  const std::uint64_t total = 1000;
  const double bound = 2 * (cfg.max_lr - cfg.base_lr) / (0.3 * total);
  for (std::uint64_t s = 0; s + 1 < total; ++s) {
    const auto a = one_cycle(s, total, cfg), b = one_cycle(s + 1, total, cfg);
    if (s < 300) {
      CHECK(b.lr >= a.lr);
      CHECK(b.lr - a.lr <= bound);
      CHECK(b.momentum <= a.momentum);
    } else {
      CHECK(b.lr <= a.lr);
      CHECK(b.momentum >= a.momentum);
    }
  }
}

TEST_CASE("gradient clipping") {
  Tensor a({2}, std::vector<double>{0.3, 0.4});
  Tensor b({1}, std::vector<double>{0.0});
  std::vector<Tensor*> small{&a, &b};
  CHECK(clip_gradients(small, 1.0) == doctest::Approx(0.5));
  CHECK(a.vector() == std::vector<double>{0.3, 0.4});

  Tensor c({3}, std::vector<double>{2.0, 2.0, 2.0});
  Tensor d({1}, std::vector<double>{2.0});
  std::vector<Tensor*> big{&c, &d};
  CHECK(clip_gradients(big, 1.0) == doctest::Approx(4.0));
  double sq = 0.0;
  for (auto* t : big)
    for (double x : t->values()) sq += x * x;
  CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-15));
  // Direction preserved: every component scaled by the same factor.
  for (double x : c.values()) CHECK(x == doctest::Approx(0.5));
  CHECK(d[0] == doctest::Approx(0.5));
  CHECK_THROWS_AS(clip_gradients(big, 0.0), InputError);
}

TEST_CASE("batch layout") {
  CHECK(batch_sizes(10, 4) == std::vector<std::size_t>{4, 4, 2});
  CHECK(batch_sizes(9, 4) == std::vector<std::size_t>{4, 5});
  CHECK(batch_sizes(8, 4) == std::vector<std::size_t>{4, 4});
  CHECK(batch_sizes(3, 32) == std::vector<std::size_t>{3});
}

TEST_CASE("config validation and presets") {
  CHECK(TrainConfig::apnea_ecg().max_lr == 1e-1);
  CHECK(TrainConfig::apnea_ecg().epochs == 239);
  CHECK(TrainConfig::apnea_ecg().max_epochs == 300);
  CHECK(TrainConfig::apnea_ecg().base_momentum == 0.85);
  CHECK(TrainConfig::stroke().max_lr == 1e-2);
  CHECK(TrainConfig::stroke().epochs == 191);
  CHECK(TrainConfig::stroke().max_momentum == 0.99);
  auto c = toy_cfg();
  c.base_lr = c.max_lr;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_cfg();
  c.epochs = c.max_epochs + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_cfg();
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_cfg();
  c.base_momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("class weight from inverse frequency") {
  std::vector<data::WindowInstance> set(10);
  for (std::size_t i = 0; i < set.size(); ++i) set[i].labels.assign(10, i == 0 ? 1 : 0);
  CHECK(inverse_frequency_weight(set) == 9.0);
  for (auto& s : set) s.labels.assign(10, 0);
  CHECK(inverse_frequency_weight(set) == 1.0);
}

TEST_CASE("zero epochs leave the initialization untouched") {
  nn::Model m(toy_spec());
  const auto before = snapshot(m);
  auto cfg = toy_cfg();
  cfg.epochs = 0;
  const auto set = planted(10, 1);
  const auto r = train::train(m, set, {}, cfg);
  CHECK(r.history.empty());
  CHECK(r.steps == 0);
  CHECK(snapshot(m) == before);
}

TEST_CASE("training lowers the loss on a planted signature and is reproducible") {
  const auto set = planted(200, 2);
  const auto val = planted(40, 3);
  nn::Model a(toy_spec()), b(toy_spec());
  const auto ra = train::train(a, set, val, toy_cfg());
  const auto rb = train::train(b, set, val, toy_cfg());
  REQUIRE(ra.history.size() == 10);
  for (std::size_t e = 1; e < ra.history.size(); ++e) {
    CAPTURE(e);
    CHECK(ra.history[e].train_loss < ra.history[e - 1].train_loss);
  }
  CHECK(ra.history.back().val_auc > 0.95);
  CHECK(snapshot(a) == snapshot(b));
  for (std::size_t e = 0; e < ra.history.size(); ++e) CHECK(ra.history[e].train_loss == rb.history[e].train_loss);
  CHECK(ra.steps == 10 * 10);

  const auto scores = predict_scores(a, val, 7);
  REQUIRE(scores.size() == val.size());
  CHECK(scores[3] == a.predict(val[3]));

  apnea::testing::TempDir dir;
  write_history_csv(dir / "h.csv", ra.history);
  const auto text = apnea::testing::read_text(dir / "h.csv");
  CHECK(text.rfind("epoch,train_loss,val_f1,val_auc,lr\n1,", 0) == 0);
}

TEST_CASE("non-finite loss aborts training") {
  auto set = planted(8, 4);
  set[0].ecg_ctx[5] = std::numeric_limits<float>::quiet_NaN();
  nn::Model m(toy_spec());
  auto cfg = toy_cfg();
  cfg.batch_size = 8;
  CHECK_THROWS_AS(train::train(m, set, {}, cfg), DivergenceError);
}

TEST_CASE("training rejects unusable inputs") {
  nn::Model m(toy_spec());
  CHECK_THROWS_AS(train::train(m, {}, {}, toy_cfg()), InputError);
  auto set = planted(4, 5);
  set[1].labels.push_back(0);
  CHECK_THROWS(train::train(m, set, {}, toy_cfg()));
}
