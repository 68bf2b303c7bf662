#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "apnea/errors.hpp"
#include "apnea/model.hpp"
#include "gradcheck.hpp"
#include "tempdir.hpp"

using namespace apnea;
using namespace apnea::nn;
using apnea::testing::TempDir;

namespace {

data::WindowInstance random_instance(const ModelSpec& spec, std::mt19937_64& rng, bool spo2 = true) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  data::WindowInstance inst;
  inst.ecg_ctx.resize(spec.ecg_input_len());
  for (auto& v : inst.ecg_ctx) v = u(rng);
  if (spo2) {
    inst.spo2_ctx.resize(spec.sequence_len());
    for (auto& v : inst.spo2_ctx) v = u(rng);
    inst.spo2_ctx[0] = -1.0f;
  }
  inst.labels.assign(static_cast<std::size_t>(spec.output_len), 0);
  return inst;
}

std::vector<const data::WindowInstance*> ptrs(const std::vector<data::WindowInstance>& v) {
  std::vector<const data::WindowInstance*> out;
  for (const auto& i : v) out.push_back(&i);
  return out;
}

// T = 3 * 4 s * 4 Hz = 48 ECG samples, 12 steps, at most 4 channels.
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

} // namespace

TEST_CASE("assembled models downsample to one step per second") {
  std::mt19937_64 rng(1);
  for (auto [spec, len] : {std::pair{ModelSpec::stroke_unit(Variant::CNN_LSTM), 14400u},
                           std::pair{ModelSpec::apnea_ecg(Variant::CNN_LSTM), 18000u}}) {
    CHECK(spec.ecg_input_len() == len);
    Model m(spec);
    const std::vector<data::WindowInstance> one{random_instance(spec, rng, false)};
    const auto batch = m.make_batch(ptrs(one));
    CHECK(batch.ecg.shape() == Shape{1, 1, len});
    const auto feats = m.conv_features(batch);
    CHECK(feats.shape() == Shape{1, 16, 180});
    CHECK(m.predict(batch).shape() == Shape{1, static_cast<std::size_t>(spec.output_len)});
  }
  CHECK(ModelSpec::stroke_unit(Variant::CNN_LSTM).output_len == 60);
  CHECK(ModelSpec::apnea_ecg(Variant::CNN_LSTM).output_len == 1);
}

TEST_CASE("every variant yields finite scores of the right length") {
  std::mt19937_64 rng(2);
  for (auto v : {Variant::CNN_DENSE, Variant::CNN_LSTM, Variant::SPO2_BILSTM, Variant::CNN_LSTM_SPO2}) {
    const auto spec = ModelSpec::stroke_unit(v);
    const Model m(spec);
    const auto scores = m.predict(random_instance(spec, rng));
    REQUIRE(scores.size() == 60);
    for (double s : scores) CHECK(std::isfinite(s));
  }
}

TEST_CASE("spec validation") {
  auto s = ModelSpec::stroke_unit(Variant::CNN_LSTM);
  s.blocks[1].pool = 5;
  CHECK_THROWS_AS(s.validate(), SpecError);
  CHECK_THROWS_AS(Model{s}, SpecError);
  s = ModelSpec::stroke_unit(Variant::CNN_LSTM);
  s.blocks[0].kernel = 4;
  CHECK_THROWS_AS(s.validate(), SpecError);
  s = ModelSpec::stroke_unit(Variant::CNN_LSTM);
  s.output_len = 7;
  CHECK_THROWS_AS(s.validate(), SpecError);
  CHECK_NOTHROW(ModelSpec::apnea_ecg(Variant::CNN_DENSE).validate());

  const auto text = toy_spec(Variant::CNN_LSTM_SPO2, 4).serialize();
  const auto back = ModelSpec::deserialize(text);
  CHECK(back.serialize() == text);
  CHECK(back.blocks.size() == 2);
  CHECK(back.blocks[0].dilations == std::vector<int>{1, 2});
}

TEST_CASE("initialization is deterministic in the seed") {
  const auto spec = ModelSpec::stroke_unit(Variant::CNN_LSTM_SPO2);
  const Model a(spec), b(spec);
  CHECK(a.parameters().parameter_count() == b.parameters().parameter_count());
  REQUIRE(a.parameters().params().size() == b.parameters().params().size());
  for (std::size_t i = 0; i < a.parameters().params().size(); ++i) {
    CHECK(a.parameters().params()[i].name == b.parameters().params()[i].name);
    CHECK(a.parameters().params()[i].var.value().vector() == b.parameters().params()[i].var.value().vector());
  }
  auto other = spec;
  other.seed = 99;
  const Model c(other);
  CHECK(c.parameters().params()[0].var.value().vector() != a.parameters().params()[0].var.value().vector());
}

TEST_CASE("eval forward is pure and batch-invariant") {
  std::mt19937_64 rng(3);
  const auto spec = ModelSpec::stroke_unit(Variant::CNN_LSTM_SPO2);
  const Model m(spec);
  const std::vector<data::WindowInstance> insts{random_instance(spec, rng), random_instance(spec, rng),
                                                random_instance(spec, rng)};
  const auto batch = m.make_batch(ptrs(insts));
  const auto all = m.predict(batch);
  CHECK(m.predict(batch).vector() == all.vector());
  for (std::size_t i = 0; i < insts.size(); ++i) {
    const auto one = m.predict(insts[i]);
    for (std::size_t t = 0; t < 60; ++t) CHECK(std::abs(one[t] - all[i * 60 + t]) <= 1e-9);
  }
}

TEST_CASE("batch assembly checks shapes and channels") {
  std::mt19937_64 rng(4);
  const auto spec = toy_spec(Variant::CNN_LSTM_SPO2, 4);
  const Model m(spec);
  std::vector<data::WindowInstance> no_spo2{random_instance(spec, rng, false)};
  CHECK_THROWS_AS(m.make_batch(ptrs(no_spo2)), ConfigError);
  std::vector<data::WindowInstance> short_ecg{random_instance(spec, rng)};
  short_ecg[0].ecg_ctx.pop_back();
  CHECK_THROWS_AS(m.make_batch(ptrs(short_ecg)), ShapeError);
}

TEST_CASE("residual path carries the input when series weights are zero") {
  ModelSpec s;
  s.variant = Variant::CNN_LSTM;
  s.window_s = 4;
  s.ecg_rate_hz = 4;
  s.output_len = 4;
  ConvBlockSpec b;
  b.dilations = {1, 2};
  b.channels = 3;
  b.pool = 4;
  s.blocks = {b};
  Model m(s);
  for (auto& e : m.parameters().params()) {
    if (e.name.find(".series") != std::string::npos) e.var.mutable_value().fill(0.0);
    if (e.name == "block0.proj.weight") e.var.mutable_value().fill(1.0);
    if (e.name == "block0.proj.bias") e.var.mutable_value().fill(0.0);
  }
  std::mt19937_64 rng(5);
  const std::vector<data::WindowInstance> one{random_instance(s, rng, false)};
  const auto feats = m.conv_features(m.make_batch(ptrs(one)));
  REQUIRE(feats.shape() == Shape{1, 3, 12});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 12; ++t) {
      double mean = 0.0;
      for (std::size_t j = 0; j < 4; ++j) mean += one[0].ecg_ctx[t * 4 + j];
      CHECK(feats[c * 12 + t] == doctest::Approx(mean / 4.0).epsilon(1e-12));
    }
}

TEST_CASE("model gradients match finite differences at toy scale") {
  std::mt19937_64 rng(6);
  for (auto v : {Variant::CNN_DENSE, Variant::CNN_LSTM, Variant::SPO2_BILSTM, Variant::CNN_LSTM_SPO2}) {
    for (int out_len : {4, 1}) {
      CAPTURE(to_string(v));
      CAPTURE(out_len);
      const auto spec = toy_spec(v, out_len);
      Model m(spec);
      const std::vector<data::WindowInstance> insts{random_instance(spec, rng), random_instance(spec, rng)};
      const auto batch = m.make_batch(ptrs(insts));
      Tensor labels({2, static_cast<std::size_t>(out_len)});
      for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 3 == 0 ? 1.0 : -1.0;
      std::vector<Var> inputs;
      for (auto& e : m.parameters().params()) inputs.push_back(e.var);
      const auto r = apnea::testing::gradcheck(inputs, [&] {
        m.reseed_dropout(17);
        return weighted_squared_hinge(m.forward(batch, Mode::train), labels, 2.0);
      });
      CHECK(r.checked == m.parameters().parameter_count());
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("model backward needs a taped forward") {
  Model m(toy_spec(Variant::CNN_LSTM, 4));
  CHECK_THROWS_AS(m.backward(Var(Tensor({1}, 0.0), true)), StateError);
  std::mt19937_64 rng(7);
  const std::vector<data::WindowInstance> insts{random_instance(m.spec(), rng), random_instance(m.spec(), rng)};
  const auto out = m.forward(m.make_batch(ptrs(insts)), Mode::train);
  m.backward(weighted_squared_hinge(out, Tensor(out.shape(), 1.0), 1.0));
  for (const auto& e : m.parameters().params()) CHECK_FALSE(e.var.grad().empty());
  CHECK_THROWS_AS(m.backward(weighted_squared_hinge(out, Tensor(out.shape(), 1.0), 1.0)), StateError);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  TempDir dir;
  std::mt19937_64 rng(8);
  auto spec = toy_spec(Variant::CNN_LSTM_SPO2, 4);
  Model m(spec);
  // Move the running statistics away from their initial values.
  const std::vector<data::WindowInstance> insts{random_instance(spec, rng), random_instance(spec, rng)};
  m.forward(m.make_batch(ptrs(insts)), Mode::train);
  save_checkpoint(m, dir / "m.ckpt");
  const auto back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.spec().serialize() == m.spec().serialize());
  REQUIRE(back.parameters().params().size() == m.parameters().params().size());
  for (std::size_t i = 0; i < m.parameters().params().size(); ++i) {
    const auto& a = m.parameters().params()[i].var.value().vector();
    const auto& b = back.parameters().params()[i].var.value().vector();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  }
  for (std::size_t i = 0; i < m.parameters().all_stats().size(); ++i) {
    CHECK(m.parameters().all_stats()[i].stats.running_mean.vector() ==
          back.parameters().all_stats()[i].stats.running_mean.vector());
    CHECK(m.parameters().all_stats()[i].stats.running_var.vector() ==
          back.parameters().all_stats()[i].stats.running_var.vector());
  }
  const auto batch = m.make_batch(ptrs(insts));
  CHECK(m.predict(batch).vector() == back.predict(batch).vector());

  // Saving the reloaded model reproduces the file byte for byte.
  save_checkpoint(back, dir / "again.ckpt");
  CHECK(apnea::testing::read_text(dir / "m.ckpt") == apnea::testing::read_text(dir / "again.ckpt"));

  const auto bytes = apnea::testing::read_text(dir / "m.ckpt");
  std::ofstream(dir / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 5);
  CHECK_THROWS(load_checkpoint(dir / "cut.ckpt"));
  std::ofstream(dir / "bad.ckpt", std::ios::binary) << "NOTACKPT" << bytes.substr(8);
  CHECK_THROWS(load_checkpoint(dir / "bad.ckpt"));
}
