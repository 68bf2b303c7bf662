#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "apnea/errors.hpp"
#include "apnea/signal.hpp"

using namespace apnea;
using namespace apnea::signal;

namespace {

std::vector<double> sine(double freq, double rate, std::size_t n, double amp = 1.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / rate);
  }
  return x;
}

double peak_after(const std::vector<double>& y, std::size_t skip) {
  double m = 0.0;
  for (std::size_t i = skip; i < y.size(); ++i) {
    m = std::max(m, std::abs(y[i]));
  }
  return m;
}

SignalChannel hr_series(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> v(n);
  double level = 70.0;
  for (auto& x : v) {
    level += noise(rng);
    x = level;
  }
  return SignalChannel::from_samples(v, 1.0);
}

} // namespace

TEST_CASE("bandpass response hits -3 dB at both cutoffs") {
  for (double rate : {80.0, 100.0, 200.0}) {
    const auto f = design_bandpass({}, rate);
    CHECK(f.magnitude(5.0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(f.magnitude(35.0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  }
}

TEST_CASE("bandpass magnitudes match the reference design") {
  // Reference values from an independent bilinear-transform Butterworth design.
  CHECK(design_bandpass({}, 100.0).magnitude(20.0) == doctest::Approx(0.99962460102928707).epsilon(1e-12));
  CHECK(design_bandpass({}, 200.0).magnitude(20.0) == doctest::Approx(0.9940914840030648).epsilon(1e-12));
  CHECK(design_bandpass({}, 200.0).magnitude(50.0) == doctest::Approx(0.30036331050911091).epsilon(1e-12));
}

TEST_CASE("causal filter output matches reference samples") {
  std::vector<double> x(40);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = static_cast<double>(i) / 80.0;
    x[i] = std::sin(2 * std::numbers::pi * 7 * t) + 0.3 * std::cos(2 * std::numbers::pi * 23 * t);
  }
  const double expected[] = {0.17071067811865467, 0.2574686646281137,  0.17443631314302777, 0.40595561931191215,
                             0.12914773958419778, -0.7418695298272132, -0.8185968643567203, -0.4760740835432895,
                             -0.6166229723921384, -0.44163134671073945, 0.48200286674750614, 0.897035827073363};
  const auto y = design_bandpass({}, 80.0).apply(x);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(y[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  }
}

TEST_CASE("sinusoids: 20 Hz passes at 100 Hz, 50 Hz is attenuated at 200 Hz") {
  const auto pass = design_bandpass({}, 100.0).apply(sine(20, 100, 4000));
  CHECK(std::abs(peak_after(pass, 1000) - 1.0) < 0.05);
  const auto stop = design_bandpass({}, 200.0).apply(sine(50, 200, 8000));
  const double db = 20 * std::log10(peak_after(stop, 2000));
  CHECK(db <= -6.0);
}

TEST_CASE("DC input decays to zero") {
  const auto y = design_bandpass({}, 80.0).apply(std::vector<double>(2000, 1.0));
  CHECK(peak_after(y, 1500) < 1e-6);
}

TEST_CASE("filter is linear") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> a(500), b(500), mix(500);
  for (std::size_t i = 0; i < 500; ++i) {
    a[i] = n(rng);
    b[i] = n(rng);
    mix[i] = 2.5 * a[i] - 0.7 * b[i];
  }
  const auto f = design_bandpass({}, 80.0);
  const auto ya = f.apply(a), yb = f.apply(b), ym = f.apply(mix);
  for (std::size_t i = 0; i < 500; ++i) {
    CHECK(std::abs(ym[i] - (2.5 * ya[i] - 0.7 * yb[i])) < 1e-9);
  }
}

TEST_CASE("invalid bandpass specs are rejected") {
  CHECK_THROWS_AS(design_bandpass({2, 5, 40}, 80.0), SpecError);
  CHECK_THROWS_AS(design_bandpass({2, 35, 5}, 80.0), SpecError);
  CHECK_THROWS_AS(design_bandpass({0, 5, 35}, 80.0), SpecError);
}

TEST_CASE("segments are filtered independently and short ones become missing") {
  auto x = sine(10, 80, 2000);
  for (std::size_t i = 1000; i < 1010; ++i) {
    x[i] = std::numeric_limits<double>::quiet_NaN();
  }
  // A 30-sample island is shorter than the one-second warm-up.
  for (std::size_t i = 1040; i < 1050; ++i) {
    x[i] = std::numeric_limits<double>::quiet_NaN();
  }
  const auto ch = SignalChannel::from_samples(x, 80.0);
  CHECK(warmup_samples({}, 80.0) == 80);
  const auto y = butterworth_bandpass(ch, {});
  REQUIRE(y.size() == ch.size());
  for (std::size_t i = 1000; i < 1050; ++i) {
    CHECK(y.missing[i]);
  }
  CHECK_FALSE(y.missing[999]);
  CHECK_FALSE(y.missing[1050]);

  // The second segment starts from rest, exactly as if filtered alone.
  const auto f = design_bandpass({}, 80.0);
  const auto tail = f.apply(std::span<const double>(x).subspan(1050));
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(y.samples[1050 + i] == doctest::Approx(tail[i]).epsilon(1e-15));
  }
}

TEST_CASE("zero-phase flag runs forward and backward") {
  const auto x = sine(12, 80, 800);
  BandpassSpec spec;
  spec.zero_phase = true;
  const auto y = butterworth_bandpass(SignalChannel::from_samples(x, 80.0), spec);
  const auto expect = design_bandpass(spec, 80.0).apply_zero_phase(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(y.samples[i] == doctest::Approx(expect[i]).epsilon(1e-15));
  }
}

TEST_CASE("minmax normalization") {
  CHECK(minmax_normalize(std::vector<double>{0, 5, 10}) == std::vector<double>{0, 0.5, 1});
  CHECK(minmax_normalize(std::vector<double>{7, 7, 7}) == std::vector<double>{0, 0, 0});
  CHECK(minmax_normalize(std::vector<double>{-2, 0, 2}) == std::vector<double>{0, 0.5, 1});
  const std::vector<double> unit{0, 0.25, 1, 0.5};
  CHECK(minmax_normalize(unit) == unit);
  const auto nan = std::numeric_limits<double>::quiet_NaN();
  const auto masked = minmax_normalize(std::vector<double>{nan, 2, 4}, {true, false, false});
  CHECK(std::isnan(masked[0]));
  CHECK(masked[1] == 0.0);
  CHECK(masked[2] == 1.0);
  CHECK_THROWS_AS(minmax_normalize(std::vector<double>{nan, nan}), InputError);
}

TEST_CASE("missing encoding") {
  CHECK(encode_missing(std::vector<double>{0.2, 0.4}, {false, true}) == std::vector<double>{0.2, -1.0});
  CHECK(encode_missing(std::vector<double>{0.2, 0.4}, {false, false}) == std::vector<double>{0.2, 0.4});
  CHECK(encode_missing(std::vector<double>{0.2, 0.4}, {true, true}) == std::vector<double>{-1.0, -1.0});
  const std::vector<bool> mask{true, false, true};
  const auto once = encode_missing(std::vector<double>{0.1, 0.2, 0.3}, mask);
  CHECK(encode_missing(once, mask) == once);
  CHECK_THROWS_AS(encode_missing(std::vector<double>{0.1}, {true, false}), ShapeError);
}

TEST_CASE("alignment recovers planted lags") {
  const auto a = hr_series(3000, 11);
  CHECK(estimate_alignment_lag(a, a, 60).lag_s == 0);
  for (int k : {-60, -37, -1, 1, 5, 37, 60}) {
    std::vector<double> shifted(a.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t t = 0; t < a.size(); ++t) {
      const long dst = static_cast<long>(t) + k;
      if (dst >= 0 && dst < static_cast<long>(a.size())) {
        shifted[static_cast<std::size_t>(dst)] = a.samples[t];
      }
    }
    const auto r = estimate_alignment_lag(a, SignalChannel::from_samples(shifted, 1.0), 60);
    CHECK(r.lag_s == k);
    CHECK_FALSE(r.low_confidence);
  }
}

TEST_CASE("alignment flags independent noise as low confidence") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> x(2000), y(2000);
  for (std::size_t i = 0; i < 2000; ++i) {
    x[i] = n(rng);
    y[i] = n(rng);
  }
  const auto r = estimate_alignment_lag(SignalChannel::from_samples(x, 1.0), SignalChannel::from_samples(y, 1.0), 30);
  CHECK(r.low_confidence);
  CHECK(r.correlation < kLowConfidenceCorrelation);
}

TEST_CASE("alignment needs enough overlap") {
  const auto a = hr_series(500, 1);
  CHECK_THROWS_AS(estimate_alignment_lag(a, a, 60), AlignmentError);
}
