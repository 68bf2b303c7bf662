#include "apnea/signal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "apnea/errors.hpp"

namespace apnea::signal {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using cplx = std::complex<double>;

} // namespace

SignalChannel SignalChannel::from_samples(std::vector<double> samples, double rate_hz) {
  SignalChannel ch;
  ch.rate_hz = rate_hz;
  ch.missing.resize(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!std::isfinite(samples[i])) {
      ch.missing[i] = true;
      samples[i] = kNaN;
    }
  }
  ch.samples = std::move(samples);
  return ch;
}

std::size_t SignalChannel::missing_count() const noexcept {
  return static_cast<std::size_t>(std::count(missing.begin(), missing.end(), true));
}

void SignalChannel::validate() const {
  if (samples.size() != missing.size()) {
    throw ShapeError("signal channel: samples/mask length mismatch (" + std::to_string(samples.size()) + " vs " +
                     std::to_string(missing.size()) + ")");
  }
  if (!(rate_hz > 0.0) || !std::isfinite(rate_hz)) {
    throw InputError("signal channel: sampling rate must be positive");
  }
}

std::complex<double> SosFilter::response(double freq_hz) const {
  const double w = 2.0 * std::numbers::pi * freq_hz / rate_hz_;
  const cplx z1 = std::polar(1.0, -w);
  const cplx z2 = z1 * z1;
  cplx h{1.0, 0.0};
  for (const auto& s : sections_) {
    h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  }
  return h;
}

std::vector<double> SosFilter::apply(std::span<const double> x) const {
  std::vector<double> y(x.begin(), x.end());
  for (const auto& s : sections_) {
    double s1 = 0.0, s2 = 0.0;
    for (double& v : y) {
      const double in = v;
      const double out = s.b0 * in + s1;
      s1 = s.b1 * in - s.a1 * out + s2;
      s2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
  return y;
}

std::vector<double> SosFilter::apply_zero_phase(std::span<const double> x) const {
  auto y = apply(x);
  std::reverse(y.begin(), y.end());
  y = apply(y);
  std::reverse(y.begin(), y.end());
  return y;
}

SosFilter design_bandpass(const BandpassSpec& spec, double rate_hz) {
  if (spec.order < 1) {
    throw SpecError("bandpass: order must be >= 1");
  }
  const double nyquist = rate_hz / 2.0;
  if (!(spec.low_hz > 0.0) || !(spec.low_hz < spec.high_hz) || !(spec.high_hz < nyquist)) {
    throw SpecError("bandpass: need 0 < low (" + std::to_string(spec.low_hz) + ") < high (" +
                    std::to_string(spec.high_hz) + ") < Nyquist (" + std::to_string(nyquist) + ")");
  }

  const int n = spec.order;
  const double fs2 = 2.0 * rate_hz;
  const double w1 = fs2 * std::tan(std::numbers::pi * spec.low_hz / rate_hz);
  const double w2 = fs2 * std::tan(std::numbers::pi * spec.high_hz / rate_hz);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;

  // Analog lowpass prototype -> analog bandpass poles.
  std::vector<cplx> analog_poles;
  analog_poles.reserve(2 * static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double theta = std::numbers::pi * (2.0 * k + n + 1.0) / (2.0 * n);
    const cplx p_lp = std::polar(1.0, theta) * (bw / 2.0);
    const cplx disc = std::sqrt(p_lp * p_lp - w0sq);
    analog_poles.push_back(p_lp + disc);
    analog_poles.push_back(p_lp - disc);
  }

  // Bilinear transform. The n analog zeros at s=0 land on z=+1, the n zeros
  // at infinity on z=-1.
  cplx denom{1.0, 0.0};
  std::vector<cplx> poles;
  for (const auto& p : analog_poles) {
    poles.push_back((fs2 + p) / (fs2 - p));
    denom *= (fs2 - p);
  }
  const double gain = (std::pow(bw, n) * std::pow(fs2, n) / denom).real();

  // Pair complex poles with their conjugates, leftover real poles with each other.
  constexpr double kImagTol = 1e-12;
  std::vector<Biquad> sections;
  std::vector<double> real_poles;
  for (const auto& p : poles) {
    if (p.imag() > kImagTol) {
      Biquad s;
      s.b0 = 1.0;
      s.b1 = 0.0;
      s.b2 = -1.0;
      s.a1 = -2.0 * p.real();
      s.a2 = std::norm(p);
      sections.push_back(s);
    } else if (std::abs(p.imag()) <= kImagTol) {
      real_poles.push_back(p.real());
    }
  }
  std::sort(real_poles.begin(), real_poles.end());
  for (std::size_t i = 0; i + 1 < real_poles.size(); i += 2) {
    Biquad s;
    s.b0 = 1.0;
    s.b1 = 0.0;
    s.b2 = -1.0;
    s.a1 = -(real_poles[i] + real_poles[i + 1]);
    s.a2 = real_poles[i] * real_poles[i + 1];
    sections.push_back(s);
  }
  if (sections.size() != static_cast<std::size_t>(n)) {
    throw SpecError("bandpass: failed to pair poles into second-order sections");
  }
  sections.front().b0 *= gain;
  sections.front().b1 *= gain;
  sections.front().b2 *= gain;
  return SosFilter(std::move(sections), rate_hz);
}

std::size_t warmup_samples(const BandpassSpec& spec, double rate_hz) {
  const double seconds = std::max(3.0 / spec.low_hz, 1.0);
  return static_cast<std::size_t>(std::ceil(seconds * rate_hz));
}

SignalChannel butterworth_bandpass(const SignalChannel& channel, const BandpassSpec& spec) {
  channel.validate();
  const SosFilter filter = design_bandpass(spec, channel.rate_hz);
  const std::size_t warmup = warmup_samples(spec, channel.rate_hz);

  SignalChannel out;
  out.rate_hz = channel.rate_hz;
  out.samples.assign(channel.size(), kNaN);
  out.missing = channel.missing;

  std::size_t i = 0;
  const std::size_t n = channel.size();
  while (i < n) {
    if (channel.missing[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && !channel.missing[j]) {
      ++j;
    }
    const std::span<const double> segment(channel.samples.data() + i, j - i);
    if (segment.size() < warmup) {
      for (std::size_t k = i; k < j; ++k) {
        out.missing[k] = true;
      }
    } else {
      const auto y = spec.zero_phase ? filter.apply_zero_phase(segment) : filter.apply(segment);
      std::copy(y.begin(), y.end(), out.samples.begin() + static_cast<std::ptrdiff_t>(i));
    }
    i = j;
  }
  return out;
}

std::vector<double> minmax_normalize(std::span<const double> values, const std::vector<bool>& missing) {
  if (missing.size() != values.size()) {
    throw ShapeError("minmax_normalize: mask length mismatch");
  }
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (missing[i] || !std::isfinite(values[i])) {
      continue;
    }
    lo = std::min(lo, values[i]);
    hi = std::max(hi, values[i]);
    any = true;
  }
  if (!any) {
    throw InputError("minmax_normalize: no present values");
  }
  std::vector<double> out(values.begin(), values.end());
  const double range = hi - lo;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (missing[i] || !std::isfinite(values[i])) {
      continue;
    }
    out[i] = range > 0.0 ? (values[i] - lo) / range : 0.0;
  }
  return out;
}

std::vector<double> minmax_normalize(std::span<const double> values) {
  std::vector<bool> missing(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    missing[i] = !std::isfinite(values[i]);
  }
  return minmax_normalize(values, missing);
}

std::vector<double> encode_missing(std::span<const double> values, const std::vector<bool>& missing) {
  if (missing.size() != values.size()) {
    throw ShapeError("encode_missing: values/mask length mismatch (" + std::to_string(values.size()) + " vs " +
                     std::to_string(missing.size()) + ")");
  }
  std::vector<double> out(values.begin(), values.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (missing[i]) {
      out[i] = kMissingSentinel;
    }
  }
  return out;
}

AlignmentResult estimate_alignment_lag(const SignalChannel& hr_a, const SignalChannel& hr_b, double max_lag_s) {
  hr_a.validate();
  hr_b.validate();
  if (hr_a.rate_hz != 1.0 || hr_b.rate_hz != 1.0) {
    throw InputError("estimate_alignment_lag: heart-rate series must be sampled at 1 Hz");
  }
  if (!(max_lag_s > 0.0)) {
    throw InputError("estimate_alignment_lag: max_lag_s must be positive");
  }
  const auto max_lag = static_cast<long>(std::floor(max_lag_s));
  const auto na = static_cast<long>(hr_a.size());
  const auto nb = static_cast<long>(hr_b.size());
  if (static_cast<double>(std::min(na, nb)) < 10.0 * max_lag_s) {
    throw AlignmentError("estimate_alignment_lag: overlap of " + std::to_string(std::min(na, nb)) +
                         " s is shorter than 10 x max lag");
  }

  AlignmentResult best;
  bool found = false;
  double best_corr = -std::numeric_limits<double>::infinity();

  // Candidate order 0, -1, +1, -2, +2, ... so a strict '>' keeps the
  // smallest |lag| on ties.
  std::vector<long> lags{0};
  for (long k = 1; k <= max_lag; ++k) {
    lags.push_back(-k);
    lags.push_back(k);
  }
  for (const long l : lags) {
    const long t0 = std::max(0L, -l);
    const long t1 = std::min(na, nb - l);
    auto present = [&](long t) {
      return !hr_a.missing[static_cast<std::size_t>(t)] && !hr_b.missing[static_cast<std::size_t>(t + l)];
    };
    double sa = 0.0, sb = 0.0;
    long count = 0;
    for (long t = t0; t < t1; ++t) {
      if (present(t)) {
        sa += hr_a.samples[static_cast<std::size_t>(t)];
        sb += hr_b.samples[static_cast<std::size_t>(t + l)];
        ++count;
      }
    }
    if (count < 3) {
      continue;
    }
    const double ma = sa / static_cast<double>(count);
    const double mb = sb / static_cast<double>(count);
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (long t = t0; t < t1; ++t) {
      if (present(t)) {
        const double da = hr_a.samples[static_cast<std::size_t>(t)] - ma;
        const double db = hr_b.samples[static_cast<std::size_t>(t + l)] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
      }
    }
    if (saa <= 0.0 || sbb <= 0.0) {
      continue;
    }
    const double corr = sab / std::sqrt(saa * sbb);
    if (corr > best_corr) {
      best_corr = corr;
      best.lag_s = static_cast<int>(l);
      best.correlation = corr;
      found = true;
    }
  }
  if (!found) {
    throw AlignmentError("estimate_alignment_lag: no lag with enough non-constant overlap");
  }
  best.low_confidence = best.correlation < kLowConfidenceCorrelation;
  return best;
}

} // namespace apnea::signal
