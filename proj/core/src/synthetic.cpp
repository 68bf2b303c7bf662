#include "apnea/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "apnea/errors.hpp"

namespace apnea::synth {

namespace {

double gaussian_bump(double t, double centre, double width) {
  const double z = (t - centre) / width;
  return std::exp(-0.5 * z * z);
}

// Rough P-QRS-T shape around a beat at time 0, in seconds.
double beat_shape(double dt) {
  return 0.12 * gaussian_bump(dt, -0.18, 0.025) - 0.15 * gaussian_bump(dt, -0.03, 0.008) +
         1.0 * gaussian_bump(dt, 0.0, 0.010) - 0.25 * gaussian_bump(dt, 0.03, 0.010) +
         0.3 * gaussian_bump(dt, 0.25, 0.045);
}

} // namespace

data::Recording generate_patient(const std::string& patient_id, const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.ecg_rate_hz != 80 && cfg.ecg_rate_hz != 100) {
    throw InputError("synthetic: ECG rate must be 80 or 100 Hz");
  }
  if (!(cfg.duration_s > 0.0) || !(cfg.min_event_s > 0.0) || cfg.max_event_s < cfg.min_event_s ||
      cfg.max_gap_s < cfg.min_gap_s) {
    throw InputError("synthetic: inconsistent generator settings");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::normal_distribution<double> noise(0.0, cfg.noise_std);

  data::Recording rec;
  rec.patient_id = patient_id;

  // Episodes on whole seconds, leaving a margin at both ends.
  const double margin = 30.0;
  double t = margin + uniform(0.0, cfg.max_gap_s);
  while (true) {
    const double len = std::round(uniform(cfg.min_event_s, cfg.max_event_s));
    const double start = std::round(t);
    if (start + len > cfg.duration_s - margin) {
      break;
    }
    static constexpr data::EventKind kinds[] = {data::EventKind::obstructive_apnea, data::EventKind::hypopnea,
                                                data::EventKind::central_apnea, data::EventKind::mixed_apnea};
    rec.events.push_back({start, start + len, kinds[rng() % 4]});
    t = start + len + uniform(cfg.min_gap_s, cfg.max_gap_s);
  }

  const auto rate = static_cast<double>(cfg.ecg_rate_hz);
  const auto n = static_cast<std::size_t>(std::floor(cfg.duration_s * rate));
  std::vector<double> envelope(n, 1.0);
  for (const auto& ev : rec.events) {
    const auto a = static_cast<std::size_t>(ev.start_s * rate);
    const auto b = std::min(n, static_cast<std::size_t>(ev.end_s * rate));
    std::fill(envelope.begin() + static_cast<long>(a), envelope.begin() + static_cast<long>(b), cfg.amplitude_factor);
  }

  // Beat times from a slowly varying heart rate.
  const double hr_mean = uniform(cfg.heart_rate_bpm_low, cfg.heart_rate_bpm_high);
  const double hr_phase = uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<double> beats;
  for (double bt = uniform(0.0, 1.0); bt < cfg.duration_s + 1.0;) {
    beats.push_back(bt);
    const double hr = hr_mean * (1.0 + 0.05 * std::sin(2.0 * std::numbers::pi * bt / 300.0 + hr_phase));
    bt += 60.0 / hr * (1.0 + 0.03 * (unit(rng) - 0.5));
  }

  std::vector<double> ecg(n);
  const double wander_phase = uniform(0.0, 2.0 * std::numbers::pi);
  std::size_t next_beat = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ts = static_cast<double>(i) / rate;
    while (next_beat + 1 < beats.size() && beats[next_beat + 1] <= ts) {
      ++next_beat;
    }
    double v = 0.0;
    for (std::size_t k = next_beat == 0 ? 0 : next_beat - 1; k < std::min(beats.size(), next_beat + 3); ++k) {
      v += beat_shape(ts - beats[k]);
    }
    const double wander = 0.2 * std::sin(2.0 * std::numbers::pi * 0.25 * ts + wander_phase);
    ecg[i] = envelope[i] * v + wander + noise(rng);
  }
  rec.ecg = signal::SignalChannel::from_samples(std::move(ecg), rate);

  if (cfg.with_spo2) {
    const auto secs = static_cast<std::size_t>(std::floor(cfg.duration_s));
    std::vector<double> spo2(secs);
    std::normal_distribution<double> spo2_noise(0.0, 0.15);
    std::vector<double> depth(secs, 0.0);
    for (const auto& ev : rec.events) {
      const double d = uniform(cfg.desaturation_min, cfg.desaturation_max);
      const auto a = static_cast<std::size_t>(ev.start_s);
      const auto b = std::min(secs, static_cast<std::size_t>(ev.end_s));
      const double ramp = std::min(8.0, static_cast<double>(b - a));
      for (std::size_t s = a; s < b; ++s) {
        depth[s] = d * std::min(1.0, (static_cast<double>(s - a) + 1.0) / ramp);
      }
    }
    for (std::size_t s = 0; s < secs; ++s) {
      spo2[s] = std::clamp(cfg.spo2_baseline - depth[s] + spo2_noise(rng), 50.0, 100.0);
    }
    rec.spo2 = signal::SignalChannel::from_samples(std::move(spo2), 1.0);
  }
  return rec;
}

std::vector<data::Recording> generate_corpus(std::size_t n_patients, const SyntheticConfig& cfg, std::uint64_t seed) {
  std::vector<data::Recording> out;
  std::mt19937_64 seeds(seed);
  for (std::size_t p = 0; p < n_patients; ++p) {
    const auto num = std::to_string(p + 1);
    out.push_back(generate_patient("syn" + std::string(num.size() < 2 ? 1 : 0, '0') + num, cfg, seeds()));
  }
  return out;
}

} // namespace apnea::synth
