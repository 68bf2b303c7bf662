#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "apnea/dataset.hpp"

namespace apnea::synth {

/// Generator for ECG-like recordings with planted anomaly episodes. During an
/// episode the ECG amplitude is scaled down and SpO2 ramps into a
/// desaturation that recovers when the episode ends.
struct SyntheticConfig {
  int ecg_rate_hz = 80;
  double duration_s = 1500.0;
  double min_event_s = 15.0;
  double max_event_s = 40.0;
  double min_gap_s = 20.0;
  double max_gap_s = 90.0;
  double amplitude_factor = 0.3;
  double heart_rate_bpm_low = 55.0;
  double heart_rate_bpm_high = 85.0;
  double noise_std = 0.03;
  double spo2_baseline = 96.0;
  double desaturation_min = 4.0;
  double desaturation_max = 9.0;
  bool with_spo2 = true;
};

data::Recording generate_patient(const std::string& patient_id, const SyntheticConfig& cfg, std::uint64_t seed);

/// Patients "syn01", "syn02", ... each from its own seed derived from `seed`.
std::vector<data::Recording> generate_corpus(std::size_t n_patients, const SyntheticConfig& cfg, std::uint64_t seed);

} // namespace apnea::synth
