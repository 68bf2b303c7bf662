#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace apnea::signal {

/// Uniformly sampled real-valued series with a missing-sample mask.
///
/// Samples at missing positions hold a quiet NaN so that any numeric op that
/// forgets to consult the mask poisons its result instead of silently using
/// a stale value.
struct SignalChannel {
  std::vector<double> samples;
  double rate_hz = 1.0;
  std::vector<bool> missing;

  /// Builds a channel where every non-finite sample is marked missing.
  static SignalChannel from_samples(std::vector<double> samples, double rate_hz);

  std::size_t size() const noexcept { return samples.size(); }
  double duration_s() const noexcept { return static_cast<double>(samples.size()) / rate_hz; }
  std::size_t missing_count() const noexcept;
  /// Throws ShapeError/InputError if the invariants do not hold.
  void validate() const;
};

/// Butterworth bandpass design parameters. `order` is the order of the
/// lowpass prototype, so the realized filter has 2*order poles.
struct BandpassSpec {
  int order = 2;
  double low_hz = 5.0;
  double high_hz = 35.0;
  /// Forward-backward application instead of a single causal pass.
  bool zero_phase = false;
};

/// One second-order section, a0 normalized to 1.
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;
};

class SosFilter {
public:
  SosFilter() = default;
  SosFilter(std::vector<Biquad> sections, double rate_hz)
      : sections_(std::move(sections)), rate_hz_(rate_hz) {}

  const std::vector<Biquad>& sections() const noexcept { return sections_; }
  double rate_hz() const noexcept { return rate_hz_; }

  /// Complex frequency response H(e^{j 2 pi f / fs}) of the cascade.
  std::complex<double> response(double freq_hz) const;
  double magnitude(double freq_hz) const { return std::abs(response(freq_hz)); }

  /// Causal direct-form-II-transposed cascade with zero initial state.
  std::vector<double> apply(std::span<const double> x) const;
  /// Forward pass, then reversed pass over the result.
  std::vector<double> apply_zero_phase(std::span<const double> x) const;

private:
  std::vector<Biquad> sections_;
  double rate_hz_ = 1.0;
};

/// Bilinear-transform (pre-warped) Butterworth bandpass in SOS form.
/// Throws SpecError unless 0 < low < high < rate/2 and order >= 1.
SosFilter design_bandpass(const BandpassSpec& spec, double rate_hz);

/// Length in samples of the shortest segment worth filtering: max(3/low_hz, 1) s.
std::size_t warmup_samples(const BandpassSpec& spec, double rate_hz);

/// Filters each contiguous run of present samples independently. Runs shorter
/// than the warm-up length come back flagged missing.
SignalChannel butterworth_bandpass(const SignalChannel& channel, const BandpassSpec& spec);

/// Affine map of the present values onto [0, 1]. Non-finite values count as
/// missing and pass through untouched. When min == max every present value maps
/// to 0. Throws InputError when nothing is present.
std::vector<double> minmax_normalize(std::span<const double> values);
std::vector<double> minmax_normalize(std::span<const double> values, const std::vector<bool>& missing);

/// Writes the -1 sentinel at every masked position.
std::vector<double> encode_missing(std::span<const double> values, const std::vector<bool>& missing);

inline constexpr double kMissingSentinel = -1.0;

struct AlignmentResult {
  /// hr_b[t + lag_s] lines up with hr_a[t].
  int lag_s = 0;
  double correlation = 0.0;
  bool low_confidence = false;
};

/// Integer-second lag in [-max_lag_s, max_lag_s] maximizing the Pearson
/// correlation between two 1 Hz heart-rate series over their jointly present
/// overlap. Ties resolve to the smallest |lag|, then the negative one.
/// Throws AlignmentError when the overlap is shorter than 10 * max_lag_s.
AlignmentResult estimate_alignment_lag(const SignalChannel& hr_a, const SignalChannel& hr_b, double max_lag_s);

inline constexpr double kLowConfidenceCorrelation = 0.2;

} // namespace apnea::signal
