#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace apnea::score {

inline constexpr double kDefaultThreshold = 0.5875;
inline constexpr std::int64_t kMinEventSeconds = 10;

double sigmoid(double s) noexcept;
std::vector<double> scores_to_probs(std::span<const double> scores);

/// true iff prob > tau (strict).
std::vector<bool> threshold_probs(std::span<const double> probs, double tau = kDefaultThreshold);

/// Half-open [start_s, end_s) in whole seconds.
struct Event {
  std::int64_t start_s = 0;
  std::int64_t end_s = 0;

  std::int64_t length() const noexcept { return end_s - start_s; }
  friend bool operator==(const Event&, const Event&) = default;
};
using EventList = std::vector<Event>;

/// One event per maximal run of true values; index i maps to second offset + i.
EventList extract_events(const std::vector<bool>& flags, std::int64_t offset = 0);

/// Keeps events lasting at least min_s seconds.
EventList filter_short_events(const EventList& events, std::int64_t min_s = kMinEventSeconds);

/// Events per hour. Throws InputError for non-positive hours.
double compute_ahi(std::size_t n_events, double hours);
inline double compute_ahi(const EventList& events, double hours) { return compute_ahi(events.size(), hours); }

enum class Severity { none, mild, moderate, severe };

std::string_view to_string(Severity s) noexcept;
Severity ahi_class(double ahi) noexcept;
inline int rank(Severity s) noexcept { return static_cast<int>(s); }

inline bool osa_binary(double ahi, double threshold = 5.0) noexcept { return ahi >= threshold; }

/// Fraction of patients whose true and predicted classes are fewer than k steps apart.
double acc_at_k(const std::vector<Severity>& truth, const std::vector<Severity>& pred, int k);

struct Confusion {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
  Confusion& operator+=(const Confusion& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

/// Throws ShapeError on length mismatch.
Confusion confusion_counts(const std::vector<bool>& pred, const std::vector<bool>& truth);

struct Metrics {
  double sens = 0, spec = 0, prec = 0, acc = 0, f1 = 0;
  /// Set when some denominator was zero and that metric was reported as 0.
  bool undefined = false;
};

/// Throws InputError on an empty table.
Metrics metrics(const Confusion& c);
Metrics confusion_metrics(const std::vector<bool>& pred, const std::vector<bool>& truth);

/// Mann-Whitney statistic with ties counted one half. Throws InputError when
/// only one class is present.
double auc(std::span<const double> scores, const std::vector<bool>& labels);

/// Two-track event timeline (predicted on top, ground truth below).
std::string render_timeline_svg(const EventList& predicted, const EventList& truth, double duration_s,
                                const std::string& title = {});

} // namespace apnea::score
