#include "apnea/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include "apnea/errors.hpp"

namespace apnea::score {

double sigmoid(double s) noexcept {
  // Split on sign to avoid overflow in exp for large |s|.
  if (s >= 0) {
    return 1.0 / (1.0 + std::exp(-s));
  }
  const double e = std::exp(s);
  return e / (1.0 + e);
}

std::vector<double> scores_to_probs(std::span<const double> scores) {
  std::vector<double> out(scores.size());
  std::transform(scores.begin(), scores.end(), out.begin(), sigmoid);
  return out;
}

std::vector<bool> threshold_probs(std::span<const double> probs, double tau) {
  std::vector<bool> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    out[i] = probs[i] > tau;
  }
  return out;
}

EventList extract_events(const std::vector<bool>& flags, std::int64_t offset) {
  EventList out;
  std::size_t i = 0;
  while (i < flags.size()) {
    if (!flags[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < flags.size() && flags[j]) {
      ++j;
    }
    out.push_back({offset + static_cast<std::int64_t>(i), offset + static_cast<std::int64_t>(j)});
    i = j;
  }
  return out;
}

EventList filter_short_events(const EventList& events, std::int64_t min_s) {
  EventList out;
  std::copy_if(events.begin(), events.end(), std::back_inserter(out),
               [min_s](const Event& e) { return e.length() >= min_s; });
  return out;
}

double compute_ahi(std::size_t n_events, double hours) {
  if (!(hours > 0.0)) {
    throw InputError("compute_ahi: recording hours must be positive");
  }
  return static_cast<double>(n_events) / hours;
}

std::string_view to_string(Severity s) noexcept {
  switch (s) {
  case Severity::none:
    return "none";
  case Severity::mild:
    return "mild";
  case Severity::moderate:
    return "moderate";
  case Severity::severe:
    break;
  }
  return "severe";
}

Severity ahi_class(double ahi) noexcept {
  if (ahi >= 30.0) {
    return Severity::severe;
  }
  if (ahi >= 15.0) {
    return Severity::moderate;
  }
  if (ahi >= 5.0) {
    return Severity::mild;
  }
  return Severity::none;
}

double acc_at_k(const std::vector<Severity>& truth, const std::vector<Severity>& pred, int k) {
  if (truth.size() != pred.size()) {
    throw ShapeError("acc_at_k: class lists differ in length");
  }
  if (truth.empty()) {
    throw InputError("acc_at_k: no patients");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    hits += std::abs(rank(truth[i]) - rank(pred[i])) < k ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

Confusion confusion_counts(const std::vector<bool>& pred, const std::vector<bool>& truth) {
  if (pred.size() != truth.size()) {
    throw ShapeError("confusion_counts: " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(truth.size()) + " labels");
  }
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i]) {
      ++(truth[i] ? c.tp : c.fp);
    } else {
      ++(truth[i] ? c.fn : c.tn);
    }
  }
  return c;
}

Metrics metrics(const Confusion& c) {
  if (c.total() == 0) {
    throw InputError("metrics: empty confusion table");
  }
  Metrics m;
  auto ratio = [&m](std::uint64_t num, std::uint64_t den) {
    if (den == 0) {
      m.undefined = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.sens = ratio(c.tp, c.tp + c.fn);
  m.spec = ratio(c.tn, c.tn + c.fp);
  m.prec = ratio(c.tp, c.tp + c.fp);
  m.acc = ratio(c.tp + c.tn, c.total());
  m.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  return m;
}

Metrics confusion_metrics(const std::vector<bool>& pred, const std::vector<bool>& truth) {
  return metrics(confusion_counts(pred, truth));
}

double auc(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("auc: scores and labels differ in length");
  }
  const auto n = scores.size();
  const auto n_pos = static_cast<std::uint64_t>(std::count(labels.begin(), labels.end(), true));
  const auto n_neg = static_cast<std::uint64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw InputError("auc: undefined with a single class present");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the positive rank sum stays integral: a tie group spanning ranks
  // lo..hi (1-based) gives each member lo+hi halves.
  std::uint64_t twice_rank_sum = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      ++j;
    }
    const std::uint64_t twice_rank = (i + 1) + j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        twice_rank_sum += twice_rank;
      }
    }
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * n_pos * n_neg);
}

std::string render_timeline_svg(const EventList& predicted, const EventList& truth, double duration_s,
                                const std::string& title) {
  constexpr double width = 1200, left = 50, right = 20, track_h = 30, top = 40;
  const double span = std::max(duration_s, 1.0);
  const double scale = (width - left - right) / span;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + 2 * track_h + 50
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  if (!title.empty()) {
    svg << "  <text x=\"" << left << "\" y=\"20\">" << title << "</text>\n";
  }
  auto track = [&](const EventList& events, const char* label, double y, const char* color) {
    svg << "  <text x=\"10\" y=\"" << y + track_h * 0.65 << "\">" << label << "</text>\n";
    svg << "  <rect x=\"" << left << "\" y=\"" << y << "\" width=\"" << width - left - right << "\" height=\""
        << track_h - 6 << "\" fill=\"#f2f2f2\"/>\n";
    for (const auto& e : events) {
      svg << "  <rect x=\"" << left + static_cast<double>(e.start_s) * scale << "\" y=\"" << y << "\" width=\""
          << std::max(static_cast<double>(e.length()) * scale, 1.0) << "\" height=\"" << track_h - 6
          << "\" fill=\"" << color << "\"/>\n";
    }
  };
  track(predicted, "PR", top, "#d62728");
  track(truth, "GT", top + track_h, "#1f77b4");

  const double axis_y = top + 2 * track_h + 5;
  svg << "  <line x1=\"" << left << "\" y1=\"" << axis_y << "\" x2=\"" << width - right << "\" y2=\"" << axis_y
      << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 10; ++tick) {
    const double t = span * tick / 10.0;
    const double x = left + t * scale;
    svg << "  <text x=\"" << x << "\" y=\"" << axis_y + 15 << "\" text-anchor=\"middle\">"
        << static_cast<long long>(std::llround(t)) << "</text>\n";
  }
  svg << "  <text x=\"" << width / 2 << "\" y=\"" << axis_y + 35 << "\" text-anchor=\"middle\">seconds</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

} // namespace apnea::score
