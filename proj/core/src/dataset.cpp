#include "apnea/dataset.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "apnea/errors.hpp"

namespace fs = std::filesystem;

namespace apnea::data {

static_assert(std::endian::native == std::endian::little, "instance cache assumes a little-endian host");

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::string_view kChannelHeader = "patient_id,channel,rate_hz,start_epoch_s";

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(trim(s.substr(pos)));
      break;
    }
    out.push_back(trim(s.substr(pos, next - pos)));
    pos = next + 1;
  }
  return out;
}

std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) {
    return std::nullopt;
  }
  if (s.front() == '+') {
    s.remove_prefix(1);
  }
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    return std::nullopt;
  }
  return v;
}

double require_double(std::string_view s, const fs::path& file, std::size_t line, const char* field) {
  const auto v = parse_double(s);
  if (!v) {
    throw ParseError(file.string(), line, std::string("field '") + field + "': not a number: '" + std::string(s) + "'");
  }
  return *v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError(path.string(), 0, "cannot open file");
  }
  return in;
}

std::ofstream open_output(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream out(path, mode);
  if (!out) {
    throw Error("cannot open '" + path.string() + "' for writing");
  }
  return out;
}

std::optional<fs::path> existing(const fs::path& p) {
  if (fs::exists(p)) {
    return p;
  }
  return std::nullopt;
}

struct MinuteLabelFile {
  std::string patient_id;
  std::vector<bool> labels;
};

MinuteLabelFile read_minute_label_file(const fs::path& path) {
  auto in = open_input(path);
  MinuteLabelFile out;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) {
    throw ParseError(path.string(), 1, "missing header line");
  }
  ++lineno;
  out.patient_id = std::string(trim(line));
  if (out.patient_id.empty()) {
    throw ParseError(path.string(), 1, "field 'patient_id': empty");
  }
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t == "1") {
      out.labels.push_back(true);
    } else if (t == "0") {
      out.labels.push_back(false);
    } else {
      throw ParseError(path.string(), lineno, "minute label must be 0 or 1, got '" + std::string(t) + "'");
    }
  }
  return out;
}

void write_minute_label_file(const fs::path& path, const std::string& patient_id, const std::vector<bool>& labels) {
  auto out = open_output(path);
  out << patient_id << '\n';
  for (bool b : labels) {
    out << (b ? '1' : '0') << '\n';
  }
}

/// Pads with missing samples or truncates so a 1 Hz channel covers exactly `seconds`.
signal::SignalChannel fit_length(signal::SignalChannel ch, std::size_t seconds) {
  ch.samples.resize(seconds, kNaN);
  ch.missing.resize(seconds, true);
  return ch;
}

std::size_t integer_rate(double rate_hz) {
  const double r = std::round(rate_hz);
  if (std::abs(r - rate_hz) > 1e-9 || r < 1.0) {
    throw InputError("sampling rate must be a positive integer number of Hz, got " + format_double(rate_hz));
  }
  return static_cast<std::size_t>(r);
}

/// Extracts context [start, start+len) from a channel at an integer rate into
/// float values, with the -1 sentinel outside bounds and at missing samples.
std::vector<float> extract_context(const signal::SignalChannel& ch, long start_s, std::size_t len_s,
                                   bool normalize) {
  const std::size_t rate = integer_rate(ch.rate_hz);
  const std::size_t n = len_s * rate;
  std::vector<double> values(n, kNaN);
  std::vector<bool> missing(n, true);
  const long first = start_s * static_cast<long>(rate);
  for (std::size_t i = 0; i < n; ++i) {
    const long src = first + static_cast<long>(i);
    if (src < 0 || src >= static_cast<long>(ch.size())) {
      continue;
    }
    const auto s = static_cast<std::size_t>(src);
    if (!ch.missing[s]) {
      values[i] = ch.samples[s];
      missing[i] = false;
    }
  }
  const bool any_present = std::find(missing.begin(), missing.end(), false) != missing.end();
  if (normalize && any_present) {
    values = signal::minmax_normalize(values, missing);
  }
  values = signal::encode_missing(values, missing);
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<float>(values[i]);
  }
  return out;
}

} // namespace

std::string_view to_string(EventKind kind) noexcept {
  switch (kind) {
  case EventKind::central_apnea:
    return "central_apnea";
  case EventKind::obstructive_apnea:
    return "obstructive_apnea";
  case EventKind::mixed_apnea:
    return "mixed_apnea";
  case EventKind::hypopnea:
    return "hypopnea";
  case EventKind::unspecified:
    break;
  }
  return "unspecified";
}

EventKind parse_event_kind(std::string_view name) {
  for (auto k : {EventKind::central_apnea, EventKind::obstructive_apnea, EventKind::mixed_apnea, EventKind::hypopnea,
                 EventKind::unspecified}) {
    if (to_string(k) == name) {
      return k;
    }
  }
  throw InputError("unknown event kind '" + std::string(name) + "'");
}

std::size_t WindowInstance::positive_count() const noexcept {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](std::uint8_t v) { return v != 0; }));
}

// ---------------------------------------------------------------------------
// Native files

ChannelFile read_channel_file(const fs::path& path) {
  auto in = open_input(path);
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) {
    throw ParseError(path.string(), 1, "missing header line");
  }
  ++lineno;
  if (trim(line) == kChannelHeader) {
    if (!std::getline(in, line)) {
      throw ParseError(path.string(), 2, "missing header values");
    }
    ++lineno;
  }
  const auto fields = split(line, ',');
  if (fields.size() != 4) {
    throw ParseError(path.string(), lineno,
                     "header must have 4 fields (" + std::string(kChannelHeader) + "), got " +
                         std::to_string(fields.size()));
  }
  ChannelFile out;
  out.patient_id = std::string(fields[0]);
  out.channel = std::string(fields[1]);
  if (out.patient_id.empty()) {
    throw ParseError(path.string(), lineno, "field 'patient_id': empty");
  }
  if (out.channel.empty()) {
    throw ParseError(path.string(), lineno, "field 'channel': empty");
  }
  const double rate = require_double(fields[2], path, lineno, "rate_hz");
  if (!(rate > 0.0)) {
    throw ParseError(path.string(), lineno, "field 'rate_hz': must be positive");
  }
  out.start_epoch_s = require_double(fields[3], path, lineno, "start_epoch_s");

  std::vector<double> samples;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty()) {
      samples.push_back(kNaN);
      continue;
    }
    const auto v = parse_double(t);
    if (!v || !std::isfinite(*v)) {
      throw ParseError(path.string(), lineno, "field 'value': not a number: '" + std::string(t) + "'");
    }
    samples.push_back(*v);
  }
  out.data = signal::SignalChannel::from_samples(std::move(samples), rate);
  return out;
}

void write_channel_file(const fs::path& path, const std::string& patient_id, const std::string& channel,
                        const signal::SignalChannel& data, double start_epoch_s) {
  data.validate();
  auto out = open_output(path);
  out << patient_id << ',' << channel << ',' << format_double(data.rate_hz) << ',' << format_double(start_epoch_s)
      << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data.missing[i]) {
      out << format_double(data.samples[i]);
    }
    out << '\n';
  }
}

AnnotationFile read_annotation_file(const fs::path& path) {
  auto in = open_input(path);
  AnnotationFile out;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) {
    throw ParseError(path.string(), 1, "missing header line");
  }
  ++lineno;
  out.patient_id = std::string(trim(line));
  if (out.patient_id.empty() || out.patient_id.find(',') != std::string::npos) {
    throw ParseError(path.string(), 1, "field 'patient_id': expected a single identifier");
  }
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) {
      continue;
    }
    const auto fields = split(line, ',');
    if (fields.size() != 3) {
      throw ParseError(path.string(), lineno, "expected start_s,end_s,kind");
    }
    AnnotationEvent ev;
    ev.start_s = require_double(fields[0], path, lineno, "start_s");
    ev.end_s = require_double(fields[1], path, lineno, "end_s");
    if (ev.start_s < 0.0) {
      throw ParseError(path.string(), lineno, "field 'start_s': negative");
    }
    if (!(ev.end_s > ev.start_s)) {
      throw ParseError(path.string(), lineno, "field 'end_s': must exceed start_s");
    }
    try {
      ev.kind = parse_event_kind(fields[2]);
    } catch (const InputError&) {
      throw ParseError(path.string(), lineno, "field 'kind': unknown event kind '" + std::string(fields[2]) + "'");
    }
    out.events.push_back(ev);
  }
  std::stable_sort(out.events.begin(), out.events.end(),
                   [](const AnnotationEvent& a, const AnnotationEvent& b) { return a.start_s < b.start_s; });
  return out;
}

void write_annotation_file(const fs::path& path, const std::string& patient_id,
                           const std::vector<AnnotationEvent>& events) {
  auto out = open_output(path);
  out << patient_id << '\n';
  for (const auto& ev : events) {
    out << format_double(ev.start_s) << ',' << format_double(ev.end_s) << ',' << to_string(ev.kind) << '\n';
  }
}

Recording load_recording(const RecordingFiles& files) {
  Recording rec;
  const auto ecg = read_channel_file(files.ecg);
  if (ecg.data.rate_hz != 80.0 && ecg.data.rate_hz != 100.0) {
    throw ParseError(files.ecg.string(), 1,
                     "field 'rate_hz': ECG must be sampled at 80 or 100 Hz, got " + format_double(ecg.data.rate_hz));
  }
  rec.patient_id = ecg.patient_id;
  rec.ecg = ecg.data;
  const auto seconds = static_cast<std::size_t>(std::floor(rec.duration_s()));

  auto check_patient = [&](const std::string& id, const fs::path& p) {
    if (id != rec.patient_id) {
      throw ParseError(p.string(), 1, "field 'patient_id': '" + id + "' does not match ECG patient '" +
                                          rec.patient_id + "'");
    }
  };
  auto load_1hz = [&](const fs::path& p) {
    auto ch = read_channel_file(p);
    check_patient(ch.patient_id, p);
    if (ch.data.rate_hz != 1.0) {
      throw ParseError(p.string(), 1, "field 'rate_hz': expected 1 Hz, got " + format_double(ch.data.rate_hz));
    }
    return ch.data;
  };

  if (files.spo2) {
    rec.spo2 = fit_length(load_1hz(*files.spo2), seconds);
  }
  if (files.hr_reference) {
    rec.hr_reference = load_1hz(*files.hr_reference);
  }
  if (files.hr_monitor) {
    rec.hr_monitor = load_1hz(*files.hr_monitor);
  }
  if (files.annotations) {
    auto ann = read_annotation_file(*files.annotations);
    check_patient(ann.patient_id, *files.annotations);
    rec.events = std::move(ann.events);
  }
  if (files.minute_labels) {
    auto ml = read_minute_label_file(*files.minute_labels);
    check_patient(ml.patient_id, *files.minute_labels);
    rec.minute_labels = std::move(ml.labels);
  }
  return rec;
}

RecordingFiles recording_files_in(const fs::path& patient_dir) {
  RecordingFiles f;
  f.ecg = patient_dir / "ecg.csv";
  f.spo2 = existing(patient_dir / "spo2.csv");
  f.annotations = existing(patient_dir / "events.csv");
  f.minute_labels = existing(patient_dir / "minute_labels.csv");
  f.hr_reference = existing(patient_dir / "hr_ref.csv");
  f.hr_monitor = existing(patient_dir / "hr.csv");
  return f;
}

void write_dataset(const fs::path& dir, const std::vector<Recording>& recordings, bool force) {
  const auto manifest = dir / "manifest.csv";
  if (fs::exists(manifest) && !force) {
    throw Error("refusing to overwrite existing dataset at '" + dir.string() + "' (use --force)");
  }
  fs::create_directories(dir);
  for (const auto& rec : recordings) {
    const auto pdir = dir / rec.patient_id;
    if (force && fs::exists(pdir)) {
      fs::remove_all(pdir);
    }
    write_channel_file(pdir / "ecg.csv", rec.patient_id, "ecg", rec.ecg);
    if (rec.spo2) {
      write_channel_file(pdir / "spo2.csv", rec.patient_id, "spo2", *rec.spo2);
    }
    if (rec.hr_reference) {
      write_channel_file(pdir / "hr_ref.csv", rec.patient_id, "hr_ref", *rec.hr_reference);
    }
    if (rec.hr_monitor) {
      write_channel_file(pdir / "hr.csv", rec.patient_id, "hr", *rec.hr_monitor);
    }
    if (rec.minute_labels) {
      write_minute_label_file(pdir / "minute_labels.csv", rec.patient_id, *rec.minute_labels);
    } else {
      write_annotation_file(pdir / "events.csv", rec.patient_id, rec.events);
    }
  }
  auto out = open_output(manifest);
  out << "patient_id,duration_s,split\n";
  for (const auto& rec : recordings) {
    out << rec.patient_id << ',' << format_double(rec.duration_s()) << ',' << rec.split << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.csv";
  auto in = open_input(path);
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line) || trim(line) != "patient_id,duration_s,split") {
    throw ParseError(path.string(), 1, "expected header patient_id,duration_s,split");
  }
  ++lineno;
  std::vector<ManifestEntry> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) {
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 3) {
      throw ParseError(path.string(), lineno, "expected patient_id,duration_s,split");
    }
    out.push_back({std::string(f[0]), require_double(f[1], path, lineno, "duration_s"), std::string(f[2])});
  }
  return out;
}

std::vector<Recording> load_dataset(const fs::path& dir) {
  std::vector<Recording> out;
  for (const auto& entry : read_manifest(dir)) {
    auto rec = load_recording(recording_files_in(dir / entry.patient_id));
    if (rec.patient_id != entry.patient_id) {
      throw ParseError((dir / "manifest.csv").string(), 0,
                       "patient '" + entry.patient_id + "' directory holds data for '" + rec.patient_id + "'");
    }
    rec.split = entry.split;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Apnea-ECG

ImportResult import_apnea_ecg(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw InputError("apnea-ecg import: '" + dir.string() + "' is not a directory");
  }
  std::vector<fs::path> ecg_files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ecg") {
      ecg_files.push_back(e.path());
    }
  }
  std::sort(ecg_files.begin(), ecg_files.end());
  if (ecg_files.empty()) {
    throw InputError("apnea-ecg import: no .ecg files in '" + dir.string() + "'");
  }

  constexpr double kRate = 100.0;
  constexpr std::size_t kSamplesPerMinute = 6000;
  ImportResult result;
  for (const auto& ecg_path : ecg_files) {
    const std::string name = ecg_path.stem().string();
    auto apn_path = ecg_path;
    apn_path.replace_extension(".apn");
    if (!fs::exists(apn_path)) {
      throw ParseError(apn_path.string(), 0, "missing minute-label file for record '" + name + "'");
    }

    std::vector<double> samples;
    {
      auto in = open_input(ecg_path);
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        const auto t = trim(line);
        if (t.empty() || t.front() == '#') {
          continue;
        }
        const auto fields = split(t, ',');
        const auto v = parse_double(fields.back());
        if (!v) {
          if (samples.empty()) {
            continue; // column header of an rdsamp export
          }
          throw ParseError(ecg_path.string(), lineno, "field 'value': not a number");
        }
        samples.push_back(*v);
      }
    }
    std::vector<bool> labels;
    {
      auto in = open_input(apn_path);
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        std::istringstream tokens{std::string(trim(line))};
        std::string tok, last;
        while (tokens >> tok) {
          last = tok;
        }
        if (last.empty()) {
          continue;
        }
        if (last == "A") {
          labels.push_back(true);
        } else if (last == "N") {
          labels.push_back(false);
        } else if (!labels.empty()) {
          throw ParseError(apn_path.string(), lineno, "field 'label': expected A or N, got '" + last + "'");
        }
      }
    }

    const std::size_t full_minutes = samples.size() / kSamplesPerMinute;
    const bool partial_tail = samples.size() % kSamplesPerMinute != 0;
    if (labels.size() > full_minutes) {
      const std::size_t extra = labels.size() - full_minutes;
      if (extra == 1 && partial_tail) {
        labels.pop_back();
        result.warnings.push_back(name + ": final minute truncated (< 6000 samples); its label was dropped");
      } else {
        throw ParseError(apn_path.string(), 0,
                         name + ": " + std::to_string(labels.size()) + " minute labels but only " +
                             std::to_string(full_minutes) + " full minutes of signal");
      }
    } else if (full_minutes - labels.size() > 1) {
      throw ParseError(apn_path.string(), 0,
                       name + ": " + std::to_string(full_minutes) + " minutes of signal but only " +
                           std::to_string(labels.size()) + " labels");
    }

    Recording rec;
    rec.patient_id = name;
    rec.ecg = signal::SignalChannel::from_samples(std::move(samples), kRate);
    rec.minute_labels = std::move(labels);
    rec.split = (!name.empty() && name.front() == 'x') ? "test" : "train";
    result.recordings.push_back(std::move(rec));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Labels, windows, splits

std::vector<bool> events_to_labels(const std::vector<AnnotationEvent>& events, std::size_t duration_s) {
  std::vector<bool> labels(duration_s, false);
  const auto dur = static_cast<double>(duration_s);
  for (const auto& ev : events) {
    if (ev.start_s < 0.0 || ev.end_s > dur || !(ev.end_s > ev.start_s)) {
      throw InputError("events_to_labels: event [" + format_double(ev.start_s) + ", " + format_double(ev.end_s) +
                       ") outside [0, " + std::to_string(duration_s) + "]");
    }
    const auto first = static_cast<std::size_t>(std::floor(ev.start_s));
    const auto last = static_cast<std::size_t>(std::ceil(ev.end_s)); // exclusive
    for (std::size_t t = first; t < last && t < duration_s; ++t) {
      labels[t] = true;
    }
  }
  return labels;
}

std::vector<WindowInstance> build_windows(const Recording& recording, const WindowConfig& config) {
  if (config.window_s <= 0) {
    throw InputError("build_windows: window_s must be positive");
  }
  recording.ecg.validate();
  const auto window = static_cast<std::size_t>(config.window_s);
  const double duration = recording.duration_s();
  std::size_t n_windows = static_cast<std::size_t>(std::floor(duration / static_cast<double>(window)));
  if (recording.minute_labels) {
    n_windows = std::min(n_windows, recording.minute_labels->size());
  }
  if (n_windows == 0) {
    return {};
  }

  std::vector<bool> second_labels;
  if (!recording.minute_labels) {
    const auto label_len = static_cast<std::size_t>(std::ceil(duration));
    std::vector<AnnotationEvent> clipped;
    for (auto ev : recording.events) {
      ev.start_s = std::max(ev.start_s, 0.0);
      ev.end_s = std::min(ev.end_s, static_cast<double>(label_len));
      if (ev.end_s > ev.start_s) {
        clipped.push_back(ev);
      }
    }
    second_labels = events_to_labels(clipped, label_len);
  }

  std::vector<WindowInstance> out;
  out.reserve(n_windows);
  for (std::size_t w = 0; w < n_windows; ++w) {
    const long start = static_cast<long>(w * window);
    WindowInstance inst;
    inst.patient_id = recording.patient_id;
    inst.target_start_s = static_cast<double>(start);
    inst.ecg_ctx = extract_context(recording.ecg, start - static_cast<long>(window), 3 * window,
                                   config.per_instance_normalization);
    if (recording.spo2) {
      inst.spo2_ctx = extract_context(*recording.spo2, start - static_cast<long>(window), 3 * window,
                                      config.per_instance_normalization);
    }
    if (recording.minute_labels) {
      inst.labels = {static_cast<std::uint8_t>((*recording.minute_labels)[w] ? 1 : 0)};
    } else {
      inst.labels.resize(window);
      for (std::size_t t = 0; t < window; ++t) {
        inst.labels[t] = second_labels[w * window + t] ? 1 : 0;
      }
    }
    out.push_back(std::move(inst));
  }
  return out;
}

double present_fraction(const std::vector<float>& ctx) noexcept {
  if (ctx.empty()) {
    return 0.0;
  }
  const auto present = std::count_if(ctx.begin(), ctx.end(), [](float v) { return v != -1.0f; });
  return static_cast<double>(present) / static_cast<double>(ctx.size());
}

std::vector<WindowInstance> filter_null_windows(std::vector<WindowInstance> instances, double min_present) {
  std::erase_if(instances, [min_present](const WindowInstance& inst) {
    return !(present_fraction(inst.ecg_ctx) >= min_present || present_fraction(inst.spo2_ctx) >= min_present);
  });
  return instances;
}

PatientSplit split_by_patient(const std::vector<std::string>& patient_ids, std::size_t n_validation,
                              std::uint64_t seed) {
  std::vector<std::string> unique;
  for (const auto& id : patient_ids) {
    if (std::find(unique.begin(), unique.end(), id) == unique.end()) {
      unique.push_back(id);
    }
  }
  if (n_validation > 0 && n_validation >= unique.size()) {
    throw InputError("split_by_patient: need more patients (" + std::to_string(unique.size()) + ") than " +
                     std::to_string(n_validation) + " validation patients");
  }
  std::vector<std::size_t> order(unique.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_val(unique.size(), false);
  for (std::size_t i = 0; i < n_validation; ++i) {
    is_val[order[i]] = true;
  }
  PatientSplit split;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    (is_val[i] ? split.validation : split.train).push_back(unique[i]);
  }
  return split;
}

PatientSplit split_by_patient(const std::vector<Recording>& recordings, std::size_t n_validation,
                              std::uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(recordings.size());
  for (const auto& r : recordings) {
    ids.push_back(r.patient_id);
  }
  return split_by_patient(ids, n_validation, seed);
}

// ---------------------------------------------------------------------------
// Preprocessing chain

std::optional<signal::AlignmentResult> align_annotations(Recording& recording, double max_lag_s) {
  if (!recording.hr_reference || !recording.hr_monitor) {
    return std::nullopt;
  }
  const auto result = signal::estimate_alignment_lag(*recording.hr_reference, *recording.hr_monitor, max_lag_s);
  const double duration = recording.duration_s();
  std::vector<AnnotationEvent> shifted;
  for (auto ev : recording.events) {
    ev.start_s = std::max(0.0, ev.start_s + result.lag_s);
    ev.end_s = std::min(duration, ev.end_s + result.lag_s);
    if (ev.end_s > ev.start_s) {
      shifted.push_back(ev);
    }
  }
  recording.events = std::move(shifted);
  return result;
}

Recording preprocess_recording(const Recording& recording, const PreprocessConfig& config) {
  Recording out = recording;
  out.ecg = signal::butterworth_bandpass(recording.ecg, config.bandpass);
  if (config.per_recording_normalization) {
    auto normalize = [](signal::SignalChannel& ch) {
      if (ch.missing_count() == ch.size()) {
        return;
      }
      ch.samples = signal::minmax_normalize(ch.samples, ch.missing);
    };
    normalize(out.ecg);
    if (out.spo2) {
      normalize(*out.spo2);
    }
  }
  return out;
}

PreparedRecording prepare_recording(const Recording& recording, const PreprocessConfig& config) {
  Recording rec = recording;
  PreparedRecording out;
  out.patient_id = rec.patient_id;
  out.convention = rec.convention();
  out.alignment = align_annotations(rec, config.max_align_lag_s);
  rec = preprocess_recording(rec, config);

  out.duration_s = rec.duration_s();
  out.null_ecg_fraction =
      rec.ecg.size() ? static_cast<double>(rec.ecg.missing_count()) / static_cast<double>(rec.ecg.size()) : 0.0;
  out.null_spo2_fraction =
      rec.spo2 && rec.spo2->size()
          ? static_cast<double>(rec.spo2->missing_count()) / static_cast<double>(rec.spo2->size())
          : (rec.spo2 ? 0.0 : 1.0);
  if (out.convention == LabelConvention::per_second) {
    out.events = rec.events;
  }

  WindowConfig wc = config.window;
  if (config.per_recording_normalization) {
    wc.per_instance_normalization = false;
  }
  auto windows = build_windows(rec, wc);
  out.total_windows = windows.size();
  out.instances = filter_null_windows(std::move(windows), config.min_present_fraction);
  out.kept_duration_s = static_cast<double>(out.instances.size() * static_cast<std::size_t>(wc.window_s));
  return out;
}

// ---------------------------------------------------------------------------
// Instance cache

void write_instance_cache(const fs::path& path, const std::vector<WindowInstance>& instances) {
  std::uint32_t ecg_len = 0, spo2_len = 0;
  std::uint16_t label_len = 0;
  if (!instances.empty()) {
    ecg_len = static_cast<std::uint32_t>(instances.front().ecg_ctx.size());
    spo2_len = static_cast<std::uint32_t>(instances.front().spo2_ctx.size());
    label_len = static_cast<std::uint16_t>(instances.front().labels.size());
  }
  for (const auto& inst : instances) {
    if (inst.ecg_ctx.size() != ecg_len || inst.spo2_ctx.size() != spo2_len || inst.labels.size() != label_len) {
      throw ShapeError("write_instance_cache: instances do not share one shape");
    }
  }
  auto out = open_output(path, std::ios::out | std::ios::binary);
  out.write(kCacheMagic, 4);
  out.write(reinterpret_cast<const char*>(&kCacheVersion), 2);
  out.write(reinterpret_cast<const char*>(&label_len), 2);
  out.write(reinterpret_cast<const char*>(&ecg_len), 4);
  out.write(reinterpret_cast<const char*>(&spo2_len), 4);
  for (const auto& inst : instances) {
    out.write(reinterpret_cast<const char*>(inst.ecg_ctx.data()),
              static_cast<std::streamsize>(inst.ecg_ctx.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(inst.spo2_ctx.data()),
              static_cast<std::streamsize>(inst.spo2_ctx.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(inst.labels.data()), static_cast<std::streamsize>(inst.labels.size()));
  }
  auto index = open_output(path.string() + ".index.csv");
  index << "patient_id,target_start_s\n";
  for (const auto& inst : instances) {
    index << inst.patient_id << ',' << format_double(inst.target_start_s) << '\n';
  }
}

std::vector<WindowInstance> read_instance_cache(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ParseError(path.string(), 0, "cannot open file");
  }
  char magic[4];
  std::uint16_t version = 0, label_len = 0;
  std::uint32_t ecg_len = 0, spo2_len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 2);
  in.read(reinterpret_cast<char*>(&label_len), 2);
  in.read(reinterpret_cast<char*>(&ecg_len), 4);
  in.read(reinterpret_cast<char*>(&spo2_len), 4);
  if (!in || std::memcmp(magic, kCacheMagic, 4) != 0) {
    throw ParseError(path.string(), 0, "bad instance-cache magic");
  }
  if (version != kCacheVersion) {
    throw ParseError(path.string(), 0, "unsupported instance-cache version " + std::to_string(version));
  }
  std::vector<WindowInstance> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    WindowInstance inst;
    inst.ecg_ctx.resize(ecg_len);
    inst.spo2_ctx.resize(spo2_len);
    inst.labels.resize(label_len);
    in.read(reinterpret_cast<char*>(inst.ecg_ctx.data()), static_cast<std::streamsize>(ecg_len * sizeof(float)));
    in.read(reinterpret_cast<char*>(inst.spo2_ctx.data()), static_cast<std::streamsize>(spo2_len * sizeof(float)));
    in.read(reinterpret_cast<char*>(inst.labels.data()), label_len);
    if (!in) {
      throw ParseError(path.string(), 0, "truncated record " + std::to_string(out.size()));
    }
    out.push_back(std::move(inst));
  }
  const fs::path index_path = path.string() + ".index.csv";
  if (fs::exists(index_path)) {
    auto idx = open_input(index_path);
    std::string line;
    std::getline(idx, line);
    std::size_t lineno = 1;
    for (auto& inst : out) {
      if (!std::getline(idx, line)) {
        throw ParseError(index_path.string(), lineno + 1, "fewer index rows than records");
      }
      ++lineno;
      const auto f = split(line, ',');
      if (f.size() != 2) {
        throw ParseError(index_path.string(), lineno, "expected patient_id,target_start_s");
      }
      inst.patient_id = std::string(f[0]);
      inst.target_start_s = require_double(f[1], index_path, lineno, "target_start_s");
    }
  }
  return out;
}

} // namespace apnea::data
