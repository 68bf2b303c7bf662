#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "apnea/signal.hpp"

namespace apnea::data {

enum class EventKind { central_apnea, obstructive_apnea, mixed_apnea, hypopnea, unspecified };

std::string_view to_string(EventKind kind) noexcept;
/// Throws InputError on an unknown name.
EventKind parse_event_kind(std::string_view name);

/// Annotated respiratory event in seconds from recording start. All kinds
/// are treated as a single anomaly class when labels are generated.
struct AnnotationEvent {
  double start_s = 0.0;
  double end_s = 0.0;
  EventKind kind = EventKind::unspecified;
};

enum class LabelConvention {
  per_second, ///< event annotations, one label per second
  per_minute, ///< one label per 60-second segment
};

struct Recording {
  std::string patient_id;
  signal::SignalChannel ecg;
  std::optional<signal::SignalChannel> spo2;
  std::vector<AnnotationEvent> events;
  std::optional<std::vector<bool>> minute_labels;
  /// Heart-rate series used to estimate the annotation-device clock offset.
  std::optional<signal::SignalChannel> hr_reference;
  std::optional<signal::SignalChannel> hr_monitor;
  /// "train", "test", or empty when the source carries no official split.
  std::string split;

  double duration_s() const noexcept { return ecg.duration_s(); }
  LabelConvention convention() const noexcept {
    return minute_labels ? LabelConvention::per_minute : LabelConvention::per_second;
  }
};

/// One training/inference unit: three consecutive windows of context around a
/// target window. ECG and SpO2 values lie in [0,1] or equal the -1 sentinel.
struct WindowInstance {
  std::vector<float> ecg_ctx;
  std::vector<float> spo2_ctx; ///< empty when the recording has no SpO2
  std::vector<std::uint8_t> labels;
  std::string patient_id;
  double target_start_s = 0.0;

  std::size_t positive_count() const noexcept;
};

// ---------------------------------------------------------------------------
// Native files

struct ChannelFile {
  std::string patient_id;
  std::string channel;
  double start_epoch_s = 0.0;
  signal::SignalChannel data;
};

ChannelFile read_channel_file(const std::filesystem::path& path);
void write_channel_file(const std::filesystem::path& path, const std::string& patient_id,
                        const std::string& channel, const signal::SignalChannel& data, double start_epoch_s = 0.0);

struct AnnotationFile {
  std::string patient_id;
  std::vector<AnnotationEvent> events; ///< sorted by start_s
};

AnnotationFile read_annotation_file(const std::filesystem::path& path);
void write_annotation_file(const std::filesystem::path& path, const std::string& patient_id,
                           const std::vector<AnnotationEvent>& events);

struct RecordingFiles {
  std::filesystem::path ecg;
  std::optional<std::filesystem::path> spo2;
  std::optional<std::filesystem::path> annotations;
  std::optional<std::filesystem::path> minute_labels;
  std::optional<std::filesystem::path> hr_reference;
  std::optional<std::filesystem::path> hr_monitor;
};

/// Parses and cross-checks one recording. ECG must be 80 or 100 Hz; SpO2 and
/// heart-rate channels must be 1 Hz; every file must name the same patient.
Recording load_recording(const RecordingFiles& files);

/// Locates the standard file names inside one patient directory.
RecordingFiles recording_files_in(const std::filesystem::path& patient_dir);

/// Manifest row of a native dataset directory.
struct ManifestEntry {
  std::string patient_id;
  double duration_s = 0.0;
  std::string split;
};

/// Writes `<dir>/<patient>/...` plus `<dir>/manifest.csv`. Refuses to touch an
/// existing manifest unless `force`.
void write_dataset(const std::filesystem::path& dir, const std::vector<Recording>& recordings, bool force);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);
std::vector<Recording> load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Apnea-ECG text export

struct ImportResult {
  std::vector<Recording> recordings;
  std::vector<std::string> warnings;
};

/// Reads `<record>.ecg` (one 100 Hz sample per line, last comma field used)
/// and `<record>.apn` (one `A`/`N` minute label per line, last token used).
/// Records whose name starts with 'x' form the official test split.
ImportResult import_apnea_ecg(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Labels, windows, splits

/// Second t is true iff [t, t+1) intersects some event. Throws InputError for
/// events outside [0, duration_s].
std::vector<bool> events_to_labels(const std::vector<AnnotationEvent>& events, std::size_t duration_s);

struct WindowConfig {
  int window_s = 60;
  /// Min-max normalize each instance's context independently (default) or
  /// leave the recording-level values untouched.
  bool per_instance_normalization = true;
};

/// One instance per non-overlapping target window. Context spans
/// [start - window, start + 2 window); samples outside the recording are -1.
std::vector<WindowInstance> build_windows(const Recording& recording, const WindowConfig& config = {});

/// Fraction of context values that are not the -1 sentinel.
double present_fraction(const std::vector<float>& ctx) noexcept;

/// Keeps an instance iff its ECG or its SpO2 context is at least half present.
std::vector<WindowInstance> filter_null_windows(std::vector<WindowInstance> instances, double min_present = 0.5);

struct PatientSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
};

/// Seeded patient-level partition; patients keep their input order inside each side.
PatientSplit split_by_patient(const std::vector<std::string>& patient_ids, std::size_t n_validation,
                              std::uint64_t seed);
PatientSplit split_by_patient(const std::vector<Recording>& recordings, std::size_t n_validation, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Preprocessing chain

struct PreprocessConfig {
  signal::BandpassSpec bandpass;
  WindowConfig window;
  bool per_recording_normalization = false;
  double max_align_lag_s = 300.0;
  double min_present_fraction = 0.5;
};

/// Estimates the clock offset from the recording's heart-rate pair and shifts
/// the annotation events onto the monitor clock. Events falling outside the
/// recording are clipped or dropped. Returns nullopt if no pair is present.
std::optional<signal::AlignmentResult> align_annotations(Recording& recording, double max_lag_s);

/// Bandpass-filters the ECG (and optionally min-max normalizes both channels
/// over the whole recording).
Recording preprocess_recording(const Recording& recording, const PreprocessConfig& config);

struct PreparedRecording {
  std::string patient_id;
  std::vector<WindowInstance> instances; ///< kept after null filtering, time order
  std::size_t total_windows = 0;
  double duration_s = 0.0;
  double kept_duration_s = 0.0;
  double null_ecg_fraction = 0.0;
  double null_spo2_fraction = 0.0;
  /// Annotation events on the aligned clock (empty for minute-label data).
  std::vector<AnnotationEvent> events;
  LabelConvention convention = LabelConvention::per_second;
  std::optional<signal::AlignmentResult> alignment;
};

/// Alignment, filtering, windowing, and null-window filtering in one call.
PreparedRecording prepare_recording(const Recording& recording, const PreprocessConfig& config);

// ---------------------------------------------------------------------------
// Instance cache: 16-byte header then fixed-size little-endian records.

inline constexpr char kCacheMagic[4] = {'A', 'W', 'I', 'N'};
inline constexpr std::uint16_t kCacheVersion = 1;

/// Writes `path` and a sidecar `path.index.csv` carrying patient id and
/// target start per record. All instances must share one shape.
void write_instance_cache(const std::filesystem::path& path, const std::vector<WindowInstance>& instances);
std::vector<WindowInstance> read_instance_cache(const std::filesystem::path& path);

} // namespace apnea::data
