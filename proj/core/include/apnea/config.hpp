#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "apnea/dataset.hpp"
#include "apnea/evaluation.hpp"
#include "apnea/model.hpp"
#include "apnea/training.hpp"

namespace apnea {

/// Everything a command needs, as plain key=value text.
///
/// Resolution: `preset` (stroke or apnea_ecg) picks the defaults, then keys
/// from the config file, then keys given on the command line. Unknown keys
/// are rejected with ConfigError.
struct RunConfig {
  std::string preset = "stroke";
  std::uint64_t seed = 0;
  nn::Variant variant = nn::Variant::CNN_LSTM;

  data::PreprocessConfig preprocess;
  std::vector<int> pools{4, 4, 5};
  std::vector<int> dilations{1, 2, 4, 8};
  int kernel = 3;
  int channels = 16;
  double dropout = 0.1;
  int ecg_rate_hz = 80;
  int output_len = 60;
  int lstm_hidden = 16;
  int spo2_hidden = 16;
  int dense_hidden = 128;

  train::TrainConfig train = train::TrainConfig::stroke();
  score::ScoringConfig scoring;
  double osa_ahi = 5.0;

  std::size_t n_validation = 0;
  std::vector<double> sweep_fractions{0.25, 0.5, 0.75, 1.0};
  std::size_t sweep_repeats = 10;

  static RunConfig defaults(const std::string& preset);

  /// Applies one key. Throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);

  /// Every key with its current value, in a stable order.
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string serialize() const;

  nn::ModelSpec model_spec() const;
  /// Cross-field checks (model spec, training config). Throws ConfigError.
  void validate() const;
};

/// Parses `key = value` lines; '#' starts a comment. Duplicate keys and
/// lines without '=' are ConfigErrors naming the line.
std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& origin);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

/// defaults(preset) <- file <- overrides, then validate().
RunConfig resolve_config(const std::map<std::string, std::string>& file_keys,
                         const std::map<std::string, std::string>& overrides);

void write_resolved_config(const std::filesystem::path& dir, const RunConfig& cfg);

} // namespace apnea
