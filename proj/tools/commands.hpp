#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace apnea::cli {

/// Bad invocation: exit code 2.
class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::optional<std::filesystem::path> config_file;
  std::vector<std::string> set; ///< key=value overrides
  std::map<std::string, std::string> flag_keys;
};

struct ImportOptions {
  std::string format;
  std::filesystem::path source;
  std::filesystem::path out;
  bool force = false;
  std::size_t patients = 8;
  double duration_s = 1500.0;
  int rate_hz = 80;
  bool no_spo2 = false;
  std::uint64_t seed = 0;
};

struct DataOptions {
  std::filesystem::path data;
  std::filesystem::path out;
  std::string split; ///< empty: command default
};

struct InferOptions {
  std::optional<std::filesystem::path> checkpoint;
  std::filesystem::path recording;
  std::filesystem::path out;
  bool svg = false;
  bool oracle = false;
};

struct EvaluateOptions {
  std::optional<std::filesystem::path> checkpoint;
  DataOptions data;
  bool oracle = false;
  bool svg = false;
};

int cmd_import(const CommonOptions& common, const ImportOptions& opts);
int cmd_preprocess(const CommonOptions& common, const DataOptions& opts);
int cmd_train(const CommonOptions& common, const DataOptions& opts);
int cmd_infer(const CommonOptions& common, const InferOptions& opts);
int cmd_evaluate(const CommonOptions& common, const EvaluateOptions& opts);
int cmd_cv(const CommonOptions& common, const DataOptions& opts);
int cmd_sweep(const CommonOptions& common, const DataOptions& opts);

} // namespace apnea::cli
