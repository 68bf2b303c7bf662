#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apnea/dataset.hpp"
#include "apnea/layers.hpp"
#include "apnea/tensor.hpp"

namespace apnea::nn {

enum class Variant { CNN_DENSE, CNN_LSTM, SPO2_BILSTM, CNN_LSTM_SPO2 };

std::string_view to_string(Variant v) noexcept;
Variant parse_variant(std::string_view name);

inline bool uses_ecg(Variant v) noexcept { return v != Variant::SPO2_BILSTM; }
inline bool uses_spo2(Variant v) noexcept { return v == Variant::SPO2_BILSTM || v == Variant::CNN_LSTM_SPO2; }

/// One convolutional block: a series of depthwise-separable convolutions
/// (one per dilation entry), each followed by batch norm, ReLU and spatial
/// dropout with a residual connection around it, then average pooling.
struct ConvBlockSpec {
  std::vector<int> dilations{1, 2, 4, 8};
  int kernel = 3;
  int channels = 16;
  double dropout_rate = 0.1;
  int pool = 4;

  std::size_t n_series() const noexcept { return dilations.size(); }
};

struct ModelSpec {
  Variant variant = Variant::CNN_LSTM;
  std::vector<ConvBlockSpec> blocks;
  int lstm_hidden = 16;
  int spo2_hidden = 16;
  int dense_hidden = 128;
  int output_len = 60;
  int ecg_rate_hz = 80;
  int window_s = 60;
  std::uint64_t seed = 0;

  /// 80 Hz, pools 4-4-5, 60 per-second outputs.
  static ModelSpec stroke_unit(Variant variant);
  /// 100 Hz, pools 4-5-5, one per-minute output.
  static ModelSpec apnea_ecg(Variant variant);

  std::size_t sequence_len() const noexcept { return 3 * static_cast<std::size_t>(window_s); }
  std::size_t ecg_input_len() const noexcept { return sequence_len() * static_cast<std::size_t>(ecg_rate_hz); }
  std::size_t conv_channels() const noexcept;

  /// Throws SpecError when the pools do not bring the ECG input down to
  /// exactly one step per second, or any other field is out of range.
  void validate() const;

  /// key=value lines, the same text stored in checkpoints.
  std::string serialize() const;
  static ModelSpec deserialize(std::string_view text);
};

/// Named learnable tensors plus batch-norm running statistics.
class ParameterStore {
public:
  struct Entry {
    std::string name;
    Var var;
  };
  struct StatsEntry {
    std::string name;
    BatchNormStats stats;
  };

  Var& add(const std::string& name, Tensor init);
  BatchNormStats& add_stats(const std::string& name, std::size_t channels);

  Var& get(const std::string& name);
  const Var& get(const std::string& name) const;
  BatchNormStats& stats(const std::string& name);
  const BatchNormStats& stats(const std::string& name) const;

  std::vector<Entry>& params() noexcept { return params_; }
  const std::vector<Entry>& params() const noexcept { return params_; }
  std::vector<StatsEntry>& all_stats() noexcept { return stats_; }
  const std::vector<StatsEntry>& all_stats() const noexcept { return stats_; }

  std::size_t parameter_count() const noexcept;
  void zero_grad();

  Mode mode() const noexcept { return mode_; }
  void set_mode(Mode m) noexcept { mode_ = m; }

private:
  std::vector<Entry> params_;
  std::vector<StatsEntry> stats_;
  std::map<std::string, std::size_t, std::less<>> param_index_;
  std::map<std::string, std::size_t, std::less<>> stats_index_;
  Mode mode_ = Mode::train;
};

/// Input tensors for a batch of instances.
struct Batch {
  Tensor ecg;  ///< [N, 1, ecg_input_len]
  Tensor spo2; ///< [N, sequence_len, 1]
  std::size_t size = 0;
};

class Model {
public:
  /// Builds and initializes parameters deterministically from spec.seed.
  explicit Model(ModelSpec spec);

  const ModelSpec& spec() const noexcept { return spec_; }
  ParameterStore& parameters() noexcept { return params_; }
  const ParameterStore& parameters() const noexcept { return params_; }

  /// Throws ShapeError on an instance that does not match the spec, ConfigError
  /// when the variant needs SpO2 and the instance has none.
  Batch make_batch(std::span<const data::WindowInstance* const> instances) const;

  /// Raw scores [N, output_len]. Tapes for backward() when grad mode is on.
  /// Train mode updates batch-norm running statistics and draws dropout masks.
  Var forward(const Batch& batch, Mode mode);

  /// Eval-mode scores without taping. Safe to call concurrently.
  Tensor predict(const Batch& batch) const;
  std::vector<double> predict(const data::WindowInstance& instance) const;

  /// Output of the convolutional stack, [N, channels, sequence_len].
  Tensor conv_features(const Batch& batch) const;

  /// Accumulates parameter gradients. Throws StateError if no taped forward
  /// is pending.
  void backward(const Var& loss);

  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

private:
  struct Context {
    Mode mode;
    std::mt19937_64* rng;
  };

  void build();
  Var conv_stack(const Var& ecg, const Context& ctx);
  Var conv_block(const Var& x, std::size_t block, std::size_t in_channels, const Context& ctx);
  Var lstm_head(const Var& seq, const std::string& prefix, bool bidirectional);
  Var run(const Batch& batch, const Context& ctx);
  Var bn(const Var& x, const std::string& name, const Context& ctx);

  ModelSpec spec_;
  ParameterStore params_;
  std::mt19937_64 dropout_rng_;
  bool pending_graph_ = false;
};

// Checkpoint: magic, version, spec text, parameter manifest, then
// little-endian float64 payloads in manifest order.
inline constexpr char kCheckpointMagic[8] = {'A', 'P', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

} // namespace apnea::nn
