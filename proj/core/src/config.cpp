#include "apnea/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "apnea/errors.hpp"

namespace apnea {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) {
    return {};
  }
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_num(const std::string& key, const std::string& text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") {
    return true;
  }
  if (text == "false" || text == "0") {
    return false;
  }
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(parse_num<T>(key, trim(item)));
  }
  if (out.empty()) {
    throw ConfigError("config key '" + key + "': empty list");
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) {
      s += ',';
    }
    if constexpr (std::is_floating_point_v<T>) {
      s += fmt(v[i]);
    } else {
      s += std::to_string(v[i]);
    }
  }
  return s;
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Access>
Key number_key(const char* name, Access access) {
  return {name,
          [access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_num<T>(k, v); },
          [access](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt(access(const_cast<RunConfig&>(c)));
            } else {
              return std::to_string(access(const_cast<RunConfig&>(c)));
            }
          }};
}

template <typename Access>
Key bool_key(const char* name, Access access) {
  return {name, [access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_bool(k, v); },
          [access](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <typename T, typename Access>
Key list_key(const char* name, Access access) {
  return {name,
          [access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_list<T>(k, v); },
          [access](const RunConfig& c) { return fmt_list(access(const_cast<RunConfig&>(c))); }};
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      {"preset",
       [](RunConfig& c, const std::string&, const std::string& v) {
         if (v != "stroke" && v != "apnea_ecg") {
           throw ConfigError("config key 'preset': expected stroke or apnea_ecg, got '" + v + "'");
         }
         c.preset = v;
       },
       [](const RunConfig& c) { return c.preset; }},
      number_key<std::uint64_t>("seed", [](RunConfig& c) -> auto& { return c.seed; }),
      {"variant",
       [](RunConfig& c, const std::string&, const std::string& v) {
         try {
           c.variant = nn::parse_variant(v);
         } catch (const SpecError& e) {
           throw ConfigError(std::string("config key 'variant': ") + e.what());
         }
       },
       [](const RunConfig& c) { return std::string(nn::to_string(c.variant)); }},

      number_key<int>("bandpass.order", [](RunConfig& c) -> auto& { return c.preprocess.bandpass.order; }),
      number_key<double>("bandpass.low_hz", [](RunConfig& c) -> auto& { return c.preprocess.bandpass.low_hz; }),
      number_key<double>("bandpass.high_hz", [](RunConfig& c) -> auto& { return c.preprocess.bandpass.high_hz; }),
      bool_key("bandpass.zero_phase", [](RunConfig& c) -> auto& { return c.preprocess.bandpass.zero_phase; }),
      number_key<int>("window_s", [](RunConfig& c) -> auto& { return c.preprocess.window.window_s; }),
      bool_key("preprocess.per_instance_normalization",
               [](RunConfig& c) -> auto& { return c.preprocess.window.per_instance_normalization; }),
      bool_key("preprocess.per_recording_normalization",
               [](RunConfig& c) -> auto& { return c.preprocess.per_recording_normalization; }),
      number_key<double>("preprocess.max_align_lag_s", [](RunConfig& c) -> auto& { return c.preprocess.max_align_lag_s; }),
      number_key<double>("preprocess.min_present_fraction",
                         [](RunConfig& c) -> auto& { return c.preprocess.min_present_fraction; }),

      number_key<int>("model.ecg_rate_hz", [](RunConfig& c) -> auto& { return c.ecg_rate_hz; }),
      list_key<int>("model.pools", [](RunConfig& c) -> auto& { return c.pools; }),
      list_key<int>("model.dilations", [](RunConfig& c) -> auto& { return c.dilations; }),
      number_key<int>("model.kernel", [](RunConfig& c) -> auto& { return c.kernel; }),
      number_key<int>("model.channels", [](RunConfig& c) -> auto& { return c.channels; }),
      number_key<double>("model.dropout", [](RunConfig& c) -> auto& { return c.dropout; }),
      number_key<int>("model.output_len", [](RunConfig& c) -> auto& { return c.output_len; }),
      number_key<int>("model.lstm_hidden", [](RunConfig& c) -> auto& { return c.lstm_hidden; }),
      number_key<int>("model.spo2_hidden", [](RunConfig& c) -> auto& { return c.spo2_hidden; }),
      number_key<int>("model.dense_hidden", [](RunConfig& c) -> auto& { return c.dense_hidden; }),

      number_key<double>("train.base_lr", [](RunConfig& c) -> auto& { return c.train.base_lr; }),
      number_key<double>("train.max_lr", [](RunConfig& c) -> auto& { return c.train.max_lr; }),
      number_key<int>("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }),
      number_key<int>("train.max_epochs", [](RunConfig& c) -> auto& { return c.train.max_epochs; }),
      number_key<double>("train.base_momentum", [](RunConfig& c) -> auto& { return c.train.base_momentum; }),
      number_key<double>("train.max_momentum", [](RunConfig& c) -> auto& { return c.train.max_momentum; }),
      number_key<int>("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }),
      number_key<double>("train.clip_norm", [](RunConfig& c) -> auto& { return c.train.clip_norm; }),
      {"train.class_weight_positive",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "auto") {
           c.train.class_weight_positive.reset();
         } else {
           c.train.class_weight_positive = parse_num<double>(k, v);
         }
       },
       [](const RunConfig& c) {
         return c.train.class_weight_positive ? fmt(*c.train.class_weight_positive) : std::string("auto");
       }},
      number_key<double>("train.beta2", [](RunConfig& c) -> auto& { return c.train.beta2; }),
      number_key<double>("train.eps", [](RunConfig& c) -> auto& { return c.train.eps; }),
      number_key<double>("train.warmup_fraction", [](RunConfig& c) -> auto& { return c.train.warmup_fraction; }),
      number_key<double>("train.final_lr_ratio", [](RunConfig& c) -> auto& { return c.train.final_lr_ratio; }),

      number_key<double>("scoring.threshold", [](RunConfig& c) -> auto& { return c.scoring.threshold; }),
      number_key<std::int64_t>("scoring.min_event_s", [](RunConfig& c) -> auto& { return c.scoring.min_event_s; }),
      number_key<double>("scoring.osa_ahi", [](RunConfig& c) -> auto& { return c.osa_ahi; }),

      number_key<std::size_t>("eval.n_validation", [](RunConfig& c) -> auto& { return c.n_validation; }),
      list_key<double>("sweep.fractions", [](RunConfig& c) -> auto& { return c.sweep_fractions; }),
      number_key<std::size_t>("sweep.repeats", [](RunConfig& c) -> auto& { return c.sweep_repeats; }),
  };
  return table;
}

const Key& find_key(const std::string& name) {
  for (const auto& k : keys()) {
    if (name == k.name) {
      return k;
    }
  }
  throw ConfigError("unknown config key '" + name + "'");
}

} // namespace

RunConfig RunConfig::defaults(const std::string& preset) {
  RunConfig c;
  if (preset == "stroke") {
    return c;
  }
  if (preset != "apnea_ecg") {
    throw ConfigError("unknown preset '" + preset + "' (expected stroke or apnea_ecg)");
  }
  c.preset = preset;
  c.pools = {4, 5, 5};
  c.ecg_rate_hz = 100;
  c.output_len = 1;
  c.train = train::TrainConfig::apnea_ecg();
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) { find_key(key).set(*this, key, trim(value)); }

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : keys()) {
    out.emplace_back(k.name, k.get(*this));
  }
  return out;
}

std::string RunConfig::serialize() const {
  std::string s;
  for (const auto& [k, v] : entries()) {
    s += k + " = " + v + "\n";
  }
  return s;
}

nn::ModelSpec RunConfig::model_spec() const {
  nn::ModelSpec spec;
  spec.variant = variant;
  for (int p : pools) {
    nn::ConvBlockSpec b;
    b.dilations = dilations;
    b.kernel = kernel;
    b.channels = channels;
    b.dropout_rate = dropout;
    b.pool = p;
    spec.blocks.push_back(b);
  }
  spec.lstm_hidden = lstm_hidden;
  spec.spo2_hidden = spo2_hidden;
  spec.dense_hidden = dense_hidden;
  spec.output_len = output_len;
  spec.ecg_rate_hz = ecg_rate_hz;
  spec.window_s = preprocess.window.window_s;
  spec.seed = seed;
  return spec;
}

void RunConfig::validate() const {
  try {
    model_spec().validate();
  } catch (const SpecError& e) {
    throw ConfigError(e.what());
  }
  train.validate();
  if (!(scoring.threshold >= 0.0 && scoring.threshold <= 1.0)) {
    throw ConfigError("scoring.threshold must lie in [0, 1]");
  }
  if (scoring.min_event_s < 1) {
    throw ConfigError("scoring.min_event_s must be at least 1");
  }
  if (sweep_repeats == 0) {
    throw ConfigError("sweep.repeats must be positive");
  }
  for (double f : sweep_fractions) {
    if (!(f > 0.0 && f <= 1.0)) {
      throw ConfigError("sweep.fractions must lie in (0, 1]");
    }
  }
}

std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    if (!out.emplace(key, trim(line.substr(eq + 1))).second) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read config file '" + path.string() + "'");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

RunConfig resolve_config(const std::map<std::string, std::string>& file_keys,
                         const std::map<std::string, std::string>& overrides) {
  std::string preset = "stroke";
  if (auto it = file_keys.find("preset"); it != file_keys.end()) {
    preset = it->second;
  }
  if (auto it = overrides.find("preset"); it != overrides.end()) {
    preset = it->second;
  }
  RunConfig cfg = RunConfig::defaults(preset);
  for (const auto& [k, v] : file_keys) {
    cfg.set(k, v);
  }
  for (const auto& [k, v] : overrides) {
    cfg.set(k, v);
  }
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

void write_resolved_config(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.resolved");
  if (!out) {
    throw InputError("cannot write resolved config into '" + dir.string() + "'");
  }
  out << cfg.serialize();
}

} // namespace apnea
