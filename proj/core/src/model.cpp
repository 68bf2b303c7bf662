#include "apnea/model.hpp"

#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "apnea/errors.hpp"

namespace apnea::nn {

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += (i ? "," : "") + std::to_string(v[i]);
  }
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw SpecError("model spec: bad value for '" + std::string(key) + "': '" + std::string(text) + "'");
  }
  return v;
}

std::vector<int> parse_int_list(std::string_view key, std::string_view text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto next = text.find(',', pos);
    const auto piece = text.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos);
    out.push_back(parse_number<int>(key, piece));
    if (next == std::string_view::npos) {
      break;
    }
    pos = next + 1;
  }
  return out;
}

std::vector<ConvBlockSpec> default_blocks(std::initializer_list<int> pools) {
  std::vector<ConvBlockSpec> blocks;
  for (int p : pools) {
    ConvBlockSpec b;
    b.pool = p;
    blocks.push_back(b);
  }
  return blocks;
}

std::string block_key(std::size_t b, const char* field) { return "block" + std::to_string(b) + "." + field; }

} // namespace

std::string_view to_string(Variant v) noexcept {
  switch (v) {
  case Variant::CNN_DENSE:
    return "CNN_DENSE";
  case Variant::CNN_LSTM:
    return "CNN_LSTM";
  case Variant::SPO2_BILSTM:
    return "SPO2_BILSTM";
  case Variant::CNN_LSTM_SPO2:
    break;
  }
  return "CNN_LSTM_SPO2";
}

Variant parse_variant(std::string_view name) {
  for (auto v : {Variant::CNN_DENSE, Variant::CNN_LSTM, Variant::SPO2_BILSTM, Variant::CNN_LSTM_SPO2}) {
    if (to_string(v) == name) {
      return v;
    }
  }
  throw SpecError("unknown model variant '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// ModelSpec

ModelSpec ModelSpec::stroke_unit(Variant variant) {
  ModelSpec s;
  s.variant = variant;
  s.blocks = default_blocks({4, 4, 5});
  s.ecg_rate_hz = 80;
  s.output_len = 60;
  return s;
}

ModelSpec ModelSpec::apnea_ecg(Variant variant) {
  ModelSpec s;
  s.variant = variant;
  s.blocks = default_blocks({4, 5, 5});
  s.ecg_rate_hz = 100;
  s.output_len = 1;
  return s;
}

std::size_t ModelSpec::conv_channels() const noexcept {
  return blocks.empty() ? 0 : static_cast<std::size_t>(blocks.back().channels);
}

void ModelSpec::validate() const {
  if (window_s <= 0) {
    throw SpecError("model spec: window_s must be positive");
  }
  if (output_len != window_s && output_len != 1) {
    throw SpecError("model spec: output_len must equal window_s (" + std::to_string(window_s) + ") or 1, got " +
                    std::to_string(output_len));
  }
  if (uses_ecg(variant)) {
    if (blocks.empty()) {
      throw SpecError("model spec: ECG variants need at least one convolutional block");
    }
    if (ecg_rate_hz <= 0) {
      throw SpecError("model spec: ecg_rate_hz must be positive");
    }
    long pool_product = 1;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& blk = blocks[b];
      const std::string where = "model spec: block " + std::to_string(b) + ": ";
      if (blk.kernel < 1 || blk.kernel % 2 == 0) {
        throw SpecError(where + "kernel must be odd, got " + std::to_string(blk.kernel));
      }
      if (blk.channels < 1) {
        throw SpecError(where + "channels must be positive");
      }
      if (blk.pool < 1) {
        throw SpecError(where + "pool must be >= 1");
      }
      if (blk.dilations.empty()) {
        throw SpecError(where + "needs at least one series (dilation entry)");
      }
      for (int d : blk.dilations) {
        if (d < 1) {
          throw SpecError(where + "dilations must be positive");
        }
      }
      if (!(blk.dropout_rate >= 0.0 && blk.dropout_rate < 1.0)) {
        throw SpecError(where + "dropout_rate must be in [0, 1)");
      }
      pool_product *= blk.pool;
    }
    const auto seq = static_cast<long>(sequence_len());
    if (pool_product * seq != static_cast<long>(ecg_input_len())) {
      throw SpecError("model spec: pools multiply to " + std::to_string(pool_product) + " but " +
                      std::to_string(ecg_input_len()) + " ECG samples must reduce to " + std::to_string(seq) +
                      " steps (pool product must equal ecg_rate_hz " + std::to_string(ecg_rate_hz) + ")");
    }
  }
  if (lstm_hidden < 1 || spo2_hidden < 1 || dense_hidden < 1) {
    throw SpecError("model spec: hidden sizes must be positive");
  }
}

std::string ModelSpec::serialize() const {
  std::ostringstream out;
  out << "variant=" << to_string(variant) << '\n';
  out << "window_s=" << window_s << '\n';
  out << "ecg_rate_hz=" << ecg_rate_hz << '\n';
  out << "output_len=" << output_len << '\n';
  out << "lstm_hidden=" << lstm_hidden << '\n';
  out << "spo2_hidden=" << spo2_hidden << '\n';
  out << "dense_hidden=" << dense_hidden << '\n';
  out << "seed=" << seed << '\n';
  out << "blocks=" << blocks.size() << '\n';
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    out << block_key(b, "dilations") << '=' << join(blocks[b].dilations) << '\n';
    out << block_key(b, "kernel") << '=' << blocks[b].kernel << '\n';
    out << block_key(b, "channels") << '=' << blocks[b].channels << '\n';
    out << block_key(b, "dropout") << '=' << fmt(blocks[b].dropout_rate) << '\n';
    out << block_key(b, "pool") << '=' << blocks[b].pool << '\n';
  }
  return out.str();
}

ModelSpec ModelSpec::deserialize(std::string_view text) {
  std::map<std::string, std::string, std::less<>> kv;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto next = text.find('\n', pos);
    if (next == std::string_view::npos) {
      next = text.size();
    }
    const auto line = text.substr(pos, next - pos);
    pos = next + 1;
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw SpecError("model spec: malformed line '" + std::string(line) + "'");
    }
    kv.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
  }
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      throw SpecError("model spec: missing key '" + key + "'");
    }
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  ModelSpec s;
  s.variant = parse_variant(take("variant"));
  s.window_s = parse_number<int>("window_s", take("window_s"));
  s.ecg_rate_hz = parse_number<int>("ecg_rate_hz", take("ecg_rate_hz"));
  s.output_len = parse_number<int>("output_len", take("output_len"));
  s.lstm_hidden = parse_number<int>("lstm_hidden", take("lstm_hidden"));
  s.spo2_hidden = parse_number<int>("spo2_hidden", take("spo2_hidden"));
  s.dense_hidden = parse_number<int>("dense_hidden", take("dense_hidden"));
  s.seed = parse_number<std::uint64_t>("seed", take("seed"));
  const auto n_blocks = parse_number<std::size_t>("blocks", take("blocks"));
  for (std::size_t b = 0; b < n_blocks; ++b) {
    ConvBlockSpec blk;
    blk.dilations = parse_int_list(block_key(b, "dilations"), take(block_key(b, "dilations")));
    blk.kernel = parse_number<int>("kernel", take(block_key(b, "kernel")));
    blk.channels = parse_number<int>("channels", take(block_key(b, "channels")));
    blk.dropout_rate = parse_number<double>("dropout", take(block_key(b, "dropout")));
    blk.pool = parse_number<int>("pool", take(block_key(b, "pool")));
    s.blocks.push_back(std::move(blk));
  }
  if (!kv.empty()) {
    throw SpecError("model spec: unknown key '" + kv.begin()->first + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------
// ParameterStore

Var& ParameterStore::add(const std::string& name, Tensor init) {
  if (param_index_.count(name)) {
    throw SpecError("parameter '" + name + "' registered twice");
  }
  param_index_.emplace(name, params_.size());
  params_.push_back({name, Var(std::move(init), true)});
  return params_.back().var;
}

BatchNormStats& ParameterStore::add_stats(const std::string& name, std::size_t channels) {
  if (stats_index_.count(name)) {
    throw SpecError("statistics '" + name + "' registered twice");
  }
  stats_index_.emplace(name, stats_.size());
  stats_.push_back({name, BatchNormStats(channels)});
  return stats_.back().stats;
}

Var& ParameterStore::get(const std::string& name) {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) {
    throw SpecError("no parameter named '" + name + "'");
  }
  return params_[it->second].var;
}

const Var& ParameterStore::get(const std::string& name) const {
  return const_cast<ParameterStore*>(this)->get(name);
}

BatchNormStats& ParameterStore::stats(const std::string& name) {
  auto it = stats_index_.find(name);
  if (it == stats_index_.end()) {
    throw SpecError("no statistics named '" + name + "'");
  }
  return stats_[it->second].stats;
}

const BatchNormStats& ParameterStore::stats(const std::string& name) const {
  return const_cast<ParameterStore*>(this)->stats(name);
}

std::size_t ParameterStore::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& e : params_) {
    n += e.var.value().size();
  }
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : params_) {
    e.var.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelSpec spec) : spec_(std::move(spec)), dropout_rng_(spec_.seed ^ 0x9e3779b97f4a7c15ULL) {
  spec_.validate();
  build();
}

void Model::build() {
  std::mt19937_64 rng(spec_.seed);
  auto uniform = [&rng](Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) {
      v = dist(rng);
    }
    return t;
  };
  auto fan_in = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  if (uses_ecg(spec_.variant)) {
    std::size_t in_ch = 1;
    for (std::size_t b = 0; b < spec_.blocks.size(); ++b) {
      const auto& blk = spec_.blocks[b];
      const auto c = static_cast<std::size_t>(blk.channels);
      const auto k = static_cast<std::size_t>(blk.kernel);
      const std::string prefix = "block" + std::to_string(b);
      for (std::size_t s = 0; s < blk.n_series(); ++s) {
        const std::size_t series_in = s == 0 ? in_ch : c;
        const std::string sp = prefix + ".series" + std::to_string(s);
        params_.add(sp + ".dw.weight", uniform({series_in, k}, fan_in(k)));
        params_.add(sp + ".pw.weight", uniform({c, series_in}, fan_in(series_in)));
        params_.add(sp + ".pw.bias", uniform({c}, fan_in(series_in)));
        params_.add(sp + ".bn.gamma", Tensor({c}, 1.0));
        params_.add(sp + ".bn.beta", Tensor({c}, 0.0));
        params_.add_stats(sp + ".bn", c);
      }
      if (in_ch != c) {
        params_.add(prefix + ".proj.weight", uniform({c, in_ch}, fan_in(in_ch)));
        params_.add(prefix + ".proj.bias", uniform({c}, fan_in(in_ch)));
      }
      in_ch = c;
    }
  }

  const auto seq = spec_.sequence_len();
  const auto c = spec_.conv_channels();
  const auto out = static_cast<std::size_t>(spec_.output_len);
  auto add_lstm = [&](const std::string& prefix, std::size_t features, std::size_t hidden) {
    const double bound = fan_in(hidden);
    params_.add(prefix + ".w_ih", uniform({4 * hidden, features}, bound));
    params_.add(prefix + ".w_hh", uniform({4 * hidden, hidden}, bound));
    Tensor bias = uniform({4 * hidden}, bound);
    for (std::size_t u = hidden; u < 2 * hidden; ++u) {
      bias[u] = 1.0; // forget gate
    }
    params_.add(prefix + ".bias", std::move(bias));
  };

  std::size_t head_features = 0;
  switch (spec_.variant) {
  case Variant::CNN_DENSE: {
    const auto hidden = static_cast<std::size_t>(spec_.dense_hidden);
    params_.add("head.reduce.weight", uniform({1, c}, fan_in(c)));
    params_.add("head.reduce.bias", uniform({1}, fan_in(c)));
    params_.add("head.dense1.weight", uniform({hidden, seq}, fan_in(seq)));
    params_.add("head.dense1.bias", uniform({hidden}, fan_in(seq)));
    params_.add("head.dense2.weight", uniform({out, hidden}, fan_in(hidden)));
    params_.add("head.dense2.bias", uniform({out}, fan_in(hidden)));
    return;
  }
  case Variant::CNN_LSTM:
    add_lstm("ecg_lstm", c, static_cast<std::size_t>(spec_.lstm_hidden));
    head_features = static_cast<std::size_t>(spec_.lstm_hidden);
    break;
  case Variant::SPO2_BILSTM:
    add_lstm("spo2_lstm_fwd", 1, static_cast<std::size_t>(spec_.spo2_hidden));
    add_lstm("spo2_lstm_bwd", 1, static_cast<std::size_t>(spec_.spo2_hidden));
    head_features = 2 * static_cast<std::size_t>(spec_.spo2_hidden);
    break;
  case Variant::CNN_LSTM_SPO2:
    add_lstm("ecg_lstm", c, static_cast<std::size_t>(spec_.lstm_hidden));
    add_lstm("spo2_lstm_fwd", 1, static_cast<std::size_t>(spec_.spo2_hidden));
    add_lstm("spo2_lstm_bwd", 1, static_cast<std::size_t>(spec_.spo2_hidden));
    head_features = static_cast<std::size_t>(spec_.lstm_hidden) + 2 * static_cast<std::size_t>(spec_.spo2_hidden);
    break;
  }
  params_.add("head.out.weight", uniform({1, head_features}, fan_in(head_features)));
  params_.add("head.out.bias", uniform({1}, fan_in(head_features)));
}

Batch Model::make_batch(std::span<const data::WindowInstance* const> instances) const {
  const std::size_t n = instances.size();
  if (n == 0) {
    throw InputError("make_batch: empty batch");
  }
  Batch batch;
  batch.size = n;
  const std::size_t seq = spec_.sequence_len();
  if (uses_ecg(spec_.variant)) {
    const std::size_t len = spec_.ecg_input_len();
    batch.ecg = Tensor({n, 1, len});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ctx = instances[i]->ecg_ctx;
      if (ctx.size() != len) {
        throw ShapeError("make_batch: ECG context has " + std::to_string(ctx.size()) + " samples, model expects " +
                         std::to_string(len));
      }
      std::copy(ctx.begin(), ctx.end(), batch.ecg.data() + i * len);
    }
  }
  if (uses_spo2(spec_.variant)) {
    batch.spo2 = Tensor({n, seq, 1});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ctx = instances[i]->spo2_ctx;
      if (ctx.empty()) {
        throw ConfigError("make_batch: variant " + std::string(to_string(spec_.variant)) +
                          " needs SpO2 but instance of patient '" + instances[i]->patient_id + "' has none");
      }
      if (ctx.size() != seq) {
        throw ShapeError("make_batch: SpO2 context has " + std::to_string(ctx.size()) + " samples, model expects " +
                         std::to_string(seq));
      }
      std::copy(ctx.begin(), ctx.end(), batch.spo2.data() + i * seq);
    }
  }
  return batch;
}

Var Model::bn(const Var& x, const std::string& name, const Context& ctx) {
  const Var& gamma = params_.get(name + ".gamma");
  const Var& beta = params_.get(name + ".beta");
  if (ctx.mode == Mode::eval) {
    return batchnorm1d_eval(x, gamma, beta, params_.stats(name));
  }
  return batchnorm1d(x, gamma, beta, params_.stats(name), Mode::train);
}

Var Model::conv_block(const Var& x, std::size_t block, std::size_t in_channels, const Context& ctx) {
  const auto& blk = spec_.blocks[block];
  const auto c = static_cast<std::size_t>(blk.channels);
  const std::string prefix = "block" + std::to_string(block);
  Var cur = x;
  for (std::size_t s = 0; s < blk.n_series(); ++s) {
    const std::string sp = prefix + ".series" + std::to_string(s);
    Var h = depthwise_conv1d(cur, params_.get(sp + ".dw.weight"), static_cast<std::size_t>(blk.dilations[s]));
    h = pointwise_conv1d(h, params_.get(sp + ".pw.weight"), params_.get(sp + ".pw.bias"));
    h = bn(h, sp + ".bn", ctx);
    h = relu(h);
    if (ctx.mode == Mode::train && blk.dropout_rate > 0.0) {
      h = spatial_dropout(h, blk.dropout_rate, ctx.mode, *ctx.rng);
    }
    Var skip = cur;
    if (s == 0 && in_channels != c) {
      skip = pointwise_conv1d(cur, params_.get(prefix + ".proj.weight"), params_.get(prefix + ".proj.bias"));
    }
    cur = add(h, skip);
  }
  return avg_pool1d(cur, static_cast<std::size_t>(blk.pool));
}

Var Model::conv_stack(const Var& ecg, const Context& ctx) {
  Var cur = ecg;
  std::size_t in_ch = 1;
  for (std::size_t b = 0; b < spec_.blocks.size(); ++b) {
    cur = conv_block(cur, b, in_ch, ctx);
    in_ch = static_cast<std::size_t>(spec_.blocks[b].channels);
  }
  if (cur.shape()[2] != spec_.sequence_len()) {
    throw SpecError("conv stack produced " + std::to_string(cur.shape()[2]) + " steps, expected " +
                    std::to_string(spec_.sequence_len()));
  }
  return cur;
}

Var Model::lstm_head(const Var& seq, const std::string& prefix, bool bidirectional) {
  if (!bidirectional) {
    return lstm(seq, params_.get(prefix + ".w_ih"), params_.get(prefix + ".w_hh"), params_.get(prefix + ".bias"),
                false);
  }
  Var fwd = lstm(seq, params_.get(prefix + "_fwd.w_ih"), params_.get(prefix + "_fwd.w_hh"),
                 params_.get(prefix + "_fwd.bias"), false);
  Var bwd = lstm(seq, params_.get(prefix + "_bwd.w_ih"), params_.get(prefix + "_bwd.w_hh"),
                 params_.get(prefix + "_bwd.bias"), true);
  return concat_features(fwd, bwd);
}

Var Model::run(const Batch& batch, const Context& ctx) {
  const std::size_t n = batch.size;
  const std::size_t seq = spec_.sequence_len();
  const auto window = static_cast<std::size_t>(spec_.window_s);
  const auto out = static_cast<std::size_t>(spec_.output_len);

  if (spec_.variant == Variant::CNN_DENSE) {
    Var feat = conv_stack(Var(batch.ecg), ctx);
    Var r = pointwise_conv1d(feat, params_.get("head.reduce.weight"), params_.get("head.reduce.bias"));
    r = reshape(r, {n, seq});
    r = relu(linear(r, params_.get("head.dense1.weight"), params_.get("head.dense1.bias")));
    return linear(r, params_.get("head.dense2.weight"), params_.get("head.dense2.bias"));
  }

  Var sequence;
  if (uses_ecg(spec_.variant)) {
    Var feat = conv_stack(Var(batch.ecg), ctx);
    sequence = lstm_head(transpose_ct(feat), "ecg_lstm", false);
  }
  if (uses_spo2(spec_.variant)) {
    Var spo2_seq = lstm_head(Var(batch.spo2), "spo2_lstm", true);
    sequence = sequence.defined() ? concat_features(sequence, spo2_seq) : spo2_seq;
  }
  // Per-step projection over the target window, or the last step for a
  // single per-window score.
  Var steps = out == window ? slice_time(sequence, window, window) : slice_time(sequence, seq - 1, 1);
  Var scores = linear(steps, params_.get("head.out.weight"), params_.get("head.out.bias"));
  return reshape(scores, {n, out});
}

Var Model::forward(const Batch& batch, Mode mode) {
  params_.set_mode(mode);
  const Context ctx{mode, &dropout_rng_};
  Var out = run(batch, ctx);
  if (grad_enabled() && out.requires_grad()) {
    pending_graph_ = true;
  }
  return out;
}

Tensor Model::predict(const Batch& batch) const {
  NoGradGuard guard;
  const Context ctx{Mode::eval, nullptr};
  // Eval mode reads parameters and running statistics only.
  return const_cast<Model*>(this)->run(batch, ctx).value();
}

std::vector<double> Model::predict(const data::WindowInstance& instance) const {
  const data::WindowInstance* one[] = {&instance};
  return predict(make_batch(one)).vector();
}

Tensor Model::conv_features(const Batch& batch) const {
  if (!uses_ecg(spec_.variant)) {
    throw SpecError("conv_features: variant has no convolutional stack");
  }
  NoGradGuard guard;
  const Context ctx{Mode::eval, nullptr};
  return const_cast<Model*>(this)->conv_stack(Var(batch.ecg), ctx).value();
}

void Model::backward(const Var& loss) {
  if (!pending_graph_) {
    throw StateError("Model::backward: no taped forward pass is pending");
  }
  pending_graph_ = false;
  nn::backward(loss);
}

} // namespace apnea::nn
