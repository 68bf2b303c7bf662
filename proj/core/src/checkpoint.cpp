#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "apnea/errors.hpp"
#include "apnea/model.hpp"

namespace apnea::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace {

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t read_u32(std::istream& in, const std::string& file) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw ParseError(file, 0, "checkpoint truncated");
  }
  return v;
}

void write_text(std::ostream& out, const std::string& text) {
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string read_text(std::istream& in, const std::string& file) {
  const auto n = read_u32(in, file);
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) {
    throw ParseError(file, 0, "checkpoint truncated");
  }
  return s;
}

void write_doubles(std::ostream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

void read_doubles(std::istream& in, Tensor& t, const std::string& file) {
  if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
    throw ParseError(file, 0, "checkpoint payload truncated");
  }
}

// One line per payload block: "param <name> <shape>" or "stats <name> <channels>".
std::string manifest(const Model& model) {
  std::ostringstream m;
  for (const auto& e : model.parameters().params()) {
    m << "param " << e.name << ' ' << to_string(e.var.shape()) << '\n';
  }
  for (const auto& e : model.parameters().all_stats()) {
    m << "stats " << e.name << ' ' << e.stats.running_mean.size() << '\n';
  }
  return m.str();
}

} // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw InputError("cannot write checkpoint '" + path.string() + "'");
  }
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  write_u32(out, kCheckpointVersion);
  write_text(out, model.spec().serialize());
  write_text(out, manifest(model));
  for (const auto& e : model.parameters().params()) {
    write_doubles(out, e.var.value());
  }
  for (const auto& e : model.parameters().all_stats()) {
    write_doubles(out, e.stats.running_mean);
    write_doubles(out, e.stats.running_var);
  }
  if (!out.flush()) {
    throw InputError("failed writing checkpoint '" + path.string() + "'");
  }
}

Model load_checkpoint(const std::filesystem::path& path) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw InputError("cannot open checkpoint '" + file + "'");
  }
  char magic[sizeof kCheckpointMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw ParseError(file, 0, "not a model checkpoint (bad magic)");
  }
  const auto version = read_u32(in, file);
  if (version != kCheckpointVersion) {
    throw ParseError(file, 0, "unsupported checkpoint version " + std::to_string(version));
  }
  ModelSpec spec = ModelSpec::deserialize(read_text(in, file));
  Model model(std::move(spec));
  if (read_text(in, file) != manifest(model)) {
    throw ParseError(file, 0, "checkpoint parameter manifest does not match its model spec");
  }
  for (auto& e : model.parameters().params()) {
    read_doubles(in, e.var.mutable_value(), file);
  }
  for (auto& e : model.parameters().all_stats()) {
    read_doubles(in, e.stats.running_mean, file);
    read_doubles(in, e.stats.running_var, file);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ParseError(file, 0, "trailing bytes after checkpoint payload");
  }
  return model;
}

} // namespace apnea::nn
