#include "masr/checkpoint.hpp"

#include <cstdio>

#include "masr/binary_io.hpp"
#include "masr/error.hpp"

namespace masr::checkpoint {

namespace {

constexpr std::string_view kMagic = "MASRCKPT";

std::string hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void put_values(io::ByteWriter& w, const std::vector<double>& v, std::uint32_t bits) {
  for (double x : v) {
    if (bits == 32)
      w.f32(static_cast<float>(x));
    else
      w.f64(x);
  }
}

std::vector<double> get_values(io::ByteReader& r, std::size_t n, std::uint32_t bits) {
  if (n > r.remaining() / (bits / 8)) fail(ErrorKind::format, "checkpoint: truncated tensor data");
  std::vector<double> v(n);
  for (auto& x : v) x = bits == 32 ? static_cast<double>(r.f32()) : r.f64();
  return v;
}

}  // namespace

std::size_t Tensor::size() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

const Tensor& Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  fail(ErrorKind::format, "checkpoint has no tensor '" + name + "'");
}

std::vector<std::byte> encode(const Checkpoint& c) {
  if (c.precision_bits != 32 && c.precision_bits != 64)
    fail(ErrorKind::invalid_argument, "checkpoint precision must be 32 or 64 bits");
  io::ByteWriter w;
  w.tag(kMagic);
  w.u32(c.version);
  w.u64(c.config_hash);
  w.u64(c.root_seed);
  w.u64(c.quantizer_seed);
  w.u64(c.char_table_seed);
  w.u32(c.precision_bits);
  w.u64(c.step);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    const std::size_t n = t.size();
    if (t.value.size() != n || t.adam_m.size() != n || t.adam_v.size() != n)
      fail(ErrorKind::shape, "checkpoint tensor '" + t.name + "' has inconsistent sizes");
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    put_values(w, t.value, c.precision_bits);
    put_values(w, t.adam_m, c.precision_bits);
    put_values(w, t.adam_v, c.precision_bits);
  }
  return w.data();
}

Checkpoint decode(std::span<const std::byte> bytes, std::string_view context) {
  io::ByteReader r(bytes, std::string(context));
  if (!r.tag_matches(kMagic)) fail(ErrorKind::format, std::string(context) + ": not a checkpoint (bad magic)");
  Checkpoint c;
  c.version = r.u32();
  if (c.version != kVersion)
    fail(ErrorKind::format, std::string(context) + ": unsupported checkpoint version " + std::to_string(c.version) +
                                " (expected " + std::to_string(kVersion) + ")");
  c.config_hash = r.u64();
  c.root_seed = r.u64();
  c.quantizer_seed = r.u64();
  c.char_table_seed = r.u64();
  c.precision_bits = r.u32();
  if (c.precision_bits != 32 && c.precision_bits != 64)
    fail(ErrorKind::format, std::string(context) + ": bad precision " + std::to_string(c.precision_bits));
  c.step = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) fail(ErrorKind::format, std::string(context) + ": tensor '" + t.name + "' has rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(r.u64()));
    const std::size_t n = t.size();
    t.value = get_values(r, n, c.precision_bits);
    t.adam_m = get_values(r, n, c.precision_bits);
    t.adam_v = get_values(r, n, c.precision_bits);
    c.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) fail(ErrorKind::format, std::string(context) + ": trailing bytes after checkpoint");
  return c;
}

void save(const Checkpoint& c, const std::filesystem::path& path) { io::write_file(path, encode(c)); }

Checkpoint load(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode(bytes, path.string());
}

void require_hash(const Checkpoint& c, std::uint64_t expected) {
  if (c.config_hash != expected)
    fail(ErrorKind::config, "checkpoint config hash " + hex(c.config_hash) + " does not match the run config (" +
                                hex(expected) + ")");
}

}  // namespace masr::checkpoint
