#include "masr/binary_io.hpp"

#include <fstream>
#include <iterator>

#include "masr/error.hpp"

namespace masr::io {

std::span<const std::byte> ByteReader::bytes(std::size_t n) {
  if (n > remaining())
    fail(ErrorKind::format, context_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                                std::to_string(pos_) + ", have " + std::to_string(remaining()) + ")");
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}

bool ByteReader::tag_matches(std::string_view expected) {
  if (remaining() < expected.size()) return false;
  auto b = bytes(expected.size());
  return std::memcmp(b.data(), expected.data(), expected.size()) == 0;
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  auto b = bytes(n);
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open '" + path.string() + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) fail(ErrorKind::io, "short write to '" + path.string() + "'");
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::as_bytes(std::span(text.data(), text.size())));
}

}  // namespace masr::io
