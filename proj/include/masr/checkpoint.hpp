#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace masr::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

// One learnable tensor with its Adam moments. Values are held in double; the
// file stores them at `Checkpoint::precision_bits`, and f32 -> f64 -> f32 is exact.
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> adam_m;
  std::vector<double> adam_v;

  std::size_t size() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct Checkpoint {
  std::uint32_t version = kVersion;
  std::uint64_t config_hash = 0;
  std::uint64_t root_seed = 0;
  std::uint64_t quantizer_seed = 0;
  std::uint64_t char_table_seed = 0;
  std::uint32_t precision_bits = 32;  // 32 or 64
  std::uint64_t step = 0;
  std::vector<Tensor> tensors;

  const Tensor& find(const std::string& name) const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::byte> encode(const Checkpoint& c);
Checkpoint decode(std::span<const std::byte> bytes, std::string_view context = "checkpoint");

void save(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

// Throws masr::Error(config) when a checkpoint was written under another config.
void require_hash(const Checkpoint& c, std::uint64_t expected);

}  // namespace masr::checkpoint
