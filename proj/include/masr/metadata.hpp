#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "masr/datasets.hpp"
#include "masr/matrix.hpp"

namespace masr::metadata {

// Fixed, non-learnable metadata encoders. Every encoding is unit-norm.
struct MetadataEncoding {
  std::vector<double> vector;
};

enum class LangVecCategory { syntactic, geographic_feat, phonetic, featural, genetic, inventory };

std::string_view to_string(LangVecCategory c);
LangVecCategory parse_category(std::string_view name);

class LangVecTable {
 public:
  LangVecTable(LangVecCategory category, std::size_t dim) : category_(category), dim_(dim) {}

  LangVecCategory category() const { return category_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& label) const { return entries_.contains(label); }
  const std::map<std::string, std::vector<double>>& entries() const { return entries_; }

  // Normalizes `values`; throws on dimension mismatch, zero vector, duplicate label.
  void add(const std::string& label, std::vector<double> values);
  const std::vector<double>* find(const std::string& label) const;

 private:
  LangVecCategory category_;
  std::size_t dim_;
  std::map<std::string, std::vector<double>> entries_;
};

// TSV with header `lang\tf0\tf1...`, one language per line.
LangVecTable parse_langvec(std::string_view text, LangVecCategory category, std::string_view context = "langvec");
LangVecTable load_langvec(const std::filesystem::path& path, LangVecCategory category);
std::string serialize_langvec(const LangVecTable& table);

// Table for a synthetic corpus: one axis per language, and for each confusable
// pair (a, b) language b is rotated towards a so cos(e_a, e_b) = similarity.
LangVecTable synth_langvec(const datasets::SynthSpec& spec, double similarity,
                           LangVecCategory category = LangVecCategory::syntactic);

// std::nullopt is the explicit miss for an unknown label.
std::optional<MetadataEncoding> encode_language(const LangVecTable& table, const std::string& label);

// Unit sphere point (cos lat cos lon, cos lat sin lon, sin lat).
MetadataEncoding encode_geo(double lat_deg, double lon_deg);

inline constexpr double kEarthRadiusKm = 6371.0;
double haversine_km(const datasets::GeoLocation& a, const datasets::GeoLocation& b, double radius_km = kEarthRadiusKm);

// Byte-level character embedding table (256 x dim), fixed by its seed.
class CharTable {
 public:
  CharTable(std::uint64_t seed, std::size_t dim);
  explicit CharTable(Matrix<double> rows);

  std::size_t dim() const { return rows_.cols(); }
  const Matrix<double>& rows() const { return rows_; }

 private:
  Matrix<double> rows_;
};

// Mean of per-byte rows, l2-normalized; nullopt for an empty transcript (or a
// degenerate zero mean).
std::optional<MetadataEncoding> encode_text(std::string_view transcript, const CharTable& table);

}  // namespace masr::metadata
