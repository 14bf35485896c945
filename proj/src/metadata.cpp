#include "masr/metadata.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "masr/binary_io.hpp"
#include "masr/error.hpp"
#include "masr/rng.hpp"

namespace masr::metadata {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

// Returns false for a zero (or non-finite) vector.
bool normalize(std::vector<double>& v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double n = std::sqrt(n2);
  if (!(n > 0.0) || !std::isfinite(n)) return false;
  for (double& x : v) x /= n;
  return true;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

std::string_view to_string(LangVecCategory c) {
  switch (c) {
    case LangVecCategory::syntactic: return "syntactic";
    case LangVecCategory::geographic_feat: return "geographic_feat";
    case LangVecCategory::phonetic: return "phonetic";
    case LangVecCategory::featural: return "featural";
    case LangVecCategory::genetic: return "genetic";
    case LangVecCategory::inventory: return "inventory";
  }
  return "unknown";
}

LangVecCategory parse_category(std::string_view name) {
  for (auto c : {LangVecCategory::syntactic, LangVecCategory::geographic_feat, LangVecCategory::phonetic,
                 LangVecCategory::featural, LangVecCategory::genetic, LangVecCategory::inventory})
    if (to_string(c) == name) return c;
  fail(ErrorKind::invalid_argument, "unknown lang2vec category '" + std::string(name) + "'");
}

void LangVecTable::add(const std::string& label, std::vector<double> values) {
  if (values.size() != dim_)
    fail(ErrorKind::shape, "langvec entry '" + label + "' has " + std::to_string(values.size()) +
                               " values, expected " + std::to_string(dim_));
  if (entries_.contains(label)) fail(ErrorKind::duplicate, "duplicate langvec label '" + label + "'");
  for (double x : values)
    if (!std::isfinite(x)) fail(ErrorKind::numeric, "langvec entry '" + label + "' contains a non-finite value");
  if (!normalize(values)) fail(ErrorKind::numeric, "langvec entry '" + label + "' is a zero vector");
  entries_.emplace(label, std::move(values));
}

const std::vector<double>* LangVecTable::find(const std::string& label) const {
  auto it = entries_.find(label);
  return it == entries_.end() ? nullptr : &it->second;
}

LangVecTable parse_langvec(std::string_view text, LangVecCategory category, std::string_view context) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  std::optional<LangVecTable> table;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = std::string(context) + ":" + std::to_string(line_no);
    auto cols = split_tabs(line);
    if (!table) {
      if (cols.size() < 2 || cols[0] != "lang")
        fail(ErrorKind::parse, where + ": header must be 'lang\\tf0\\tf1...'");
      table.emplace(category, cols.size() - 1);
      continue;
    }
    if (cols.size() != table->dim() + 1)
      fail(ErrorKind::shape, where + ": ragged row for '" + cols[0] + "' (" + std::to_string(cols.size() - 1) +
                                 " values, header declares " + std::to_string(table->dim()) + ")");
    std::vector<double> values;
    values.reserve(table->dim());
    for (std::size_t i = 1; i < cols.size(); ++i) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cols[i], &used));
        if (used != cols[i].size()) throw std::invalid_argument(cols[i]);
      } catch (const std::exception&) {
        fail(ErrorKind::parse, where + ": bad number '" + cols[i] + "'");
      }
    }
    try {
      table->add(cols[0], std::move(values));
    } catch (const Error& e) {
      throw Error(e.kind(), where + ": " + e.what());
    }
  }
  if (!table) fail(ErrorKind::parse, std::string(context) + ": missing header");
  return *table;
}

LangVecTable load_langvec(const std::filesystem::path& path, LangVecCategory category) {
  const auto bytes = io::read_file(path);
  return parse_langvec(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), category,
                       path.string());
}

std::string serialize_langvec(const LangVecTable& table) {
  std::ostringstream out;
  out.precision(17);
  out << "lang";
  for (std::size_t i = 0; i < table.dim(); ++i) out << "\tf" << i;
  out << '\n';
  for (const auto& [label, v] : table.entries()) {
    out << label;
    for (double x : v) out << '\t' << x;
    out << '\n';
  }
  return out.str();
}

std::optional<MetadataEncoding> encode_language(const LangVecTable& table, const std::string& label) {
  const auto* v = table.find(label);
  if (v == nullptr) return std::nullopt;
  return MetadataEncoding{*v};
}

MetadataEncoding encode_geo(double lat_deg, double lon_deg) {
  datasets::validate_geo(lat_deg, lon_deg, "encode_geo");
  const double phi = lat_deg * kDegToRad;
  const double lambda = lon_deg * kDegToRad;
  return MetadataEncoding{{std::cos(phi) * std::cos(lambda), std::cos(phi) * std::sin(lambda), std::sin(phi)}};
}

double haversine_km(const datasets::GeoLocation& a, const datasets::GeoLocation& b, double radius_km) {
  const double pa = a.lat * kDegToRad, pb = b.lat * kDegToRad;
  const double dphi = pb - pa;
  const double dlambda = (b.lon - a.lon) * kDegToRad;
  const double s1 = std::sin(dphi / 2.0), s2 = std::sin(dlambda / 2.0);
  const double h = s1 * s1 + std::cos(pa) * std::cos(pb) * s2 * s2;
  return 2.0 * radius_km * std::asin(std::sqrt(std::min(1.0, h)));
}

CharTable::CharTable(std::uint64_t seed, std::size_t dim) : rows_(256, dim) {
  if (dim == 0) fail(ErrorKind::invalid_argument, "character table dimension must be positive");
  Rng rng(derive_seed(seed, {hash_tag("char_table")}));
  for (double& x : rows_.flat()) x = rng.normal();
}

CharTable::CharTable(Matrix<double> rows) : rows_(std::move(rows)) {
  if (rows_.rows() != 256 || rows_.cols() == 0)
    fail(ErrorKind::shape, "character table must be 256 x d with d >= 1");
}

std::optional<MetadataEncoding> encode_text(std::string_view transcript, const CharTable& table) {
  if (transcript.empty()) return std::nullopt;
  std::vector<double> mean(table.dim(), 0.0);
  for (char ch : transcript) {
    const auto row = table.rows().row(static_cast<unsigned char>(ch));
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += row[i];
  }
  for (double& x : mean) x /= static_cast<double>(transcript.size());
  if (!normalize(mean)) return std::nullopt;
  return MetadataEncoding{std::move(mean)};
}

LangVecTable synth_langvec(const datasets::SynthSpec& spec, double similarity, LangVecCategory category) {
  spec.validate();
  if (!(similarity > -1.0 && similarity < 1.0)) fail(ErrorKind::range, "langvec similarity must lie in (-1, 1)");
  const std::size_t n = spec.num_languages;
  Matrix<double> rows(n, n);
  for (std::size_t l = 0; l < n; ++l) rows(l, l) = 1.0;
  for (const auto& p : spec.confusable_pairs) {
    rows(p.b, p.b) = std::sqrt(1.0 - similarity * similarity);
    rows(p.b, p.a) = similarity;
  }
  LangVecTable table(category, n);
  for (std::size_t l = 0; l < n; ++l) {
    auto r = rows.row(l);
    table.add(datasets::synth_language_name(l), {r.begin(), r.end()});
  }
  return table;
}

}  // namespace masr::metadata
