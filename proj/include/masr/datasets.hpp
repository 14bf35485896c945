#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "masr/features.hpp"

namespace masr::datasets {

struct GeoLocation {
  double lat = 0.0;  // degrees, [-90, 90]
  double lon = 0.0;  // degrees, (-180, 180]
  friend bool operator==(const GeoLocation&, const GeoLocation&) = default;
};

enum class SourceKind { features, audio };

struct ManifestRecord {
  std::string id;
  SourceKind source_kind = SourceKind::features;
  std::string source;  // path, relative to the manifest directory unless absolute
  std::string language;
  std::optional<GeoLocation> geo;
  std::optional<std::string> text;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

void validate_geo(double lat, double lon, std::string_view where);

// One JSON object per line. `context` names the source in error messages.
std::vector<ManifestRecord> parse_manifest(std::string_view text, std::string_view context = "manifest");
std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path);
std::string serialize_manifest(const std::vector<ManifestRecord>& records);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

// MASRFEAT binary: magic, version u32, T u32, F u32, T*F little-endian f32.
inline constexpr std::uint32_t kFeatureFileVersion = 1;
std::vector<std::byte> encode_features(const features::FeatureMatrix& m);
features::FeatureMatrix decode_features(std::span<const std::byte> bytes, std::string_view context);
void write_feature_file(const std::filesystem::path& path, const features::FeatureMatrix& m);
features::FeatureMatrix read_feature_file(const std::filesystem::path& path);

struct Corpus {
  std::vector<ManifestRecord> records;
  std::vector<features::FeatureMatrix> features;  // aligned with records

  std::size_t size() const { return records.size(); }
};

// Resolves every record's source (feature file or WAV through the log-mel
// front end) relative to the manifest's directory.
Corpus load_corpus(const std::filesystem::path& manifest, const features::LogmelConfig& logmel = {});

// Writes manifest.jsonl and features/<id>.feat under `dir`.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);

struct ConfusablePair {
  std::size_t a = 0;
  std::size_t b = 0;
  double scale = 0.1;
};

struct SynthSpec {
  std::size_t num_languages = 8;
  std::size_t utterances_per_language = 100;
  std::size_t frames = 64;
  std::size_t mel_bins = 40;
  std::vector<ConfusablePair> confusable_pairs;
  double noise = 0.5;
  double template_scale = 1.0;  // std of the per-bin template values
  std::uint64_t seed = 1;
  // Utterance indices start here; templates do not depend on it, so two specs
  // differing only in this field describe disjoint draws of the same languages.
  std::size_t first_utterance = 0;

  void validate() const;
};

std::string synth_language_name(std::size_t index);

// Per-language spectral templates (num_languages x mel_bins).
Matrix<double> synth_templates(const SynthSpec& spec);
Corpus synthesize_corpus(const SynthSpec& spec);

enum class BalanceStrategy { shuffle, label_balanced };

struct Batch {
  std::uint64_t index = 0;          // global batch counter (training step)
  std::vector<std::size_t> items;   // indices into the record list
};

// Deterministic batch stream: batch(n) is a pure function of
// (labels, batch size, seed, strategy, n).
class BatchSampler {
 public:
  BatchSampler(std::vector<std::string> labels, std::size_t batch_size, std::uint64_t seed,
               BalanceStrategy strategy);

  std::size_t batch_size() const { return batch_size_; }
  std::size_t batches_per_epoch() const { return per_epoch_; }
  BalanceStrategy effective_strategy() const { return strategy_; }
  // Set when label balancing was requested but is infeasible.
  const std::optional<std::string>& warning() const { return warning_; }

  Batch batch(std::uint64_t n);
  std::vector<Batch> epoch(std::uint64_t e);

 private:
  std::vector<std::vector<std::size_t>> build_epoch(std::uint64_t e) const;

  std::vector<std::string> labels_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  BalanceStrategy strategy_;
  std::size_t per_epoch_ = 0;
  std::optional<std::string> warning_;
  std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  std::vector<std::vector<std::size_t>> cache_;
};

// First epoch of a sampler over the records' language labels.
std::vector<Batch> make_batches(const std::vector<ManifestRecord>& records, std::size_t batch_size,
                                std::uint64_t seed, BalanceStrategy strategy,
                                std::optional<std::string>* warning = nullptr);

// FNV-1a over the concatenated record ids of a batch sequence.
std::uint64_t hash_id_sequence(const std::vector<ManifestRecord>& records, const std::vector<Batch>& batches);

}  // namespace masr::datasets
