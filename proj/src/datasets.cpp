#include "masr/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "masr/binary_io.hpp"
#include "masr/error.hpp"
#include "masr/rng.hpp"

namespace masr::datasets {

using nlohmann::ordered_json;

void validate_geo(double lat, double lon, std::string_view where) {
  if (!std::isfinite(lat) || lat < -90.0 || lat > 90.0)
    fail(ErrorKind::range, std::string(where) + ": field 'lat' = " + std::to_string(lat) + " outside [-90, 90]");
  if (!std::isfinite(lon) || lon <= -180.0 || lon > 180.0)
    fail(ErrorKind::range, std::string(where) + ": field 'lon' = " + std::to_string(lon) + " outside (-180, 180]");
}

namespace {

ManifestRecord parse_record(const std::string& line, const std::string& where) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::parse, where + ": " + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::parse, where + ": record must be a JSON object");

  static const std::set<std::string> known{"id", "features", "audio", "language", "lat", "lon", "text"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) fail(ErrorKind::parse, where + ": unknown field '" + it.key() + "'");

  auto get_string = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key)) return std::nullopt;
    if (!j[key].is_string()) fail(ErrorKind::parse, where + ": field '" + key + "' must be a string");
    return j[key].get<std::string>();
  };
  auto get_number = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key)) return std::nullopt;
    if (!j[key].is_number()) fail(ErrorKind::parse, where + ": field '" + key + "' must be a number");
    return j[key].get<double>();
  };

  ManifestRecord r;
  auto id = get_string("id");
  if (!id) fail(ErrorKind::missing_field, where + ": missing required field 'id'");
  if (id->empty()) fail(ErrorKind::parse, where + ": field 'id' is empty");
  r.id = *id;

  auto feat = get_string("features");
  auto audio = get_string("audio");
  if (feat && audio) fail(ErrorKind::parse, where + ": only one of 'features' and 'audio' may be given");
  if (!feat && !audio) fail(ErrorKind::missing_field, where + ": missing required field 'features' or 'audio'");
  r.source_kind = feat ? SourceKind::features : SourceKind::audio;
  r.source = feat ? *feat : *audio;

  auto lang = get_string("language");
  if (!lang) fail(ErrorKind::missing_field, where + ": missing required field 'language'");
  if (lang->empty()) fail(ErrorKind::parse, where + ": field 'language' is empty");
  r.language = *lang;

  auto lat = get_number("lat");
  auto lon = get_number("lon");
  if (lat.has_value() != lon.has_value())
    fail(ErrorKind::missing_field, where + ": 'lat' and 'lon' must be given together");
  if (lat) {
    validate_geo(*lat, *lon, where);
    r.geo = GeoLocation{*lat, *lon};
  }
  r.text = get_string("text");
  return r;
}

}  // namespace

std::vector<ManifestRecord> parse_manifest(std::string_view text, std::string_view context) {
  std::vector<ManifestRecord> out;
  std::unordered_set<std::string> ids;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = std::string(context) + ":" + std::to_string(line_no);
    ManifestRecord r = parse_record(line, where);
    if (!ids.insert(r.id).second) fail(ErrorKind::duplicate, where + ": duplicate id '" + r.id + "'");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path.string());
}

std::string serialize_manifest(const std::vector<ManifestRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    ordered_json j;
    j["id"] = r.id;
    j[r.source_kind == SourceKind::features ? "features" : "audio"] = r.source;
    j["language"] = r.language;
    if (r.geo) {
      j["lat"] = r.geo->lat;
      j["lon"] = r.geo->lon;
    }
    if (r.text) j["text"] = *r.text;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  io::write_text_file(path, serialize_manifest(records));
}

std::vector<std::byte> encode_features(const features::FeatureMatrix& m) {
  io::ByteWriter w;
  w.tag("MASRFEAT");
  w.u32(kFeatureFileVersion);
  w.u32(static_cast<std::uint32_t>(m.frames()));
  w.u32(static_cast<std::uint32_t>(m.bins()));
  for (float v : m.values().flat()) w.f32(v);
  return w.data();
}

features::FeatureMatrix decode_features(std::span<const std::byte> bytes, std::string_view context) {
  io::ByteReader r(bytes, std::string(context));
  if (!r.tag_matches("MASRFEAT")) fail(ErrorKind::format, std::string(context) + ": bad magic (expected MASRFEAT)");
  const std::uint32_t version = r.u32();
  if (version != kFeatureFileVersion)
    fail(ErrorKind::format, std::string(context) + ": unsupported feature file version " + std::to_string(version));
  const std::uint32_t frames = r.u32();
  const std::uint32_t bins = r.u32();
  features::FeatureMatrix m(frames, bins);
  for (float& v : m.values().flat()) v = r.f32();
  if (r.remaining() != 0) fail(ErrorKind::format, std::string(context) + ": trailing bytes after feature data");
  m.validate();
  return m;
}

void write_feature_file(const std::filesystem::path& path, const features::FeatureMatrix& m) {
  io::write_file(path, encode_features(m));
}

features::FeatureMatrix read_feature_file(const std::filesystem::path& path) {
  return decode_features(io::read_file(path), path.string());
}

Corpus load_corpus(const std::filesystem::path& manifest, const features::LogmelConfig& logmel) {
  Corpus c;
  c.records = load_manifest(manifest);
  const auto base = manifest.parent_path();
  c.features.reserve(c.records.size());
  for (const auto& r : c.records) {
    std::filesystem::path p(r.source);
    if (p.is_relative()) p = base / p;
    if (r.source_kind == SourceKind::features) {
      c.features.push_back(read_feature_file(p));
    } else {
      const auto wav = features::read_wav(p);
      c.features.push_back(features::logmel(wav.samples, wav.sample_rate, logmel));
    }
  }
  return c;
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir / "features");
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& r = corpus.records[i];
    if (r.source_kind == SourceKind::features) write_feature_file(dir / r.source, corpus.features[i]);
  }
  write_manifest(dir / "manifest.jsonl", corpus.records);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SynthSpec::validate() const {
  if (num_languages == 0) fail(ErrorKind::invalid_argument, "synth: num_languages must be positive");
  if (utterances_per_language == 0) fail(ErrorKind::invalid_argument, "synth: utterances_per_language must be positive");
  if (frames == 0 || mel_bins == 0) fail(ErrorKind::invalid_argument, "synth: frames and mel_bins must be positive");
  if (!(noise >= 0.0)) fail(ErrorKind::invalid_argument, "synth: noise must be non-negative");
  if (!(template_scale > 0.0)) fail(ErrorKind::invalid_argument, "synth: template_scale must be positive");
  std::set<std::size_t> perturbed;
  for (const auto& p : confusable_pairs) {
    if (p.a >= num_languages || p.b >= num_languages)
      fail(ErrorKind::invalid_argument, "synth: confusable pair references undeclared language");
    if (p.a == p.b) fail(ErrorKind::invalid_argument, "synth: confusable pair must name two languages");
    if (!(p.scale >= 0.0 && p.scale < 1.0))
      fail(ErrorKind::range, "synth: perturbation scale must lie in [0, 1), got " + std::to_string(p.scale));
    if (!perturbed.insert(p.b).second)
      fail(ErrorKind::invalid_argument, "synth: language " + std::to_string(p.b) + " is perturbed by two pairs");
  }
}

std::string synth_language_name(std::size_t index) {
  std::string digits = std::to_string(index);
  if (digits.size() < 2) digits.insert(0, 2 - digits.size(), '0');
  return "lang" + digits;
}

Matrix<double> synth_templates(const SynthSpec& spec) {
  spec.validate();
  Matrix<double> t(spec.num_languages, spec.mel_bins);
  for (std::size_t l = 0; l < spec.num_languages; ++l) {
    Rng rng(derive_seed(spec.seed, {hash_tag("template"), l}));
    for (auto& v : t.row(l)) v = spec.template_scale * rng.normal();
  }
  for (const auto& p : spec.confusable_pairs) {
    Rng rng(derive_seed(spec.seed, {hash_tag("perturb"), p.a, p.b}));
    std::vector<double> u(spec.mel_bins);
    double n2 = 0.0;
    for (auto& v : u) {
      v = rng.normal();
      n2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t f = 0; f < spec.mel_bins; ++f) t(p.b, f) = t(p.a, f) + p.scale * u[f] * inv;
  }
  return t;
}

Corpus synthesize_corpus(const SynthSpec& spec) {
  const Matrix<double> templates = synth_templates(spec);
  Corpus c;
  c.records.reserve(spec.num_languages * spec.utterances_per_language);
  for (std::size_t l = 0; l < spec.num_languages; ++l) {
    const std::string lang = synth_language_name(l);
    for (std::size_t u = 0; u < spec.utterances_per_language; ++u) {
      const std::size_t index = spec.first_utterance + u;
      std::string num = std::to_string(index);
      if (num.size() < 5) num.insert(0, 5 - num.size(), '0');
      ManifestRecord r;
      r.id = lang + "_" + num;
      r.source_kind = SourceKind::features;
      r.source = "features/" + r.id + ".feat";
      r.language = lang;
      c.records.push_back(r);

      Rng rng(derive_seed(spec.seed, {hash_tag("noise"), l, index}));
      features::FeatureMatrix m(spec.frames, spec.mel_bins);
      for (std::size_t t = 0; t < spec.frames; ++t)
        for (std::size_t f = 0; f < spec.mel_bins; ++f)
          m(t, f) = static_cast<float>(templates(l, f) + spec.noise * rng.normal());
      c.features.push_back(std::move(m));
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Batching

BatchSampler::BatchSampler(std::vector<std::string> labels, std::size_t batch_size, std::uint64_t seed,
                           BalanceStrategy strategy)
    : labels_(std::move(labels)), batch_size_(batch_size), seed_(seed), strategy_(strategy) {
  if (batch_size_ < 2) fail(ErrorKind::invalid_argument, "batch size must be at least 2");
  if (batch_size_ > labels_.size())
    fail(ErrorKind::invalid_argument, "batch size " + std::to_string(batch_size_) + " exceeds corpus size " +
                                          std::to_string(labels_.size()));
  per_epoch_ = labels_.size() / batch_size_;

  if (strategy_ == BalanceStrategy::label_balanced) {
    std::map<std::string, std::size_t> counts;
    for (const auto& l : labels_) ++counts[l];
    const auto pairable = std::count_if(counts.begin(), counts.end(), [](const auto& kv) { return kv.second >= 2; });
    if (pairable < 2) {
      warning_ = "label-balanced batching infeasible (fewer than two labels with at least two items); "
                 "falling back to plain shuffling";
      strategy_ = BalanceStrategy::shuffle;
    }
  }
}

std::vector<std::vector<std::size_t>> BatchSampler::build_epoch(std::uint64_t e) const {
  Rng rng(derive_seed(seed_, {hash_tag("epoch"), e}));
  std::vector<std::vector<std::size_t>> out(per_epoch_);

  if (strategy_ == BalanceStrategy::shuffle) {
    std::vector<std::size_t> perm(labels_.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    for (std::size_t b = 0; b < per_epoch_; ++b)
      out[b].assign(perm.begin() + static_cast<std::ptrdiff_t>(b * batch_size_),
                    perm.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch_size_));
    return out;
  }

  // Label-balanced: each batch is a set of same-label pairs drawn from a
  // shuffled cycle over labels, so every member has at least one positive.
  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels_.size(); ++i) by_label[labels_[i]].push_back(i);
  std::vector<std::vector<std::size_t>> members;
  for (auto& [label, idx] : by_label)
    if (idx.size() >= 2) members.push_back(idx);

  std::vector<std::vector<std::size_t>> pools(members.size());
  auto in_batch = [](const std::vector<std::size_t>& batch, std::size_t i) {
    return std::find(batch.begin(), batch.end(), i) != batch.end();
  };
  auto available = [&](std::size_t l, const std::vector<std::size_t>& batch) {
    return static_cast<std::size_t>(
        std::count_if(members[l].begin(), members[l].end(), [&](std::size_t i) { return !in_batch(batch, i); }));
  };
  // Next pooled item of label l that is not yet in the batch. The caller
  // checks availability first.
  auto draw = [&](std::size_t l, const std::vector<std::size_t>& batch) {
    auto& pool = pools[l];
    if (pool.empty()) {
      pool = members[l];
      rng.shuffle(pool);
    }
    auto find_pick = [&]() -> std::optional<std::size_t> {
      for (std::size_t k = pool.size(); k-- > 0;)
        if (!in_batch(batch, pool[k])) return k;
      return std::nullopt;
    };
    auto pick = find_pick();
    if (!pick) {
      // Only batch members are left; refill ahead of time so items stay distinct.
      std::vector<std::size_t> fresh = members[l];
      rng.shuffle(fresh);
      fresh.insert(fresh.end(), pool.begin(), pool.end());
      pool = std::move(fresh);
      pick = find_pick();
    }
    const std::size_t item = pool[*pick];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(*pick));
    return item;
  };

  std::vector<std::size_t> cycle;
  std::size_t cursor = 0;
  auto next_label = [&] {
    if (cursor == cycle.size()) {
      cycle.resize(members.size());
      for (std::size_t i = 0; i < cycle.size(); ++i) cycle[i] = i;
      rng.shuffle(cycle);
      cursor = 0;
    }
    return cycle[cursor++];
  };

  for (std::size_t b = 0; b < per_epoch_; ++b) {
    auto& batch = out[b];
    std::optional<std::size_t> last_label;
    std::size_t misses = 0;
    while (batch.size() + 2 <= batch_size_ && misses < members.size()) {
      const std::size_t l = next_label();
      if (available(l, batch) < 2) {
        ++misses;
        continue;
      }
      misses = 0;
      last_label = l;
      batch.push_back(draw(l, batch));
      batch.push_back(draw(l, batch));
    }
    // Odd batch size (or labels exhausted): top up with distinct items,
    // preferring the last label so the extra item still has positives.
    if (batch.size() < batch_size_ && last_label && available(*last_label, batch) > 0)
      batch.push_back(draw(*last_label, batch));
    if (batch.size() < batch_size_) {
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < labels_.size(); ++i)
        if (!in_batch(batch, i)) rest.push_back(i);
      rng.shuffle(rest);
      for (std::size_t k = 0; batch.size() < batch_size_; ++k) batch.push_back(rest[k]);
    }
    rng.shuffle(batch);
  }
  return out;
}

Batch BatchSampler::batch(std::uint64_t n) {
  const std::uint64_t e = n / per_epoch_;
  if (e != cached_epoch_) {
    cache_ = build_epoch(e);
    cached_epoch_ = e;
  }
  return Batch{n, cache_[n % per_epoch_]};
}

std::vector<Batch> BatchSampler::epoch(std::uint64_t e) {
  std::vector<Batch> out;
  for (std::size_t b = 0; b < per_epoch_; ++b) out.push_back(batch(e * per_epoch_ + b));
  return out;
}

std::vector<Batch> make_batches(const std::vector<ManifestRecord>& records, std::size_t batch_size,
                                std::uint64_t seed, BalanceStrategy strategy, std::optional<std::string>* warning) {
  std::vector<std::string> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(r.language);
  BatchSampler sampler(std::move(labels), batch_size, seed, strategy);
  if (warning) *warning = sampler.warning();
  return sampler.epoch(0);
}

std::uint64_t hash_id_sequence(const std::vector<ManifestRecord>& records, const std::vector<Batch>& batches) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& b : batches)
    for (auto i : b.items) {
      h = fnv1a(records[i].id, h);
      h = fnv1a(std::string_view("\n"), h);
    }
  return h;
}

}  // namespace masr::datasets
