#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "masr/datasets.hpp"
#include "masr/eval.hpp"
#include "masr/features.hpp"
#include "masr/gradcheck.hpp"
#include "masr/model.hpp"
#include "masr/ssl_backbone.hpp"
#include "masr/training.hpp"

namespace masr::config {

struct SynthSection {
  datasets::SynthSpec spec;                     // mel_bins comes from features.mel_bins
  std::size_t eval_utterances_per_language = 200;
  double langvec_similarity = 0.9;              // cosine between confusable languages in langvec.tsv
};

struct DataSection {
  std::string manifest = "pretrain/manifest.jsonl";
  std::string eval_manifest = "eval/manifest.jsonl";
  SynthSection synth;
};

struct EvalSection {
  eval::ProbeConfig probe;
  // Languages reported as the "confusable" subset; empty means every
  // language in a synth pair.
  std::vector<std::string> confusable;
  // Languages treated as overlapping with pretraining; empty means the
  // languages of data.manifest.
  std::vector<std::string> overlap;
};

struct RunConfig {
  std::uint64_t seed = 1;
  DataSection data;
  features::LogmelConfig features;
  ssl::BackboneConfig backbone;
  std::vector<StreamSpec> streams;
  training::TrainConfig training;
  EvalSection eval;
  gradcheck::GradcheckConfig gradcheck;
  std::filesystem::path base_dir;  // relative paths resolve against this

  // Sets the root seed and everything derived from it.
  void set_seed(std::uint64_t root);
  // Every field with its effective value.
  std::string to_json() const;
  // FNV-1a of the canonical (key-sorted) JSON of the sections that shape a
  // training run: seed, data, features, backbone, streams and training
  // (without threads and checkpoint_every).
  std::uint64_t hash() const;
  std::filesystem::path resolve(const std::string& path) const;
  std::vector<std::string> confusable_languages() const;
};

RunConfig default_config();

// Unknown keys and type errors are collected and reported together in one
// masr::Error(config).
RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir,
                       std::string_view context = "config");
RunConfig load_config(const std::filesystem::path& path);

std::string hash_hex(std::uint64_t h);

// Stream objects for a run (loads lang2vec tables relative to the config).
std::vector<MetadataStream> make_streams(const RunConfig& cfg);

}  // namespace masr::config
