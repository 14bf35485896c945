#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "masr/checkpoint.hpp"
#include "masr/datasets.hpp"
#include "masr/model.hpp"
#include "masr/ssl_backbone.hpp"

namespace masr::training {

enum class Precision { f32, f64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view s);

struct TrainConfig {
  std::size_t phase1_steps = 2000;  // L_SSL only
  std::size_t phase2_steps = 500;   // L_SSL + sum_j lambda_j L_META^j
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  Precision precision = Precision::f32;
  datasets::BalanceStrategy balance = datasets::BalanceStrategy::label_balanced;
  std::size_t threads = 1;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint

  std::size_t total_steps() const { return phase1_steps + phase2_steps; }
  void validate() const;
};

// Seeds of every random artifact, all derived from one root seed.
struct Seeds {
  std::uint64_t root = 0;
  std::uint64_t model = 0;
  std::uint64_t quantizer = 0;
  std::uint64_t char_table = 0;
  std::uint64_t batches = 0;
  std::uint64_t masks = 0;

  static Seeds from_root(std::uint64_t root);
  friend bool operator==(const Seeds&, const Seeds&) = default;
};

struct TrainSetup {
  TrainConfig train;
  ssl::BackboneConfig backbone;
  std::uint64_t seed = 1;
  std::uint64_t config_hash = 0;
};

// One line of the metrics log.
struct StepRecord {
  std::uint64_t step = 0;  // 1-based: the step that was just taken
  int phase = 1;
  std::uint64_t batch = 0;
  std::size_t masked_steps = 0;
  double l_ssl = 0.0;
  std::vector<std::string> streams;
  std::vector<double> l_meta;
  std::vector<double> lambda;       // weight actually applied (0 in phase 1)
  double l_masr = 0.0;              // l_ssl + sum_j lambda_j l_meta_j
  std::vector<double> change_rate;  // per stream
  std::vector<std::size_t> active;  // anchors with a positive hinge, per stream
  std::vector<std::size_t> counted; // non-skipped anchors, per stream

  std::string to_json() const;
};

template <class Real>
struct AdamState {
  ModelState<Real> m;
  ModelState<Real> v;
  std::uint64_t t = 0;
};

template <class Real>
void adam_update(ModelState<Real>& params, ModelState<Real>& grads, AdamState<Real>& state, const TrainConfig& cfg);

// Per-corpus caches shared by training and diagnostics.
template <class Real>
struct PreparedCorpus {
  std::vector<Matrix<Real>> stacked;
  std::vector<std::vector<std::uint32_t>> targets;
  std::vector<StreamData> streams;
  std::vector<std::string> languages;

  std::size_t size() const { return stacked.size(); }
};

template <class Real>
PreparedCorpus<Real> prepare_corpus(const datasets::Corpus& corpus, const ssl::BackboneConfig& backbone,
                                    const ssl::Quantizer& quantizer, const std::vector<MetadataStream>& streams);

ssl::Quantizer make_quantizer(const ssl::BackboneConfig& backbone, const Seeds& seeds);

template <class Real>
class Trainer {
 public:
  Trainer(TrainSetup setup, const datasets::Corpus& corpus, std::vector<MetadataStream> streams);

  // Runs the next step; throws masr::Error(numeric) naming the step and term on
  // a non-finite loss or gradient.
  StepRecord step();
  // Runs until `total_steps()` (or `until`) is reached; `on_step` sees each record.
  void run(const std::function<void(const StepRecord&)>& on_step, std::optional<std::size_t> until = std::nullopt);

  std::uint64_t steps_done() const { return adam_.t; }
  bool finished() const { return steps_done() >= setup_.train.total_steps(); }
  const TrainSetup& setup() const { return setup_; }
  const Seeds& seeds() const { return seeds_; }
  const ModelState<Real>& model() const { return model_; }
  const AdamState<Real>& optimizer() const { return adam_; }
  const std::vector<MetadataStream>& streams() const { return streams_; }
  const PreparedCorpus<Real>& data() const { return data_; }

  checkpoint::Checkpoint to_checkpoint() const;
  // Restores parameters, moments and the step counter. The checkpoint must
  // carry the same config hash and root seed.
  void restore(const checkpoint::Checkpoint& ckpt);

  // Inputs for batch n, with the masks used at training step n.
  BatchInputs<Real> batch_inputs(std::uint64_t n);

 private:
  TrainSetup setup_;
  Seeds seeds_;
  std::vector<MetadataStream> streams_;
  ssl::Quantizer quantizer_;
  PreparedCorpus<Real> data_;
  datasets::BatchSampler sampler_;
  ModelState<Real> model_;
  AdamState<Real> adam_;
};

// Model parameters stored in a checkpoint, checked against the configured shapes.
template <class Real>
ModelState<Real> model_from_checkpoint(const checkpoint::Checkpoint& ckpt, const ssl::BackboneConfig& backbone,
                                       const std::vector<MetadataStream>& streams);

std::vector<std::string> stream_names(const std::vector<MetadataStream>& streams);
std::vector<std::size_t> projection_dims(const std::vector<MetadataStream>& streams);

}  // namespace masr::training
