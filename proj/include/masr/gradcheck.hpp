#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "masr/model.hpp"
#include "masr/ssl_backbone.hpp"

namespace masr::gradcheck {

struct GradcheckConfig {
  std::size_t instances = 20;
  double tolerance = 1e-4;
  double step = 1e-5;      // central-difference step
  double min_gap = 1e-3;   // resample when a hinge slack or selection gap is smaller
  std::size_t max_resamples = 1000;
  std::uint64_t seed = 7;
  std::size_t batch_size = 6;
  std::size_t frames = 8;
  std::size_t labels_per_stream = 3;
  std::size_t langvec_dim = 4;
  double mask_prob = 0.3;
  ssl::BackboneConfig backbone{.mel_bins = 6,
                               .stack = 2,
                               .context = 1,
                               .blocks = 2,
                               .d_z = 5,
                               .codebook_size = 7,
                               .codebook_dim = 3,
                               .mask_prob = 0.3,
                               .mask_span = 2};

  void validate() const;
};

struct TensorCheck {
  std::size_t instance = 0;
  std::string objective;  // "L_SSL", "L_META[<stream>]" or "L_MASR"
  std::string tensor;
  std::size_t coords = 0;
  double max_abs_error = 0.0;
  double rel_error = 0.0;  // max |a - n| / max(max |a|, max |n|, 1e-8)
  bool pass = true;
};

struct Report {
  std::vector<TensorCheck> checks;
  std::size_t instances = 0;
  std::size_t resamples = 0;
  double max_rel_error = 0.0;
  bool pass = true;

  // First failing check, if any.
  std::optional<TensorCheck> first_failure() const;
  std::string to_jsonl() const;
};

// Hook applied to analytic gradients before comparison (tests use it to
// corrupt one tensor on purpose).
using Tamper = std::function<void(const std::string& objective, ModelState<double>& grads)>;

// One random model/batch instance with mining gaps of at least `min_gap`.
struct Instance {
  ModelState<double> model;
  std::vector<MetadataStream> streams;
  std::vector<Matrix<double>> stacked;
  std::vector<std::vector<std::uint32_t>> targets;
  BatchInputs<double> batch;  // points into stacked/targets; do not copy an Instance
  std::vector<std::vector<loss::TripletSelection>> selections;
  std::size_t context = 1;
  std::size_t attempts = 1;

  Instance() = default;
  Instance(const Instance&) = delete;
  Instance& operator=(const Instance&) = delete;
};

// Streams default to language (lang2vec) + geo when `specs` is empty. Lang2vec
// streams get a random in-memory table; text streams a seeded character table.
std::unique_ptr<Instance> make_instance(const GradcheckConfig& cfg, const std::vector<StreamSpec>& specs,
                                        std::size_t index);

// Smallest hinge slack / selection gap of an instance under its frozen selections.
double smallest_gap(const Instance& inst);

std::vector<TensorCheck> check_instance(const GradcheckConfig& cfg, Instance& inst, std::size_t index,
                                        const Tamper& tamper = {});

Report run(const GradcheckConfig& cfg, const std::vector<StreamSpec>& specs = {}, const Tamper& tamper = {});

}  // namespace masr::gradcheck
