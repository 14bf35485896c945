#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "masr/datasets.hpp"
#include "masr/masr_loss.hpp"
#include "masr/metadata.hpp"
#include "masr/ssl_backbone.hpp"

namespace masr {

// All learnable tensors: encoder (blocks, SSL head, mask embedding) and one
// projection per metadata stream.
template <class Real>
struct ModelState {
  ssl::EncoderParams<Real> encoder;
  std::vector<Affine<Real>> projections;
  std::vector<std::string> stream_names;  // aligned with projections

  static ModelState zeros(const ssl::BackboneConfig& backbone, const std::vector<std::string>& stream_names,
                          const std::vector<std::size_t>& projection_dims);
  static ModelState init(const ssl::BackboneConfig& backbone, const std::vector<std::string>& stream_names,
                         const std::vector<std::size_t>& projection_dims, std::uint64_t seed);

  ModelState zeros_like() const;
  void set_zero();
  void visit(const TensorVisitor<Real>& f);
  std::size_t parameter_count();
  // FNV-1a over the raw parameter bytes.
  std::uint64_t checksum() const;

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

// ---------------------------------------------------------------------------
// Metadata streams

enum class EncoderKind { lang2vec, geo, text };
enum class SourceField { language, geo, text };

std::string_view to_string(EncoderKind k);
std::string_view to_string(SourceField f);
EncoderKind parse_encoder_kind(std::string_view s);
SourceField parse_source_field(std::string_view s);

struct StreamSpec {
  loss::StreamConfig loss;
  EncoderKind kind = EncoderKind::lang2vec;
  SourceField source = SourceField::language;
  std::string table;  // lang2vec TSV path
  metadata::LangVecCategory category = metadata::LangVecCategory::syntactic;
  std::size_t text_dim = 16;  // character table width for the text encoder

  void validate() const;
};

// A configured stream with its fixed encoder loaded.
class MetadataStream {
 public:
  // `char_seed` seeds the text encoder's character table.
  MetadataStream(StreamSpec spec, std::uint64_t char_seed);
  MetadataStream(StreamSpec spec, metadata::LangVecTable table);

  const StreamSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.loss.name; }
  std::size_t encoding_dim() const;
  std::size_t projection_dim() const { return spec_.loss.d_q == 0 ? encoding_dim() : spec_.loss.d_q; }

  // Label and encoding for one record; both empty when the record lacks the
  // field or the encoder misses.
  std::pair<std::optional<std::string>, std::optional<std::vector<double>>> resolve(
      const datasets::ManifestRecord& r) const;

 private:
  StreamSpec spec_;
  std::optional<metadata::LangVecTable> table_;
  std::optional<metadata::CharTable> chars_;
};

// Per-item stream data for a whole corpus or one batch.
struct StreamData {
  std::vector<std::optional<std::string>> labels;
  std::vector<std::vector<double>> encodings;  // empty when missing

  StreamData gather(std::span<const std::size_t> items) const;
};

StreamData resolve_stream(const MetadataStream& stream, const std::vector<datasets::ManifestRecord>& records);

// ---------------------------------------------------------------------------
// Batch objective

template <class Real>
struct BatchInputs {
  std::vector<const Matrix<Real>*> stacked;               // T_s x (F*S) per item
  std::vector<const std::vector<std::uint32_t>*> targets;  // per item
  std::vector<ssl::MaskPlan> masks;
  std::vector<StreamData> streams;                         // one per model stream

  std::size_t size() const { return stacked.size(); }
};

// Weights of the differentiated objective: w_ssl * L_SSL + sum_j w_j * L_META^j.
struct LossWeights {
  double ssl = 1.0;
  std::vector<double> meta;
};

struct StreamResult {
  double l_meta = 0.0;
  loss::TripletLoss triplet;
  loss::ChangeRate change;
  std::vector<loss::TripletSelection> selections;
  std::vector<std::vector<double>> q;  // projected embeddings, widened to double
};

struct BatchResult {
  double l_ssl = 0.0;
  std::size_t masked_steps = 0;
  bool empty_mask = false;
  std::vector<StreamResult> streams;

  std::vector<double> l_meta() const;
};

struct BatchOptions {
  std::size_t context = 1;
  std::size_t threads = 1;
  // Reuse these selections instead of mining (gradient checks hold them fixed).
  const std::vector<std::vector<loss::TripletSelection>>* frozen = nullptr;
};

// Forward pass over a batch and, when `grads` is non-null, the gradient of the
// weighted objective accumulated into it. Items are processed independently
// and reduced in item order, so the result does not depend on `threads`.
template <class Real>
BatchResult forward_backward(const ModelState<Real>& model, const std::vector<MetadataStream>& streams,
                             const BatchInputs<Real>& batch, const LossWeights& weights, const BatchOptions& options,
                             ModelState<Real>* grads);

// Pooled utterance embeddings with no masking.
template <class Real>
std::vector<Real> embed(const ModelState<Real>& model, const Matrix<Real>& stacked, std::size_t context);

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace masr
