#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "masr/features.hpp"
#include "masr/matrix.hpp"
#include "masr/params.hpp"

namespace masr::ssl {

struct BackboneConfig {
  std::size_t mel_bins = 40;        // F
  std::size_t stack = 2;            // S, frames per stacked step
  std::size_t context = 1;          // C, +-C neighbouring steps per block
  std::size_t blocks = 2;           // L; 0 makes the encoder an identity passthrough
  std::size_t d_z = 64;
  std::size_t codebook_size = 64;   // V
  std::size_t codebook_dim = 16;    // d_c
  double mask_prob = 0.1;           // p_m
  std::size_t mask_span = 2;

  std::size_t input_dim() const { return mel_bins * stack; }
  std::size_t output_dim() const { return blocks == 0 ? input_dim() : d_z; }
  void validate() const;
};

// Random-projection quantizer. Both matrices are fixed at
// construction; codebook rows are unit-norm.
class Quantizer {
 public:
  Quantizer(std::uint64_t seed, std::size_t input_dim, std::size_t stack, std::size_t code_dim,
            std::size_t codebook_size);
  // Explicit matrices (rows of `codebook` are normalized here).
  Quantizer(Matrix<double> projection, Matrix<double> codebook, std::size_t stack);

  const Matrix<double>& projection() const { return projection_; }  // (F*S) x d_c
  const Matrix<double>& codebook() const { return codebook_; }      // V x d_c
  std::size_t stack() const { return stack_; }
  std::size_t input_dim() const { return projection_.rows(); }

  // l2-normalized projection of one stacked input vector.
  std::vector<double> project(std::span<const double> stacked) const;
  std::uint32_t nearest(std::span<const double> projected) const;

 private:
  Matrix<double> projection_;
  Matrix<double> codebook_;
  std::size_t stack_;
};

// Target code per stacked step (T_s = floor(T / S)); ties go to the lowest index.
std::vector<std::uint32_t> quantize_targets(const features::FeatureMatrix& feats, const Quantizer& q);

struct MaskPlan {
  std::vector<std::uint8_t> masked;  // per stacked step
  std::size_t span = 0;
  double start_prob = 0.0;
  std::uint64_t seed = 0;

  std::size_t steps() const { return masked.size(); }
  std::size_t count() const;
  std::vector<std::size_t> indices() const;
};

MaskPlan make_mask(std::size_t steps, double start_prob, std::size_t span, std::uint64_t seed);
MaskPlan no_mask(std::size_t steps);

// Stacks S consecutive frames into one row: T_s x (F*S).
template <class Real>
Matrix<Real> stack_frames(const features::FeatureMatrix& feats, std::size_t stack);

template <class Real>
struct EncoderParams {
  std::vector<Affine<Real>> blocks;  // block l maps (2C+1)*in_l -> d_z
  Affine<Real> head;                 // d_out -> V logits
  std::vector<Real> mask_embedding;  // F*S

  // Zero-filled parameters with shapes derived from `config`.
  static EncoderParams zeros(const BackboneConfig& config);
  static EncoderParams init(const BackboneConfig& config, std::uint64_t seed);

  void visit(const TensorVisitor<Real>& f);
  void set_zero();
  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

// Per-block activations kept for the backward pass; layers[0] is the masked
// stacked input, layers.back() is Z.
template <class Real>
struct EncoderTrace {
  std::vector<Matrix<Real>> layers;
  std::vector<std::uint8_t> masked;

  const Matrix<Real>& output() const { return layers.back(); }
};

template <class Real>
EncoderTrace<Real> encode(const Matrix<Real>& stacked, const MaskPlan& mask, const EncoderParams<Real>& params,
                          std::size_t context);

// Accumulates parameter gradients given dL/dZ.
template <class Real>
void encode_backward(const EncoderTrace<Real>& trace, const Matrix<Real>& dz, const EncoderParams<Real>& params,
                     std::size_t context, EncoderParams<Real>& grads);

// h = mean over steps.
template <class Real>
std::vector<Real> pool(const Matrix<Real>& z);

struct SslTerms {
  double ce_sum = 0.0;      // summed cross-entropy over masked steps
  std::size_t count = 0;    // masked steps
};

// Cross-entropy of softmax(head(z_t)) against the targets on masked steps.
// Gradients, scaled by grad_scale, are accumulated into dz and dhead.
template <class Real>
SslTerms ssl_head(const Matrix<Real>& z, std::span<const std::uint32_t> targets, const MaskPlan& mask,
                  const Affine<Real>& head, Real grad_scale, Matrix<Real>* dz, Affine<Real>* dhead);

template <class Real>
struct SslLoss {
  double loss = 0.0;
  bool empty_mask = false;
  Matrix<Real> dz;
  Affine<Real> dhead;
};

// Mean masked cross-entropy for one utterance; an empty mask yields loss 0,
// zero gradients and empty_mask = true.
template <class Real>
SslLoss<Real> ssl_loss(const Matrix<Real>& z, std::span<const std::uint32_t> targets, const MaskPlan& mask,
                       const Affine<Real>& head);

}  // namespace masr::ssl
