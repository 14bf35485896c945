#include "masr/ssl_backbone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "masr/error.hpp"
#include "masr/rng.hpp"

namespace masr::ssl {

void BackboneConfig::validate() const {
  if (mel_bins == 0 || stack == 0) fail(ErrorKind::config, "backbone: mel_bins and stack must be positive");
  if (blocks > 0 && d_z == 0) fail(ErrorKind::config, "backbone: d_z must be positive");
  if (codebook_size == 0 || codebook_dim == 0)
    fail(ErrorKind::config, "backbone: codebook_size and codebook_dim must be positive");
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) fail(ErrorKind::config, "backbone: mask_prob must lie in [0, 1]");
  if (mask_span == 0) fail(ErrorKind::config, "backbone: mask_span must be positive");
}

// ---------------------------------------------------------------------------
// Quantizer

Quantizer::Quantizer(std::uint64_t seed, std::size_t input_dim, std::size_t stack, std::size_t code_dim,
                     std::size_t codebook_size)
    : projection_(input_dim, code_dim), codebook_(codebook_size, code_dim), stack_(stack) {
  Rng prng(derive_seed(seed, {hash_tag("quantizer.projection")}));
  const double sd = 1.0 / std::sqrt(static_cast<double>(input_dim));
  for (double& x : projection_.flat()) x = prng.normal() * sd;
  Rng crng(derive_seed(seed, {hash_tag("quantizer.codebook")}));
  for (double& x : codebook_.flat()) x = crng.normal();
  for (std::size_t k = 0; k < codebook_.rows(); ++k) {
    auto row = codebook_.row(k);
    double n2 = 0.0;
    for (double x : row) n2 += x * x;
    const double n = std::sqrt(n2);
    for (double& x : row) x /= n;
  }
}

Quantizer::Quantizer(Matrix<double> projection, Matrix<double> codebook, std::size_t stack)
    : projection_(std::move(projection)), codebook_(std::move(codebook)), stack_(stack) {
  if (projection_.cols() != codebook_.cols())
    fail(ErrorKind::shape, "quantizer projection and codebook dimensions differ");
  for (std::size_t k = 0; k < codebook_.rows(); ++k) {
    auto row = codebook_.row(k);
    double n2 = 0.0;
    for (double x : row) n2 += x * x;
    if (!(n2 > 0.0)) fail(ErrorKind::numeric, "codebook row " + std::to_string(k) + " is zero");
    const double n = std::sqrt(n2);
    for (double& x : row) x /= n;
  }
}

std::vector<double> Quantizer::project(std::span<const double> stacked) const {
  std::vector<double> y(projection_.cols(), 0.0);
  for (std::size_t i = 0; i < projection_.rows(); ++i)
    if (stacked[i] != 0.0) simd::axpy<double>(stacked[i], projection_.row(i), y);
  double n2 = 0.0;
  for (double v : y) n2 += v * v;
  if (n2 > 0.0) {
    const double n = std::sqrt(n2);
    for (double& v : y) v /= n;
  }
  return y;
}

std::uint32_t Quantizer::nearest(std::span<const double> projected) const {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < codebook_.rows(); ++k) {
    const double d = simd::sqdist<double>(projected, codebook_.row(k));
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(k);
    }
  }
  return best;
}

std::vector<std::uint32_t> quantize_targets(const features::FeatureMatrix& feats, const Quantizer& q) {
  const std::size_t s = q.stack();
  if (feats.frames() < s)
    fail(ErrorKind::shape, "utterance has " + std::to_string(feats.frames()) + " frames, fewer than stack " +
                               std::to_string(s));
  if (feats.bins() * s != q.input_dim())
    fail(ErrorKind::shape, "quantizer expects " + std::to_string(q.input_dim()) + " stacked inputs, features give " +
                               std::to_string(feats.bins() * s));
  const Matrix<double> stacked = stack_frames<double>(feats, s);
  std::vector<std::uint32_t> out(stacked.rows());
  for (std::size_t t = 0; t < stacked.rows(); ++t) out[t] = q.nearest(q.project(stacked.row(t)));
  return out;
}

// ---------------------------------------------------------------------------
// Masking

std::size_t MaskPlan::count() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), 1)); }

std::vector<std::size_t> MaskPlan::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < masked.size(); ++t)
    if (masked[t]) out.push_back(t);
  return out;
}

MaskPlan make_mask(std::size_t steps, double start_prob, std::size_t span, std::uint64_t seed) {
  MaskPlan plan{std::vector<std::uint8_t>(steps, 0), span, start_prob, seed};
  Rng rng(seed);
  for (std::size_t t = 0; t < steps; ++t) {
    if (!rng.bernoulli(start_prob)) continue;
    for (std::size_t k = t; k < std::min(steps, t + span); ++k) plan.masked[k] = 1;
  }
  return plan;
}

MaskPlan no_mask(std::size_t steps) { return MaskPlan{std::vector<std::uint8_t>(steps, 0), 0, 0.0, 0}; }

// ---------------------------------------------------------------------------
// Encoder

template <class Real>
Matrix<Real> stack_frames(const features::FeatureMatrix& feats, std::size_t stack) {
  const std::size_t steps = feats.frames() / stack;
  const std::size_t f = feats.bins();
  Matrix<Real> out(steps, f * stack);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t s = 0; s < stack; ++s)
      for (std::size_t b = 0; b < f; ++b) out(t, s * f + b) = static_cast<Real>(feats(t * stack + s, b));
  return out;
}

template <class Real>
EncoderParams<Real> EncoderParams<Real>::zeros(const BackboneConfig& config) {
  config.validate();
  EncoderParams p;
  std::size_t in = config.input_dim();
  const std::size_t width = 2 * config.context + 1;
  for (std::size_t l = 0; l < config.blocks; ++l) {
    p.blocks.emplace_back(config.d_z, width * in);
    in = config.d_z;
  }
  p.head = Affine<Real>(config.codebook_size, config.output_dim());
  p.mask_embedding.assign(config.input_dim(), Real(0));
  return p;
}

template <class Real>
EncoderParams<Real> EncoderParams<Real>::init(const BackboneConfig& config, std::uint64_t seed) {
  EncoderParams p = zeros(config);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    Rng rng(derive_seed(seed, {hash_tag("encoder.block"), l}));
    p.blocks[l].init_gaussian(rng);
  }
  Rng hrng(derive_seed(seed, {hash_tag("encoder.head")}));
  p.head.init_gaussian(hrng);
  Rng mrng(derive_seed(seed, {hash_tag("encoder.mask_embedding")}));
  for (Real& x : p.mask_embedding) x = static_cast<Real>(mrng.normal());
  return p;
}

template <class Real>
void EncoderParams<Real>::visit(const TensorVisitor<Real>& f) {
  for (std::size_t l = 0; l < blocks.size(); ++l) visit_affine("encoder.block" + std::to_string(l), blocks[l], f);
  visit_affine(std::string("ssl_head"), head, f);
  f({"encoder.mask_embedding", {mask_embedding.size()}, std::span<Real>(mask_embedding)});
}

template <class Real>
void EncoderParams<Real>::set_zero() {
  for (auto& b : blocks) b.zero();
  head.zero();
  std::fill(mask_embedding.begin(), mask_embedding.end(), Real(0));
}

namespace {

template <class Real>
void gather_context(const Matrix<Real>& u, std::size_t t, std::size_t context, std::span<Real> out) {
  const std::size_t d = u.cols();
  const auto steps = static_cast<std::ptrdiff_t>(u.rows());
  std::size_t pos = 0;
  for (std::ptrdiff_t o = -static_cast<std::ptrdiff_t>(context); o <= static_cast<std::ptrdiff_t>(context); ++o) {
    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) + o;
    if (s >= 0 && s < steps) {
      auto row = u.row(static_cast<std::size_t>(s));
      std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(pos));
    } else {
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(pos), d, Real(0));
    }
    pos += d;
  }
}

}  // namespace

template <class Real>
EncoderTrace<Real> encode(const Matrix<Real>& stacked, const MaskPlan& mask, const EncoderParams<Real>& params,
                          std::size_t context) {
  if (stacked.cols() != params.mask_embedding.size())
    fail(ErrorKind::shape, "encoder input width " + std::to_string(stacked.cols()) + " does not match " +
                               std::to_string(params.mask_embedding.size()));
  if (mask.steps() != stacked.rows())
    fail(ErrorKind::shape, "mask covers " + std::to_string(mask.steps()) + " steps, input has " +
                               std::to_string(stacked.rows()));

  EncoderTrace<Real> trace;
  trace.masked = mask.masked;
  Matrix<Real> u0 = stacked;
  for (std::size_t t = 0; t < u0.rows(); ++t)
    if (mask.masked[t]) std::copy(params.mask_embedding.begin(), params.mask_embedding.end(), u0.row(t).begin());
  trace.layers.push_back(std::move(u0));

  const std::size_t width = 2 * context + 1;
  for (const auto& block : params.blocks) {
    const Matrix<Real>& prev = trace.layers.back();
    if (block.in_dim() != width * prev.cols())
      fail(ErrorKind::shape, "encoder block expects " + std::to_string(block.in_dim()) + " inputs, got " +
                                 std::to_string(width * prev.cols()));
    Matrix<Real> next(prev.rows(), block.out_dim());
    std::vector<Real> ctx(block.in_dim());
    for (std::size_t t = 0; t < prev.rows(); ++t) {
      gather_context<Real>(prev, t, context, ctx);
      auto y = next.row(t);
      linalg::affine<Real>(block.w, block.b, ctx, y);
      for (Real& v : y) v = std::tanh(v);
    }
    trace.layers.push_back(std::move(next));
  }
  return trace;
}

template <class Real>
void encode_backward(const EncoderTrace<Real>& trace, const Matrix<Real>& dz, const EncoderParams<Real>& params,
                     std::size_t context, EncoderParams<Real>& grads) {
  Matrix<Real> upstream = dz;
  const std::size_t width = 2 * context + 1;
  for (std::size_t l = params.blocks.size(); l-- > 0;) {
    const auto& block = params.blocks[l];
    const Matrix<Real>& in = trace.layers[l];
    const Matrix<Real>& out = trace.layers[l + 1];
    Matrix<Real> down(in.rows(), in.cols());
    std::vector<Real> ctx(block.in_dim());
    std::vector<Real> dctx(block.in_dim());
    std::vector<Real> da(block.out_dim());
    const auto steps = static_cast<std::ptrdiff_t>(in.rows());
    // Below the first block only masked steps reach a parameter.
    const bool need_input_grad =
        l > 0 || std::any_of(trace.masked.begin(), trace.masked.end(), [](auto m) { return m != 0; });
    for (std::size_t t = 0; t < in.rows(); ++t) {
      auto y = out.row(t);
      auto g = upstream.row(t);
      for (std::size_t k = 0; k < da.size(); ++k) da[k] = g[k] * (Real(1) - y[k] * y[k]);
      gather_context<Real>(in, t, context, ctx);
      linalg::affine_backward_params<Real>(da, ctx, grads.blocks[l].w, grads.blocks[l].b);
      if (!need_input_grad) continue;
      std::fill(dctx.begin(), dctx.end(), Real(0));
      linalg::affine_backward_input<Real>(block.w, da, dctx);
      for (std::size_t w = 0; w < width; ++w) {
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(w) -
                                 static_cast<std::ptrdiff_t>(context);
        if (s < 0 || s >= steps) continue;
        auto dst = down.row(static_cast<std::size_t>(s));
        for (std::size_t k = 0; k < in.cols(); ++k) dst[k] += dctx[w * in.cols() + k];
      }
    }
    upstream = std::move(down);
  }
  // upstream is now dL/du0; only masked steps carry learnable input.
  for (std::size_t t = 0; t < upstream.rows(); ++t)
    if (trace.masked[t]) simd::axpy<Real>(Real(1), upstream.row(t), grads.mask_embedding);
}

template <class Real>
std::vector<Real> pool(const Matrix<Real>& z) {
  if (z.rows() == 0) fail(ErrorKind::shape, "cannot pool an empty representation");
  std::vector<Real> h(z.cols(), Real(0));
  for (std::size_t t = 0; t < z.rows(); ++t) simd::axpy<Real>(Real(1), z.row(t), h);
  const Real inv = Real(1) / static_cast<Real>(z.rows());
  for (Real& v : h) v *= inv;
  return h;
}

template <class Real>
SslTerms ssl_head(const Matrix<Real>& z, std::span<const std::uint32_t> targets, const MaskPlan& mask,
                  const Affine<Real>& head, Real grad_scale, Matrix<Real>* dz, Affine<Real>* dhead) {
  if (targets.size() != z.rows() || mask.steps() != z.rows())
    fail(ErrorKind::shape, "ssl loss: targets (" + std::to_string(targets.size()) + ") and mask (" +
                               std::to_string(mask.steps()) + ") must match representation length " +
                               std::to_string(z.rows()));
  if (head.in_dim() != z.cols()) fail(ErrorKind::shape, "ssl head input width mismatch");
  SslTerms terms;
  std::vector<Real> logits(head.out_dim());
  for (std::size_t t = 0; t < z.rows(); ++t) {
    if (!mask.masked[t]) continue;
    if (targets[t] >= head.out_dim()) fail(ErrorKind::shape, "target id outside codebook");
    linalg::affine<Real>(head.w, head.b, z.row(t), logits);
    const Real mx = *std::max_element(logits.begin(), logits.end());
    Real sum = 0;
    for (Real& v : logits) {
      v = std::exp(v - mx);
      sum += v;
    }
    terms.ce_sum += -static_cast<double>(std::log(logits[targets[t]] / sum));
    ++terms.count;
    if (dz == nullptr && dhead == nullptr) continue;
    // logits now hold softmax numerators; turn them into the scaled gradient.
    for (std::size_t k = 0; k < logits.size(); ++k) logits[k] = grad_scale * (logits[k] / sum);
    logits[targets[t]] -= grad_scale;
    if (dhead) linalg::affine_backward_params<Real>(logits, z.row(t), dhead->w, dhead->b);
    if (dz) linalg::affine_backward_input<Real>(head.w, logits, dz->row(t));
  }
  return terms;
}

template <class Real>
SslLoss<Real> ssl_loss(const Matrix<Real>& z, std::span<const std::uint32_t> targets, const MaskPlan& mask,
                       const Affine<Real>& head) {
  SslLoss<Real> out;
  out.dz = Matrix<Real>(z.rows(), z.cols());
  out.dhead = Affine<Real>(head.out_dim(), head.in_dim());
  const std::size_t n = mask.count();
  if (n == 0) {
    if (targets.size() != z.rows() || mask.steps() != z.rows()) fail(ErrorKind::shape, "ssl loss shape mismatch");
    out.empty_mask = true;
    return out;
  }
  const SslTerms terms =
      ssl_head<Real>(z, targets, mask, head, Real(1) / static_cast<Real>(n), &out.dz, &out.dhead);
  out.loss = terms.ce_sum / static_cast<double>(terms.count);
  return out;
}

#define MASR_INSTANTIATE(Real)                                                                                  \
  template Matrix<Real> stack_frames<Real>(const features::FeatureMatrix&, std::size_t);                      \
  template struct EncoderParams<Real>;                                                                         \
  template EncoderTrace<Real> encode<Real>(const Matrix<Real>&, const MaskPlan&, const EncoderParams<Real>&,   \
                                           std::size_t);                                                       \
  template void encode_backward<Real>(const EncoderTrace<Real>&, const Matrix<Real>&,                         \
                                      const EncoderParams<Real>&, std::size_t, EncoderParams<Real>&);          \
  template std::vector<Real> pool<Real>(const Matrix<Real>&);                                                  \
  template SslTerms ssl_head<Real>(const Matrix<Real>&, std::span<const std::uint32_t>, const MaskPlan&,       \
                                   const Affine<Real>&, Real, Matrix<Real>*, Affine<Real>*);                   \
  template SslLoss<Real> ssl_loss<Real>(const Matrix<Real>&, std::span<const std::uint32_t>, const MaskPlan&,  \
                                        const Affine<Real>&);

MASR_INSTANTIATE(float)
MASR_INSTANTIATE(double)
#undef MASR_INSTANTIATE

}  // namespace masr::ssl
