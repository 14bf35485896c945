#include "masr/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <thread>

#include "masr/error.hpp"
#include "masr/rng.hpp"

namespace masr {

template <class Real>
ModelState<Real> ModelState<Real>::zeros(const ssl::BackboneConfig& backbone,
                                         const std::vector<std::string>& stream_names,
                                         const std::vector<std::size_t>& projection_dims) {
  if (stream_names.size() != projection_dims.size())
    fail(ErrorKind::shape, "one projection width per stream required");
  ModelState m;
  m.encoder = ssl::EncoderParams<Real>::zeros(backbone);
  m.stream_names = stream_names;
  for (std::size_t d : projection_dims) {
    if (d == 0) fail(ErrorKind::config, "projection width must be positive");
    m.projections.emplace_back(d, backbone.output_dim());
  }
  return m;
}

template <class Real>
ModelState<Real> ModelState<Real>::init(const ssl::BackboneConfig& backbone,
                                        const std::vector<std::string>& stream_names,
                                        const std::vector<std::size_t>& projection_dims, std::uint64_t seed) {
  ModelState m = zeros(backbone, stream_names, projection_dims);
  m.encoder = ssl::EncoderParams<Real>::init(backbone, seed);
  for (std::size_t j = 0; j < m.projections.size(); ++j) {
    Rng rng(derive_seed(seed, {hash_tag("projection"), hash_tag(stream_names[j])}));
    m.projections[j].init_gaussian(rng);
  }
  return m;
}

template <class Real>
ModelState<Real> ModelState<Real>::zeros_like() const {
  ModelState m = *this;
  m.set_zero();
  return m;
}

template <class Real>
void ModelState<Real>::set_zero() {
  encoder.set_zero();
  for (auto& p : projections) p.zero();
}

template <class Real>
void ModelState<Real>::visit(const TensorVisitor<Real>& f) {
  encoder.visit(f);
  for (std::size_t j = 0; j < projections.size(); ++j) visit_affine("projection." + stream_names[j], projections[j], f);
}

template <class Real>
std::size_t ModelState<Real>::parameter_count() {
  std::size_t n = 0;
  visit([&](const TensorRef<Real>& t) { n += t.data.size(); });
  return n;
}

template <class Real>
std::uint64_t ModelState<Real>::checksum() const {
  std::uint64_t h = fnv1a(std::string_view{});
  auto& self = const_cast<ModelState&>(*this);
  self.visit([&](const TensorRef<Real>& t) {
    h = fnv1a(std::string_view(t.name), h);
    h = fnv1a(std::as_bytes(std::span<const Real>(t.data)), h);
  });
  return h;
}

// ---------------------------------------------------------------------------

std::string_view to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::lang2vec: return "lang2vec";
    case EncoderKind::geo: return "geo";
    case EncoderKind::text: return "text";
  }
  return "?";
}

std::string_view to_string(SourceField f) {
  switch (f) {
    case SourceField::language: return "language";
    case SourceField::geo: return "geo";
    case SourceField::text: return "text";
  }
  return "?";
}

EncoderKind parse_encoder_kind(std::string_view s) {
  if (s == "lang2vec") return EncoderKind::lang2vec;
  if (s == "geo") return EncoderKind::geo;
  if (s == "text") return EncoderKind::text;
  fail(ErrorKind::config, "unknown encoder kind '" + std::string(s) + "' (expected lang2vec, geo or text)");
}

SourceField parse_source_field(std::string_view s) {
  if (s == "language") return SourceField::language;
  if (s == "geo") return SourceField::geo;
  if (s == "text") return SourceField::text;
  fail(ErrorKind::config, "unknown source field '" + std::string(s) + "' (expected language, geo or text)");
}

void StreamSpec::validate() const {
  loss.validate();
  const std::string& n = loss.name;
  if (n.empty()) fail(ErrorKind::config, "stream name must not be empty");
  switch (kind) {
    case EncoderKind::lang2vec:
      if (source != SourceField::language) fail(ErrorKind::config, "stream '" + n + "': lang2vec reads the language field");
      break;
    case EncoderKind::geo:
      if (source != SourceField::geo) fail(ErrorKind::config, "stream '" + n + "': geo encoder reads the geo field");
      break;
    case EncoderKind::text:
      if (source != SourceField::text) fail(ErrorKind::config, "stream '" + n + "': text encoder reads the text field");
      if (text_dim == 0) fail(ErrorKind::config, "stream '" + n + "': text_dim must be positive");
      break;
  }
}

MetadataStream::MetadataStream(StreamSpec spec, std::uint64_t char_seed) : spec_(std::move(spec)) {
  spec_.validate();
  switch (spec_.kind) {
    case EncoderKind::lang2vec:
      if (spec_.table.empty()) fail(ErrorKind::config, "stream '" + spec_.loss.name + "': lang2vec table path missing");
      table_ = metadata::load_langvec(spec_.table, spec_.category);
      break;
    case EncoderKind::geo: break;
    case EncoderKind::text: chars_.emplace(char_seed, spec_.text_dim); break;
  }
}

MetadataStream::MetadataStream(StreamSpec spec, metadata::LangVecTable table)
    : spec_(std::move(spec)), table_(std::move(table)) {
  spec_.validate();
  if (spec_.kind != EncoderKind::lang2vec)
    fail(ErrorKind::config, "stream '" + spec_.loss.name + "': a table is only used by lang2vec streams");
}

std::size_t MetadataStream::encoding_dim() const {
  switch (spec_.kind) {
    case EncoderKind::lang2vec: return table_->dim();
    case EncoderKind::geo: return 3;
    case EncoderKind::text: return chars_->dim();
  }
  return 0;
}

namespace {

std::string geo_label(const datasets::GeoLocation& g) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g", g.lat, g.lon);
  return buf;
}

}  // namespace

std::pair<std::optional<std::string>, std::optional<std::vector<double>>> MetadataStream::resolve(
    const datasets::ManifestRecord& r) const {
  std::optional<metadata::MetadataEncoding> enc;
  std::optional<std::string> label;
  switch (spec_.kind) {
    case EncoderKind::lang2vec:
      if (r.language.empty()) break;
      enc = metadata::encode_language(*table_, r.language);
      label = r.language;
      break;
    case EncoderKind::geo:
      if (!r.geo) break;
      enc = metadata::encode_geo(r.geo->lat, r.geo->lon);
      label = geo_label(*r.geo);
      break;
    case EncoderKind::text:
      if (!r.text) break;
      enc = metadata::encode_text(*r.text, *chars_);
      label = *r.text;
      break;
  }
  if (!enc || !label) return {std::nullopt, std::nullopt};
  return {std::move(label), std::move(enc->vector)};
}

StreamData StreamData::gather(std::span<const std::size_t> items) const {
  StreamData out;
  out.labels.reserve(items.size());
  out.encodings.reserve(items.size());
  for (auto i : items) {
    out.labels.push_back(labels.at(i));
    out.encodings.push_back(encodings.at(i));
  }
  return out;
}

StreamData resolve_stream(const MetadataStream& stream, const std::vector<datasets::ManifestRecord>& records) {
  StreamData out;
  out.labels.reserve(records.size());
  out.encodings.reserve(records.size());
  for (const auto& r : records) {
    auto [label, enc] = stream.resolve(r);
    out.labels.push_back(std::move(label));
    out.encodings.push_back(enc ? std::move(*enc) : std::vector<double>{});
  }
  return out;
}

// ---------------------------------------------------------------------------

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<double> BatchResult::l_meta() const {
  std::vector<double> out;
  for (const auto& s : streams) out.push_back(s.l_meta);
  return out;
}

namespace {

template <class Real>
void add_into(ModelState<Real>& dst, ModelState<Real>& src) {
  std::vector<std::span<Real>> targets;
  dst.visit([&](const TensorRef<Real>& t) { targets.push_back(t.data); });
  std::size_t k = 0;
  src.visit([&](const TensorRef<Real>& t) {
    simd::axpy<Real>(Real(1), t.data, targets[k]);
    ++k;
  });
}

template <class Real>
struct ItemState {
  ssl::EncoderTrace<Real> trace;
  std::vector<Real> h;
  Matrix<Real> dz;
  std::vector<std::vector<Real>> raw;  // per stream, before normalization
  std::vector<std::vector<Real>> q;
  double ce_sum = 0.0;
};

}  // namespace

template <class Real>
BatchResult forward_backward(const ModelState<Real>& model, const std::vector<MetadataStream>& streams,
                             const BatchInputs<Real>& batch, const LossWeights& weights, const BatchOptions& options,
                             ModelState<Real>* grads) {
  const std::size_t n = batch.size();
  const std::size_t m = streams.size();
  if (batch.targets.size() != n || batch.masks.size() != n)
    fail(ErrorKind::shape, "batch inputs, targets and masks must have the same length");
  if (batch.streams.size() != m || model.projections.size() != m)
    fail(ErrorKind::shape, "model, batch and stream configuration disagree on the number of streams");
  if (weights.meta.size() != m) fail(ErrorKind::shape, "one loss weight per stream required");
  if (options.frozen && options.frozen->size() != m) fail(ErrorKind::shape, "frozen selections need one list per stream");
  for (const auto& s : batch.streams)
    if (s.labels.size() != n || s.encodings.size() != n) fail(ErrorKind::shape, "stream data does not cover the batch");

  std::size_t masked_total = 0;
  for (const auto& mk : batch.masks) masked_total += mk.count();
  const bool want_grads = grads != nullptr;
  const bool ssl_grads = want_grads && weights.ssl != 0.0 && masked_total > 0;
  const Real ssl_scale = masked_total == 0 ? Real(0) : static_cast<Real>(weights.ssl / static_cast<double>(masked_total));

  // Per-item forward, including the SSL head gradient, which does not depend on
  // other items.
  std::vector<ItemState<Real>> items(n);
  std::vector<ModelState<Real>> item_grads;
  if (want_grads) item_grads.assign(n, grads->zeros_like());
  parallel_for(n, options.threads, [&](std::size_t i) {
    auto& it = items[i];
    it.trace = ssl::encode<Real>(*batch.stacked[i], batch.masks[i], model.encoder, options.context);
    const Matrix<Real>& z = it.trace.output();
    it.dz = Matrix<Real>(z.rows(), z.cols());
    const ssl::SslTerms terms =
        ssl::ssl_head<Real>(z, *batch.targets[i], batch.masks[i], model.encoder.head, ssl_scale,
                            ssl_grads ? &it.dz : nullptr, ssl_grads ? &item_grads[i].encoder.head : nullptr);
    it.ce_sum = terms.ce_sum;
    it.h = ssl::pool<Real>(z);
    it.raw.resize(m);
    it.q.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
      // Items without a label never enter a triplet, but still get projected so
      // every q is available for diagnostics.
      it.q[j] = loss::project<Real>(it.h, model.projections[j], &it.raw[j]);
    }
  });

  BatchResult result;
  result.masked_steps = masked_total;
  result.empty_mask = masked_total == 0;
  double ce_total = 0.0;
  for (const auto& it : items) ce_total += it.ce_sum;
  result.l_ssl = masked_total == 0 ? 0.0 : ce_total / static_cast<double>(masked_total);

  // Mining and triplet terms need the whole batch.
  std::vector<std::vector<std::vector<Real>>> dq(m);
  result.streams.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    const auto& cfg = streams[j].spec().loss;
    auto& sr = result.streams[j];
    std::vector<std::vector<Real>> q(n);
    for (std::size_t i = 0; i < n; ++i) q[i] = items[i].q[j];
    for (const auto& v : q) sr.q.emplace_back(v.begin(), v.end());
    const auto& e = batch.streams[j].encodings;
    for (std::size_t i = 0; i < n; ++i)
      if (batch.streams[j].labels[i] && e[i].size() != streams[j].encoding_dim())
        fail(ErrorKind::shape, "stream '" + cfg.name + "': encoding width mismatch");
    const auto sets = loss::build_sets(batch.streams[j].labels);
    const loss::MiningSpace<Real> space{q, e, cfg.alpha};
    sr.selections = options.frozen ? (*options.frozen)[j] : loss::mine<Real>(space, sets);
    sr.change = loss::selection_change_rate<Real>(space, sets);

    const bool stream_grads = want_grads && weights.meta[j] != 0.0;
    const Real scale = static_cast<Real>(weights.meta[j]);
    if (cfg.loss_on_p) {
      std::vector<std::vector<Real>> p(n);
      for (std::size_t i = 0; i < n; ++i)
        p[i] = batch.streams[j].labels[i] ? loss::mining_vector<Real>(q[i], e[i], cfg.alpha) : q[i];
      std::vector<std::vector<Real>> dp;
      if (stream_grads)
        for (const auto& v : p) dp.emplace_back(v.size(), Real(0));
      sr.triplet = loss::triplet_loss<Real>(sr.selections, p, cfg.gamma, stream_grads ? &dp : nullptr, scale);
      if (stream_grads) {
        dq[j].resize(n);
        for (std::size_t i = 0; i < n; ++i) dq[j][i].assign(dp[i].begin(), dp[i].begin() + q[i].size());
      }
    } else {
      if (stream_grads)
        for (const auto& v : q) dq[j].emplace_back(v.size(), Real(0));
      sr.triplet = loss::triplet_loss<Real>(sr.selections, q, cfg.gamma, stream_grads ? &dq[j] : nullptr, scale);
    }
    sr.l_meta = sr.triplet.loss;
  }
  if (!want_grads) return result;

  parallel_for(n, options.threads, [&](std::size_t i) {
    auto& it = items[i];
    auto& g = item_grads[i];
    std::vector<Real> dh(it.h.size(), Real(0));
    bool any = false;
    for (std::size_t j = 0; j < m; ++j) {
      if (dq[j].empty()) continue;
      loss::project_backward<Real>(it.h, model.projections[j], it.raw[j], dq[j][i], g.projections[j], dh);
      any = true;
    }
    if (any) {
      const Real inv = Real(1) / static_cast<Real>(it.dz.rows());
      for (Real& v : dh) v *= inv;
      for (std::size_t t = 0; t < it.dz.rows(); ++t) simd::axpy<Real>(Real(1), dh, it.dz.row(t));
    }
    if (any || ssl_grads) ssl::encode_backward<Real>(it.trace, it.dz, model.encoder, options.context, g.encoder);
  });
  for (auto& g : item_grads) add_into(*grads, g);
  return result;
}

template <class Real>
std::vector<Real> embed(const ModelState<Real>& model, const Matrix<Real>& stacked, std::size_t context) {
  const auto trace = ssl::encode<Real>(stacked, ssl::no_mask(stacked.rows()), model.encoder, context);
  return ssl::pool<Real>(trace.output());
}

#define MASR_INSTANTIATE(Real)                                                                                     \
  template struct ModelState<Real>;                                                                               \
  template BatchResult forward_backward<Real>(const ModelState<Real>&, const std::vector<MetadataStream>&,        \
                                              const BatchInputs<Real>&, const LossWeights&, const BatchOptions&, \
                                              ModelState<Real>*);                                                 \
  template std::vector<Real> embed<Real>(const ModelState<Real>&, const Matrix<Real>&, std::size_t);

MASR_INSTANTIATE(float)
MASR_INSTANTIATE(double)
#undef MASR_INSTANTIATE

}  // namespace masr
