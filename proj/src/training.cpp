#include "masr/training.hpp"

#include <cmath>

#include "json.hpp"

#include "masr/error.hpp"
#include "masr/rng.hpp"

namespace masr::training {

std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  fail(ErrorKind::config, "unknown precision '" + std::string(s) + "' (expected f32 or f64)");
}

void TrainConfig::validate() const {
  if (batch_size < 2) fail(ErrorKind::config, "training.batch_size must be >= 2");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    fail(ErrorKind::config, "training.learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail(ErrorKind::config, "training.beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail(ErrorKind::config, "training.beta2 must be in [0, 1)");
  if (!(epsilon > 0.0)) fail(ErrorKind::config, "training.epsilon must be > 0");
  if (threads == 0) fail(ErrorKind::config, "training.threads must be >= 1");
}

Seeds Seeds::from_root(std::uint64_t root) {
  Seeds s;
  s.root = root;
  s.model = derive_seed(root, {hash_tag("model")});
  s.quantizer = derive_seed(root, {hash_tag("quantizer")});
  s.char_table = derive_seed(root, {hash_tag("char_table")});
  s.batches = derive_seed(root, {hash_tag("batches")});
  s.masks = derive_seed(root, {hash_tag("masks")});
  return s;
}

std::string StepRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["phase"] = phase;
  j["batch"] = batch;
  j["masked_steps"] = masked_steps;
  j["l_ssl"] = l_ssl;
  auto per_stream = [&](const auto& values) {
    nlohmann::ordered_json o = nlohmann::ordered_json::object();
    for (std::size_t k = 0; k < streams.size(); ++k) o[streams[k]] = values[k];
    return o;
  };
  j["l_meta"] = per_stream(l_meta);
  j["lambda"] = per_stream(lambda);
  j["l_masr"] = l_masr;
  j["change_rate"] = per_stream(change_rate);
  j["active"] = per_stream(active);
  j["counted"] = per_stream(counted);
  return j.dump();
}

template <class Real>
void adam_update(ModelState<Real>& params, ModelState<Real>& grads, AdamState<Real>& state, const TrainConfig& cfg) {
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const Real b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);
  const Real lr = static_cast<Real>(cfg.learning_rate), eps = static_cast<Real>(cfg.epsilon);
  const Real ic1 = static_cast<Real>(1.0 / c1), ic2 = static_cast<Real>(1.0 / c2);

  std::vector<std::span<Real>> p, g, m, v;
  params.visit([&](const TensorRef<Real>& t) { p.push_back(t.data); });
  grads.visit([&](const TensorRef<Real>& t) { g.push_back(t.data); });
  state.m.visit([&](const TensorRef<Real>& t) { m.push_back(t.data); });
  state.v.visit([&](const TensorRef<Real>& t) { v.push_back(t.data); });
  for (std::size_t k = 0; k < p.size(); ++k) {
    for (std::size_t i = 0; i < p[k].size(); ++i) {
      const Real gi = g[k][i];
      m[k][i] = b1 * m[k][i] + (Real(1) - b1) * gi;
      v[k][i] = b2 * v[k][i] + (Real(1) - b2) * gi * gi;
      const Real mh = m[k][i] * ic1;
      const Real vh = v[k][i] * ic2;
      p[k][i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

std::vector<std::string> stream_names(const std::vector<MetadataStream>& streams) {
  std::vector<std::string> out;
  for (const auto& s : streams) out.push_back(s.name());
  return out;
}

std::vector<std::size_t> projection_dims(const std::vector<MetadataStream>& streams) {
  std::vector<std::size_t> out;
  for (const auto& s : streams) out.push_back(s.projection_dim());
  return out;
}

ssl::Quantizer make_quantizer(const ssl::BackboneConfig& backbone, const Seeds& seeds) {
  return ssl::Quantizer(seeds.quantizer, backbone.input_dim(), backbone.stack, backbone.codebook_dim,
                        backbone.codebook_size);
}

template <class Real>
PreparedCorpus<Real> prepare_corpus(const datasets::Corpus& corpus, const ssl::BackboneConfig& backbone,
                                    const ssl::Quantizer& quantizer, const std::vector<MetadataStream>& streams) {
  PreparedCorpus<Real> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& f = corpus.features[i];
    if (f.bins() != backbone.mel_bins)
      fail(ErrorKind::shape, "utterance '" + corpus.records[i].id + "' has " + std::to_string(f.bins()) +
                                 " mel bins, the backbone expects " + std::to_string(backbone.mel_bins));
    if (f.frames() < backbone.stack)
      fail(ErrorKind::shape, "utterance '" + corpus.records[i].id + "' is shorter than one stacked step");
    out.stacked.push_back(ssl::stack_frames<Real>(f, backbone.stack));
    out.targets.push_back(ssl::quantize_targets(f, quantizer));
    out.languages.push_back(corpus.records[i].language);
  }
  for (const auto& s : streams) out.streams.push_back(resolve_stream(s, corpus.records));
  return out;
}

namespace {

TrainSetup validated(TrainSetup s) {
  s.train.validate();
  s.backbone.validate();
  return s;
}

}  // namespace

template <class Real>
Trainer<Real>::Trainer(TrainSetup setup, const datasets::Corpus& corpus, std::vector<MetadataStream> streams)
    : setup_(validated(std::move(setup))),
      seeds_(Seeds::from_root(setup_.seed)),
      streams_(std::move(streams)),
      quantizer_(make_quantizer(setup_.backbone, seeds_)),
      data_(prepare_corpus<Real>(corpus, setup_.backbone, quantizer_, streams_)),
      sampler_(data_.languages, setup_.train.batch_size, seeds_.batches, setup_.train.balance),
      model_(ModelState<Real>::init(setup_.backbone, stream_names(streams_), projection_dims(streams_), seeds_.model)) {
  const bool want64 = setup_.train.precision == Precision::f64;
  if (want64 != std::is_same_v<Real, double>)
    fail(ErrorKind::config, "trainer precision does not match training.precision");
  adam_.m = model_.zeros_like();
  adam_.v = model_.zeros_like();
}

template <class Real>
BatchInputs<Real> Trainer<Real>::batch_inputs(std::uint64_t n) {
  const datasets::Batch b = sampler_.batch(n);
  BatchInputs<Real> in;
  for (std::size_t slot = 0; slot < b.items.size(); ++slot) {
    const std::size_t i = b.items[slot];
    in.stacked.push_back(&data_.stacked[i]);
    in.targets.push_back(&data_.targets[i]);
    in.masks.push_back(ssl::make_mask(data_.stacked[i].rows(), setup_.backbone.mask_prob, setup_.backbone.mask_span,
                                      derive_seed(seeds_.masks, {n, slot})));
  }
  for (const auto& s : data_.streams) in.streams.push_back(s.gather(b.items));
  return in;
}

namespace {

template <class Real>
void require_finite_grads(ModelState<Real>& grads, std::uint64_t step) {
  grads.visit([&](const TensorRef<Real>& t) {
    for (Real v : t.data)
      if (!std::isfinite(static_cast<double>(v)))
        fail(ErrorKind::numeric, "step " + std::to_string(step) + ": non-finite gradient in " + t.name);
  });
}

}  // namespace

template <class Real>
StepRecord Trainer<Real>::step() {
  if (finished()) fail(ErrorKind::invalid_argument, "training already finished");
  const std::uint64_t n = adam_.t;
  const int phase = n < setup_.train.phase1_steps ? 1 : 2;

  LossWeights weights;
  weights.ssl = 1.0;
  for (const auto& s : streams_) weights.meta.push_back(phase == 1 ? 0.0 : s.spec().loss.lambda);

  const BatchInputs<Real> in = batch_inputs(n);
  BatchOptions opt;
  opt.context = setup_.backbone.context;
  opt.threads = setup_.train.threads;
  ModelState<Real> grads = model_.zeros_like();
  const BatchResult r = forward_backward<Real>(model_, streams_, in, weights, opt, &grads);

  StepRecord rec;
  rec.step = n + 1;
  rec.phase = phase;
  rec.batch = n;
  rec.masked_steps = r.masked_steps;
  rec.l_ssl = r.l_ssl;
  rec.streams = stream_names(streams_);
  rec.l_meta = r.l_meta();
  rec.lambda = weights.meta;
  for (const auto& s : r.streams) {
    rec.change_rate.push_back(s.change.rate);
    rec.active.push_back(s.triplet.active);
    rec.counted.push_back(s.triplet.counted);
  }
  try {
    rec.l_masr = loss::combined_loss(rec.l_ssl, rec.l_meta, rec.lambda);
  } catch (const Error& e) {
    fail(ErrorKind::numeric, "step " + std::to_string(rec.step) + ": " + e.what());
  }
  require_finite_grads(grads, rec.step);
  adam_update(model_, grads, adam_, setup_.train);
  return rec;
}

template <class Real>
void Trainer<Real>::run(const std::function<void(const StepRecord&)>& on_step, std::optional<std::size_t> until) {
  const std::size_t stop = std::min(until.value_or(setup_.train.total_steps()), setup_.train.total_steps());
  while (steps_done() < stop) {
    const StepRecord rec = step();
    if (on_step) on_step(rec);
  }
}

namespace {

template <class Real>
std::vector<std::pair<TensorRef<Real>, std::span<Real>>> flat_tensors(ModelState<Real>& s) {
  std::vector<std::pair<TensorRef<Real>, std::span<Real>>> out;
  s.visit([&](const TensorRef<Real>& t) { out.push_back({t, t.data}); });
  return out;
}

}  // namespace

template <class Real>
checkpoint::Checkpoint Trainer<Real>::to_checkpoint() const {
  checkpoint::Checkpoint c;
  c.config_hash = setup_.config_hash;
  c.root_seed = seeds_.root;
  c.quantizer_seed = seeds_.quantizer;
  c.char_table_seed = seeds_.char_table;
  c.precision_bits = std::is_same_v<Real, double> ? 64 : 32;
  c.step = adam_.t;
  auto model = model_;
  auto m = adam_.m;
  auto v = adam_.v;
  auto pt = flat_tensors(model);
  auto mt = flat_tensors(m);
  auto vt = flat_tensors(v);
  for (std::size_t k = 0; k < pt.size(); ++k) {
    checkpoint::Tensor t;
    t.name = pt[k].first.name;
    t.shape = pt[k].first.shape;
    t.value.assign(pt[k].second.begin(), pt[k].second.end());
    t.adam_m.assign(mt[k].second.begin(), mt[k].second.end());
    t.adam_v.assign(vt[k].second.begin(), vt[k].second.end());
    c.tensors.push_back(std::move(t));
  }
  return c;
}

template <class Real>
void Trainer<Real>::restore(const checkpoint::Checkpoint& c) {
  checkpoint::require_hash(c, setup_.config_hash);
  if (c.root_seed != seeds_.root)
    fail(ErrorKind::config, "checkpoint root seed " + std::to_string(c.root_seed) + " differs from the run seed " +
                                std::to_string(seeds_.root));
  const std::uint32_t bits = std::is_same_v<Real, double> ? 64 : 32;
  if (c.precision_bits != bits)
    fail(ErrorKind::config, "checkpoint precision is " + std::to_string(c.precision_bits) + " bits, run uses " +
                                std::to_string(bits));
  if (c.step > setup_.train.total_steps())
    fail(ErrorKind::config, "checkpoint step " + std::to_string(c.step) + " is past the configured schedule");
  auto pt = flat_tensors(model_);
  auto mt = flat_tensors(adam_.m);
  auto vt = flat_tensors(adam_.v);
  if (c.tensors.size() != pt.size())
    fail(ErrorKind::shape, "checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model has " +
                               std::to_string(pt.size()));
  for (std::size_t k = 0; k < pt.size(); ++k) {
    const auto& t = c.find(pt[k].first.name);
    if (t.shape != pt[k].first.shape) fail(ErrorKind::shape, "checkpoint tensor '" + t.name + "' has the wrong shape");
    for (std::size_t i = 0; i < t.value.size(); ++i) {
      pt[k].second[i] = static_cast<Real>(t.value[i]);
      mt[k].second[i] = static_cast<Real>(t.adam_m[i]);
      vt[k].second[i] = static_cast<Real>(t.adam_v[i]);
    }
  }
  adam_.t = c.step;
}

template <class Real>
ModelState<Real> model_from_checkpoint(const checkpoint::Checkpoint& c, const ssl::BackboneConfig& backbone,
                                       const std::vector<MetadataStream>& streams) {
  ModelState<Real> model = ModelState<Real>::zeros(backbone, stream_names(streams), projection_dims(streams));
  std::size_t count = 0;
  model.visit([&](const TensorRef<Real>& t) {
    const auto& src = c.find(t.name);
    if (src.shape != t.shape) fail(ErrorKind::shape, "checkpoint tensor '" + t.name + "' has the wrong shape");
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<Real>(src.value[i]);
    ++count;
  });
  if (count != c.tensors.size())
    fail(ErrorKind::shape, "checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model has " +
                               std::to_string(count));
  return model;
}

#define MASR_INSTANTIATE(Real)                                                                              \
  template ModelState<Real> model_from_checkpoint<Real>(const checkpoint::Checkpoint&,                    \
                                                        const ssl::BackboneConfig&,                        \
                                                        const std::vector<MetadataStream>&);               \
  template void adam_update<Real>(ModelState<Real>&, ModelState<Real>&, AdamState<Real>&, const TrainConfig&); \
  template PreparedCorpus<Real> prepare_corpus<Real>(const datasets::Corpus&, const ssl::BackboneConfig&,    \
                                                     const ssl::Quantizer&, const std::vector<MetadataStream>&); \
  template class Trainer<Real>;

MASR_INSTANTIATE(float)
MASR_INSTANTIATE(double)
#undef MASR_INSTANTIATE

}  // namespace masr::training
