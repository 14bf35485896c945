#include "masr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "masr/error.hpp"
#include "masr/rng.hpp"

namespace masr::gradcheck {

void GradcheckConfig::validate() const {
  backbone.validate();
  if (instances == 0) fail(ErrorKind::config, "gradcheck.instances must be >= 1");
  if (!(tolerance > 0.0)) fail(ErrorKind::config, "gradcheck.tolerance must be > 0");
  if (!(step > 0.0)) fail(ErrorKind::config, "gradcheck.step must be > 0");
  if (!(min_gap >= 0.0)) fail(ErrorKind::config, "gradcheck.min_gap must be >= 0");
  if (batch_size < 4) fail(ErrorKind::config, "gradcheck.batch_size must be >= 4");
  if (labels_per_stream < 2 || labels_per_stream * 2 > batch_size)
    fail(ErrorKind::config, "gradcheck.labels_per_stream must be in [2, batch_size / 2]");
  if (frames < backbone.stack) fail(ErrorKind::config, "gradcheck.frames must cover one stacked step");
  if (langvec_dim == 0) fail(ErrorKind::config, "gradcheck.langvec_dim must be >= 1");
}

std::optional<TensorCheck> Report::first_failure() const {
  for (const auto& c : checks)
    if (!c.pass) return c;
  return std::nullopt;
}

std::string Report::to_jsonl() const {
  std::string out;
  for (const auto& c : checks) {
    nlohmann::ordered_json j;
    j["instance"] = c.instance;
    j["objective"] = c.objective;
    j["tensor"] = c.tensor;
    j["coords"] = c.coords;
    j["max_abs_error"] = c.max_abs_error;
    j["rel_error"] = c.rel_error;
    j["pass"] = c.pass;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json s;
  s["summary"] = true;
  s["instances"] = instances;
  s["resamples"] = resamples;
  s["max_rel_error"] = max_rel_error;
  s["pass"] = pass;
  out += s.dump() + "\n";
  return out;
}

namespace {

std::vector<StreamSpec> default_specs() {
  StreamSpec lang;
  lang.loss.name = "language";
  lang.kind = EncoderKind::lang2vec;
  lang.source = SourceField::language;
  StreamSpec geo;
  geo.loss.name = "geo";
  geo.loss.lambda = 4.0;
  geo.kind = EncoderKind::geo;
  geo.source = SourceField::geo;
  return {lang, geo};
}

// Label assignment with every label used at least twice.
std::vector<std::size_t> label_slots(std::size_t n, std::size_t labels, Rng& rng) {
  std::vector<std::size_t> slots(n);
  for (std::size_t i = 0; i < n; ++i) slots[i] = i % labels;
  rng.shuffle(slots);
  return slots;
}

std::string random_text(Rng& rng) {
  std::string s;
  const std::size_t len = 3 + rng.uniform_index(6);
  for (std::size_t k = 0; k < len; ++k) s.push_back(static_cast<char>('a' + rng.uniform_index(26)));
  return s;
}

std::unique_ptr<Instance> draw(const GradcheckConfig& cfg, const std::vector<StreamSpec>& specs, std::uint64_t seed) {
  auto inst = std::make_unique<Instance>();
  Rng rng(seed);
  const std::size_t n = cfg.batch_size;
  const std::size_t labels = cfg.labels_per_stream;

  std::vector<datasets::ManifestRecord> records(n);
  const auto lang_slots = label_slots(n, labels, rng);
  const auto geo_slots = label_slots(n, labels, rng);
  const auto text_slots = label_slots(n, labels, rng);
  std::vector<datasets::GeoLocation> places(labels);
  for (auto& p : places) p = {rng.uniform(-80.0, 80.0), rng.uniform(-179.0, 179.0)};
  std::vector<std::string> texts(labels);
  for (auto& t : texts) t = random_text(rng);
  for (std::size_t i = 0; i < n; ++i) {
    records[i].id = "item" + std::to_string(i);
    records[i].language = "g" + std::to_string(lang_slots[i]);
    records[i].geo = places[geo_slots[i]];
    records[i].text = texts[text_slots[i]];
  }

  for (const auto& spec : specs) {
    if (spec.kind == EncoderKind::lang2vec) {
      metadata::LangVecTable table(spec.category, cfg.langvec_dim);
      for (std::size_t l = 0; l < labels; ++l) {
        std::vector<double> v(cfg.langvec_dim);
        for (double& x : v) x = rng.normal();
        table.add("g" + std::to_string(l), v);
      }
      inst->streams.emplace_back(spec, std::move(table));
    } else {
      inst->streams.emplace_back(spec, derive_seed(seed, {hash_tag("char_table")}));
    }
  }

  const ssl::BackboneConfig& bb = cfg.backbone;
  inst->context = bb.context;
  const ssl::Quantizer quantizer(derive_seed(seed, {hash_tag("quantizer")}), bb.input_dim(), bb.stack, bb.codebook_dim,
                                 bb.codebook_size);
  for (std::size_t i = 0; i < n; ++i) {
    features::FeatureMatrix f(cfg.frames, bb.mel_bins);
    for (std::size_t t = 0; t < cfg.frames; ++t)
      for (std::size_t b = 0; b < bb.mel_bins; ++b) f(t, b) = static_cast<float>(rng.normal());
    inst->stacked.push_back(ssl::stack_frames<double>(f, bb.stack));
    inst->targets.push_back(ssl::quantize_targets(f, quantizer));
  }

  std::vector<std::string> names;
  std::vector<std::size_t> dims;
  for (const auto& s : inst->streams) {
    names.push_back(s.name());
    dims.push_back(s.projection_dim());
  }
  inst->model = ModelState<double>::init(bb, names, dims, derive_seed(seed, {hash_tag("model")}));
  // Non-zero biases so their gradients are exercised away from the origin.
  inst->model.visit([&](const TensorRef<double>& t) {
    if (t.name.ends_with(".bias"))
      for (double& x : t.data) x = 0.1 * rng.normal();
  });

  for (std::size_t i = 0; i < n; ++i) {
    inst->batch.stacked.push_back(&inst->stacked[i]);
    inst->batch.targets.push_back(&inst->targets[i]);
    inst->batch.masks.push_back(ssl::make_mask(inst->stacked[i].rows(), cfg.mask_prob, bb.mask_span,
                                               derive_seed(seed, {hash_tag("mask"), i})));
  }
  for (const auto& s : inst->streams) inst->batch.streams.push_back(resolve_stream(s, records));

  LossWeights w;
  w.meta.assign(inst->streams.size(), 0.0);
  BatchOptions opt;
  opt.context = bb.context;
  const BatchResult r = forward_backward<double>(inst->model, inst->streams, inst->batch, w, opt, nullptr);
  for (const auto& s : r.streams) inst->selections.push_back(s.selections);
  return inst;
}

double objective(const BatchResult& r, const LossWeights& w) {
  double total = w.ssl * r.l_ssl;
  for (std::size_t j = 0; j < r.streams.size(); ++j) total += w.meta[j] * r.streams[j].l_meta;
  return total;
}

struct Objective {
  std::string name;
  LossWeights weights;
};

std::vector<Objective> objectives(const std::vector<MetadataStream>& streams) {
  std::vector<Objective> out;
  const std::size_t m = streams.size();
  out.push_back({"L_SSL", {1.0, std::vector<double>(m, 0.0)}});
  for (std::size_t j = 0; j < m; ++j) {
    Objective o{"L_META[" + streams[j].name() + "]", {0.0, std::vector<double>(m, 0.0)}};
    o.weights.meta[j] = 1.0;
    out.push_back(o);
  }
  Objective total{"L_MASR", {1.0, {}}};
  for (const auto& s : streams) total.weights.meta.push_back(s.spec().loss.lambda);
  out.push_back(total);
  return out;
}

}  // namespace

double smallest_gap(const Instance& inst) {
  LossWeights w;
  w.meta.assign(inst.streams.size(), 0.0);
  BatchOptions opt;
  opt.context = inst.context;
  const BatchResult r = forward_backward<double>(inst.model, inst.streams, inst.batch, w, opt, nullptr);
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < inst.streams.size(); ++j) {
    const auto& cfg = inst.streams[j].spec().loss;
    const auto& q = r.streams[j].q;
    const auto& e = inst.batch.streams[j].encodings;
    const loss::MiningSpace<double> space{q, e, cfg.alpha};
    const auto sets = loss::build_sets(inst.batch.streams[j].labels);
    std::vector<std::vector<double>> lv(q.size());
    for (std::size_t i = 0; i < q.size(); ++i)
      lv[i] = cfg.loss_on_p && inst.batch.streams[j].labels[i] ? loss::mining_vector<double>(q[i], e[i], cfg.alpha)
                                                               : q[i];
    for (const auto& sel : r.streams[j].selections) {
      if (sel.skipped()) continue;
      const std::size_t i = sel.anchor;
      // Distance from the chosen member to the runner-up in each set.
      const double dp = space.distance(i, *sel.positive);
      for (auto k : sets[i].positives)
        if (k != *sel.positive) gap = std::min(gap, std::abs(dp - space.distance(i, k)));
      const double dn = space.distance(i, *sel.negative);
      for (auto k : sets[i].negatives)
        if (k != *sel.negative) gap = std::min(gap, std::abs(space.distance(i, k) - dn));
      const double slack = cfg.gamma + loss::cosine_distance<double>(lv[i], lv[*sel.positive]) -
                           loss::cosine_distance<double>(lv[i], lv[*sel.negative]);
      gap = std::min(gap, std::abs(slack));
    }
  }
  return gap;
}

std::unique_ptr<Instance> make_instance(const GradcheckConfig& cfg, const std::vector<StreamSpec>& specs,
                                        std::size_t index) {
  cfg.validate();
  const auto use = specs.empty() ? default_specs() : specs;
  for (std::size_t attempt = 0; attempt < cfg.max_resamples; ++attempt) {
    auto inst = draw(cfg, use, derive_seed(cfg.seed, {hash_tag("gradcheck"), index, attempt}));
    bool masked = false;
    for (const auto& mk : inst->batch.masks) masked = masked || mk.count() > 0;
    if (!masked) continue;
    if (smallest_gap(*inst) < cfg.min_gap) continue;
    inst->attempts = attempt + 1;
    return inst;
  }
  fail(ErrorKind::gradcheck, "no instance with selection gaps >= " + std::to_string(cfg.min_gap) + " after " +
                                 std::to_string(cfg.max_resamples) + " draws");
}

std::vector<TensorCheck> check_instance(const GradcheckConfig& cfg, Instance& inst, std::size_t index,
                                        const Tamper& tamper) {
  BatchOptions opt;
  opt.context = inst.context;
  opt.frozen = &inst.selections;
  const auto objs = objectives(inst.streams);

  std::vector<ModelState<double>> analytic;
  for (const auto& o : objs) {
    ModelState<double> g = inst.model.zeros_like();
    forward_backward<double>(inst.model, inst.streams, inst.batch, o.weights, opt, &g);
    if (tamper) tamper(o.name, g);
    analytic.push_back(std::move(g));
  }

  // One pair of forward passes per coordinate serves every objective.
  std::vector<ModelState<double>> numeric(objs.size(), inst.model.zeros_like());
  std::vector<std::vector<std::span<double>>> num_views(objs.size());
  for (std::size_t o = 0; o < objs.size(); ++o)
    numeric[o].visit([&](const TensorRef<double>& t) { num_views[o].push_back(t.data); });
  std::vector<TensorRef<double>> params;
  inst.model.visit([&](const TensorRef<double>& t) { params.push_back(t); });
  const double h = cfg.step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t c = 0; c < params[k].data.size(); ++c) {
      double& x = params[k].data[c];
      const double saved = x;
      x = saved + h;
      const BatchResult plus = forward_backward<double>(inst.model, inst.streams, inst.batch, objs[0].weights, opt, nullptr);
      x = saved - h;
      const BatchResult minus = forward_backward<double>(inst.model, inst.streams, inst.batch, objs[0].weights, opt, nullptr);
      x = saved;
      for (std::size_t o = 0; o < objs.size(); ++o)
        num_views[o][k][c] = (objective(plus, objs[o].weights) - objective(minus, objs[o].weights)) / (2.0 * h);
    }
  }

  std::vector<TensorCheck> out;
  for (std::size_t o = 0; o < objs.size(); ++o) {
    std::vector<TensorRef<double>> a;
    analytic[o].visit([&](const TensorRef<double>& t) { a.push_back(t); });
    for (std::size_t k = 0; k < a.size(); ++k) {
      TensorCheck tc;
      tc.instance = index;
      tc.objective = objs[o].name;
      tc.tensor = a[k].name;
      tc.coords = a[k].data.size();
      double scale = 1e-8;
      for (std::size_t c = 0; c < a[k].data.size(); ++c) {
        const double av = a[k].data[c], nv = num_views[o][k][c];
        tc.max_abs_error = std::max(tc.max_abs_error, std::abs(av - nv));
        scale = std::max({scale, std::abs(av), std::abs(nv)});
        if (!std::isfinite(av) || !std::isfinite(nv)) tc.max_abs_error = std::numeric_limits<double>::infinity();
      }
      tc.rel_error = tc.max_abs_error / scale;
      tc.pass = tc.rel_error <= cfg.tolerance;
      out.push_back(std::move(tc));
    }
  }
  return out;
}

Report run(const GradcheckConfig& cfg, const std::vector<StreamSpec>& specs, const Tamper& tamper) {
  cfg.validate();
  Report report;
  for (std::size_t i = 0; i < cfg.instances; ++i) {
    auto inst = make_instance(cfg, specs, i);
    report.resamples += inst->attempts - 1;
    auto checks = check_instance(cfg, *inst, i, tamper);
    for (auto& c : checks) {
      report.max_rel_error = std::max(report.max_rel_error, c.rel_error);
      report.pass = report.pass && c.pass;
      report.checks.push_back(std::move(c));
    }
    ++report.instances;
  }
  return report;
}

}  // namespace masr::gradcheck
