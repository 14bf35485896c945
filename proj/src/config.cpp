#include "masr/config.hpp"

#include <cstdio>
#include <functional>
#include <map>
#include <set>

#include "json.hpp"
#include "masr/binary_io.hpp"
#include "masr/error.hpp"
#include "masr/rng.hpp"

namespace masr::config {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// Walks one JSON object, recording every problem instead of stopping at the first.
class Section {
 public:
  Section(const json& obj, std::string path, std::vector<std::string>& errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {
    if (!obj_.is_object()) errors_.push_back(where("") + " must be an object");
  }

  ~Section() {
    if (!obj_.is_object()) return;
    for (const auto& [key, value] : obj_.items())
      if (!seen_.contains(key)) errors_.push_back("unknown key '" + where(key) + "'");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key)) return;
    const json& v = obj_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return bad(key, "a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) return bad(key, "a non-negative integer");
      out = static_cast<T>(v.get<std::uint64_t>());
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return bad(key, "a number");
      out = v.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return bad(key, "a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (!v.is_array()) return bad(key, "an array of strings");
      out.clear();
      for (const auto& e : v) {
        if (!e.is_string()) return bad(key, "an array of strings");
        out.push_back(e.get<std::string>());
      }
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) return bad(key, "an array of numbers");
      out.clear();
      for (const auto& e : v) {
        if (!e.is_number()) return bad(key, "an array of numbers");
        out.push_back(e.get<double>());
      }
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  // Custom conversion for enum-like string fields.
  void get_enum(const std::string& key, const std::function<void(const std::string&)>& apply) {
    std::string s;
    bool present = false;
    seen_.insert(key);
    if (obj_.is_object() && obj_.contains(key)) {
      if (!obj_.at(key).is_string()) return bad(key, "a string");
      s = obj_.at(key).get<std::string>();
      present = true;
    }
    if (!present) return;
    try {
      apply(s);
    } catch (const Error& e) {
      errors_.push_back(where(key) + ": " + e.what());
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key)) return nullptr;
    return &obj_.at(key);
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }
  std::vector<std::string>& errors() { return errors_; }

 private:
  void bad(const std::string& key, const std::string& expected) {
    errors_.push_back(where(key) + " must be " + expected);
  }

  const json& obj_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

void read_backbone(Section& s, ssl::BackboneConfig& b) {
  s.get("stack", b.stack);
  s.get("context", b.context);
  s.get("blocks", b.blocks);
  s.get("d_z", b.d_z);
  s.get("codebook_size", b.codebook_size);
  s.get("codebook_dim", b.codebook_dim);
  s.get("mask_prob", b.mask_prob);
  s.get("mask_span", b.mask_span);
}

ojson backbone_json(const ssl::BackboneConfig& b) {
  return {{"stack", b.stack},           {"context", b.context},
          {"blocks", b.blocks},         {"d_z", b.d_z},
          {"codebook_size", b.codebook_size}, {"codebook_dim", b.codebook_dim},
          {"mask_prob", b.mask_prob},   {"mask_span", b.mask_span}};
}

StreamSpec default_stream() {
  StreamSpec s;
  s.loss.name = "language";
  s.kind = EncoderKind::lang2vec;
  s.source = SourceField::language;
  s.table = "langvec.tsv";
  return s;
}

void read_stream(Section& s, StreamSpec& spec) {
  s.get("name", spec.loss.name);
  s.get_enum("encoder", [&](const std::string& v) {
    spec.kind = parse_encoder_kind(v);
    // The source follows the encoder unless given explicitly below.
    spec.source = spec.kind == EncoderKind::lang2vec ? SourceField::language
                  : spec.kind == EncoderKind::geo    ? SourceField::geo
                                                     : SourceField::text;
  });
  s.get_enum("source", [&](const std::string& v) { spec.source = parse_source_field(v); });
  s.get("table", spec.table);
  s.get_enum("category", [&](const std::string& v) { spec.category = metadata::parse_category(v); });
  s.get("alpha", spec.loss.alpha);
  s.get("lambda", spec.loss.lambda);
  s.get("gamma", spec.loss.gamma);
  s.get("d_q", spec.loss.d_q);
  s.get("loss_on_p", spec.loss.loss_on_p);
  s.get("text_dim", spec.text_dim);
}

ojson stream_json(const StreamSpec& s) {
  return {{"name", s.loss.name},
          {"encoder", std::string(to_string(s.kind))},
          {"source", std::string(to_string(s.source))},
          {"table", s.table},
          {"category", std::string(metadata::to_string(s.category))},
          {"alpha", s.loss.alpha},
          {"lambda", s.loss.lambda},
          {"gamma", s.loss.gamma},
          {"d_q", s.loss.d_q},
          {"loss_on_p", s.loss.loss_on_p},
          {"text_dim", s.text_dim}};
}

std::string_view balance_name(datasets::BalanceStrategy b) {
  return b == datasets::BalanceStrategy::shuffle ? "shuffle" : "label_balanced";
}

ojson training_json(const training::TrainConfig& t, bool for_hash) {
  ojson j = {{"phase1_steps", t.phase1_steps},
            {"phase2_steps", t.phase2_steps},
            {"batch_size", t.batch_size},
            {"learning_rate", t.learning_rate},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"epsilon", t.epsilon},
            {"precision", std::string(training::to_string(t.precision))},
            {"balance", std::string(balance_name(t.balance))}};
  if (!for_hash) {
    j["threads"] = t.threads;
    j["checkpoint_every"] = t.checkpoint_every;
  }
  return j;
}

ojson data_json(const DataSection& d) {
  ojson pairs = ojson::array();
  for (const auto& p : d.synth.spec.confusable_pairs) pairs.push_back({{"a", p.a}, {"b", p.b}, {"scale", p.scale}});
  return {{"manifest", d.manifest},
          {"eval_manifest", d.eval_manifest},
          {"synth",
           {{"num_languages", d.synth.spec.num_languages},
            {"utterances_per_language", d.synth.spec.utterances_per_language},
            {"eval_utterances_per_language", d.synth.eval_utterances_per_language},
            {"frames", d.synth.spec.frames},
            {"noise", d.synth.spec.noise},
            {"template_scale", d.synth.spec.template_scale},
            {"pairs", pairs},
            {"langvec_similarity", d.synth.langvec_similarity}}}};
}

ojson features_json(const features::LogmelConfig& f) {
  return {{"mel_bins", f.mel_bins}, {"frame_ms", f.frame_ms}, {"hop_ms", f.hop_ms}, {"floor", f.floor}};
}

ojson hashed_json(const RunConfig& c) {
  ojson streams = ojson::array();
  for (const auto& s : c.streams) streams.push_back(stream_json(s));
  return {{"seed", c.seed},
          {"data", data_json(c.data)},
          {"features", features_json(c.features)},
          {"backbone", backbone_json(c.backbone)},
          {"streams", streams},
          {"training", training_json(c.training, true)}};
}

void validate(RunConfig& c, std::vector<std::string>& errors) {
  auto check = [&](const std::function<void()>& f) {
    try {
      f();
    } catch (const Error& e) {
      errors.push_back(e.what());
    }
  };
  check([&] { c.backbone.validate(); });
  check([&] { c.training.validate(); });
  check([&] { c.data.synth.spec.validate(); });
  check([&] { c.eval.probe.validate(); });
  check([&] { c.gradcheck.validate(); });
  if (c.streams.empty()) errors.push_back("streams: at least one metadata stream is required");
  std::set<std::string> names;
  for (std::size_t j = 0; j < c.streams.size(); ++j) {
    check([&] { c.streams[j].validate(); });
    if (!names.insert(c.streams[j].loss.name).second)
      errors.push_back("streams[" + std::to_string(j) + "]: duplicate stream name '" + c.streams[j].loss.name + "'");
  }
  if (!(c.data.synth.langvec_similarity > -1.0 && c.data.synth.langvec_similarity < 1.0))
    errors.push_back("data.synth.langvec_similarity must lie in (-1, 1)");
  if (c.data.synth.eval_utterances_per_language == 0)
    errors.push_back("data.synth.eval_utterances_per_language must be >= 1");
}

}  // namespace

RunConfig default_config() {
  RunConfig c;
  c.data.synth.spec.confusable_pairs = {{0, 1, 0.1}, {2, 3, 0.1}};
  c.data.synth.spec.noise = 0.1;
  c.data.synth.spec.template_scale = 0.1;
  c.streams = {default_stream()};
  c.data.synth.spec.mel_bins = c.features.mel_bins;
  c.backbone.mel_bins = c.features.mel_bins;
  c.set_seed(c.seed);
  c.base_dir = ".";
  return c;
}

RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir, std::string_view context) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::parse, std::string(context) + ": " + e.what());
  }
  RunConfig c = default_config();
  c.base_dir = base_dir;
  std::vector<std::string> errors;
  {
    Section top(root, "", errors);
    top.get("seed", c.seed);
    if (const json* d = top.child("data")) {
      Section s(*d, "data", errors);
      s.get("manifest", c.data.manifest);
      s.get("eval_manifest", c.data.eval_manifest);
      if (const json* sy = s.child("synth")) {
        Section ss(*sy, "data.synth", errors);
        auto& sp = c.data.synth.spec;
        ss.get("num_languages", sp.num_languages);
        ss.get("utterances_per_language", sp.utterances_per_language);
        ss.get("eval_utterances_per_language", c.data.synth.eval_utterances_per_language);
        ss.get("frames", sp.frames);
        ss.get("noise", sp.noise);
        ss.get("template_scale", sp.template_scale);
        ss.get("langvec_similarity", c.data.synth.langvec_similarity);
        if (const json* pairs = ss.child("pairs")) {
          if (!pairs->is_array()) {
            errors.push_back("data.synth.pairs must be an array");
          } else {
            sp.confusable_pairs.clear();
            for (std::size_t k = 0; k < pairs->size(); ++k) {
              Section ps((*pairs)[k], "data.synth.pairs[" + std::to_string(k) + "]", errors);
              datasets::ConfusablePair p;
              ps.get("a", p.a);
              ps.get("b", p.b);
              ps.get("scale", p.scale);
              sp.confusable_pairs.push_back(p);
            }
          }
        }
      }
    }
    if (const json* f = top.child("features")) {
      Section s(*f, "features", errors);
      s.get("mel_bins", c.features.mel_bins);
      s.get("frame_ms", c.features.frame_ms);
      s.get("hop_ms", c.features.hop_ms);
      s.get("floor", c.features.floor);
    }
    if (const json* b = top.child("backbone")) {
      Section s(*b, "backbone", errors);
      read_backbone(s, c.backbone);
    }
    if (const json* st = top.child("streams")) {
      if (!st->is_array()) {
        errors.push_back("streams must be an array");
      } else {
        c.streams.clear();
        for (std::size_t k = 0; k < st->size(); ++k) {
          Section s((*st)[k], "streams[" + std::to_string(k) + "]", errors);
          StreamSpec spec = default_stream();
          read_stream(s, spec);
          c.streams.push_back(spec);
        }
      }
    }
    if (const json* t = top.child("training")) {
      Section s(*t, "training", errors);
      auto& tr = c.training;
      s.get("phase1_steps", tr.phase1_steps);
      s.get("phase2_steps", tr.phase2_steps);
      s.get("batch_size", tr.batch_size);
      s.get("learning_rate", tr.learning_rate);
      s.get("beta1", tr.beta1);
      s.get("beta2", tr.beta2);
      s.get("epsilon", tr.epsilon);
      s.get_enum("precision", [&](const std::string& v) { tr.precision = training::parse_precision(v); });
      s.get_enum("balance", [&](const std::string& v) {
        if (v == "shuffle")
          tr.balance = datasets::BalanceStrategy::shuffle;
        else if (v == "label_balanced")
          tr.balance = datasets::BalanceStrategy::label_balanced;
        else
          fail(ErrorKind::config, "unknown balance strategy '" + v + "' (expected shuffle or label_balanced)");
      });
      s.get("threads", tr.threads);
      s.get("checkpoint_every", tr.checkpoint_every);
    }
    if (const json* e = top.child("eval")) {
      Section s(*e, "eval", errors);
      s.get("probe_max_steps", c.eval.probe.max_steps);
      s.get("probe_window", c.eval.probe.window);
      s.get("probe_min_improvement", c.eval.probe.min_improvement);
      s.get("probe_lr_grid", c.eval.probe.lr_grid);
      s.get("probe_search_steps", c.eval.probe.search_steps);
      s.get("confusable", c.eval.confusable);
      s.get("overlap", c.eval.overlap);
    }
    if (const json* g = top.child("gradcheck")) {
      Section s(*g, "gradcheck", errors);
      auto& gc = c.gradcheck;
      s.get("instances", gc.instances);
      s.get("tolerance", gc.tolerance);
      s.get("step", gc.step);
      s.get("min_gap", gc.min_gap);
      s.get("max_resamples", gc.max_resamples);
      s.get("seed", gc.seed);
      s.get("batch_size", gc.batch_size);
      s.get("frames", gc.frames);
      s.get("labels_per_stream", gc.labels_per_stream);
      s.get("langvec_dim", gc.langvec_dim);
      s.get("mask_prob", gc.mask_prob);
      s.get("mel_bins", gc.backbone.mel_bins);
      if (const json* b = s.child("backbone")) {
        Section bs(*b, "gradcheck.backbone", errors);
        read_backbone(bs, gc.backbone);
      }
    }
  }
  c.backbone.mel_bins = c.features.mel_bins;
  c.data.synth.spec.mel_bins = c.features.mel_bins;
  c.set_seed(c.seed);
  if (errors.empty()) validate(c, errors);
  if (!errors.empty()) {
    std::string msg = std::string(context) + ": " + std::to_string(errors.size()) + " problem(s): ";
    for (std::size_t k = 0; k < errors.size(); ++k) msg += (k ? "; " : "") + errors[k];
    fail(ErrorKind::config, msg);
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const std::string text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return parse_config(text, base, path.string());
}

std::string RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["data"] = data_json(data);
  j["features"] = features_json(features);
  j["backbone"] = backbone_json(backbone);
  nlohmann::ordered_json streams_j = nlohmann::ordered_json::array();
  for (const auto& s : streams) streams_j.push_back(stream_json(s));
  j["streams"] = streams_j;
  j["training"] = training_json(training, false);
  j["eval"] = {{"probe_max_steps", eval.probe.max_steps},
               {"probe_window", eval.probe.window},
               {"probe_min_improvement", eval.probe.min_improvement},
               {"probe_lr_grid", eval.probe.lr_grid},
               {"probe_search_steps", eval.probe.search_steps},
               {"confusable", eval.confusable},
               {"overlap", eval.overlap}};
  const auto& g = gradcheck;
  nlohmann::ordered_json gb = backbone_json(g.backbone);
  j["gradcheck"] = {{"instances", g.instances},
                    {"tolerance", g.tolerance},
                    {"step", g.step},
                    {"min_gap", g.min_gap},
                    {"max_resamples", g.max_resamples},
                    {"seed", g.seed},
                    {"batch_size", g.batch_size},
                    {"frames", g.frames},
                    {"labels_per_stream", g.labels_per_stream},
                    {"langvec_dim", g.langvec_dim},
                    {"mask_prob", g.mask_prob},
                    {"mel_bins", g.backbone.mel_bins},
                    {"backbone", gb}};
  return j.dump(2) + "\n";
}

void RunConfig::set_seed(std::uint64_t root) {
  seed = root;
  data.synth.spec.seed = derive_seed(root, {hash_tag("synth")});
  eval.probe.seed = derive_seed(root, {hash_tag("probe")});
}

std::uint64_t RunConfig::hash() const {
  // Round-trip through the key-sorted representation so field order is irrelevant.
  return fnv1a(json::parse(hashed_json(*this).dump()).dump());
}

std::filesystem::path RunConfig::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<std::string> RunConfig::confusable_languages() const {
  if (!eval.confusable.empty()) return eval.confusable;
  std::set<std::string> out;
  for (const auto& p : data.synth.spec.confusable_pairs) {
    out.insert(datasets::synth_language_name(p.a));
    out.insert(datasets::synth_language_name(p.b));
  }
  return {out.begin(), out.end()};
}

std::string hash_hex(std::uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<MetadataStream> make_streams(const RunConfig& cfg) {
  const std::uint64_t char_seed = training::Seeds::from_root(cfg.seed).char_table;
  std::vector<MetadataStream> out;
  for (auto spec : cfg.streams) {
    if (spec.kind == EncoderKind::lang2vec) spec.table = cfg.resolve(spec.table).string();
    out.emplace_back(spec, char_seed);
  }
  return out;
}

}  // namespace masr::config
