#include "masr/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "masr/binary_io.hpp"
#include "masr/checkpoint.hpp"
#include "masr/error.hpp"
#include "masr/eval.hpp"
#include "masr/gradcheck.hpp"
#include "masr/metadata.hpp"
#include "masr/training.hpp"

namespace masr::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::size_t env_threads() {
  const char* v = std::getenv("MASR_THREADS");
  if (v == nullptr || *v == '\0') return 0;
  char* end = nullptr;
  const unsigned long long n = std::strtoull(v, &end, 10);
  if (*end != '\0' || n == 0) fail(ErrorKind::config, "MASR_THREADS must be a positive integer, got '" + std::string(v) + "'");
  return static_cast<std::size_t>(n);
}

void require_out(const Options& opt) {
  if (opt.out.empty()) fail(ErrorKind::invalid_argument, "--out is required");
}

std::string seed_line(const config::RunConfig& cfg) {
  return "seed " + std::to_string(cfg.seed) + ", config " + config::hash_hex(cfg.hash());
}

// Items of each language in manifest order; even positions train the probe,
// odd positions test it.
void parity_split(const std::vector<std::string>& labels, std::vector<std::size_t>& train,
                  std::vector<std::size_t>& test) {
  std::map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < labels.size(); ++i) ((seen[labels[i]]++ % 2 == 0) ? train : test).push_back(i);
}

Matrix<double> take_rows(const Matrix<double>& m, const std::vector<std::size_t>& rows) {
  Matrix<double> out(rows.size(), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    auto src = m.row(rows[k]);
    std::copy(src.begin(), src.end(), out.row(k).begin());
  }
  return out;
}

checkpoint::Checkpoint load_run_checkpoint(const Options& opt, const config::RunConfig& cfg) {
  if (!opt.checkpoint) fail(ErrorKind::invalid_argument, "--checkpoint is required");
  checkpoint::Checkpoint c = checkpoint::load(*opt.checkpoint);
  checkpoint::require_hash(c, cfg.hash());
  return c;
}

template <class Real>
int pretrain(const config::RunConfig& cfg, const Options& opt, const datasets::Corpus& corpus, std::ostream& log) {
  training::TrainSetup setup;
  setup.train = cfg.training;
  setup.backbone = cfg.backbone;
  setup.seed = cfg.seed;
  setup.config_hash = cfg.hash();
  training::Trainer<Real> trainer(setup, corpus, config::make_streams(cfg));

  const fs::path metrics_path = opt.out / "metrics.jsonl";
  std::vector<std::string> lines;
  if (opt.checkpoint) {
    const auto ckpt = checkpoint::load(*opt.checkpoint);
    trainer.restore(ckpt);
    // Keep the log of the steps the checkpoint already covers.
    if (fs::exists(metrics_path)) {
      std::ifstream in(metrics_path);
      std::string line;
      while (lines.size() < ckpt.step && std::getline(in, line)) lines.push_back(line);
    }
    if (lines.size() != ckpt.step)
      fail(ErrorKind::io, metrics_path.string() + " does not hold the " + std::to_string(ckpt.step) +
                              " steps covered by the checkpoint");
    log << "resumed at step " << ckpt.step << "\n";
  }
  fs::create_directories(opt.out);
  std::ofstream metrics(metrics_path, std::ios::trunc);
  for (const auto& l : lines) metrics << l << "\n";

  const std::size_t every = cfg.training.checkpoint_every;
  trainer.run([&](const training::StepRecord& r) {
    metrics << r.to_json() << "\n";
    if (every > 0 && r.step % every == 0 && r.step < cfg.training.total_steps())
      checkpoint::save(trainer.to_checkpoint(), opt.out / ("checkpoint_step" + std::to_string(r.step) + ".bin"));
  });
  metrics.close();
  if (!metrics) fail(ErrorKind::io, "failed to write " + metrics_path.string());
  checkpoint::save(trainer.to_checkpoint(), opt.out / "checkpoint.bin");

  ojson run;
  run["seed"] = cfg.seed;
  run["config_hash"] = config::hash_hex(cfg.hash());
  run["precision"] = std::string(training::to_string(cfg.training.precision));
  run["steps"] = trainer.steps_done();
  run["model_checksum"] = config::hash_hex(trainer.model().checksum());
  run["items"] = corpus.size();
  io::write_text_file(opt.out / "run.json", run.dump(2) + "\n");
  log << "pretrained " << trainer.steps_done() << " steps on " << corpus.size() << " utterances ("
      << seed_line(cfg) << ")\n";
  return 0;
}

template <class Real>
int probe(const config::RunConfig& cfg, const Options& opt, const checkpoint::Checkpoint& ckpt, std::ostream& log) {
  const auto streams = config::make_streams(cfg);
  const ModelState<Real> model = training::model_from_checkpoint<Real>(ckpt, cfg.backbone, streams);
  const std::uint64_t before = model.checksum();

  const fs::path manifest = opt.manifest ? *opt.manifest : cfg.resolve(cfg.data.eval_manifest);
  const datasets::Corpus corpus = datasets::load_corpus(manifest, cfg.features);
  std::vector<Matrix<Real>> stacked;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    stacked.push_back(ssl::stack_frames<Real>(corpus.features[i], cfg.backbone.stack));
    labels.push_back(corpus.records[i].language);
  }
  const Matrix<double> emb = eval::extract_embeddings<Real>(model, stacked, cfg.backbone.context, cfg.training.threads);

  std::vector<std::size_t> train_idx, test_idx;
  parity_split(labels, train_idx, test_idx);
  if (test_idx.empty()) fail(ErrorKind::invalid_argument, "probe: evaluation corpus has no held-out items");
  std::vector<std::string> train_labels, test_labels;
  for (auto i : train_idx) train_labels.push_back(labels[i]);
  for (auto i : test_idx) test_labels.push_back(labels[i]);
  const eval::ProbeModel pm = eval::train_probe(take_rows(emb, train_idx), train_labels, cfg.eval.probe);
  const eval::Predictions pred = eval::predict(pm, take_rows(emb, test_idx), test_labels);
  const eval::EvalReport report = eval::metrics(pred.predicted, pred.scores, pred.labels, pm.classes);
  if (model.checksum() != before) fail(ErrorKind::numeric, "probe training modified the encoder");

  std::set<std::string> overlap(cfg.eval.overlap.begin(), cfg.eval.overlap.end());
  if (overlap.empty()) {
    const fs::path pre = cfg.resolve(cfg.data.manifest);
    if (fs::exists(pre))
      for (const auto& r : datasets::load_manifest(pre)) overlap.insert(r.language);
  }
  std::set<std::string> known;
  for (const auto& c : pm.classes)
    if (overlap.contains(c)) known.insert(c);
  const eval::SplitReport split = eval::split_report(report, known);
  const auto conf = cfg.confusable_languages();
  const std::set<std::string> confusable(conf.begin(), conf.end());
  const auto conf_acc = eval::subset_accuracy(report, confusable);

  auto opt_json = [](const std::optional<double>& v) { return v ? ojson(*v) : ojson(); };
  std::string text = report.to_jsonl();
  ojson s;
  s["kind"] = "split";
  s["overlap"] = opt_json(split.overlap);
  s["non_overlap"] = opt_json(split.non_overlap);
  s["confusable"] = opt_json(conf_acc);
  text += s.dump() + "\n";
  ojson p;
  p["kind"] = "probe";
  p["train_items"] = train_idx.size();
  p["test_items"] = test_idx.size();
  p["learning_rate"] = pm.learning_rate;
  p["steps"] = pm.steps;
  p["final_loss"] = pm.final_loss;
  p["encoder_checksum"] = config::hash_hex(before);
  p["seed"] = cfg.seed;
  text += p.dump() + "\n";
  io::write_text_file(opt.out / "report.jsonl", text);
  io::write_text_file(opt.out / "confusion.csv", report.confusion_csv());
  log << "probe accuracy " << report.accuracy << ", macro-F1 " << report.macro_f1 << ", EER " << report.eer;
  if (conf_acc) log << ", confusable " << *conf_acc;
  log << "\n";
  return 0;
}

template <class Real>
int diag_mining(const config::RunConfig& cfg, const Options& opt, const checkpoint::Checkpoint& ckpt, std::ostream& log) {
  const auto streams = config::make_streams(cfg);
  const ModelState<Real> model = training::model_from_checkpoint<Real>(ckpt, cfg.backbone, streams);
  const fs::path manifest = opt.manifest ? *opt.manifest : cfg.resolve(cfg.data.manifest);
  const datasets::Corpus corpus = datasets::load_corpus(manifest, cfg.features);
  const training::Seeds seeds = training::Seeds::from_root(cfg.seed);
  const auto quantizer = training::make_quantizer(cfg.backbone, seeds);
  const auto data = training::prepare_corpus<Real>(corpus, cfg.backbone, quantizer, streams);
  datasets::BatchSampler sampler(data.languages, cfg.training.batch_size, seeds.batches, cfg.training.balance);

  std::string csv = "batch,stream,counted,changed,rate,active,l_meta,mean_d_pos,mean_d_neg\n";
  std::vector<double> rate_sum(streams.size(), 0.0);
  const std::size_t batches = sampler.batches_per_epoch();
  for (std::size_t n = 0; n < batches; ++n) {
    const datasets::Batch b = sampler.batch(n);
    BatchInputs<Real> in;
    for (auto i : b.items) {
      in.stacked.push_back(&data.stacked[i]);
      in.targets.push_back(&data.targets[i]);
      in.masks.push_back(ssl::no_mask(data.stacked[i].rows()));
    }
    for (const auto& s : data.streams) in.streams.push_back(s.gather(b.items));
    LossWeights w;
    w.meta.assign(streams.size(), 0.0);
    BatchOptions bo;
    bo.context = cfg.backbone.context;
    bo.threads = cfg.training.threads;
    const BatchResult r = forward_backward<Real>(model, streams, in, w, bo, nullptr);
    for (std::size_t j = 0; j < streams.size(); ++j) {
      const auto& sr = r.streams[j];
      const double c = static_cast<double>(sr.triplet.counted);
      std::ostringstream row;
      row.precision(17);
      row << n << "," << streams[j].name() << "," << sr.change.counted << "," << sr.change.changed << ","
          << sr.change.rate << "," << sr.triplet.active << "," << sr.l_meta << ","
          << (c > 0 ? sr.triplet.sum_pos / c : 0.0) << "," << (c > 0 ? sr.triplet.sum_neg / c : 0.0) << "\n";
      csv += row.str();
      rate_sum[j] += sr.change.rate;
    }
  }
  io::write_text_file(opt.out / "mining.csv", csv);
  ojson summary;
  summary["batches"] = batches;
  summary["seed"] = cfg.seed;
  ojson rates = ojson::object();
  for (std::size_t j = 0; j < streams.size(); ++j)
    rates[streams[j].name()] = batches == 0 ? 0.0 : rate_sum[j] / static_cast<double>(batches);
  summary["mean_change_rate"] = rates;
  io::write_text_file(opt.out / "mining_summary.json", summary.dump(2) + "\n");
  for (std::size_t j = 0; j < streams.size(); ++j)
    log << "stream " << streams[j].name() << ": mean selection change rate "
        << (batches == 0 ? 0.0 : rate_sum[j] / static_cast<double>(batches)) << " over " << batches << " batches\n";
  return 0;
}

}  // namespace

config::RunConfig effective_config(const Options& opt) {
  config::RunConfig cfg = opt.config.empty() ? config::default_config() : config::load_config(opt.config);
  if (opt.seed) cfg.set_seed(*opt.seed);
  if (opt.threads) {
    if (*opt.threads == 0) fail(ErrorKind::invalid_argument, "--threads must be >= 1");
    cfg.training.threads = *opt.threads;
  } else if (const std::size_t t = env_threads(); t > 0) {
    cfg.training.threads = t;
  }
  return cfg;
}

int cmd_synth(const Options& opt, std::ostream& log) {
  require_out(opt);
  config::RunConfig cfg = effective_config(opt);
  const auto& synth = cfg.data.synth;
  datasets::SynthSpec pre = synth.spec;
  datasets::write_corpus(opt.out / "pretrain", datasets::synthesize_corpus(pre));
  datasets::SynthSpec ev = synth.spec;
  ev.utterances_per_language = synth.eval_utterances_per_language;
  ev.first_utterance = synth.spec.utterances_per_language;
  datasets::write_corpus(opt.out / "eval", datasets::synthesize_corpus(ev));
  io::write_text_file(opt.out / "langvec.tsv",
                      metadata::serialize_langvec(metadata::synth_langvec(synth.spec, synth.langvec_similarity)));

  // A config next to the data, with paths relative to it.
  cfg.data.manifest = "pretrain/manifest.jsonl";
  cfg.data.eval_manifest = "eval/manifest.jsonl";
  for (auto& s : cfg.streams)
    if (s.kind == EncoderKind::lang2vec) s.table = "langvec.tsv";
  io::write_text_file(opt.out / "config.json", cfg.to_json());
  log << "synthesized " << pre.num_languages * pre.utterances_per_language << " pretraining and "
      << ev.num_languages * ev.utterances_per_language << " evaluation utterances (" << seed_line(cfg) << ")\n";
  return 0;
}

int cmd_pretrain(const Options& opt, std::ostream& log) {
  require_out(opt);
  const config::RunConfig cfg = effective_config(opt);
  const fs::path manifest = opt.manifest ? *opt.manifest : cfg.resolve(cfg.data.manifest);
  const datasets::Corpus corpus = datasets::load_corpus(manifest, cfg.features);
  io::write_text_file(opt.out / "effective_config.json", cfg.to_json());
  if (cfg.training.precision == training::Precision::f64) return pretrain<double>(cfg, opt, corpus, log);
  return pretrain<float>(cfg, opt, corpus, log);
}

int cmd_probe(const Options& opt, std::ostream& log) {
  require_out(opt);
  const config::RunConfig cfg = effective_config(opt);
  const auto ckpt = load_run_checkpoint(opt, cfg);
  if (ckpt.precision_bits == 64) return probe<double>(cfg, opt, ckpt, log);
  return probe<float>(cfg, opt, ckpt, log);
}

int cmd_diag_mining(const Options& opt, std::ostream& log) {
  require_out(opt);
  const config::RunConfig cfg = effective_config(opt);
  const auto ckpt = load_run_checkpoint(opt, cfg);
  if (ckpt.precision_bits == 64) return diag_mining<double>(cfg, opt, ckpt, log);
  return diag_mining<float>(cfg, opt, ckpt, log);
}

int cmd_gradcheck(const Options& opt, std::ostream& log) {
  const config::RunConfig cfg = effective_config(opt);
  gradcheck::GradcheckConfig gc = cfg.gradcheck;
  if (opt.seed) gc.seed = *opt.seed;
  const gradcheck::Report report = gradcheck::run(gc, cfg.streams);
  if (!opt.out.empty()) io::write_text_file(opt.out / "gradcheck.jsonl", report.to_jsonl());
  log << "gradcheck: " << report.instances << " instances, " << report.checks.size() << " tensor checks, max rel error "
      << report.max_rel_error << " (tolerance " << gc.tolerance << ")\n";
  if (const auto f = report.first_failure())
    fail(ErrorKind::gradcheck, f->objective + " gradient of " + f->tensor + " in instance " +
                                   std::to_string(f->instance) + " has relative error " + std::to_string(f->rel_error));
  return 0;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Metadata-aware speech representation learning toolkit", "masr"};
  app.require_subcommand(1);
  Options opt;
  std::string config, outdir, checkpoint_path, manifest;
  std::uint64_t seed = 0;
  std::size_t threads = 0;

  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", config, "Run config (JSON); defaults apply when omitted")->check(CLI::ExistingFile);
    auto* o = sub->add_option("--out", outdir, "Output directory");
    if (needs_out) o->required();
    sub->add_option("--seed", seed, "Root seed, overriding the config");
    sub->add_option("--threads", threads, "Worker threads (overrides MASR_THREADS)")->check(CLI::PositiveNumber);
  };
  auto* synth = app.add_subcommand("synth", "Generate the synthetic pretraining/evaluation corpora and langvec table");
  add_common(synth, true);
  auto* pre = app.add_subcommand("pretrain", "Two-phase pretraining; writes checkpoint.bin and metrics.jsonl");
  add_common(pre, true);
  pre->add_option("--manifest", manifest, "Pretraining manifest (default: data.manifest)")->check(CLI::ExistingFile);
  pre->add_option("--checkpoint", checkpoint_path, "Resume from this checkpoint")->check(CLI::ExistingFile);
  auto* prb = app.add_subcommand("probe", "Linear-probe evaluation of a frozen checkpoint");
  add_common(prb, true);
  prb->add_option("--checkpoint", checkpoint_path, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  prb->add_option("--manifest", manifest, "Evaluation manifest (default: data.eval_manifest)")->check(CLI::ExistingFile);
  auto* diag = app.add_subcommand("diag-mining", "Per-batch selection change rates and triplet statistics");
  add_common(diag, true);
  diag->add_option("--checkpoint", checkpoint_path, "Checkpoint to analyse")->required()->check(CLI::ExistingFile);
  diag->add_option("--manifest", manifest, "Manifest to batch (default: data.manifest)")->check(CLI::ExistingFile);
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  add_common(gc, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
      out << sub->help();
      return 0;
    }
    err << "error: usage: " << e.what() << "\n";
    return 2;
  }

  auto* sub = app.get_subcommands().front();
  if (!config.empty()) opt.config = config;
  opt.out = outdir;
  if (sub->count("--seed")) opt.seed = seed;
  if (sub->count("--threads")) opt.threads = threads;
  if (!checkpoint_path.empty()) opt.checkpoint = checkpoint_path;
  if (!manifest.empty()) opt.manifest = manifest;

  try {
    const std::string name = sub->get_name();
    if (name == "synth") return cmd_synth(opt, out);
    if (name == "pretrain") return cmd_pretrain(opt, out);
    if (name == "probe") return cmd_probe(opt, out);
    if (name == "diag-mining") return cmd_diag_mining(opt, out);
    return cmd_gradcheck(opt, out);
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << to_string(e.kind()) << ": " << msg << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: internal: " << msg << "\n";
    return 1;
  }
}

}  // namespace masr::cli
