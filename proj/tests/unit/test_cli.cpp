#include <cstdio>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "masr/cli.hpp"
#include "support.hpp"

using namespace masr;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "masr");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Runs the installed executable through the shell; returns the exit status.
int run_exe(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string("\"") + MASR_EXE + "\" " + args + " 2>&1";
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string text;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) text += buf;
  const int status = ::pclose(p);
  if (output) *output = text;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kTinyConfig = R"({
  "seed": 5,
  "data": {"synth": {"num_languages": 4, "utterances_per_language": 8, "eval_utterances_per_language": 8,
                     "frames": 8, "pairs": [{"a": 0, "b": 1, "scale": 0.1}]}},
  "features": {"mel_bins": 6},
  "backbone": {"d_z": 8, "codebook_size": 8, "codebook_dim": 4, "mask_prob": 0.3},
  "training": {"phase1_steps": 6, "phase2_steps": 6, "batch_size": 8, "checkpoint_every": 4},
  "eval": {"probe_max_steps": 200},
  "gradcheck": {"instances": 2}
})";

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST_CASE("help lists every subcommand and flag") {
  const auto r = run({"--help"});
  CHECK(r.code == 0);
  for (const char* s : {"synth", "pretrain", "probe", "diag-mining", "gradcheck"}) CHECK(r.out.find(s) != std::string::npos);
  const auto p = run({"pretrain", "--help"});
  CHECK(p.code == 0);
  for (const char* f : {"--config", "--out", "--seed", "--threads", "--manifest", "--checkpoint"})
    CHECK(p.out.find(f) != std::string::npos);
  const auto q = run({"probe", "--help"});
  for (const char* f : {"--config", "--out", "--seed", "--threads", "--manifest", "--checkpoint"})
    CHECK(q.out.find(f) != std::string::npos);
}

TEST_CASE("usage errors") {
  auto r = run({});
  CHECK(r.code == 2);
  CHECK(r.err.rfind("error: usage:", 0) == 0);
  r = run({"bogus"});
  CHECK(r.code == 2);
  r = run({"synth"});  // --out missing
  CHECK(r.code == 2);
  CHECK(count_lines(r.err) == 1);
}

TEST_CASE("runtime errors are one line with their kind") {
  test::TempDir dir("cli_err");
  io::write_text_file(dir / "bad.json", R"({"nope": 1, "training": {"x": 2}})");
  const auto r = run({"synth", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()});
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: config:", 0) == 0);
  CHECK(count_lines(r.err) == 1);
  CHECK(r.err.find("'nope'") != std::string::npos);
  CHECK(r.err.find("'training.x'") != std::string::npos);
}

TEST_CASE("end to end on a tiny corpus") {
  test::TempDir dir("cli_e2e");
  io::write_text_file(dir / "tiny.json", kTinyConfig);
  const std::string cfg = (dir / "tiny.json").string();
  const fs::path data = dir / "data";

  REQUIRE(run({"synth", "--config", cfg, "--out", data.string()}).code == 0);
  for (const char* f : {"pretrain/manifest.jsonl", "eval/manifest.jsonl", "langvec.tsv", "config.json"})
    CHECK(fs::exists(data / f));

  SUBCASE("synth is byte-for-byte reproducible") {
    REQUIRE(run({"synth", "--config", cfg, "--out", (dir / "data2").string()}).code == 0);
    for (const char* f : {"pretrain/manifest.jsonl", "langvec.tsv", "config.json", "eval/manifest.jsonl"})
      CHECK(test::read_text(data / f) == test::read_text(dir / "data2" / f));
    const auto first = datasets::load_manifest(data / "pretrain/manifest.jsonl");
    CHECK(test::read_text(data / "pretrain" / first[0].source) ==
          test::read_text(dir / "data2" / "pretrain" / first[0].source));
  }

  const std::string run_cfg = (data / "config.json").string();
  const fs::path pre = dir / "pre";
  const auto p = run({"pretrain", "--config", run_cfg, "--out", pre.string()});
  REQUIRE(p.code == 0);
  CHECK(p.out.find("pretrained 12 steps") != std::string::npos);
  CHECK(count_lines(test::read_text(pre / "metrics.jsonl")) == 12);
  CHECK(fs::exists(pre / "checkpoint_step4.bin"));
  CHECK(fs::exists(pre / "checkpoint_step8.bin"));
  CHECK_FALSE(fs::exists(pre / "checkpoint_step12.bin"));
  const auto run_json = nlohmann::json::parse(test::read_text(pre / "run.json"));
  CHECK(run_json["steps"] == 12);

  SUBCASE("resume matches the straight run") {
    const fs::path res = dir / "resumed";
    fs::create_directories(res);
    fs::copy_file(pre / "metrics.jsonl", res / "metrics.jsonl");
    const auto r = run({"pretrain", "--config", run_cfg, "--out", res.string(), "--checkpoint",
                        (pre / "checkpoint_step4.bin").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("resumed at step 4") != std::string::npos);
    CHECK(test::read_text(res / "metrics.jsonl") == test::read_text(pre / "metrics.jsonl"));
    CHECK(test::read_text(res / "checkpoint.bin") == test::read_text(pre / "checkpoint.bin"));
  }

  SUBCASE("pretraining twice gives identical logs") {
    REQUIRE(run({"pretrain", "--config", run_cfg, "--out", (dir / "again").string(), "--threads", "2"}).code == 0);
    CHECK(test::read_text(dir / "again/metrics.jsonl") == test::read_text(pre / "metrics.jsonl"));
    CHECK(test::read_text(dir / "again/checkpoint.bin") == test::read_text(pre / "checkpoint.bin"));
  }

  SUBCASE("probe reports and leaves the encoder alone") {
    const auto r = run({"probe", "--config", run_cfg, "--out", (dir / "probe").string(), "--checkpoint",
                        (pre / "checkpoint.bin").string()});
    REQUIRE(r.code == 0);
    const std::string report = test::read_text(dir / "probe/report.jsonl");
    std::istringstream lines(report);
    std::string line, last;
    while (std::getline(lines, line)) last = line;
    const auto probe = nlohmann::json::parse(last);
    CHECK(probe["kind"] == "probe");
    CHECK(probe["encoder_checksum"] == run_json["model_checksum"]);
    CHECK(fs::exists(dir / "probe/confusion.csv"));
  }

  SUBCASE("diag-mining writes per-batch rates") {
    const auto r = run({"diag-mining", "--config", run_cfg, "--out", (dir / "diag").string(), "--checkpoint",
                        (pre / "checkpoint.bin").string()});
    REQUIRE(r.code == 0);
    const auto summary = nlohmann::json::parse(test::read_text(dir / "diag/mining_summary.json"));
    CHECK(summary["batches"].get<int>() > 0);
    const double rate = summary["mean_change_rate"]["language"].get<double>();
    CHECK(rate >= 0.0);
    CHECK(rate <= 1.0);
  }

  SUBCASE("checkpoint from another config is refused") {
    const auto r = run({"probe", "--config", run_cfg, "--seed", "99", "--out", (dir / "x").string(),
                        "--checkpoint", (pre / "checkpoint.bin").string()});
    CHECK(r.code == 1);
    CHECK(r.err.rfind("error: config:", 0) == 0);
  }
}

TEST_CASE("phase 2 of zero steps still yields a usable checkpoint") {
  test::TempDir dir("cli_p0");
  io::write_text_file(dir / "tiny.json", kTinyConfig);
  REQUIRE(run({"synth", "--config", (dir / "tiny.json").string(), "--out", (dir / "d").string()}).code == 0);
  auto cfg = nlohmann::json::parse(test::read_text(dir / "d/config.json"));
  cfg["training"]["phase2_steps"] = 0;
  io::write_text_file(dir / "d/p0.json", cfg.dump());
  const std::string c = (dir / "d/p0.json").string();
  REQUIRE(run({"pretrain", "--config", c, "--out", (dir / "pre").string()}).code == 0);
  CHECK(count_lines(test::read_text(dir / "pre/metrics.jsonl")) == 6);
  CHECK(run({"probe", "--config", c, "--out", (dir / "probe").string(), "--checkpoint",
             (dir / "pre/checkpoint.bin").string()})
            .code == 0);
}

TEST_CASE("the executable") {
  test::TempDir dir("cli_exe");
  io::write_text_file(dir / "tiny.json", kTinyConfig);
  std::string text;
  CHECK(run_exe("gradcheck --config \"" + (dir / "tiny.json").string() + "\" --out \"" + dir.path().string() + "\"",
                &text) == 0);
  CHECK(text.find("gradcheck:") != std::string::npos);
  CHECK(fs::exists(dir / "gradcheck.jsonl"));
  CHECK(run_exe("probe --out \"" + dir.path().string() + "\"", &text) == 2);
  CHECK(run_exe("synth --config \"" + (dir / "tiny.json").string() + "\" --out \"" + (dir / "d").string() +
                "\" --threads 0",
                &text) == 2);
  // MASR_THREADS must be a positive integer.
  CHECK(run_exe("synth --config \"" + (dir / "tiny.json").string() + "\" --out \"" + (dir / "d").string() + "\"",
                &text) == 0);
  const std::string env = "MASR_THREADS=abc ";
  const std::string cmd = env + "\"" + MASR_EXE + "\" synth --out \"" + (dir / "e").string() + "\" 2>&1";
  FILE* p = ::popen(cmd.c_str(), "r");
  char buf[512];
  std::string out;
  while (std::fgets(buf, sizeof buf, p)) out += buf;
  CHECK(WEXITSTATUS(::pclose(p)) == 1);
  CHECK(out.rfind("error: config:", 0) == 0);
}
