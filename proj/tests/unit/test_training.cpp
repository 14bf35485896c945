#include <cmath>
#include <limits>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "masr/checkpoint.hpp"
#include "masr/error.hpp"
#include "masr/training.hpp"
#include "support.hpp"
#include "toy.hpp"

using namespace masr;
using namespace masr::training;
using test::kind_of;

namespace {

std::vector<std::string> run_log(Trainer<double>& t, std::optional<std::size_t> until = std::nullopt) {
  std::vector<std::string> lines;
  t.run([&](const StepRecord& r) { lines.push_back(r.to_json()); }, until);
  return lines;
}

}  // namespace

TEST_CASE("seeds derive from one root") {
  const Seeds a = Seeds::from_root(1), b = Seeds::from_root(1), c = Seeds::from_root(2);
  CHECK(a == b);
  CHECK(a.model != c.model);
  const std::set<std::uint64_t> distinct{a.model, a.quantizer, a.char_table, a.batches, a.masks};
  CHECK(distinct.size() == 5);
}

TEST_CASE("adam first step moves every coordinate by lr against the gradient sign") {
  const auto b = test::toy_backbone();
  auto params = ModelState<double>::zeros(b, {"language"}, {4});
  auto grads = params.zeros_like();
  grads.visit([](const TensorRef<double>& t) {
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = (i % 2 == 0) ? 0.5 : -2.0;
  });
  AdamState<double> st{params.zeros_like(), params.zeros_like(), 0};
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  adam_update(params, grads, st, cfg);
  CHECK(st.t == 1);
  params.visit([&](const TensorRef<double>& t) {
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double g = (i % 2 == 0) ? 0.5 : -2.0;
      CHECK(t.data[i] == doctest::Approx(-0.01 * g / (std::fabs(g) + 1e-8)).epsilon(1e-12));
    }
  });
  // Zero gradient from zero moments leaves parameters alone.
  auto p2 = ModelState<double>::zeros(b, {}, {});
  auto g2 = p2.zeros_like();
  AdamState<double> s2{p2.zeros_like(), p2.zeros_like(), 0};
  adam_update(p2, g2, s2, cfg);
  CHECK(p2 == p2.zeros_like());
}

TEST_CASE("training is deterministic") {
  const auto corpus = datasets::synthesize_corpus(test::toy_spec());
  Trainer<double> a(test::toy_setup(20, 20), corpus, test::toy_streams());
  Trainer<double> b(test::toy_setup(20, 20), corpus, test::toy_streams());
  CHECK(run_log(a) == run_log(b));
  CHECK(a.model() == b.model());
  CHECK(a.finished());
  CHECK_THROWS_AS(a.step(), Error);
}

TEST_CASE("thread count does not change the run") {
  const auto corpus = datasets::synthesize_corpus(test::toy_spec());
  auto s1 = test::toy_setup(10, 10);
  auto s3 = s1;
  s3.train.threads = 3;
  Trainer<double> a(s1, corpus, test::toy_streams());
  Trainer<double> b(s3, corpus, test::toy_streams());
  CHECK(run_log(a) == run_log(b));
  CHECK(a.model() == b.model());
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  const auto corpus = datasets::synthesize_corpus(test::toy_spec());
  for (auto precision : {Precision::f64, Precision::f32}) {
    CAPTURE(to_string(precision));
    const auto setup = test::toy_setup(120, 80, precision);
    auto straight_log = [&](auto& t) {
      std::vector<std::string> lines;
      t.run([&](const StepRecord& r) { lines.push_back(r.to_json()); });
      return lines;
    };
    auto check = [&](auto tag) {
      using Real = decltype(tag);
      Trainer<Real> straight(setup, corpus, test::toy_streams());
      const auto full = straight_log(straight);
      Trainer<Real> first(setup, corpus, test::toy_streams());
      first.run({}, 100);
      CHECK(first.steps_done() == 100);
      // Round trip through bytes, as a file would.
      const auto ckpt = checkpoint::decode(checkpoint::encode(first.to_checkpoint()));
      Trainer<Real> second(setup, corpus, test::toy_streams());
      second.restore(ckpt);
      const auto tail = straight_log(second);
      REQUIRE(tail.size() == 100);
      CHECK(std::equal(tail.begin(), tail.end(), full.begin() + 100));
      CHECK(second.model() == straight.model());
      CHECK(second.optimizer().m == straight.optimizer().m);
    };
    if (precision == Precision::f64)
      check(double{});
    else
      check(float{});
  }
}

TEST_CASE("restore refuses a checkpoint from another run") {
  const auto corpus = datasets::synthesize_corpus(test::toy_spec());
  Trainer<double> a(test::toy_setup(5, 0), corpus, test::toy_streams());
  a.run({});
  auto c = a.to_checkpoint();
  auto other = test::toy_setup(5, 0);
  other.config_hash = 99;
  Trainer<double> b(other, corpus, test::toy_streams());
  CHECK(kind_of([&] { b.restore(c); }) == ErrorKind::config);
  auto reseeded = test::toy_setup(5, 0);
  reseeded.seed = 12;
  Trainer<double> d(reseeded, corpus, test::toy_streams());
  CHECK(kind_of([&] { d.restore(c); }) == ErrorKind::config);
  c.precision_bits = 32;
  Trainer<double> e(test::toy_setup(5, 0), corpus, test::toy_streams());
  CHECK(kind_of([&] { e.restore(c); }) == ErrorKind::config);
}

TEST_CASE("zero lambda reproduces SSL-only training bit for bit") {
  // 200 steps in f64 on one thread: the encoder must match a run with no
  // metadata stream at all.
  const auto corpus = datasets::synthesize_corpus(test::toy_spec());
  const auto setup = test::toy_setup(50, 150);
  Trainer<double> with(setup, corpus, test::toy_streams(0.0));
  Trainer<double> without(setup, corpus, {});
  std::vector<double> ssl_with, ssl_without;
  with.run([&](const StepRecord& r) { ssl_with.push_back(r.l_ssl); });
  without.run([&](const StepRecord& r) { ssl_without.push_back(r.l_ssl); });
  CHECK(ssl_with == ssl_without);
  CHECK(with.model().encoder == without.model().encoder);
}

TEST_CASE("logged L_MASR is the combined objective") {
  const auto corpus = datasets::synthesize_corpus(test::toy_spec());
  Trainer<double> t(test::toy_setup(5, 15), corpus, test::toy_streams());
  t.run([&](const StepRecord& r) {
    REQUIRE(r.l_meta.size() == 1);
    CHECK(r.l_masr == r.l_ssl + r.lambda[0] * r.l_meta[0]);
    CHECK(r.lambda[0] == (r.phase == 1 ? 0.0 : 16.0));
    CHECK(r.phase == (r.step <= 5 ? 1 : 2));
    CHECK(r.batch + 1 == r.step);
    // The hinge is a sum over anchors of terms in [0, gamma + 2].
    CHECK(r.l_meta[0] >= 0.0);
    CHECK(r.l_meta[0] <= 2.5 * static_cast<double>(r.counted[0]));
    CHECK(r.active[0] <= r.counted[0]);
    CHECK(r.counted[0] <= 8);
    const auto j = nlohmann::json::parse(r.to_json());
    CHECK(j["l_masr"].get<double>() == r.l_masr);
    CHECK(j["l_meta"]["language"].get<double>() == r.l_meta[0]);
  });
}

TEST_CASE("non-finite loss names the step and the term") {
  const auto corpus = datasets::synthesize_corpus(test::toy_spec());
  Trainer<double> t(test::toy_setup(10, 0), corpus, test::toy_streams());
  t.run({}, 3);
  auto c = t.to_checkpoint();
  for (auto& tensor : c.tensors)
    if (tensor.name == "ssl_head.bias") tensor.value[0] = std::numeric_limits<double>::quiet_NaN();
  t.restore(c);
  const auto msg = test::message_of([&] { t.step(); });
  CHECK(msg.find("step 4") != std::string::npos);
  CHECK(msg.find("L_SSL") != std::string::npos);
  CHECK(kind_of([&] { t.step(); }) == ErrorKind::numeric);
}

TEST_CASE("SSL loss decreases on a toy corpus") {
  // Strong templates give the masked steps a predictable code.
  auto spec = test::toy_spec();
  spec.noise = 0.5;
  spec.template_scale = 1.0;
  const auto corpus = datasets::synthesize_corpus(spec);
  auto setup = test::toy_setup(300, 0);
  setup.train.learning_rate = 3e-3;
  Trainer<double> t(setup, corpus, {});
  std::vector<double> ssl;
  t.run([&](const StepRecord& r) { ssl.push_back(r.l_ssl); });
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 30; ++i) {
    head += ssl[i];
    tail += ssl[ssl.size() - 1 - i];
  }
  CHECK(tail < 0.85 * head);
}

TEST_CASE("trainer configuration checks") {
  const auto corpus = datasets::synthesize_corpus(test::toy_spec());
  auto setup = test::toy_setup(1, 1, Precision::f32);
  CHECK(kind_of([&] { Trainer<double>(setup, corpus, {}); }) == ErrorKind::config);
  setup = test::toy_setup(1, 1);
  setup.train.batch_size = 1;
  CHECK(kind_of([&] { Trainer<double>(setup, corpus, {}); }) == ErrorKind::config);
  setup = test::toy_setup(1, 1);
  setup.backbone.mel_bins = 5;
  CHECK(kind_of([&] { Trainer<double>(setup, corpus, {}); }) == ErrorKind::shape);
  CHECK(parse_precision("f32") == Precision::f32);
  CHECK(kind_of([] { parse_precision("f16"); }) == ErrorKind::config);
}
