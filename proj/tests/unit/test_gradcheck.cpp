#include <set>

#include "doctest.h"
#include "json.hpp"
#include "masr/gradcheck.hpp"
#include "support.hpp"

using namespace masr;
using namespace masr::gradcheck;

namespace {

GradcheckConfig small(std::size_t instances) {
  GradcheckConfig c;
  c.instances = instances;
  return c;
}

}  // namespace

TEST_CASE("analytic gradients pass on random instances") {
  const Report r = run(small(4));
  CHECK(r.pass);
  CHECK(r.instances == 4);
  CHECK(r.max_rel_error < 1e-4);
  CHECK_FALSE(r.first_failure());
  std::set<std::string> objectives, tensors;
  for (const auto& c : r.checks) {
    objectives.insert(c.objective);
    tensors.insert(c.tensor);
  }
  CHECK(objectives == std::set<std::string>{"L_SSL", "L_META[language]", "L_META[geo]", "L_MASR"});
  CHECK(tensors.contains("encoder.block0.weight"));
  CHECK(tensors.contains("projection.geo.bias"));
  CHECK(tensors.contains("encoder.mask_embedding"));
  // One JSON object per check, then a summary line.
  std::size_t lines = 0;
  const std::string text = r.to_jsonl();
  for (char ch : text) lines += ch == '\n';
  CHECK(lines == r.checks.size() + 1);
  const auto last = text.substr(text.rfind('\n', text.size() - 2) + 1);
  CHECK(nlohmann::json::parse(last)["summary"].get<bool>());
  CHECK(nlohmann::json::parse(text.substr(0, text.find('\n')))["pass"].get<bool>());
}

TEST_CASE("a corrupted gradient fails and is named") {
  const Tamper tamper = [](const std::string& objective, ModelState<double>& g) {
    if (objective != "L_MASR") return;
    g.projections[0].w(0, 0) += 1e-2;
  };
  const Report r = run(small(1), {}, tamper);
  CHECK_FALSE(r.pass);
  const auto f = r.first_failure();
  REQUIRE(f);
  CHECK(f->tensor == "projection.language.weight");
  CHECK(f->objective == "L_MASR");
  for (const auto& c : r.checks)
    if (!c.pass) CHECK(c.tensor == "projection.language.weight");
}

TEST_CASE("SSL path with a zero-weight text stream") {
  StreamSpec none;
  none.loss.name = "text";
  none.kind = EncoderKind::text;
  none.source = SourceField::text;
  none.loss.lambda = 0.0;
  const Report r = run(small(2), {none});
  CHECK(r.pass);
  bool saw_ssl = false;
  for (const auto& c : r.checks) saw_ssl |= c.objective == "L_SSL";
  CHECK(saw_ssl);
}

TEST_CASE("instances keep mining away from ties") {
  const auto cfg = small(1);
  for (std::size_t i = 0; i < 3; ++i) {
    auto inst = make_instance(cfg, {}, i);
    CHECK(smallest_gap(*inst) >= cfg.min_gap);
    CHECK(inst->batch.size() == cfg.batch_size);
  }
}

TEST_CASE("config validation") {
  GradcheckConfig c;
  c.instances = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}
