#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "masr/error.hpp"
#include "masr/masr_loss.hpp"
#include "masr/rng.hpp"
#include "support.hpp"

using namespace masr;
using namespace masr::loss;
using test::kind_of;

namespace {

using Vecs = std::vector<std::vector<double>>;
using Labels = std::vector<std::optional<std::string>>;

std::vector<double> unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

Vecs random_vectors(Rng& rng, std::size_t n, std::size_t d, bool normalize) {
  Vecs out(n, std::vector<double>(d));
  for (auto& v : out) {
    for (double& x : v) x = rng.normal();
    if (normalize) v = unit(v);
  }
  return out;
}

Labels random_labels(Rng& rng, std::size_t n, std::size_t classes, double missing = 0.0) {
  Labels out(n);
  for (auto& l : out)
    if (rng.uniform() >= missing) l = "c" + std::to_string(rng.uniform_index(classes));
  return out;
}

// Brute-force oracle: materialized p vectors, full scan over the batch with
// explicit label tests, lowest index on ties.
std::vector<TripletSelection> oracle_mine(const Vecs& p, const Labels& labels) {
  auto dist = [&](std::size_t i, std::size_t k) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < p[i].size(); ++j) {
      ab += p[i][j] * p[k][j];
      aa += p[i][j] * p[i][j];
      bb += p[k][j] * p[k][j];
    }
    return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
  };
  std::vector<TripletSelection> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    out[i].anchor = i;
    if (!labels[i]) {
      out[i].skip = SkipReason::missing_label;
      continue;
    }
    std::optional<std::size_t> pos, neg;
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (k == i || !labels[k]) continue;
      if (*labels[k] == *labels[i]) {
        if (!pos || dist(i, k) > dist(i, *pos)) pos = k;
      } else {
        if (!neg || dist(i, k) < dist(i, *neg)) neg = k;
      }
    }
    if (!pos)
      out[i].skip = SkipReason::empty_positive;
    else if (!neg)
      out[i].skip = SkipReason::empty_negative;
    else {
      out[i].positive = pos;
      out[i].negative = neg;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("cosine distance") {
  const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  CHECK(cosine_distance<double>(a, b) == doctest::Approx(0.025368).epsilon(1e-5));
  CHECK(cosine_distance<double>(a, a) == doctest::Approx(0.0).scale(1.0));
  const std::vector<double> minus{-1, -2, -3};
  CHECK(cosine_distance<double>(a, minus) == doctest::Approx(2.0));
  const std::vector<double> zero{0, 0, 0};
  CHECK(kind_of([&] { cosine_distance<double>(a, zero); }) == ErrorKind::numeric);
  CHECK(kind_of([&] { cosine_distance<double>(zero, a); }) == ErrorKind::numeric);
  const std::vector<float> af{1, 2, 3}, bf{4, 5, 6};
  CHECK(cosine_distance<float>(af, bf) == doctest::Approx(0.025368).epsilon(1e-4));
}

TEST_CASE("cosine distance gradient matches central differences") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_vectors(rng, 1, 6, false)[0];
    const auto b = random_vectors(rng, 1, 6, false)[0];
    std::vector<double> g(6, 0.0);
    cosine_distance_grad<double>(a, b, 1.0, g);
    for (std::size_t k = 0; k < 6; ++k) {
      const double keep = a[k], h = 1e-6;
      a[k] = keep + h;
      const double up = cosine_distance<double>(a, b);
      a[k] = keep - h;
      const double down = cosine_distance<double>(a, b);
      a[k] = keep;
      CHECK(g[k] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6).scale(1.0));
    }
  }
}

TEST_CASE("projection normalizes and back-propagates") {
  Affine<double> id(2, 2);
  id.w(0, 0) = id.w(1, 1) = 1.0;
  const std::vector<double> h{3, 4};
  const auto q = project<double>(h, id);
  CHECK(q[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(q[1] == doctest::Approx(0.8).epsilon(1e-15));
  Affine<double> zero(2, 2);
  CHECK(kind_of([&] { project<double>(h, zero); }) == ErrorKind::numeric);

  Rng rng(2);
  Affine<double> proj(3, 4);
  proj.init_gaussian(rng);
  for (double& b : proj.b) b = rng.normal();
  std::vector<double> x(4), w(3);
  for (double& v : x) v = rng.normal();
  for (double& v : w) v = rng.normal();
  auto f = [&] {
    const auto y = project<double>(x, proj);
    return std::inner_product(y.begin(), y.end(), w.begin(), 0.0);
  };
  std::vector<double> raw;
  project<double>(x, proj, &raw);
  Affine<double> dproj(3, 4);
  std::vector<double> dh(4, 0.0);
  project_backward<double>(x, proj, raw, w, dproj, dh);
  auto check_fd = [&](double& param, double analytic) {
    const double keep = param, hh = 1e-6;
    param = keep + hh;
    const double up = f();
    param = keep - hh;
    const double down = f();
    param = keep;
    CHECK(analytic == doctest::Approx((up - down) / (2 * hh)).epsilon(1e-6).scale(1.0));
  };
  for (std::size_t r = 0; r < 3; ++r) {
    check_fd(proj.b[r], dproj.b[r]);
    for (std::size_t c = 0; c < 4; ++c) check_fd(proj.w(r, c), dproj.w(r, c));
  }
  for (std::size_t c = 0; c < 4; ++c) check_fd(x[c], dh[c]);
}

TEST_CASE("anchor sets") {
  const Labels labels{"a", "b", "a", std::nullopt, "a"};
  const auto sets = build_sets(labels);
  CHECK(sets[0].positives == std::vector<std::size_t>{2, 4});
  CHECK(sets[0].negatives == std::vector<std::size_t>{1});
  CHECK(sets[1].positives.empty());
  CHECK(sets[1].negatives == std::vector<std::size_t>{0, 2, 4});
  CHECK(sets[3].missing);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    CHECK(std::find(sets[i].positives.begin(), sets[i].positives.end(), i) == sets[i].positives.end());
    CHECK(std::find(sets[i].negatives.begin(), sets[i].negatives.end(), 3) == sets[i].negatives.end());
  }
}

TEST_CASE("mining agrees with a brute-force oracle, ties included") {
  // Small integer vectors make many exact ties; every dot product is exact.
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(9);
    Vecs q(n, std::vector<double>(3)), e(n, std::vector<double>(2, 0.0));
    for (auto& v : q) {
      do
        for (double& x : v) x = static_cast<double>(rng.uniform_index(3)) - 1.0;
      while (v[0] == 0 && v[1] == 0 && v[2] == 0);
    }
    for (auto& v : e) v[rng.uniform_index(2)] = 1.0;
    const Labels labels = random_labels(rng, n, 3, 0.1);
    const auto sets = build_sets(labels);

    CHECK(mine<double>(std::span<const std::vector<double>>(q), sets) == oracle_mine(q, labels));

    const double alpha = trial % 2 == 0 ? 1.0 : 2.0;
    const MiningSpace<double> space{q, e, alpha};
    Vecs p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = mining_vector<double>(q[i], e[i], alpha);
    CHECK(mine<double>(space, sets) == oracle_mine(p, labels));
  }
}

TEST_CASE("mining skip reasons") {
  const Vecs q{{1, 0}, {0, 1}, {1, 1}};
  SUBCASE("singleton label has no positive") {
    const Labels l{"a", "b", "b"};
    const auto s = mine<double>(std::span<const std::vector<double>>(q), build_sets(l));
    CHECK(s[0].skip == SkipReason::empty_positive);
    CHECK_FALSE(s[1].skipped());
  }
  SUBCASE("one label has no negatives") {
    const Labels l{"a", "a", "a"};
    for (const auto& s : mine<double>(std::span<const std::vector<double>>(q), build_sets(l)))
      CHECK(s.skip == SkipReason::empty_negative);
  }
  SUBCASE("missing label") {
    const Labels l{std::nullopt, "a", "a"};
    CHECK(mine<double>(std::span<const std::vector<double>>(q), build_sets(l))[0].skip ==
          SkipReason::missing_label);
  }
}

TEST_CASE("alpha = 0 reproduces q-only mining") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto q = random_vectors(rng, 12, 5, true);
    const auto e = random_vectors(rng, 12, 4, true);
    const auto sets = build_sets(random_labels(rng, 12, 4));
    const MiningSpace<double> space{q, e, 0.0};
    CHECK(mine<double>(space, sets) == mine<double>(std::span<const std::vector<double>>(q), sets));
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t k = 0; k < 12; ++k) CHECK(space.distance(i, k) == cosine_distance<double>(q[i], q[k]));
    CHECK(selection_change_rate<double>(space, sets).changed == 0);
  }
}

TEST_CASE("mining cosine decomposes for unit blocks") {
  // cos p = (cos q + alpha^2 cos e) / (1 + alpha^2)
  Rng rng(5);
  const auto q = random_vectors(rng, 6, 5, true);
  const auto e = random_vectors(rng, 6, 3, true);
  for (double alpha : {0.5, 1.0, 3.0}) {
    const MiningSpace<double> space{q, e, alpha};
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t k = 0; k < 6; ++k) {
        const double cq = 1.0 - cosine_distance<double>(q[i], q[k]);
        const double ce = 1.0 - cosine_distance<double>(e[i], e[k]);
        const double a2 = alpha * alpha;
        CHECK(1.0 - space.distance(i, k) == doctest::Approx((cq + a2 * ce) / (1 + a2)).epsilon(1e-12));
      }
  }
}

TEST_CASE("mining is equivariant under batch permutation") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 10;
    const auto q = random_vectors(rng, n, 4, true);
    const auto e = random_vectors(rng, n, 3, true);
    const auto labels = random_labels(rng, n, 3);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Vecs qp(n), ep(n);
    Labels lp(n);
    for (std::size_t i = 0; i < n; ++i) {
      qp[i] = q[perm[i]];
      ep[i] = e[perm[i]];
      lp[i] = labels[perm[i]];
    }
    const auto a = mine<double>(MiningSpace<double>{q, e, 1.0}, build_sets(labels));
    const auto b = mine<double>(MiningSpace<double>{qp, ep, 1.0}, build_sets(lp));
    const auto la = triplet_loss<double>(a, q, 0.5);
    const auto lb = triplet_loss<double>(b, qp, 0.5);
    CHECK(la.loss == doctest::Approx(lb.loss).epsilon(1e-12));
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(b[i].skip == a[perm[i]].skip);
      if (b[i].skipped()) continue;
      CHECK(perm[*b[i].positive] == *a[perm[i]].positive);
      CHECK(perm[*b[i].negative] == *a[perm[i]].negative);
    }
  }
}

TEST_CASE("triplet hinge values") {
  // Anchor on the x axis; positive at cosine 0.9, negative at cosine 0.55.
  auto at = [](double c) { return std::vector<double>{c, std::sqrt(1 - c * c)}; };
  const Vecs v{{1, 0}, at(0.9), at(0.55), at(0.3)};
  std::vector<TripletSelection> sel(1);
  sel[0].positive = 1;
  sel[0].negative = 2;
  const auto l = triplet_loss<double>(sel, v, 0.5);
  CHECK(std::fabs(l.loss - 0.15) < 1e-12);
  CHECK(l.active == 1);
  sel[0].negative = 3;
  const auto z = triplet_loss<double>(sel, v, 0.5);
  CHECK(z.loss == 0.0);
  CHECK(z.active == 0);
  CHECK(z.counted == 1);
  // Summed over anchors, not averaged.
  std::vector<TripletSelection> two(2);
  two[0].positive = two[1].positive = 1;
  two[0].negative = two[1].negative = 2;
  CHECK(std::fabs(triplet_loss<double>(two, v, 0.5).loss - 0.30) < 1e-12);
}

TEST_CASE("triplet gradients match central differences") {
  Rng rng(7);
  const std::size_t n = 8;
  auto q = random_vectors(rng, n, 4, false);
  const auto labels = random_labels(rng, n, 3);
  const auto sets = build_sets(labels);
  const auto sel = mine<double>(std::span<const std::vector<double>>(q), sets);
  // Large margin keeps every hinge active under the perturbation.
  const double gamma = 3.0;
  Vecs g(n, std::vector<double>(4, 0.0));
  triplet_loss<double>(sel, q, gamma, &g, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      const double keep = q[i][k], h = 1e-6;
      q[i][k] = keep + h;
      const double up = triplet_loss<double>(sel, q, gamma).loss;
      q[i][k] = keep - h;
      const double down = triplet_loss<double>(sel, q, gamma).loss;
      q[i][k] = keep;
      CHECK(g[i][k] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6).scale(1.0));
    }
}

TEST_CASE("combined loss") {
  const std::vector<double> meta{0.25}, lam{16.0};
  CHECK(combined_loss(2.0, meta, lam) == 6.0);
  const std::vector<double> zero{0.0};
  CHECK(combined_loss(1.5, meta, zero) == 1.5);
  CHECK(combined_loss(1.5, {}, {}) == 1.5);
  const std::vector<double> two{0.5, 0.25}, lam2{2.0, 4.0};
  CHECK(combined_loss(1.0, two, lam2) == 3.0);
  CHECK(kind_of([&] { combined_loss(1.0, two, lam); }) == ErrorKind::shape);
  const std::vector<double> bad{std::nan("")};
  CHECK(kind_of([&] { combined_loss(1.0, bad, lam); }) == ErrorKind::numeric);
  CHECK(kind_of([&] { combined_loss(INFINITY, meta, lam); }) == ErrorKind::numeric);
}

TEST_CASE("selection change rate") {
  Rng rng(8);
  const auto q = random_vectors(rng, 16, 6, true);
  const auto sets = build_sets(random_labels(rng, 16, 4));
  SUBCASE("identical encodings change nothing") {
    const Vecs e(16, unit({1, 2, 3}));
    CHECK(selection_change_rate<double>(MiningSpace<double>{q, e, 1.0}, sets).changed == 0);
  }
  SUBCASE("shared encoding overrides a closer acoustic negative") {
    // Item 2 is the nearest negative of items 0 and 1 in q, but item 3 shares
    // their encoding and wins once it is appended.
    const Vecs qq{unit({1, 0, 0}), unit({1, 0.05, 0}), unit({1, 0.14, 0}), unit({1, 0, 1})};
    const Labels l{"a", "a", "b", "c"};
    const Vecs e{{1, 0}, {1, 0}, {0, 1}, {1, 0}};
    const auto s = build_sets(l);
    const MiningSpace<double> space{qq, e, 1.0};
    CHECK(*mine<double>(std::span<const std::vector<double>>(qq), s)[0].negative == 2);
    CHECK(*mine<double>(space, s)[0].negative == 3);
    const auto r = selection_change_rate<double>(space, s);
    CHECK(r.counted == 2);
    CHECK(r.changed == 2);
    CHECK(r.rate == 1.0);
  }
  SUBCASE("rate is a fraction of counted anchors") {
    const auto e = random_vectors(rng, 16, 3, true);
    const auto r = selection_change_rate<double>(MiningSpace<double>{q, e, 2.0}, sets);
    CHECK(r.counted <= 16);
    CHECK(r.rate == (r.counted ? static_cast<double>(r.changed) / static_cast<double>(r.counted) : 0.0));
  }
}

TEST_CASE("stream config validation") {
  StreamConfig s;
  CHECK(s.lambda == 16.0);
  CHECK(s.gamma == 0.5);
  CHECK(s.alpha == 1.0);
  CHECK_NOTHROW(s.validate());
  s.alpha = -1;
  CHECK(kind_of([&] { s.validate(); }) == ErrorKind::config);
}
