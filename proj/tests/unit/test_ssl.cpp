#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "masr/error.hpp"
#include "masr/rng.hpp"
#include "masr/ssl_backbone.hpp"
#include "support.hpp"

using namespace masr;
using namespace masr::ssl;
using test::kind_of;

namespace {

features::FeatureMatrix random_feats(Rng& rng, std::size_t frames, std::size_t bins) {
  features::FeatureMatrix m(frames, bins);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t f = 0; f < bins; ++f) m(t, f) = static_cast<float>(rng.normal());
  return m;
}

Matrix<double> random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix<double> m(r, c);
  for (auto& x : m.flat()) x = rng.normal();
  return m;
}

BackboneConfig small_config() {
  BackboneConfig c;
  c.mel_bins = 3;
  c.stack = 2;
  c.context = 1;
  c.blocks = 2;
  c.d_z = 4;
  c.codebook_size = 5;
  c.codebook_dim = 3;
  return c;
}

// Total loss used by the finite-difference checks: mean masked CE of the
// encoder output plus a fixed linear functional of the pooled vector.
double probe_loss(const Matrix<double>& stacked, const MaskPlan& mask, const EncoderParams<double>& p,
                  std::span<const std::uint32_t> targets, const std::vector<double>& w, std::size_t context) {
  const auto tr = encode<double>(stacked, mask, p, context);
  const auto s = ssl_loss<double>(tr.output(), targets, mask, p.head);
  const auto h = pool<double>(tr.output());
  return s.loss + std::inner_product(h.begin(), h.end(), w.begin(), 0.0);
}

}  // namespace

TEST_CASE("single-entry codebook gives all-zero targets") {
  Rng rng(1);
  Quantizer q(random_matrix(rng, 6, 3), random_matrix(rng, 1, 3), 2);
  const auto t = quantize_targets(random_feats(rng, 9, 3), q);
  CHECK(t.size() == 4);
  for (auto v : t) CHECK(v == 0);
}

TEST_CASE("input aligned with a codebook row maps to that row") {
  // Identity projection: the stacked input itself is compared to the codebook.
  Matrix<double> proj(3, 3);
  for (std::size_t i = 0; i < 3; ++i) proj(i, i) = 1.0;
  Rng rng(2);
  Matrix<double> code = random_matrix(rng, 7, 3);
  Quantizer q(proj, code, 1);
  for (std::size_t k = 0; k < 7; ++k) {
    features::FeatureMatrix f(1, 3);
    for (std::size_t j = 0; j < 3; ++j) f(0, j) = static_cast<float>(2.5 * q.codebook()(k, j));
    CHECK(quantize_targets(f, q)[0] == k);
  }
}

TEST_CASE("quantizer matches a brute-force nearest neighbour") {
  Rng rng(3);
  const Quantizer q(17, 8, 2, 5, 12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto feats = random_feats(rng, 10, 4);
    const auto targets = quantize_targets(feats, q);
    REQUIRE(targets.size() == 5);
    for (std::size_t t = 0; t < 5; ++t) {
      std::vector<double> x(8);
      for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t b = 0; b < 4; ++b) x[s * 4 + b] = feats(2 * t + s, b);
      std::vector<double> y(5, 0.0);
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 5; ++j) y[j] += x[i] * q.projection()(i, j);
      double n = 0.0;
      for (double v : y) n += v * v;
      n = std::sqrt(n);
      // Max cosine on the unit sphere is the min Euclidean distance.
      std::size_t best = 0;
      double best_c = -2.0;
      for (std::size_t k = 0; k < 12; ++k) {
        double c = 0.0;
        for (std::size_t j = 0; j < 5; ++j) c += y[j] / n * q.codebook()(k, j);
        if (c > best_c + 1e-12) {
          best_c = c;
          best = k;
        }
      }
      CHECK(targets[t] == best);
    }
  }
}

TEST_CASE("quantizer is fixed by its seed") {
  const Quantizer a(9, 6, 2, 4, 8), b(9, 6, 2, 4, 8), c(10, 6, 2, 4, 8);
  CHECK(a.projection() == b.projection());
  CHECK(a.codebook() == b.codebook());
  CHECK_FALSE(a.codebook() == c.codebook());
  for (std::size_t k = 0; k < 8; ++k) {
    double n = 0.0;
    for (double x : a.codebook().row(k)) n += x * x;
    CHECK(n == doctest::Approx(1.0).epsilon(1e-14));
  }
  Rng rng(4);
  const auto f = random_feats(rng, 7, 3);
  CHECK(quantize_targets(f, a) == quantize_targets(f, b));
}

TEST_CASE("quantizer shape errors") {
  const Quantizer q(1, 6, 2, 4, 8);
  CHECK(kind_of([&] { quantize_targets(features::FeatureMatrix(1, 3), q); }) == ErrorKind::shape);
  CHECK(kind_of([&] { quantize_targets(features::FeatureMatrix(4, 4), q); }) == ErrorKind::shape);
  CHECK(kind_of([] { Quantizer(Matrix<double>(4, 3), Matrix<double>(2, 3), 2); }) == ErrorKind::numeric);
}

TEST_CASE("masking") {
  CHECK(make_mask(30, 0.0, 3, 1).count() == 0);
  CHECK(make_mask(30, 1.0, 1, 1).count() == 30);
  CHECK(no_mask(5).count() == 0);

  SUBCASE("recorded index set") {
    // T_s = 50, p = 0.08, span 4, seed 123; recorded from the first verified run.
    const auto m = make_mask(50, 0.08, 4, 123);
    CHECK(m.indices() == std::vector<std::size_t>{12, 13, 14, 15, 23, 24, 25, 26, 28, 29, 30, 31, 37, 38, 39, 40, 41, 42, 43, 44});
  }
  SUBCASE("spans are whole unless clipped at the end") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto m = make_mask(40, 0.1, 3, seed);
      std::size_t t = 0;
      while (t < 40) {
        if (!m.masked[t]) {
          ++t;
          continue;
        }
        std::size_t run = 0;
        while (t < 40 && m.masked[t]) ++run, ++t;
        if (t < 40) CHECK(run >= 3);
      }
    }
  }
  SUBCASE("masked fraction follows the start probability") {
    // P(step masked) = 1 - (1 - p)^span away from the start of the sequence.
    double masked = 0.0, total = 0.0;
    for (std::uint64_t seed = 0; seed < 400; ++seed) {
      const auto m = make_mask(100, 0.05, 4, seed);
      for (std::size_t t = 3; t < 100; ++t) masked += m.masked[t], total += 1;
    }
    CHECK(masked / total == doctest::Approx(1.0 - std::pow(0.95, 4)).epsilon(0.05));
  }
}

TEST_CASE("stacking") {
  features::FeatureMatrix f(5, 2);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t b = 0; b < 2; ++b) f(t, b) = static_cast<float>(10 * t + b);
  const auto s = stack_frames<double>(f, 2);
  REQUIRE(s.rows() == 2);
  REQUIRE(s.cols() == 4);
  CHECK(std::vector<double>(s.row(1).begin(), s.row(1).end()) == std::vector<double>{20, 21, 30, 31});
}

TEST_CASE("encoder with zero blocks is the identity on unmasked input") {
  BackboneConfig c = small_config();
  c.blocks = 0;
  const auto p = EncoderParams<double>::init(c, 1);
  Rng rng(5);
  const auto x = random_matrix(rng, 6, c.input_dim());
  CHECK(encode<double>(x, no_mask(6), p, c.context).output() == x);
  CHECK(c.output_dim() == 6);
}

TEST_CASE("fully masked input does not reach the output") {
  const BackboneConfig c = small_config();
  const auto p = EncoderParams<double>::init(c, 2);
  Rng rng(6);
  MaskPlan all = make_mask(5, 1.0, 1, 0);
  const auto a = encode<double>(random_matrix(rng, 5, 6), all, p, c.context).output();
  const auto b = encode<double>(random_matrix(rng, 5, 6), all, p, c.context).output();
  CHECK(a == b);
}

TEST_CASE("one block by hand") {
  // in = 1, C = 1: z_t = tanh(w0 x_{t-1} + w1 x_t + w2 x_{t+1} + b), zero padded.
  BackboneConfig c;
  c.mel_bins = 1;
  c.stack = 1;
  c.context = 1;
  c.blocks = 1;
  c.d_z = 1;
  c.codebook_size = 2;
  c.codebook_dim = 1;
  auto p = EncoderParams<double>::zeros(c);
  p.blocks[0].w(0, 0) = 0.5;
  p.blocks[0].w(0, 1) = -1.0;
  p.blocks[0].w(0, 2) = 2.0;
  p.blocks[0].b[0] = 0.1;
  p.mask_embedding[0] = 3.0;
  Matrix<double> x(3, 1);
  x(0, 0) = 1.0;
  x(1, 0) = 2.0;
  x(2, 0) = -1.0;
  MaskPlan m = no_mask(3);
  m.masked[2] = 1;  // x_2 replaced by 3
  const auto z = encode<double>(x, m, p, 1).output();
  CHECK(z(0, 0) == doctest::Approx(std::tanh(-1.0 + 4.0 + 0.1)));
  CHECK(z(1, 0) == doctest::Approx(std::tanh(0.5 - 2.0 + 6.0 + 0.1)));
  CHECK(z(2, 0) == doctest::Approx(std::tanh(1.0 - 3.0 + 0.1)));
}

TEST_CASE("mean pooling") {
  Matrix<double> z(3, 2);
  z(0, 0) = 1;
  z(1, 1) = 1;
  z(2, 0) = 1;
  z(2, 1) = 1;
  const auto h = pool<double>(z);
  CHECK(h[0] == doctest::Approx(2.0 / 3.0));
  CHECK(h[1] == doctest::Approx(2.0 / 3.0));
  CHECK(kind_of([] { pool<double>(Matrix<double>(0, 2)); }) == ErrorKind::shape);
}

TEST_CASE("ssl loss values") {
  const BackboneConfig c = small_config();
  Rng rng(7);
  const auto z = random_matrix(rng, 4, 4);
  const std::vector<std::uint32_t> targets{0, 3, 1, 4};
  SUBCASE("empty mask gives zero loss and zero gradients") {
    const auto p = EncoderParams<double>::init(c, 3);
    const auto s = ssl_loss<double>(z, targets, no_mask(4), p.head);
    CHECK(s.empty_mask);
    CHECK(s.loss == 0.0);
    for (double v : s.dz.flat()) CHECK(v == 0.0);
  }
  SUBCASE("uniform head gives ln V") {
    const auto p = EncoderParams<double>::zeros(c);
    const auto s = ssl_loss<double>(z, targets, make_mask(4, 1.0, 1, 0), p.head);
    CHECK(s.loss == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  }
  SUBCASE("eight codes") {
    BackboneConfig c8 = c;
    c8.codebook_size = 8;
    const auto p = EncoderParams<double>::zeros(c8);
    const std::vector<std::uint32_t> t8{7, 0, 2, 5};
    CHECK(ssl_loss<double>(z, t8, make_mask(4, 1.0, 1, 0), p.head).loss == doctest::Approx(std::log(8.0)));
  }
  SUBCASE("target outside the codebook") {
    const auto p = EncoderParams<double>::zeros(c);
    const std::vector<std::uint32_t> bad{0, 9, 1, 1};
    CHECK(kind_of([&] { ssl_loss<double>(z, bad, make_mask(4, 1.0, 1, 0), p.head); }) == ErrorKind::shape);
  }
}

TEST_CASE("encoder and head gradients match central differences") {
  const BackboneConfig c = small_config();
  Rng rng(8);
  auto p = EncoderParams<double>::init(c, 4);
  const auto x = random_matrix(rng, 5, c.input_dim());
  MaskPlan mask = no_mask(5);
  mask.masked[1] = mask.masked[2] = 1;
  const std::vector<std::uint32_t> targets{1, 2, 0, 4, 3};
  std::vector<double> w(c.output_dim());
  for (auto& v : w) v = rng.normal();

  // Analytic gradient.
  const auto tr = encode<double>(x, mask, p, c.context);
  auto s = ssl_loss<double>(tr.output(), targets, mask, p.head);
  Matrix<double> dz = s.dz;
  const double inv = 1.0 / static_cast<double>(tr.output().rows());
  for (std::size_t t = 0; t < dz.rows(); ++t)
    for (std::size_t k = 0; k < dz.cols(); ++k) dz(t, k) += w[k] * inv;
  auto g = EncoderParams<double>::zeros(c);
  encode_backward<double>(tr, dz, p, c.context, g);
  g.head = s.dhead;

  std::vector<std::span<double>> analytic;
  g.visit([&](const TensorRef<double>& t) { analytic.push_back(t.data); });
  std::size_t tensor = 0;
  p.visit([&](const TensorRef<double>& t) {
    CAPTURE(t.name);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double keep = t.data[i];
      const double h = 1e-6;
      t.data[i] = keep + h;
      const double up = probe_loss(x, mask, p, targets, w, c.context);
      t.data[i] = keep - h;
      const double down = probe_loss(x, mask, p, targets, w, c.context);
      t.data[i] = keep;
      const double fd = (up - down) / (2 * h);
      CHECK(analytic[tensor][i] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
    }
    ++tensor;
  });
}

TEST_CASE("config validation") {
  BackboneConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.mask_prob = 1.5;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::config);
  c = small_config();
  c.mask_span = 0;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::config);
}
