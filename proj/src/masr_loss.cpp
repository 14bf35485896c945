#include "masr/masr_loss.hpp"

#include <cmath>
#include <map>

#include "masr/error.hpp"

namespace masr::loss {

void StreamConfig::validate() const {
  if (!(alpha >= 0.0)) fail(ErrorKind::config, "stream '" + name + "': alpha must be >= 0");
  if (!(lambda >= 0.0)) fail(ErrorKind::config, "stream '" + name + "': lambda must be >= 0");
  if (!(gamma >= 0.0)) fail(ErrorKind::config, "stream '" + name + "': gamma must be >= 0");
}

template <class Real>
double cosine_distance(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) fail(ErrorKind::shape, "cosine distance of vectors with different widths");
  const double ab = simd::dot<Real>(a, b);
  const double aa = simd::dot<Real>(a, a);
  const double bb = simd::dot<Real>(b, b);
  if (!(aa > 0.0) || !(bb > 0.0)) fail(ErrorKind::numeric, "cosine distance of a zero-norm vector");
  return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
}

template <class Real>
void cosine_distance_grad(std::span<const Real> a, std::span<const Real> b, Real scale, std::span<Real> da) {
  const double ab = simd::dot<Real>(a, b);
  const double na = std::sqrt(static_cast<double>(simd::dot<Real>(a, a)));
  const double nb = std::sqrt(static_cast<double>(simd::dot<Real>(b, b)));
  // d/da [1 - a.b/(|a||b|)] = -b/(|a||b|) + (a.b) a / (|a|^3 |b|)
  const double cb = -1.0 / (na * nb);
  const double ca = ab / (na * na * na * nb);
  for (std::size_t k = 0; k < a.size(); ++k)
    da[k] += scale * static_cast<Real>(cb * static_cast<double>(b[k]) + ca * static_cast<double>(a[k]));
}

template <class Real>
std::vector<Real> project(std::span<const Real> h, const Affine<Real>& projection, std::vector<Real>* raw) {
  if (h.size() != projection.in_dim()) fail(ErrorKind::shape, "projection input width mismatch");
  std::vector<Real> y(projection.out_dim());
  linalg::affine<Real>(projection.w, projection.b, h, y);
  const Real n = linalg::norm<Real>(y);
  if (!(n > Real(0))) fail(ErrorKind::numeric, "projection produced a zero vector");
  if (raw) *raw = y;
  for (Real& v : y) v /= n;
  return y;
}

template <class Real>
void project_backward(std::span<const Real> h, const Affine<Real>& projection, std::span<const Real> raw,
                      std::span<const Real> dq, Affine<Real>& dproj, std::span<Real> dh) {
  const Real n = linalg::norm<Real>(raw);
  // q = y/|y|  =>  dy = (dq - q (q.dq)) / |y|
  Real q_dot = 0;
  for (std::size_t k = 0; k < raw.size(); ++k) q_dot += raw[k] / n * dq[k];
  std::vector<Real> dy(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) dy[k] = (dq[k] - raw[k] / n * q_dot) / n;
  linalg::affine_backward_params<Real>(dy, h, dproj.w, dproj.b);
  linalg::affine_backward_input<Real>(projection.w, dy, dh);
}

std::vector<AnchorSets> build_sets(std::span<const std::optional<std::string>> labels) {
  std::vector<AnchorSets> sets(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) {
      sets[i].missing = true;
      continue;
    }
    for (std::size_t k = 0; k < labels.size(); ++k) {
      if (k == i || !labels[k]) continue;
      (*labels[k] == *labels[i] ? sets[i].positives : sets[i].negatives).push_back(k);
    }
  }
  return sets;
}

template <class Real>
std::vector<Real> mining_vector(std::span<const Real> q, std::span<const double> e, double alpha) {
  std::vector<Real> p(q.begin(), q.end());
  p.reserve(q.size() + e.size());
  for (double v : e) p.push_back(static_cast<Real>(alpha * v));
  return p;
}

template <class Real>
double MiningSpace<Real>::distance(std::size_t i, std::size_t k) const {
  const std::span<const Real> qi(q[i]), qk(q[k]);
  double ab = simd::dot<Real>(qi, qk);
  double aa = simd::dot<Real>(qi, qi);
  double bb = simd::dot<Real>(qk, qk);
  const double a2 = alpha * alpha;
  if (e[i].size() != e[k].size()) fail(ErrorKind::shape, "mining encodings have different widths");
  if (!e[i].empty()) {
    ab += a2 * simd::dot<double>(e[i], e[k]);
    aa += a2 * simd::dot<double>(e[i], e[i]);
    bb += a2 * simd::dot<double>(e[k], e[k]);
  }
  if (!(aa > 0.0) || !(bb > 0.0)) fail(ErrorKind::numeric, "cosine distance of a zero-norm vector");
  return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
}

template <class Real>
std::vector<TripletSelection> mine(std::span<const std::vector<Real>> vectors, std::span<const AnchorSets> sets) {
  return mine_by(sets, [&](std::size_t i, std::size_t k) { return cosine_distance<Real>(vectors[i], vectors[k]); });
}

template <class Real>
std::vector<TripletSelection> mine(const MiningSpace<Real>& space, std::span<const AnchorSets> sets) {
  return mine_by(sets, [&](std::size_t i, std::size_t k) { return space.distance(i, k); });
}

template <class Real>
TripletLoss triplet_loss(std::span<const TripletSelection> selections, std::span<const std::vector<Real>> vectors,
                         double gamma, std::vector<std::vector<Real>>* grads, Real scale) {
  TripletLoss out;
  for (const auto& sel : selections) {
    if (sel.skipped()) continue;
    const std::size_t i = sel.anchor, kp = *sel.positive, kn = *sel.negative;
    const std::span<const Real> a(vectors[i]), pos(vectors[kp]), neg(vectors[kn]);
    const double dp = cosine_distance<Real>(a, pos);
    const double dn = cosine_distance<Real>(a, neg);
    ++out.counted;
    out.sum_pos += dp;
    out.sum_neg += dn;
    const double term = gamma + dp - dn;
    if (!(term > 0.0)) continue;
    out.loss += term;
    ++out.active;
    if (grads == nullptr) continue;
    auto& g = *grads;
    // d(a,b) is symmetric, so d/db uses the same helper with swapped arguments.
    cosine_distance_grad<Real>(a, pos, scale, g[i]);
    cosine_distance_grad<Real>(pos, a, scale, g[kp]);
    cosine_distance_grad<Real>(a, neg, -scale, g[i]);
    cosine_distance_grad<Real>(neg, a, -scale, g[kn]);
  }
  return out;
}

double combined_loss(double l_ssl, std::span<const double> l_meta, std::span<const double> lambdas) {
  if (l_meta.size() != lambdas.size()) fail(ErrorKind::shape, "combined loss: one lambda per stream required");
  if (!std::isfinite(l_ssl)) fail(ErrorKind::numeric, "combined loss: L_SSL is not finite");
  double total = l_ssl;
  for (std::size_t j = 0; j < l_meta.size(); ++j) {
    if (!std::isfinite(l_meta[j]))
      fail(ErrorKind::numeric, "combined loss: L_META for stream " + std::to_string(j) + " is not finite");
    total += lambdas[j] * l_meta[j];
  }
  return total;
}

template <class Real>
ChangeRate selection_change_rate(const MiningSpace<Real>& space, std::span<const AnchorSets> sets) {
  const auto by_q = mine<Real>(space.q, sets);
  const auto by_p = mine<Real>(space, sets);
  ChangeRate out;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (by_p[i].skipped()) continue;
    ++out.counted;
    if (by_p[i].negative != by_q[i].negative) ++out.changed;
  }
  out.rate = out.counted == 0 ? 0.0 : static_cast<double>(out.changed) / static_cast<double>(out.counted);
  return out;
}

#define MASR_INSTANTIATE(Real)                                                                                   \
  template double cosine_distance<Real>(std::span<const Real>, std::span<const Real>);                          \
  template void cosine_distance_grad<Real>(std::span<const Real>, std::span<const Real>, Real, std::span<Real>); \
  template std::vector<Real> project<Real>(std::span<const Real>, const Affine<Real>&, std::vector<Real>*);     \
  template void project_backward<Real>(std::span<const Real>, const Affine<Real>&, std::span<const Real>,       \
                                       std::span<const Real>, Affine<Real>&, std::span<Real>);                   \
  template std::vector<Real> mining_vector<Real>(std::span<const Real>, std::span<const double>, double);       \
  template struct MiningSpace<Real>;                                                                           \
  template std::vector<TripletSelection> mine<Real>(std::span<const std::vector<Real>>,                         \
                                                    std::span<const AnchorSets>);                                \
  template std::vector<TripletSelection> mine<Real>(const MiningSpace<Real>&, std::span<const AnchorSets>);     \
  template TripletLoss triplet_loss<Real>(std::span<const TripletSelection>, std::span<const std::vector<Real>>, \
                                          double, std::vector<std::vector<Real>>*, Real);                        \
  template ChangeRate selection_change_rate<Real>(const MiningSpace<Real>&, std::span<const AnchorSets>);

MASR_INSTANTIATE(float)
MASR_INSTANTIATE(double)
#undef MASR_INSTANTIATE

}  // namespace masr::loss
