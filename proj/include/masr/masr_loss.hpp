#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "masr/params.hpp"

namespace masr::loss {

struct StreamConfig {
  std::string name = "language";
  double alpha = 1.0;    // weight of the metadata block in the mining vector
  double lambda = 16.0;  // weight of this stream's triplet loss in the total
  double gamma = 0.5;    // hinge margin
  std::size_t d_q = 0;   // projection width; 0 means "same as the encoding"
  bool loss_on_p = false;  // ablation: hinge distances on p instead of q

  void validate() const;
};

// 1 - a.b / (|a||b|). Throws masr::Error(numeric) on a zero-norm input.
template <class Real>
double cosine_distance(std::span<const Real> a, std::span<const Real> b);

// Gradient of cosine_distance(a, b) with respect to a, scaled by `scale` and
// accumulated into `da`.
template <class Real>
void cosine_distance_grad(std::span<const Real> a, std::span<const Real> b, Real scale, std::span<Real> da);

// q = normalize(W h + b). `raw` receives the pre-normalization vector when given.
template <class Real>
std::vector<Real> project(std::span<const Real> h, const Affine<Real>& projection, std::vector<Real>* raw = nullptr);

// Backward through normalize(W h + b): accumulates into dproj and dh.
template <class Real>
void project_backward(std::span<const Real> h, const Affine<Real>& projection, std::span<const Real> raw,
                      std::span<const Real> dq, Affine<Real>& dproj, std::span<Real> dh);

struct AnchorSets {
  std::vector<std::size_t> positives;  // same label, anchor excluded
  std::vector<std::size_t> negatives;  // different label
  bool missing = false;                // anchor has no label for this stream
};

// Items with a missing label are excluded from every set.
std::vector<AnchorSets> build_sets(std::span<const std::optional<std::string>> labels);

enum class SkipReason { none, empty_positive, empty_negative, missing_label };

struct TripletSelection {
  std::size_t anchor = 0;
  std::optional<std::size_t> positive;
  std::optional<std::size_t> negative;
  SkipReason skip = SkipReason::none;

  bool skipped() const { return skip != SkipReason::none; }
  friend bool operator==(const TripletSelection&, const TripletSelection&) = default;
};

// Mining vector [q ; alpha * e], materialized.
template <class Real>
std::vector<Real> mining_vector(std::span<const Real> q, std::span<const double> e, double alpha);

// Cosine geometry of the mining vectors p_i = [q_i ; alpha * e_i] without
// materializing them. Dot products are taken blockwise,
//   p_i.p_k = q_i.q_k + alpha^2 (e_i.e_k),
// so alpha = 0 reproduces the q-only distances bit for bit.
template <class Real>
struct MiningSpace {
  std::span<const std::vector<Real>> q;
  std::span<const std::vector<double>> e;  // empty vectors for items without an encoding
  double alpha = 0.0;

  double distance(std::size_t i, std::size_t k) const;
};

// Farthest positive / nearest negative under `dist(i, k)`; ties go to the
// lowest batch index.
template <class Dist>
std::vector<TripletSelection> mine_by(std::span<const AnchorSets> sets, Dist&& dist) {
  std::vector<TripletSelection> out(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) {
    auto& sel = out[i];
    sel.anchor = i;
    if (sets[i].missing) {
      sel.skip = SkipReason::missing_label;
      continue;
    }
    if (sets[i].positives.empty()) {
      sel.skip = SkipReason::empty_positive;
      continue;
    }
    if (sets[i].negatives.empty()) {
      sel.skip = SkipReason::empty_negative;
      continue;
    }
    double best = 0.0;
    for (auto k : sets[i].positives) {  // ascending; strict comparison keeps the lowest index
      const double d = dist(i, k);
      if (!sel.positive || d > best) {
        best = d;
        sel.positive = k;
      }
    }
    for (auto k : sets[i].negatives) {
      const double d = dist(i, k);
      if (!sel.negative || d < best) {
        best = d;
        sel.negative = k;
      }
    }
  }
  return out;
}

// Mining on plain vectors (the q-only, LASR-style selection).
template <class Real>
std::vector<TripletSelection> mine(std::span<const std::vector<Real>> vectors, std::span<const AnchorSets> sets);

// Mining on p = [q ; alpha e].
template <class Real>
std::vector<TripletSelection> mine(const MiningSpace<Real>& space, std::span<const AnchorSets> sets);

struct TripletLoss {
  double loss = 0.0;
  std::size_t active = 0;     // anchors with a positive hinge
  std::size_t counted = 0;    // non-skipped anchors
  double sum_pos = 0.0;       // summed d(anchor, positive) over counted anchors
  double sum_neg = 0.0;
};

// Sum over non-skipped anchors of [gamma + d(v_i, v_k+) - d(v_i, v_k-)]_+.
// When `grads` is given (one vector per item, same widths as `vectors`),
// dL/dv scaled by `scale` is accumulated there; the hinge kink has gradient 0.
template <class Real>
TripletLoss triplet_loss(std::span<const TripletSelection> selections, std::span<const std::vector<Real>> vectors,
                         double gamma, std::vector<std::vector<Real>>* grads = nullptr, Real scale = Real(1));

// L_SSL + sum_j lambda_j * L_META^j, evaluated left to right in double.
double combined_loss(double l_ssl, std::span<const double> l_meta, std::span<const double> lambdas);

struct ChangeRate {
  double rate = 0.0;
  std::size_t changed = 0;
  std::size_t counted = 0;
};

// Fraction of non-skipped anchors whose nearest negative differs between
// mining on p and mining on q alone.
template <class Real>
ChangeRate selection_change_rate(const MiningSpace<Real>& space, std::span<const AnchorSets> sets);

}  // namespace masr::loss
