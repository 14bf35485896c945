#include "masr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "json.hpp"
#include "masr/error.hpp"
#include "masr/rng.hpp"

namespace masr::eval {

template <class Real>
Matrix<double> extract_embeddings(const ModelState<Real>& model, const std::vector<Matrix<Real>>& stacked,
                                  std::size_t context, std::size_t threads) {
  Matrix<double> out(stacked.size(), model.encoder.head.in_dim());
  parallel_for(stacked.size(), threads, [&](std::size_t i) {
    const auto h = embed<Real>(model, stacked[i], context);
    auto row = out.row(i);
    for (std::size_t k = 0; k < h.size(); ++k) row[k] = static_cast<double>(h[k]);
  });
  return out;
}

template Matrix<double> extract_embeddings<float>(const ModelState<float>&, const std::vector<Matrix<float>>&,
                                                  std::size_t, std::size_t);
template Matrix<double> extract_embeddings<double>(const ModelState<double>&, const std::vector<Matrix<double>>&,
                                                   std::size_t, std::size_t);

void ProbeConfig::validate() const {
  if (max_steps == 0) fail(ErrorKind::config, "eval.probe_max_steps must be >= 1");
  if (window == 0) fail(ErrorKind::config, "eval.probe_window must be >= 1");
  if (lr_grid.empty()) fail(ErrorKind::config, "eval.probe_lr_grid must not be empty");
  for (double lr : lr_grid)
    if (!(lr > 0.0)) fail(ErrorKind::config, "eval.probe_lr_grid values must be > 0");
}

std::vector<double> ProbeModel::scores(std::span<const double> x) const {
  if (x.size() != mean.size()) fail(ErrorKind::shape, "probe input width mismatch");
  std::vector<double> z(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) z[k] = (x[k] - mean[k]) * inv_std[k];
  std::vector<double> s(classes.size());
  linalg::affine<double>(w, b, z, s);
  const double mx = *std::max_element(s.begin(), s.end());
  double sum = 0.0;
  for (double& v : s) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : s) v /= sum;
  return s;
}

std::size_t ProbeModel::predict(std::span<const double> x) const {
  const auto s = scores(x);
  return static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
}

namespace {

struct ProbeData {
  Matrix<double> z;  // standardized
  std::vector<std::size_t> y;
  std::size_t classes = 0;
};

// Mean cross-entropy and, when requested, its gradient.
double probe_loss(const ProbeData& d, const Matrix<double>& w, const std::vector<double>& b, Matrix<double>* gw,
                  std::vector<double>* gb) {
  const std::size_t n = d.z.rows();
  if (gw) {
    gw->fill(0.0);
    std::fill(gb->begin(), gb->end(), 0.0);
  }
  std::vector<double> s(d.classes);
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    linalg::affine<double>(w, b, d.z.row(i), s);
    const double mx = *std::max_element(s.begin(), s.end());
    double sum = 0.0;
    for (double& v : s) {
      v = std::exp(v - mx);
      sum += v;
    }
    total -= std::log(s[d.y[i]] / sum);
    if (!gw) continue;
    for (double& v : s) v = v / sum * inv_n;
    s[d.y[i]] -= inv_n;
    linalg::affine_backward_params<double>(s, d.z.row(i), *gw, *gb);
  }
  return total * inv_n;
}

struct Descent {
  Matrix<double> w;
  std::vector<double> b;
  std::size_t steps = 0;
  double loss = 0.0;
};

Descent descend(const ProbeData& d, Matrix<double> w, std::vector<double> b, double lr, std::size_t max_steps,
                std::size_t window, double min_improvement) {
  Matrix<double> gw(w.rows(), w.cols());
  std::vector<double> gb(b.size());
  std::vector<double> history;
  Descent out;
  for (std::size_t t = 0; t < max_steps; ++t) {
    const double l = probe_loss(d, w, b, &gw, &gb);
    history.push_back(l);
    if (history.size() > window && history[history.size() - 1 - window] - l < min_improvement) break;
    simd::axpy<double>(-lr, gw.flat(), w.flat());
    simd::axpy<double>(-lr, gb, b);
    ++out.steps;
  }
  out.loss = probe_loss(d, w, b, nullptr, nullptr);
  out.w = std::move(w);
  out.b = std::move(b);
  return out;
}

}  // namespace

ProbeModel train_probe(const Matrix<double>& x, const std::vector<std::string>& labels, const ProbeConfig& cfg) {
  cfg.validate();
  if (x.rows() != labels.size()) fail(ErrorKind::shape, "probe: one label per embedding required");
  if (x.rows() == 0) fail(ErrorKind::invalid_argument, "probe: empty training set");
  ProbeModel p;
  std::map<std::string, std::size_t> index;
  for (const auto& l : labels) index.emplace(l, 0);
  if (index.size() < 2) fail(ErrorKind::invalid_argument, "probe: training set has a single class");
  for (auto& [name, id] : index) {
    id = p.classes.size();
    p.classes.push_back(name);
  }

  const std::size_t n = x.rows(), dim = x.cols();
  p.mean.assign(dim, 0.0);
  p.inv_std.assign(dim, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < dim; ++k) p.mean[k] += x(i, k);
  for (double& m : p.mean) m /= static_cast<double>(n);
  for (std::size_t k = 0; k < dim; ++k) {
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x(i, k) - p.mean[k]) * (x(i, k) - p.mean[k]);
    var /= static_cast<double>(n);
    p.inv_std[k] = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
  }

  ProbeData d;
  d.classes = p.classes.size();
  d.z = Matrix<double>(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < dim; ++k) d.z(i, k) = (x(i, k) - p.mean[k]) * p.inv_std[k];
    d.y.push_back(index.at(labels[i]));
  }

  Matrix<double> w0(d.classes, dim);
  Rng rng(derive_seed(cfg.seed, {hash_tag("probe")}));
  for (double& v : w0.flat()) v = 0.01 * rng.normal();
  const std::vector<double> b0(d.classes, 0.0);

  double best_lr = cfg.lr_grid.front();
  double best_loss = std::numeric_limits<double>::infinity();
  for (double lr : cfg.lr_grid) {
    const Descent trial = descend(d, w0, b0, lr, cfg.search_steps, cfg.search_steps + 1, 0.0);
    if (std::isfinite(trial.loss) && trial.loss < best_loss) {
      best_loss = trial.loss;
      best_lr = lr;
    }
  }
  Descent fit = descend(d, w0, b0, best_lr, cfg.max_steps, cfg.window, cfg.min_improvement);
  p.w = std::move(fit.w);
  p.b = std::move(fit.b);
  p.learning_rate = best_lr;
  p.steps = fit.steps;
  p.final_loss = fit.loss;
  return p;
}

Predictions predict(const ProbeModel& probe, const Matrix<double>& x, const std::vector<std::string>& labels) {
  if (x.rows() != labels.size()) fail(ErrorKind::shape, "predict: one label per embedding required");
  Predictions out;
  out.scores = Matrix<double>(x.rows(), probe.classes.size());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto it = std::find(probe.classes.begin(), probe.classes.end(), labels[i]);
    if (it == probe.classes.end()) fail(ErrorKind::invalid_argument, "predict: label '" + labels[i] + "' unseen by the probe");
    out.labels.push_back(static_cast<std::size_t>(it - probe.classes.begin()));
    const auto s = probe.scores(x.row(i));
    std::copy(s.begin(), s.end(), out.scores.row(i).begin());
    out.predicted.push_back(static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin()));
  }
  return out;
}

Confusion confusion(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                    std::size_t num_classes) {
  if (predicted.size() != labels.size()) fail(ErrorKind::shape, "confusion: predictions and labels differ in length");
  Confusion c(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes || predicted[i] >= num_classes)
      fail(ErrorKind::range, "confusion: class id out of range");
    ++c[labels[i]][predicted[i]];
  }
  return c;
}

double binary_eer(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) fail(ErrorKind::shape, "eer: scores and flags differ in length");
  const std::size_t pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), 1));
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) fail(ErrorKind::invalid_argument, "eer needs positives and negatives");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Sweep thresholds from above the top score downward; each distinct score
  // adds one ROC point where items with score >= threshold are accepted.
  double prev_fpr = 0.0, prev_fnr = 1.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    while (k < order.size() && scores[order[k]] == s) {
      (positive[order[k]] ? tp : fp) += 1;
      ++k;
    }
    const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
    const double fnr = 1.0 - static_cast<double>(tp) / static_cast<double>(pos);
    const double d_prev = prev_fnr - prev_fpr;
    const double d = fnr - fpr;
    if (d <= 0.0) {
      const double t = d_prev / (d_prev - d);
      return prev_fpr + t * (fpr - prev_fpr);
    }
    prev_fpr = fpr;
    prev_fnr = fnr;
  }
  return prev_fpr;  // unreachable: the last point has fnr = 0, fpr = 1
}

EvalReport metrics(std::span<const std::size_t> predicted, const Matrix<double>& scores,
                   std::span<const std::size_t> labels, const std::vector<std::string>& classes) {
  if (classes.empty()) fail(ErrorKind::invalid_argument, "metrics: empty class list");
  if (labels.empty()) fail(ErrorKind::invalid_argument, "metrics: empty test set");
  if (scores.rows() != labels.size() || scores.cols() != classes.size())
    fail(ErrorKind::shape, "metrics: score matrix must be items x classes");
  const std::size_t c = classes.size(), n = labels.size();
  EvalReport r;
  r.classes = classes;
  r.items = n;
  r.confusion = confusion(predicted, labels, c);
  r.support.assign(c, 0);
  std::vector<std::size_t> predicted_count(c, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      r.support[i] += r.confusion[i][j];
      predicted_count[j] += r.confusion[i][j];
    }
    correct += r.confusion[i][i];
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  double f1_sum = 0.0, eer_sum = 0.0;
  std::size_t f1_n = 0, eer_n = 0;
  r.class_accuracy.resize(c);
  r.class_f1.resize(c);
  r.class_eer.resize(c);
  std::vector<double> col(n);
  std::vector<std::uint8_t> flags(n);
  for (std::size_t k = 0; k < c; ++k) {
    if (r.support[k] > 0) {
      const double tp = static_cast<double>(r.confusion[k][k]);
      r.class_accuracy[k] = tp / static_cast<double>(r.support[k]);
      const double precision = predicted_count[k] == 0 ? 0.0 : tp / static_cast<double>(predicted_count[k]);
      const double recall = tp / static_cast<double>(r.support[k]);
      const double f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
      r.class_f1[k] = f1;
      f1_sum += f1;
      ++f1_n;
    }
    if (r.support[k] > 0 && r.support[k] < n) {
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = scores(i, k);
        flags[i] = labels[i] == k ? 1 : 0;
      }
      const double e = binary_eer(col, flags);
      r.class_eer[k] = e;
      eer_sum += e;
      ++eer_n;
    }
  }
  r.macro_f1 = f1_sum / static_cast<double>(f1_n);
  // With a single supported class there is no negative to rank against.
  r.eer = eer_n == 0 ? 0.0 : eer_sum / static_cast<double>(eer_n);
  return r;
}

std::optional<double> subset_accuracy(const EvalReport& report, const std::set<std::string>& subset) {
  std::size_t total = 0, correct = 0;
  for (std::size_t k = 0; k < report.classes.size(); ++k) {
    if (!subset.contains(report.classes[k])) continue;
    total += report.support[k];
    correct += report.confusion[k][k];
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(total);
}

SplitReport split_report(const EvalReport& report, const std::set<std::string>& overlap) {
  std::set<std::string> rest;
  for (const auto& name : overlap)
    if (std::find(report.classes.begin(), report.classes.end(), name) == report.classes.end())
      fail(ErrorKind::invalid_argument, "split report: overlap class '" + name + "' is not in the class list");
  for (const auto& name : report.classes)
    if (!overlap.contains(name)) rest.insert(name);
  return {subset_accuracy(report, overlap), subset_accuracy(report, rest)};
}

std::string EvalReport::to_jsonl() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  std::string out;
  nlohmann::ordered_json s;
  s["kind"] = "summary";
  s["items"] = items;
  s["classes"] = classes.size();
  s["accuracy"] = accuracy;
  s["macro_f1"] = macro_f1;
  s["eer"] = eer;
  out += s.dump() + "\n";
  for (std::size_t k = 0; k < classes.size(); ++k) {
    nlohmann::ordered_json j;
    j["kind"] = "class";
    j["class"] = classes[k];
    j["support"] = support[k];
    j["accuracy"] = opt(class_accuracy[k]);
    j["f1"] = opt(class_f1[k]);
    j["eer"] = opt(class_eer[k]);
    out += j.dump() + "\n";
  }
  return out;
}

std::string EvalReport::confusion_csv() const {
  std::string out = "true\\predicted";
  for (const auto& c : classes) out += "," + c;
  out += "\n";
  for (std::size_t i = 0; i < classes.size(); ++i) {
    out += classes[i];
    for (auto v : confusion[i]) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

}  // namespace masr::eval
