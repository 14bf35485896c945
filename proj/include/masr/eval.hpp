#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "masr/matrix.hpp"
#include "masr/model.hpp"

namespace masr::eval {

// Pooled, unmasked embeddings, one row per utterance.
template <class Real>
Matrix<double> extract_embeddings(const ModelState<Real>& model, const std::vector<Matrix<Real>>& stacked,
                                  std::size_t context, std::size_t threads = 1);

struct ProbeConfig {
  std::size_t max_steps = 5000;
  std::size_t window = 50;          // convergence window
  double min_improvement = 1e-5;    // loss drop required over one window
  std::vector<double> lr_grid = {3.0, 1.0, 0.3, 0.1, 0.03};
  std::size_t search_steps = 50;    // steps per candidate during the line search
  std::uint64_t seed = 1;

  void validate() const;
};

// Softmax classifier on standardized embeddings.
struct ProbeModel {
  std::vector<std::string> classes;
  std::vector<double> mean;
  std::vector<double> inv_std;
  Matrix<double> w;  // classes x d
  std::vector<double> b;
  double learning_rate = 0.0;
  std::size_t steps = 0;
  double final_loss = 0.0;

  std::vector<double> scores(std::span<const double> x) const;  // softmax probabilities
  std::size_t predict(std::span<const double> x) const;
};

// Full-batch gradient descent on mean cross-entropy. The learning rate is the
// grid value with the lowest loss after `search_steps`; training then runs
// until the loss improves by less than `min_improvement` over `window` steps
// or `max_steps` is reached. Throws on fewer than two classes.
ProbeModel train_probe(const Matrix<double>& x, const std::vector<std::string>& labels, const ProbeConfig& cfg);

struct Predictions {
  std::vector<std::size_t> labels;  // true class ids
  std::vector<std::size_t> predicted;
  Matrix<double> scores;            // items x classes
};

// Labels must all be probe classes.
Predictions predict(const ProbeModel& probe, const Matrix<double>& x, const std::vector<std::string>& labels);

using Confusion = std::vector<std::vector<std::size_t>>;

// counts[i][j] = items of true class i predicted as j.
Confusion confusion(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                    std::size_t num_classes);

// One-vs-rest EER from scores of one class (positives flagged). Equal FPR/FNR
// point of the ROC sweep, linearly interpolated between the two sweep points
// around the crossing. Requires at least one positive and one negative.
double binary_eer(std::span<const double> scores, std::span<const std::uint8_t> positive);

struct EvalReport {
  std::vector<std::string> classes;
  std::size_t items = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;  // over classes with support
  double eer = 0.0;       // macro over classes with both positives and negatives
  std::vector<std::size_t> support;
  std::vector<std::optional<double>> class_accuracy;  // absent for zero support
  std::vector<std::optional<double>> class_f1;
  std::vector<std::optional<double>> class_eer;
  Confusion confusion;

  std::string to_jsonl() const;
  std::string confusion_csv() const;
};

EvalReport metrics(std::span<const std::size_t> predicted, const Matrix<double>& scores,
                   std::span<const std::size_t> labels, const std::vector<std::string>& classes);

// Accuracy over items whose true class is in `subset`; absent when none are.
std::optional<double> subset_accuracy(const EvalReport& report, const std::set<std::string>& subset);

struct SplitReport {
  std::optional<double> overlap;
  std::optional<double> non_overlap;
};

// Partitions classes by membership in `overlap`, which must name known classes.
SplitReport split_report(const EvalReport& report, const std::set<std::string>& overlap);

}  // namespace masr::eval
