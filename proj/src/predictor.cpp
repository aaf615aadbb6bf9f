#include "morpheus/predictor.hpp"

#include <cmath>
#include <string>

#include "morpheus/errors.hpp"

namespace morpheus::predictor {

using nn::Matrix;
using nn::Var;

CodeClassifier::CodeClassifier(std::size_t d, std::size_t codes, std::size_t heads,
                               std::uint64_t seed)
    : input_dim_(d), codes_(codes) {
  if (d == 0 || codes == 0 || heads == 0) throw UsageError("classifier: sizes must be >= 1");
  Rng rng(seed);
  const std::size_t hidden = 2 * d;
  w1_ = add_parameter("classifier.w1", nn::random_normal(d, hidden, 1.0 / std::sqrt(double(d)), rng));
  b1_ = add_parameter("classifier.b1", Matrix(1, hidden));
  for (std::size_t m = 0; m < heads; ++m) {
    const std::string prefix = "classifier.head" + std::to_string(m);
    heads_.push_back(add_parameter(prefix + ".w",
                                   nn::random_normal(hidden, codes, 1.0 / std::sqrt(double(hidden)), rng)));
    head_bias_.push_back(add_parameter(prefix + ".b", Matrix(1, codes)));
  }
}

Var CodeClassifier::logits(const Var& c) const {
  if (c.rows() != 1 || c.cols() != input_dim_) throw UsageError("classifier: input must be 1 x d");
  const Var h = nn::gelu(nn::add_row(nn::matmul(c, w1_), b1_));
  std::vector<Var> rows;
  rows.reserve(heads_.size());
  for (std::size_t m = 0; m < heads_.size(); ++m) {
    rows.push_back(nn::add_row(nn::matmul(h, heads_[m]), head_bias_[m]));
  }
  return nn::concat_rows(rows);
}

Var classifier_loss(const Var& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw UsageError("classifier_loss: one label per head required");
  for (int k : labels) {
    if (k < 0 || static_cast<std::size_t>(k) >= logits.cols()) {
      throw UsageError("classifier_loss: label " + std::to_string(k) + " out of range");
    }
  }
  std::vector<std::int32_t> targets(labels.begin(), labels.end());
  return nn::cross_entropy(logits, targets);
}

Var classifier_loss(const CodeClassifier& classifier, const Var& c, std::span<const int> labels) {
  return classifier_loss(classifier.logits(c), labels);
}

std::vector<CodePrediction> predict_from_logits(const Matrix& logits) {
  std::vector<CodePrediction> out;
  out.reserve(logits.rows);
  for (std::size_t m = 0; m < logits.rows; ++m) {
    const auto row = logits.row(m);
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k) {
      if (row[k] > row[best]) best = k;
    }
    const auto probs = nn::softmax(row);
    out.push_back({best, probs[best]});
  }
  return out;
}

std::vector<CodePrediction> predict_codes(const CodeClassifier& classifier, std::span<const double> c) {
  nn::NoGradGuard guard;
  return predict_from_logits(classifier.logits(nn::constant(Matrix::row_vector(c))).value());
}

Accuracy prediction_accuracy(const std::vector<std::vector<CodePrediction>>& predictions,
                             const std::vector<std::vector<int>>& labels) {
  if (predictions.empty()) throw UsageError("prediction_accuracy: empty dataset");
  if (predictions.size() != labels.size()) throw UsageError("prediction_accuracy: size mismatch");
  const std::size_t slots = labels.front().size();
  Accuracy acc;
  acc.per_slot.assign(slots, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() != slots || predictions[i].size() != slots) {
      throw UsageError("prediction_accuracy: inconsistent slot count");
    }
    for (std::size_t m = 0; m < slots; ++m) {
      if (predictions[i][m].index == static_cast<std::size_t>(labels[i][m])) acc.per_slot[m] += 1.0;
    }
  }
  for (double& a : acc.per_slot) {
    a /= static_cast<double>(labels.size());
    acc.overall += a;
  }
  acc.overall /= static_cast<double>(slots);
  return acc;
}

Accuracy prediction_accuracy(const CodeClassifier& classifier, const std::vector<LabeledState>& data) {
  if (data.empty()) throw UsageError("prediction_accuracy: empty dataset");
  std::vector<std::vector<CodePrediction>> preds;
  std::vector<std::vector<int>> labels;
  for (const auto& item : data) {
    preds.push_back(predict_codes(classifier, item.c));
    labels.push_back(item.labels);
  }
  return prediction_accuracy(preds, labels);
}

}  // namespace morpheus::predictor
