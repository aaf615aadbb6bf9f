#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "morpheus/neural.hpp"
#include "morpheus/tensor.hpp"

namespace morpheus::predictor {

// Shared hidden layer (d -> 2d, GELU) feeding M independent heads of N logits.
class CodeClassifier : public nn::Module {
 public:
  CodeClassifier(std::size_t d, std::size_t codes, std::size_t heads, std::uint64_t seed);

  std::size_t codes() const { return codes_; }
  std::size_t heads() const { return heads_.size(); }
  std::size_t input_dim() const { return input_dim_; }

  // c is 1 x d; result is M x N, one row per head in slot order.
  nn::Var logits(const nn::Var& c) const;

 private:
  std::size_t input_dim_;
  std::size_t codes_;
  nn::Var w1_, b1_;
  std::vector<nn::Var> heads_;
  std::vector<nn::Var> head_bias_;
};

struct CodePrediction {
  std::size_t index = 0;
  double probability = 0.0;
};

// Mean over heads of the softmax cross-entropy of each head's label.
nn::Var classifier_loss(const nn::Var& logits, std::span<const int> labels);
nn::Var classifier_loss(const CodeClassifier& classifier, const nn::Var& c,
                        std::span<const int> labels);

// Per row: argmax (lowest index on ties) with its softmax probability.
std::vector<CodePrediction> predict_from_logits(const nn::Matrix& logits);
std::vector<CodePrediction> predict_codes(const CodeClassifier& classifier,
                                          std::span<const double> c);

struct LabeledState {
  std::vector<double> c;
  std::vector<int> labels;
};

struct Accuracy {
  std::vector<double> per_slot;
  double overall = 0.0;
};

Accuracy prediction_accuracy(const CodeClassifier& classifier, const std::vector<LabeledState>& data);
// Same, over precomputed predictions aligned with the label rows.
Accuracy prediction_accuracy(const std::vector<std::vector<CodePrediction>>& predictions,
                             const std::vector<std::vector<int>>& labels);

}  // namespace morpheus::predictor
