#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "morpheus/errors.hpp"
#include "morpheus/predictor.hpp"
#include "support.hpp"

using namespace morpheus;
using namespace morpheus::predictor;
using nn::Matrix;
using nn::Var;

TEST_CASE("classifier_loss examples") {
  const std::vector<int> label0{0};
  CHECK(classifier_loss(Var(Matrix(1, 100, 0.3)), label0).item() == doctest::Approx(std::log(100.0)).epsilon(1e-12));

  const Var sure(Matrix::from_rows({{0.0, 800.0, 0.0}}));
  const std::vector<int> label1{1};
  CHECK(classifier_loss(sure, label1).item() == doctest::Approx(0.0));

  const Var two(Matrix::from_rows({{900.0, 0.0}, {1.0, 1.0}}));
  const std::vector<int> labels{0, 1};
  CHECK(classifier_loss(two, labels).item() == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("classifier_loss rejects bad labels") {
  const Var logits(Matrix(2, 3));
  const std::vector<int> out_of_range{0, 3};
  const std::vector<int> negative{-1, 0};
  const std::vector<int> too_few{0};
  CHECK_THROWS_AS(classifier_loss(logits, out_of_range), UsageError);
  CHECK_THROWS_AS(classifier_loss(logits, negative), UsageError);
  CHECK_THROWS_AS(classifier_loss(logits, too_few), UsageError);
}

TEST_CASE("predict_from_logits examples") {
  const auto p = predict_from_logits(Matrix::from_rows({{2, 1, 0}, {5, 5, 5}}));
  REQUIRE(p.size() == 2u);
  const double e = std::exp(1.0);
  CHECK(p[0].index == 0u);
  CHECK(p[0].probability == doctest::Approx(e * e / (e * e + e + 1)).epsilon(1e-12));
  CHECK(p[0].probability == doctest::Approx(0.6652).epsilon(1e-4));
  CHECK(p[1].index == 0u);
  CHECK(p[1].probability == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("predict_codes returns one prediction per head, argmax-consistent under shifts") {
  Rng rng(2);
  const CodeClassifier clf(8, 10, 4, 3);
  CHECK(clf.heads() == 4u);
  CHECK(clf.parameters().size() == 2u + 2u * 4u);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = testing::random_vector(8, rng);
    const auto preds = predict_codes(clf, c);
    CHECK(preds.size() == 4u);
    Matrix logits = clf.logits(Var(Matrix::row_vector(c))).value();
    for (std::size_t h = 0; h < logits.rows; ++h) {
      double total = 0.0;
      for (double x : nn::softmax(logits.row(h))) total += x;
      CHECK(std::abs(total - 1.0) <= 1e-9);
      const double shift = normal(rng, 0.0, 50.0);
      for (double& x : logits.row(h)) x += shift;
    }
    const auto shifted = predict_from_logits(logits);
    for (std::size_t h = 0; h < 4; ++h) CHECK(shifted[h].index == preds[h].index);
  }
}

TEST_CASE("classifier gradients match finite differences") {
  const CodeClassifier clf(6, 5, 3, 9);
  Rng rng(4);
  const Var c(testing::random_matrix(1, 6, rng), true);
  const std::vector<int> labels{4, 0, 2};
  auto params = clf.parameters();
  params.push_back({"c", c});
  const auto report = neural::gradcheck([&] { return classifier_loss(clf, c, labels); }, params, 1e-4, 1e-4, 6, 1);
  INFO(report.worst_parameter << " " << report.max_relative_error);
  CHECK(report.passed);
}

TEST_CASE("prediction_accuracy") {
  const std::vector<std::vector<CodePrediction>> preds{{{1, 0.9}, {2, 0.5}}, {{0, 0.4}, {3, 0.6}}};
  const auto acc = prediction_accuracy(preds, {{1, 2}, {0, 1}});
  CHECK(acc.per_slot == std::vector<double>{1.0, 0.5});
  CHECK(acc.overall == doctest::Approx(0.75));

  const std::vector<std::vector<CodePrediction>> one{{{1, 1.0}}};
  CHECK(prediction_accuracy(one, {{0}}).overall == 0.0);
  CHECK_THROWS_AS(prediction_accuracy(std::vector<std::vector<CodePrediction>>{}, {}), UsageError);
  CHECK_THROWS_AS(prediction_accuracy(CodeClassifier(4, 3, 1, 0), {}), UsageError);
}

TEST_CASE("a classifier scoring its own predictions is exact, a random one is near chance") {
  Rng rng(6);
  const CodeClassifier clf(8, 100, 2, 12);
  std::vector<LabeledState> own, balanced;
  for (int i = 0; i < 2000; ++i) {
    const auto c = testing::random_vector(8, rng);
    const auto p = predict_codes(clf, c);
    own.push_back({c, {static_cast<int>(p[0].index), static_cast<int>(p[1].index)}});
    balanced.push_back({c, {i % 100, (i * 7) % 100}});
  }
  CHECK(prediction_accuracy(clf, own).overall == 1.0);
  // Monte Carlo bound: 4000 Bernoulli(0.01) trials, five standard deviations.
  const double acc = prediction_accuracy(clf, balanced).overall;
  CHECK(std::abs(acc - 0.01) < 5.0 * std::sqrt(0.01 * 0.99 / 4000.0));
}

TEST_CASE("training the classifier on fixed labels drives the loss down") {
  Rng rng(8);
  CodeClassifier clf(4, 3, 1, 2);
  std::vector<Var> inputs;
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) {
    inputs.emplace_back(testing::random_matrix(1, 4, rng));
    labels.push_back(i % 3);
  }
  auto total = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const std::vector<int> l{labels[i]};
      s += classifier_loss(clf, inputs[i], l).item();
    }
    return s;
  };
  const double before = total();
  for (int step = 0; step < 200; ++step) {
    clf.zero_grad();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const std::vector<int> l{labels[i]};
      nn::backward(classifier_loss(clf, inputs[i], l));
    }
    for (const auto& p : clf.parameters()) {
      auto& v = const_cast<Var&>(p.var).mutable_value();
      const auto g = p.var.grad();
      for (std::size_t j = 0; j < v.size(); ++j) v.data[j] -= 0.05 * g.data[j];
    }
  }
  CHECK(total() < 0.5 * before);
}
