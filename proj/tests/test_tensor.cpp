#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <numeric>

#include "morpheus/tensor.hpp"
#include "support.hpp"

using namespace morpheus;
using namespace morpheus::nn;

namespace {

// Central differences over every coordinate of every input; returns the
// largest relative error against the analytic gradient.
double max_grad_error(const std::function<Var(const std::vector<Var>&)>& f, std::vector<Matrix> inputs,
                      double eps = 1e-5) {
  std::vector<Var> vars;
  for (auto& m : inputs) vars.emplace_back(m, true);
  backward(f(vars));
  double worst = 0.0;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const Matrix analytic = vars[i].grad();
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      auto eval = [&](double delta) {
        std::vector<Var> probe;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          Matrix m = inputs[k];
          if (k == i) m.data[j] += delta;
          probe.emplace_back(m, false);
        }
        return f(probe).item();
      };
      const double numeric = (eval(eps) - eval(-eps)) / (2 * eps);
      const double a = analytic.data[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("snap_to_float rounds to the float grid") {
  Matrix m(1, 3);
  m.data = {0.1, 1.0 / 3.0, -2.5};
  snap_to_float(m);
  CHECK(m.data[0] == static_cast<double>(0.1f));
  CHECK(m.data[1] == static_cast<double>(1.0f / 3.0f));
  CHECK(m.data[2] == -2.5);
}

TEST_CASE("elementwise and matrix products match hand values") {
  const Var a(Matrix::from_rows({{1, 2}, {3, 4}}));
  const Var b(Matrix::from_rows({{5, 6}, {7, 8}}));
  CHECK(matmul(a, b).value() == Matrix::from_rows({{19, 22}, {43, 50}}));
  CHECK(matmul_nt(a, b).value() == Matrix::from_rows({{17, 23}, {39, 53}}));
  CHECK(mul(a, b).value() == Matrix::from_rows({{5, 12}, {21, 32}}));
  CHECK(sum(a).item() == 10.0);
  CHECK(square_norm(a).item() == 30.0);
  CHECK(mean_rows(a).value() == Matrix::from_rows({{2, 3}}));
}

TEST_CASE("shape mismatches are rejected") {
  const Var a(Matrix(2, 3));
  const Var b(Matrix(3, 2));
  CHECK_THROWS(add(a, b));
  CHECK_THROWS(matmul(a, a));
}

TEST_CASE("softmax and log_sum_exp are stable for large logits") {
  const std::vector<double> big{1000.0, 1000.0};
  const auto p = softmax(big);
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(log_sum_exp(big) == doctest::Approx(1000.0 + std::log(2.0)));
  const auto q = softmax(std::vector<double>{std::log(0.6), std::log(0.3), std::log(0.1)});
  CHECK(q[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(q[2] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("cross_entropy of uniform logits is ln V") {
  const Var logits(Matrix(3, 5, 0.7));
  const std::vector<std::int32_t> targets{0, 2, 4};
  CHECK(cross_entropy(logits, targets).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("detach blocks the gradient but keeps the value") {
  Var x(Matrix::from_rows({{2.0}}), true);
  const Var y = add(mul(x, x), detach(mul(x, x)));
  CHECK(y.item() == 8.0);
  backward(y);
  CHECK(x.grad().data[0] == doctest::Approx(4.0));
}

TEST_CASE("gradients accumulate across uses of one leaf") {
  Var x(Matrix::from_rows({{3.0}}), true);
  backward(add(scale(x, 2.0), scale(x, 5.0)));
  CHECK(x.grad().data[0] == doctest::Approx(7.0));
}

TEST_CASE("NoGradGuard records nothing") {
  Var x(Matrix::from_rows({{1.0}}), true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    const Var y = scale(x, 3.0);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("finite differences agree with every differentiable op") {
  Rng rng(3);
  const auto A = testing::random_matrix(3, 4, rng);
  const auto B = testing::random_matrix(4, 2, rng);
  const auto C = testing::random_matrix(3, 4, rng);
  const auto row = testing::random_matrix(1, 4, rng);
  const auto D = testing::random_matrix(2, 4, rng);

  SUBCASE("matmul") {
    CHECK(max_grad_error([](const auto& v) { return sum(matmul(v[0], v[1])); }, {A, B}) < 1e-6);
  }
  SUBCASE("matmul_nt") {
    CHECK(max_grad_error([](const auto& v) { return square_norm(matmul_nt(v[0], v[1])); }, {A, D}) < 1e-6);
  }
  SUBCASE("mul, sub, add_row") {
    CHECK(max_grad_error([](const auto& v) { return square_norm(add_row(sub(mul(v[0], v[1]), v[0]), v[2])); },
                         {A, C, row}) < 1e-6);
  }
  SUBCASE("gelu") {
    CHECK(max_grad_error([](const auto& v) { return sum(gelu(v[0])); }, {A}) < 1e-6);
  }
  SUBCASE("layer_norm") {
    auto gain = testing::random_matrix(1, 4, rng);
    CHECK(max_grad_error([](const auto& v) { return square_norm(mul(layer_norm(v[0], v[1], v[2]), v[3])); },
                         {A, gain, row, C}) < 1e-5);
  }
  SUBCASE("slice, concat, mean") {
    CHECK(max_grad_error(
              [](const auto& v) {
                const std::vector<Var> parts{slice_rows(v[0], 1, 2), v[1]};
                return square_norm(mean_rows(concat_rows(parts)));
              },
              {A, D}) < 1e-6);
  }
  SUBCASE("embedding") {
    const std::vector<std::int32_t> ids{2, 0, 2};
    CHECK(max_grad_error([&](const auto& v) { return square_norm(embedding(v[0], ids)); }, {A}) < 1e-6);
  }
  SUBCASE("cross_entropy") {
    const std::vector<std::int32_t> targets{1, 3, 0};
    CHECK(max_grad_error([&](const auto& v) { return cross_entropy(v[0], targets); }, {A}) < 1e-6);
  }
  SUBCASE("causal attention with a prefix") {
    const auto q = testing::random_matrix(3, 4, rng);
    const auto pk = testing::random_matrix(2, 4, rng);
    const auto pv = testing::random_matrix(2, 4, rng);
    CHECK(max_grad_error(
              [](const auto& v) {
                AttentionPrefix prefix{&v[3], &v[4]};
                return square_norm(attention(v[0], v[1], v[2], 2, true, prefix));
              },
              {q, A, C, pk, pv}) < 1e-5);
  }
}

TEST_CASE("attention with zero prefix values equals attention without prefix") {
  Rng rng(5);
  const Var q(testing::random_matrix(3, 4, rng));
  const Var k(testing::random_matrix(3, 4, rng));
  const Var v(testing::random_matrix(3, 4, rng));
  const Var pk(testing::random_matrix(2, 4, rng));
  const Var pv(Matrix(2, 4));
  const auto plain = attention(q, k, v, 2, true).value();
  const auto prefixed = attention(q, k, v, 2, true, {&pk, &pv}).value();
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(prefixed.data[i] == doctest::Approx(plain.data[i]));
}

TEST_CASE("causal attention ignores future positions") {
  Rng rng(9);
  const Var q(testing::random_matrix(3, 4, rng));
  Matrix km = testing::random_matrix(3, 4, rng), vm = testing::random_matrix(3, 4, rng);
  const auto before = attention(q, Var(km), Var(vm), 2, true).value();
  for (std::size_t c = 0; c < 4; ++c) {
    km(2, c) += 10.0;
    vm(2, c) -= 7.0;
  }
  const auto after = attention(q, Var(km), Var(vm), 2, true).value();
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(after(r, c) == doctest::Approx(before(r, c)));
  }
}

TEST_CASE("dropout at rate 0 is the identity and otherwise preserves the mean") {
  Rng rng(1);
  const Var x(Matrix(1, 20000, 1.0));
  CHECK(dropout(x, 0.0, rng).value() == x.value());
  const auto y = dropout(x, 0.25, rng).value();
  const double mean = std::accumulate(y.data.begin(), y.data.end(), 0.0) / static_cast<double>(y.size());
  CHECK(mean == doctest::Approx(1.0).epsilon(0.03));
}
