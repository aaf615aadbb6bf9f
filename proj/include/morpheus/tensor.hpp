#pragma once

// Reverse-mode automatic differentiation over row-major 2-D matrices of
// doubles. A Var is a handle to a graph node; operations record their inputs
// and a backward closure while gradient recording is enabled.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "morpheus/random.hpp"

namespace morpheus::nn {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> values);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool operator==(const Matrix&) const = default;
};

// Rounds every entry to the nearest 32-bit float. Parameters live on this grid
// so checkpoints (32-bit tensors) restore them exactly.
void snap_to_float(Matrix& m);

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix& ensure_grad() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows, value.cols);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Zero matrix of the value's shape when no gradient has been accumulated.
  Matrix grad() const;
  bool has_grad() const { return node_->grad.same_shape(node_->value); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad = Matrix(); }

  std::size_t rows() const { return node_->value.rows; }
  std::size_t cols() const { return node_->value.cols; }
  double item() const;
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward);
  std::shared_ptr<Node> node_;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
void backward(const Var& loss);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds a result node; `backward` reads node.grad and accumulates into the
// parents (node.parents[i] matches inputs[i]). Recording is skipped when no
// input requires grad or recording is disabled.
Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward);

Var constant(Matrix value);
Var scalar(double value);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
// Adds a 1 x cols row to every row.
Var add_row(const Var& a, const Var& bias);
Var gelu(const Var& a);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var embedding(const Var& table, std::span<const std::int32_t> ids);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var mean_rows(const Var& a);
Var sum(const Var& a);
Var square_norm(const Var& a);
// Identity forward, zero derivative.
Var detach(const Var& a);
// Mean over rows of -log softmax(logits)[target].
Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets);
// Inverted dropout; identity when rate == 0.
Var dropout(const Var& a, double rate, Rng& rng);

// Multi-head scaled dot-product attention over projected q, k, v (T x d).
// Optional prefix keys/values (P x d) are attended with their own softmax
// and the result added, so zero prefix values contribute nothing.
struct AttentionPrefix {
  const Var* keys = nullptr;
  const Var* values = nullptr;
};
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, bool causal,
              AttentionPrefix prefix = {});

// Numerically stable softmax of one row.
std::vector<double> softmax(std::span<const double> logits);
double log_sum_exp(std::span<const double> values);

}  // namespace morpheus::nn
