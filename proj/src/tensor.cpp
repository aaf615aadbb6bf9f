#include "morpheus/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "morpheus/errors.hpp"

namespace morpheus::nn {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool ok, const char* what) {
  if (!ok) throw UsageError(std::string("tensor shape error: ") + what);
}

// Accumulates into parent i when it participates in differentiation.
Matrix* parent_grad(Node& node, std::size_t i) {
  auto& p = node.parents[i];
  if (!p || !p->requires_grad) return nullptr;
  return &p->ensure_grad();
}

}  // namespace

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m;
  m.rows = rows.size();
  m.cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    require(r.size() == m.cols, "ragged initializer");
    m.data.insert(m.data.end(), r.begin(), r.end());
  }
  return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
  Matrix m(1, values.size());
  std::copy(values.begin(), values.end(), m.data.begin());
  return m;
}

void snap_to_float(Matrix& m) {
  for (double& x : m.data) x = static_cast<double>(static_cast<float>(x));
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Var::grad() const {
  if (has_grad()) return node_->grad;
  return Matrix(node_->value.rows, node_->value.cols);
}

double Var::item() const {
  require(node_ && node_->value.size() == 1, "item() on non-scalar");
  return node_->value.data[0];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  Var out(std::move(value));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(inputs.size());
  for (auto& in : inputs) out.node_->parents.push_back(in.node_);
  out.node_->backward = std::move(backward_fn);
  return out;
}

void backward(const Var& loss) {
  require(loss.defined() && loss.value().size() == 1, "backward() needs a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; `order` ends up in topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.same_shape(n->value)) {
      n->backward(*n);
      n->grad = Matrix();  // interior gradients are not needed afterwards
    }
  }
}

Var constant(Matrix value) { return Var(std::move(value), false); }

Var scalar(double value) { return constant(Matrix(1, 1, value)); }

Var add(const Var& a, const Var& b) {
  require(a.value().same_shape(b.value()), "add");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (Matrix* g = parent_grad(n, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += n.grad.data[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.value().same_shape(b.value()), "sub");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (Matrix* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += n.grad.data[i];
    }
    if (Matrix* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] -= n.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.value().same_shape(b.value()), "mul");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    const Matrix& av = n.parents[0]->value;
    const Matrix& bv = n.parents[1]->value;
    if (Matrix* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += n.grad.data[i] * bv.data[i];
    }
    if (Matrix* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += n.grad.data[i] * av.data[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  Matrix out = a.value();
  for (double& x : out.data) x *= factor;
  return make_result(std::move(out), {a}, [factor](Node& n) {
    if (Matrix* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += factor * n.grad.data[i];
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.cols == B.rows, "matmul");
  Matrix C(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    double* c = C.data.data() + i * C.cols;
    for (std::size_t p = 0; p < A.cols; ++p) {
      const double aip = A.data[i * A.cols + p];
      if (aip == 0.0) continue;
      const double* brow = B.data.data() + p * B.cols;
      for (std::size_t j = 0; j < B.cols; ++j) c[j] += aip * brow[j];
    }
  }
  return make_result(std::move(C), {a, b}, [](Node& n) {
    const Matrix& A = n.parents[0]->value;
    const Matrix& B = n.parents[1]->value;
    const Matrix& G = n.grad;
    if (Matrix* gA = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < A.rows; ++i) {
        const double* grow = G.data.data() + i * G.cols;
        for (std::size_t p = 0; p < A.cols; ++p) {
          const double* brow = B.data.data() + p * B.cols;
          double acc = 0.0;
          for (std::size_t j = 0; j < B.cols; ++j) acc += grow[j] * brow[j];
          gA->data[i * A.cols + p] += acc;
        }
      }
    }
    if (Matrix* gB = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < A.rows; ++i) {
        const double* grow = G.data.data() + i * G.cols;
        for (std::size_t p = 0; p < A.cols; ++p) {
          const double aip = A.data[i * A.cols + p];
          if (aip == 0.0) continue;
          double* gb = gB->data.data() + p * B.cols;
          for (std::size_t j = 0; j < B.cols; ++j) gb[j] += aip * grow[j];
        }
      }
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.cols == B.cols, "matmul_nt");
  Matrix C(A.rows, B.rows);
  for (std::size_t i = 0; i < A.rows; ++i) {
    const double* arow = A.data.data() + i * A.cols;
    for (std::size_t j = 0; j < B.rows; ++j) {
      const double* brow = B.data.data() + j * B.cols;
      double acc = 0.0;
      for (std::size_t p = 0; p < A.cols; ++p) acc += arow[p] * brow[p];
      C.data[i * C.cols + j] = acc;
    }
  }
  return make_result(std::move(C), {a, b}, [](Node& n) {
    const Matrix& A = n.parents[0]->value;
    const Matrix& B = n.parents[1]->value;
    const Matrix& G = n.grad;
    Matrix* gA = parent_grad(n, 0);
    Matrix* gB = parent_grad(n, 1);
    for (std::size_t i = 0; i < A.rows; ++i) {
      for (std::size_t j = 0; j < B.rows; ++j) {
        const double g = G.data[i * G.cols + j];
        if (g == 0.0) continue;
        if (gA) {
          double* ga = gA->data.data() + i * A.cols;
          const double* brow = B.data.data() + j * B.cols;
          for (std::size_t p = 0; p < A.cols; ++p) ga[p] += g * brow[p];
        }
        if (gB) {
          double* gb = gB->data.data() + j * B.cols;
          const double* arow = A.data.data() + i * A.cols;
          for (std::size_t p = 0; p < A.cols; ++p) gb[p] += g * arow[p];
        }
      }
    }
  });
}

Var add_row(const Var& a, const Var& bias) {
  const Matrix& A = a.value();
  const Matrix& b = bias.value();
  require(b.rows == 1 && b.cols == A.cols, "add_row");
  Matrix out = A;
  for (std::size_t i = 0; i < A.rows; ++i) {
    for (std::size_t j = 0; j < A.cols; ++j) out.data[i * A.cols + j] += b.data[j];
  }
  return make_result(std::move(out), {a, bias}, [](Node& n) {
    const Matrix& G = n.grad;
    if (Matrix* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < G.size(); ++i) g->data[i] += G.data[i];
    }
    if (Matrix* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < G.rows; ++i) {
        for (std::size_t j = 0; j < G.cols; ++j) g->data[j] += G.data[i * G.cols + j];
      }
    }
  });
}

Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  Matrix out = a.value();
  for (double& x : out.data) x = 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x)));
  return make_result(std::move(out), {a}, [](Node& n) {
    if (Matrix* g = parent_grad(n, 0)) {
      const Matrix& X = n.parents[0]->value;
      for (std::size_t i = 0; i < X.size(); ++i) {
        const double x = X.data[i];
        const double t = std::tanh(k * (x + c * x * x * x));
        const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
        g->data[i] += n.grad.data[i] * d;
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Matrix& X = x.value();
  require(gain.rows() == 1 && gain.cols() == X.cols && bias.cols() == X.cols, "layer_norm");
  const std::size_t d = X.cols;
  Matrix xhat(X.rows, d);
  std::vector<double> inv_std(X.rows);
  Matrix out(X.rows, d);
  for (std::size_t i = 0; i < X.rows; ++i) {
    const auto row = X.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (row[j] - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * gain.value().data[j] + bias.value().data[j];
    }
  }
  return make_result(std::move(out), {x, gain, bias},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), d](Node& n) {
    const Matrix& G = n.grad;
    const Matrix& gamma = n.parents[1]->value;
    Matrix* gx = parent_grad(n, 0);
    Matrix* gg = parent_grad(n, 1);
    Matrix* gb = parent_grad(n, 2);
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < G.rows; ++i) {
      double mean_d = 0.0;
      double mean_dx = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double g = G(i, j);
        if (gg) gg->data[j] += g * xhat(i, j);
        if (gb) gb->data[j] += g;
        dxhat[j] = g * gamma.data[j];
        mean_d += dxhat[j];
        mean_dx += dxhat[j] * xhat(i, j);
      }
      if (!gx) continue;
      mean_d /= static_cast<double>(d);
      mean_dx /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        (*gx)(i, j) += inv_std[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
      }
    }
  });
}

Var embedding(const Var& table, std::span<const std::int32_t> ids) {
  const Matrix& E = table.value();
  Matrix out(ids.size(), E.cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < E.rows, "embedding id out of range");
    const auto src = E.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return make_result(std::move(out), {table}, [idx = std::move(idx)](Node& n) {
    if (Matrix* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto dst = g->row(static_cast<std::size_t>(idx[i]));
        const auto src = n.grad.row(i);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const Matrix& A = a.value();
  require(begin + count <= A.rows, "slice_rows");
  Matrix out(count, A.cols);
  std::copy(A.data.begin() + static_cast<std::ptrdiff_t>(begin * A.cols),
            A.data.begin() + static_cast<std::ptrdiff_t>((begin + count) * A.cols), out.data.begin());
  return make_result(std::move(out), {a}, [begin](Node& n) {
    if (Matrix* g = parent_grad(n, 0)) {
      const std::size_t off = begin * g->cols;
      for (std::size_t i = 0; i < n.grad.size(); ++i) g->data[off + i] += n.grad.data[i];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows of nothing");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), inputs, [](Node& n) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < n.parents.size(); ++p) {
      const std::size_t sz = n.parents[p]->value.size();
      if (Matrix* g = parent_grad(n, p)) {
        for (std::size_t i = 0; i < sz; ++i) g->data[i] += n.grad.data[off + i];
      }
      off += sz;
    }
  });
}

Var mean_rows(const Var& a) {
  const Matrix& A = a.value();
  require(A.rows > 0, "mean_rows of empty matrix");
  Matrix out(1, A.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    for (std::size_t j = 0; j < A.cols; ++j) out.data[j] += A(i, j);
  }
  const double inv = 1.0 / static_cast<double>(A.rows);
  for (double& v : out.data) v *= inv;
  return make_result(std::move(out), {a}, [inv](Node& n) {
    if (Matrix* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->rows; ++i) {
        for (std::size_t j = 0; j < g->cols; ++j) (*g)(i, j) += inv * n.grad.data[j];
      }
    }
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data) total += v;
  return make_result(Matrix(1, 1, total), {a}, [](Node& n) {
    if (Matrix* g = parent_grad(n, 0)) {
      for (double& v : g->data) v += n.grad.data[0];
    }
  });
}

Var square_norm(const Var& a) { return sum(mul(a, a)); }

Var detach(const Var& a) { return constant(a.value()); }

Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets) {
  const Matrix& L = logits.value();
  require(targets.size() == L.rows && L.rows > 0, "cross_entropy target count");
  Matrix probs(L.rows, L.cols);
  double total = 0.0;
  for (std::size_t i = 0; i < L.rows; ++i) {
    require(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < L.cols, "cross_entropy target range");
    const auto p = softmax(L.row(i));
    std::copy(p.begin(), p.end(), probs.row(i).begin());
    total += log_sum_exp(L.row(i)) - L(i, static_cast<std::size_t>(targets[i]));
  }
  const double inv = 1.0 / static_cast<double>(L.rows);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return make_result(Matrix(1, 1, total * inv), {logits},
                     [probs = std::move(probs), tgt = std::move(tgt), inv](Node& n) {
    if (Matrix* g = parent_grad(n, 0)) {
      const double s = n.grad.data[0] * inv;
      for (std::size_t i = 0; i < probs.rows; ++i) {
        for (std::size_t j = 0; j < probs.cols; ++j) {
          double d = probs(i, j);
          if (static_cast<std::int32_t>(j) == tgt[i]) d -= 1.0;
          (*g)(i, j) += s * d;
        }
      }
    }
  });
}

Var dropout(const Var& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  require(rate < 1.0, "dropout rate must be < 1");
  Matrix mask(a.rows(), a.cols());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask.data) m = uniform01(rng) < rate ? 0.0 : keep;
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask.data[i];
  return make_result(std::move(out), {a}, [mask = std::move(mask)](Node& n) {
    if (Matrix* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += n.grad.data[i] * mask.data[i];
    }
  });
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

double log_sum_exp(std::span<const double> values) {
  const double mx = *std::max_element(values.begin(), values.end());
  double z = 0.0;
  for (double v : values) z += std::exp(v - mx);
  return mx + std::log(z);
}

namespace {

// softmax(scale * q_row . keys[j]) for j < limit, over one head's columns.
void head_softmax(const double* q, const Matrix& keys, std::size_t offset, std::size_t dh,
                  std::size_t limit, double scale, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < limit; ++j) {
    const double* k = keys.data.data() + j * keys.cols + offset;
    double s = 0.0;
    for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
    out[j] = s * scale;
    mx = std::max(mx, out[j]);
  }
  double z = 0.0;
  for (std::size_t j = 0; j < limit; ++j) {
    out[j] = std::exp(out[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < limit; ++j) out[j] /= z;
}

void head_backward(const double* g, const double* q, const Matrix& keys, const Matrix& values,
                   std::size_t offset, std::size_t dh, std::size_t limit, double scale,
                   const double* probs, std::vector<double>& scratch, double* gq, Matrix* gk,
                   Matrix* gv) {
  double dot = 0.0;
  for (std::size_t j = 0; j < limit; ++j) {
    const double* v = values.data.data() + j * values.cols + offset;
    double da = 0.0;
    for (std::size_t c = 0; c < dh; ++c) da += g[c] * v[c];
    scratch[j] = da;
    dot += probs[j] * da;
    if (gv) {
      double* dv = gv->data.data() + j * gv->cols + offset;
      for (std::size_t c = 0; c < dh; ++c) dv[c] += probs[j] * g[c];
    }
  }
  for (std::size_t j = 0; j < limit; ++j) {
    const double ds = probs[j] * (scratch[j] - dot) * scale;
    if (ds == 0.0) continue;
    const double* k = keys.data.data() + j * keys.cols + offset;
    if (gq) {
      for (std::size_t c = 0; c < dh; ++c) gq[c] += ds * k[c];
    }
    if (gk) {
      double* dk = gk->data.data() + j * gk->cols + offset;
      for (std::size_t c = 0; c < dh; ++c) dk[c] += ds * q[c];
    }
  }
}

}  // namespace

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, bool causal,
              AttentionPrefix prefix) {
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  require(heads > 0 && Q.cols % heads == 0, "attention heads");
  require(K.rows == V.rows && K.cols == Q.cols && V.cols == Q.cols, "attention k/v shape");
  require(!causal || K.rows == Q.rows, "causal attention needs square scores");
  const bool has_prefix = prefix.keys && prefix.values;
  const std::size_t P = has_prefix ? prefix.keys->rows() : 0;
  if (has_prefix) {
    require(prefix.values->rows() == P && prefix.keys->cols() == Q.cols &&
                prefix.values->cols() == Q.cols,
            "attention prefix shape");
  }

  const std::size_t T = Q.rows;
  const std::size_t S = K.rows;
  const std::size_t dh = Q.cols / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(heads * T * S, 0.0);
  std::vector<double> pprobs(heads * T * P, 0.0);
  Matrix out(T, Q.cols);

  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < T; ++i) {
      const double* qi = Q.data.data() + i * Q.cols + off;
      double* o = out.data.data() + i * out.cols + off;
      const std::size_t limit = causal ? i + 1 : S;
      double* a = probs.data() + (h * T + i) * S;
      head_softmax(qi, K, off, dh, limit, scale, a);
      for (std::size_t j = 0; j < limit; ++j) {
        const double* vj = V.data.data() + j * V.cols + off;
        for (std::size_t c = 0; c < dh; ++c) o[c] += a[j] * vj[c];
      }
      if (has_prefix) {
        double* b = pprobs.data() + (h * T + i) * P;
        head_softmax(qi, prefix.keys->value(), off, dh, P, scale, b);
        const Matrix& PV = prefix.values->value();
        for (std::size_t m = 0; m < P; ++m) {
          const double* vm = PV.data.data() + m * PV.cols + off;
          for (std::size_t c = 0; c < dh; ++c) o[c] += b[m] * vm[c];
        }
      }
    }
  }

  std::vector<Var> inputs{q, k, v};
  if (has_prefix) {
    inputs.push_back(*prefix.keys);
    inputs.push_back(*prefix.values);
  }
  return make_result(std::move(out), inputs,
                     [probs = std::move(probs), pprobs = std::move(pprobs), heads, causal, T, S,
                      P, dh, scale](Node& n) {
    const Matrix& Q = n.parents[0]->value;
    const Matrix& K = n.parents[1]->value;
    const Matrix& V = n.parents[2]->value;
    Matrix* gq = parent_grad(n, 0);
    Matrix* gk = parent_grad(n, 1);
    Matrix* gv = parent_grad(n, 2);
    Matrix* gpk = P ? parent_grad(n, 3) : nullptr;
    Matrix* gpv = P ? parent_grad(n, 4) : nullptr;
    std::vector<double> scratch(std::max(S, P));
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < T; ++i) {
        const double* g = n.grad.data.data() + i * n.grad.cols + off;
        const double* qi = Q.data.data() + i * Q.cols + off;
        double* dq = gq ? gq->data.data() + i * gq->cols + off : nullptr;
        const std::size_t limit = causal ? i + 1 : S;
        head_backward(g, qi, K, V, off, dh, limit, scale, probs.data() + (h * T + i) * S, scratch,
                      dq, gk, gv);
        if (P) {
          head_backward(g, qi, n.parents[3]->value, n.parents[4]->value, off, dh, P, scale,
                        pprobs.data() + (h * T + i) * P, scratch, dq, gpk, gpv);
        }
      }
    }
  });
}

}  // namespace morpheus::nn
