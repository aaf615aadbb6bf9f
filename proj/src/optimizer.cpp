#include "morpheus/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "morpheus/errors.hpp"

namespace morpheus::trainer {

double Adam::current_rate() const {
  const double lr = options_.learning_rate;
  if (options_.warmup_steps <= 0) return lr;
  const double frac = static_cast<double>(steps_ + 1) / static_cast<double>(options_.warmup_steps);
  return lr * std::min(1.0, frac);
}

double Adam::step(const std::vector<nn::NamedParameter>& parameters) {
  double sq = 0.0;
  for (const auto& p : parameters) {
    if (!p.var.requires_grad() || !p.var.has_grad()) continue;
    for (double g : p.var.node()->grad.data) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("optimizer: non-finite gradient");
  const double clip =
      (options_.clip_norm > 0.0 && norm > options_.clip_norm) ? options_.clip_norm / norm : 1.0;

  const double lr = current_rate();
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(options_.beta1, t);
  const double c2 = 1.0 - std::pow(options_.beta2, t);

  for (const auto& p : parameters) {
    if (!p.var.requires_grad() || !p.var.has_grad()) continue;
    auto& node = *p.var.node();
    auto& m = m_[p.name];
    auto& v = v_[p.name];
    if (!m.same_shape(node.value)) m = nn::Matrix(node.value.rows, node.value.cols);
    if (!v.same_shape(node.value)) v = nn::Matrix(node.value.rows, node.value.cols);
    for (std::size_t i = 0; i < node.value.size(); ++i) {
      const double g = node.grad.data[i] * clip;
      m.data[i] = options_.beta1 * m.data[i] + (1.0 - options_.beta1) * g;
      v.data[i] = options_.beta2 * v.data[i] + (1.0 - options_.beta2) * g * g;
    }
    nn::snap_to_float(m);
    nn::snap_to_float(v);
    for (std::size_t i = 0; i < node.value.size(); ++i) {
      const double mh = m.data[i] / c1;
      const double vh = v.data[i] / c2;
      node.value.data[i] -= lr * mh / (std::sqrt(vh) + options_.epsilon);
    }
    nn::snap_to_float(node.value);
  }
  return norm;
}

}  // namespace morpheus::trainer
