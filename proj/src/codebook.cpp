#include "morpheus/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "morpheus/errors.hpp"

namespace morpheus::codebook {

using nn::Matrix;
using nn::Var;

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

double norm(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

void require_finite(const Matrix& m, const char* what) {
  for (double x : m.data) {
    if (!std::isfinite(x)) throw NumericalError(std::string(what) + ": non-finite input");
  }
}

Matrix random_codes(std::size_t n, std::size_t d, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix m(n, d);
  for (double& x : m.data) x = uniform(rng, -bound, bound);
  return m;
}

constexpr char kCodebookMagic[4] = {'M', 'P', 'C', 'B'};
constexpr std::uint32_t kCodebookVersion = 1;

}  // namespace

std::string to_string(InitStrategy strategy) {
  switch (strategy) {
    case InitStrategy::random: return "random";
    case InitStrategy::sequential: return "sequential";
    case InitStrategy::average: return "average";
    case InitStrategy::em: return "em";
  }
  return "unknown";
}

InitStrategy parse_init_strategy(std::string_view name) {
  if (name == "random") return InitStrategy::random;
  if (name == "sequential") return InitStrategy::sequential;
  if (name == "average") return InitStrategy::average;
  if (name == "em") return InitStrategy::em;
  throw UsageError("unknown codebook init strategy: " + std::string(name));
}

PersonaCodebook::PersonaCodebook(Matrix codes, InitStrategy strategy, std::uint64_t seed)
    : strategy_(strategy), seed_(seed) {
  if (codes.rows == 0 || codes.cols == 0) throw UsageError("codebook: N and d must be >= 1");
  require_finite(codes, "codebook");
  nn::snap_to_float(codes);
  usage_.assign(codes.rows, 0);
  codes_ = Var(std::move(codes), true);
}

void PersonaCodebook::set_codes(Matrix codes) {
  if (!codes.same_shape(codes_.value())) throw UsageError("codebook: shape mismatch");
  nn::snap_to_float(codes);
  codes_.mutable_value() = std::move(codes);
}

void PersonaCodebook::set_usage_counts(std::vector<std::uint64_t> counts) {
  if (counts.size() != usage_.size()) throw DataError("codebook: usage count size mismatch");
  usage_ = std::move(counts);
}

CodeMatch find_nearest(std::span<const double> p, const Matrix& codes) {
  if (p.size() != codes.cols) throw UsageError("nearest_code: dimension mismatch");
  CodeMatch best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t k = 0; k < codes.rows; ++k) {
    const double d2 = squared_distance(p, codes.row(k));
    if (d2 < best.distance) best = {k, d2};
  }
  best.distance = std::sqrt(best.distance);
  return best;
}

CodeMatch nearest_code(std::span<const double> p, PersonaCodebook& codebook) {
  const CodeMatch m = find_nearest(p, codebook.codes());
  codebook.record_use(m.index);
  return m;
}

PersonaCodebook init_random(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return PersonaCodebook(random_codes(n, d, rng), InitStrategy::random, seed);
}

PersonaCodebook init_sequential(const std::vector<std::vector<double>>& stream, std::size_t n,
                                std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix codes = random_codes(n, d, rng);
  std::size_t filled = 0;
  for (const auto& v : stream) {
    if (filled == n) break;
    if (v.size() != d) throw UsageError("init_sequential: dimension mismatch");
    bool duplicate = false;
    for (std::size_t k = 0; k < filled && !duplicate; ++k) {
      duplicate = std::equal(v.begin(), v.end(), codes.row(k).begin());
    }
    if (duplicate) continue;
    std::copy(v.begin(), v.end(), codes.row(filled).begin());
    ++filled;
  }
  return PersonaCodebook(std::move(codes), InitStrategy::sequential, seed);
}

PersonaCodebook init_average(const std::vector<Matrix>& batches, std::size_t n, std::size_t d,
                             std::uint64_t seed) {
  Rng rng(seed);
  Matrix codes = random_codes(n, d, rng);
  for (std::size_t k = 0; k < std::min(n, batches.size()); ++k) {
    const Matrix& b = batches[k];
    if (b.rows == 0) throw UsageError("init_average: empty batch");
    if (b.cols != d) throw UsageError("init_average: dimension mismatch");
    auto dst = codes.row(k);
    std::fill(dst.begin(), dst.end(), 0.0);
    for (std::size_t i = 0; i < b.rows; ++i) {
      for (std::size_t j = 0; j < d; ++j) dst[j] += b(i, j);
    }
    for (double& x : dst) x /= static_cast<double>(b.rows);
  }
  return PersonaCodebook(std::move(codes), InitStrategy::average, seed);
}

// ------------------------------------------------------------------- EM

EStepResult e_step(const Matrix& points, const Matrix& means, std::span<const double> variances) {
  const std::size_t n_points = points.rows;
  const std::size_t n = means.rows;
  const std::size_t d = points.cols;
  if (means.cols != d || variances.size() != n || n == 0) throw UsageError("e_step: shape mismatch");
  require_finite(points, "e_step");
  require_finite(means, "e_step");
  for (double v : variances) {
    if (!std::isfinite(v) || v < kVarianceFloor) throw NumericalError("e_step: variance below floor");
  }

  std::vector<double> log_norm(n);
  for (std::size_t k = 0; k < n; ++k) {
    log_norm[k] = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * variances[k]);
  }
  const double log_prior = -std::log(static_cast<double>(n));

  EStepResult out{Matrix(n_points, n), 0.0};
  std::vector<double> logp(n);
  for (std::size_t i = 0; i < n_points; ++i) {
    const auto p = points.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      logp[k] = log_norm[k] - squared_distance(p, means.row(k)) / (2.0 * variances[k]);
      mx = std::max(mx, logp[k]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) z += std::exp(logp[k] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < n; ++k) out.responsibilities(i, k) = std::exp(logp[k] - lse);
    out.log_likelihood += lse + log_prior;
  }
  return out;
}

GaussianParams m_step(const Matrix& points, const Matrix& resp, Rng& rng, std::size_t* reseeded) {
  const std::size_t n_points = points.rows;
  const std::size_t d = points.cols;
  const std::size_t n = resp.cols;
  if (resp.rows != n_points || n == 0 || n_points == 0) throw UsageError("m_step: shape mismatch");

  GaussianParams out{Matrix(n, d), std::vector<double>(n, 0.0)};
  std::vector<double> mass(n, 0.0);
  for (std::size_t i = 0; i < n_points; ++i) {
    const auto p = points.row(i);
    for (std::size_t k = 0; k < n; ++k) {
      const double r = resp(i, k);
      if (r == 0.0) continue;
      mass[k] += r;
      auto mu = out.means.row(k);
      for (std::size_t j = 0; j < d; ++j) mu[j] += r * p[j];
    }
  }
  std::vector<bool> dead(n, false);
  const double dead_mass = kDeadComponentMass * static_cast<double>(n_points);
  for (std::size_t k = 0; k < n; ++k) {
    if (mass[k] < dead_mass || mass[k] == 0.0) {
      dead[k] = true;
      continue;
    }
    for (double& x : out.means.row(k)) x /= mass[k];
  }
  for (std::size_t i = 0; i < n_points; ++i) {
    const auto p = points.row(i);
    for (std::size_t k = 0; k < n; ++k) {
      if (dead[k] || resp(i, k) == 0.0) continue;
      out.variances[k] += resp(i, k) * squared_distance(p, out.means.row(k));
    }
  }
  double live_var_sum = 0.0;
  std::size_t live = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (dead[k]) continue;
    out.variances[k] = std::max(kVarianceFloor, out.variances[k] / (static_cast<double>(d) * mass[k]));
    live_var_sum += out.variances[k];
    ++live;
  }
  const double fallback = live ? live_var_sum / static_cast<double>(live) : 1.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!dead[k]) continue;
    const auto src = points.row(uniform_index(rng, n_points));
    std::copy(src.begin(), src.end(), out.means.row(k).begin());
    out.variances[k] = std::max(kVarianceFloor, fallback);
    ++count;
  }
  if (reseeded) *reseeded = count;
  return out;
}

GaussianParams m_step(const Matrix& points, const Matrix& responsibilities) {
  Rng rng(0);
  return m_step(points, responsibilities, rng);
}

EMResult em_fit(const Matrix& points, std::size_t n, const EMOptions& options, std::uint64_t seed) {
  const std::size_t n_points = points.rows;
  const std::size_t d = points.cols;
  if (n == 0) throw UsageError("em_fit: N must be >= 1");
  if (n_points < n) {
    throw DataError("em_fit: " + std::to_string(n_points) + " points for " + std::to_string(n) +
                    " components");
  }
  if (options.max_iters < 1) throw UsageError("em_fit: max_iters must be >= 1");
  require_finite(points, "em_fit");
  Rng rng(seed);

  // Seeds: distinct data indices.
  std::vector<std::size_t> seeds;
  if (options.farthest_point_init) {
    seeds.push_back(uniform_index(rng, n_points));
    std::vector<double> nearest(n_points, std::numeric_limits<double>::infinity());
    std::vector<bool> used(n_points, false);
    used[seeds[0]] = true;
    while (seeds.size() < n) {
      const auto last = points.row(seeds.back());
      std::size_t best = n_points;
      for (std::size_t i = 0; i < n_points; ++i) {
        nearest[i] = std::min(nearest[i], squared_distance(points.row(i), last));
        if (!used[i] && (best == n_points || nearest[i] > nearest[best])) best = i;
      }
      used[best] = true;
      seeds.push_back(best);
    }
  } else {
    std::vector<std::size_t> idx(n_points);
    for (std::size_t i = 0; i < n_points; ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n_points - i)]);
    seeds.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n));
  }

  GaussianParams params{Matrix(n, d), {}};
  for (std::size_t k = 0; k < n; ++k) {
    const auto src = points.row(seeds[k]);
    std::copy(src.begin(), src.end(), params.means.row(k).begin());
  }
  // Initial isotropic variance: total data variance per dimension.
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n_points; ++i) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += points(i, j);
  }
  for (double& m : mean) m /= static_cast<double>(n_points);
  double total_var = 0.0;
  for (std::size_t i = 0; i < n_points; ++i) total_var += squared_distance(points.row(i), mean);
  total_var /= static_cast<double>(n_points * d);
  params.variances.assign(n, std::max(kVarianceFloor, total_var));

  EMState state;
  EStepResult e = e_step(points, params.means, params.variances);
  state.log_likelihood_trace.push_back(e.log_likelihood);
  for (int it = 0; it < options.max_iters; ++it) {
    std::size_t reseeded = 0;
    params = m_step(points, e.responsibilities, rng, &reseeded);
    state.reseeded += reseeded;
    ++state.iterations;
    e = e_step(points, params.means, params.variances);
    const double previous = state.log_likelihood_trace.back();
    state.log_likelihood_trace.push_back(e.log_likelihood);
    if (n == 1) break;  // one M-step is the closed-form optimum
    if (e.log_likelihood - previous < options.tol) break;
  }
  state.means = params.means;
  state.variances = params.variances;
  state.responsibilities = std::move(e.responsibilities);
  PersonaCodebook cb(params.means, InitStrategy::em, seed);
  return {std::move(cb), std::move(state)};
}

// ------------------------------------------------------------- losses

VqLoss vq_loss(std::span<const double> p, std::span<const double> e, double beta) {
  if (p.size() != e.size()) throw UsageError("vq_loss: dimension mismatch");
  if (!(beta > 0.0)) throw UsageError("vq_loss: beta must be positive");
  VqLoss out;
  out.grad_code.resize(p.size());
  out.grad_persona.resize(p.size());
  double d2 = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double diff = e[i] - p[i];
    d2 += diff * diff;
    out.grad_code[i] = 2.0 * diff;
    out.grad_persona[i] = -2.0 * beta * diff;
  }
  // Both terms share the forward value ||p - e||^2.
  out.loss = d2 + beta * d2;
  return out;
}

Var vq_loss_var(const Var& p, const Var& e, double beta) {
  VqLoss r = vq_loss(p.value().data, e.value().data, beta);
  return nn::make_result(Matrix(1, 1, r.loss), {p, e},
                         [gp = std::move(r.grad_persona), ge = std::move(r.grad_code)](nn::Node& n) {
    const double g = n.grad.data[0];
    auto& persona = n.parents[0];
    auto& code = n.parents[1];
    if (persona->requires_grad) {
      auto& dst = persona->ensure_grad().data;
      for (std::size_t i = 0; i < gp.size(); ++i) dst[i] += g * gp[i];
    }
    if (code->requires_grad) {
      auto& dst = code->ensure_grad().data;
      for (std::size_t i = 0; i < ge.size(); ++i) dst[i] += g * ge[i];
    }
  });
}

ContrastiveLoss contrastive_loss(std::span<const double> p, const Matrix& codes, std::size_t k,
                                 double tau) {
  const std::size_t n = codes.rows;
  const std::size_t d = codes.cols;
  if (p.size() != d) throw UsageError("contrastive_loss: dimension mismatch");
  if (k >= n) throw UsageError("contrastive_loss: target index out of range");
  if (!(tau > 0.0)) throw UsageError("contrastive_loss: tau must be positive");
  const double pn = norm(p);
  if (pn == 0.0) throw NumericalError("contrastive_loss: zero-norm persona vector");

  std::vector<double> cos(n), en(n), logits(n);
  for (std::size_t j = 0; j < n; ++j) {
    en[j] = norm(codes.row(j));
    if (en[j] == 0.0) throw NumericalError("contrastive_loss: zero-norm code vector");
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += p[c] * codes(j, c);
    cos[j] = dot / (pn * en[j]);
    logits[j] = cos[j] / tau;
  }
  const auto probs = nn::softmax(logits);

  ContrastiveLoss out;
  out.loss = nn::log_sum_exp(logits) - logits[k];
  out.grad_persona.assign(d, 0.0);
  out.grad_codes = Matrix(n, d);
  for (std::size_t j = 0; j < n; ++j) {
    const double ds = (probs[j] - (j == k ? 1.0 : 0.0)) / tau;  // dL / dcos_j
    if (ds == 0.0) continue;
    for (std::size_t c = 0; c < d; ++c) {
      const double e = codes(j, c);
      out.grad_persona[c] += ds * (e / (pn * en[j]) - cos[j] * p[c] / (pn * pn));
      out.grad_codes(j, c) += ds * (p[c] / (pn * en[j]) - cos[j] * e / (en[j] * en[j]));
    }
  }
  return out;
}

Var contrastive_loss_var(const Var& p, const Var& codes, std::size_t k, double tau) {
  ContrastiveLoss r = contrastive_loss(p.value().data, codes.value(), k, tau);
  return nn::make_result(Matrix(1, 1, r.loss), {p, codes},
                         [gp = std::move(r.grad_persona), gc = std::move(r.grad_codes)](nn::Node& n) {
    const double g = n.grad.data[0];
    if (n.parents[0]->requires_grad) {
      auto& dst = n.parents[0]->ensure_grad().data;
      for (std::size_t i = 0; i < gp.size(); ++i) dst[i] += g * gp[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& dst = n.parents[1]->ensure_grad().data;
      for (std::size_t i = 0; i < gc.size(); ++i) dst[i] += g * gc.data[i];
    }
  });
}

Utilization utilization(const PersonaCodebook& codebook) {
  Utilization out;
  for (auto c : codebook.usage_counts()) out.lookups += c;
  if (out.lookups == 0) throw UsageError("utilization: no lookups recorded");
  double entropy = 0.0;
  for (auto c : codebook.usage_counts()) {
    const double q = static_cast<double>(c) / static_cast<double>(out.lookups);
    out.histogram.push_back(q);
    if (q > 0.0) entropy -= q * std::log(q);
  }
  out.perplexity = std::exp(entropy);
  return out;
}

void export_codebook(const std::filesystem::path& path, const PersonaCodebook& codebook) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kCodebookMagic, 4));
  w.u32(kCodebookVersion);
  w.u32(static_cast<std::uint32_t>(codebook.size()));
  w.u32(static_cast<std::uint32_t>(codebook.dim()));
  w.u32(static_cast<std::uint32_t>(codebook.strategy()));
  w.u64(codebook.seed());
  for (double x : codebook.codes().data) w.f32(static_cast<float>(x));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write codebook file: " + path.string());
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
}

PersonaCodebook import_codebook(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open codebook file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();
  detail::ByteReader r(data);
  if (r.bytes(4) != std::string_view(kCodebookMagic, 4)) throw DataError("codebook file: bad magic");
  if (r.u32() != kCodebookVersion) throw DataError("codebook file: unsupported version");
  const std::size_t n = r.u32();
  const std::size_t d = r.u32();
  const std::uint32_t strategy = r.u32();
  if (strategy > static_cast<std::uint32_t>(InitStrategy::em)) throw DataError("codebook file: bad strategy");
  const std::uint64_t seed = r.u64();
  Matrix codes(n, d);
  for (double& x : codes.data) x = r.f32();
  if (!r.done()) throw DataError("codebook file: trailing bytes");
  return PersonaCodebook(std::move(codes), static_cast<InitStrategy>(strategy), seed);
}

}  // namespace morpheus::codebook
