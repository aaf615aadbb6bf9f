#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "morpheus/tensor.hpp"

namespace morpheus::codebook {

enum class InitStrategy { random, sequential, average, em };

std::string to_string(InitStrategy strategy);
InitStrategy parse_init_strategy(std::string_view name);

// N x d code vectors plus lookup statistics. The code matrix is a trainable
// graph leaf so joint training can update rows through the VQ and
// contrastive terms.
class PersonaCodebook {
 public:
  PersonaCodebook(nn::Matrix codes, InitStrategy strategy, std::uint64_t seed);

  std::size_t size() const { return codes_.rows(); }
  std::size_t dim() const { return codes_.cols(); }
  const nn::Matrix& codes() const { return codes_.value(); }
  std::span<const double> code(std::size_t k) const { return codes_.value().row(k); }
  const nn::Var& var() const { return codes_; }
  void set_codes(nn::Matrix codes);

  InitStrategy strategy() const { return strategy_; }
  std::uint64_t seed() const { return seed_; }

  const std::vector<std::uint64_t>& usage_counts() const { return usage_; }
  void record_use(std::size_t k) { ++usage_.at(k); }
  void set_usage_counts(std::vector<std::uint64_t> counts);
  void reset_usage() { usage_.assign(usage_.size(), 0); }

 private:
  nn::Var codes_;
  InitStrategy strategy_;
  std::uint64_t seed_;
  std::vector<std::uint64_t> usage_;
};

struct CodeMatch {
  std::size_t index = 0;
  double distance = 0.0;
};

// Exhaustive Euclidean search; the lowest index wins ties.
CodeMatch find_nearest(std::span<const double> p, const nn::Matrix& codes);
// As find_nearest, and counts the lookup in the codebook's usage statistics.
CodeMatch nearest_code(std::span<const double> p, PersonaCodebook& codebook);

// Entries i.i.d. uniform on [-1/sqrt(d), 1/sqrt(d)].
PersonaCodebook init_random(std::size_t n, std::size_t d, std::uint64_t seed);
// Slot k takes the k-th distinct vector of the stream; unfilled slots keep
// their random initialization.
PersonaCodebook init_sequential(const std::vector<std::vector<double>>& stream, std::size_t n,
                                std::size_t d, std::uint64_t seed);
// Slot k takes the mean of batch k (rows of batches[k]).
PersonaCodebook init_average(const std::vector<nn::Matrix>& batches, std::size_t n, std::size_t d,
                             std::uint64_t seed);

inline constexpr double kVarianceFloor = 1e-6;
inline constexpr double kDeadComponentMass = 1e-8;

struct GaussianParams {
  nn::Matrix means;                // N x d
  std::vector<double> variances;   // isotropic, one per component
};

struct EStepResult {
  nn::Matrix responsibilities;  // |D| x N
  double log_likelihood = 0.0;  // uniform mixing weights
};

// Posterior responsibilities under isotropic Gaussians with a uniform prior,
// computed in the log domain.
EStepResult e_step(const nn::Matrix& points, const nn::Matrix& means,
                   std::span<const double> variances);

// Weighted means and isotropic variances (||p - mu||^2 / d), floored at
// kVarianceFloor. Components with mass below kDeadComponentMass * |D| are
// reseeded to a random data point drawn from `rng`.
GaussianParams m_step(const nn::Matrix& points, const nn::Matrix& responsibilities, Rng& rng,
                      std::size_t* reseeded = nullptr);
GaussianParams m_step(const nn::Matrix& points, const nn::Matrix& responsibilities);

struct EMState {
  nn::Matrix means;
  std::vector<double> variances;
  nn::Matrix responsibilities;
  std::vector<double> log_likelihood_trace;  // entry 0 is the initial fit
  int iterations = 0;
  std::size_t reseeded = 0;
};

struct EMOptions {
  int max_iters = 100;
  double tol = 1e-6;
  // Seeds 1..N-1 are the data points farthest from the seeds chosen so far;
  // otherwise all N seeds are distinct random points.
  bool farthest_point_init = true;
};

struct EMResult {
  PersonaCodebook codebook;
  EMState state;
};

EMResult em_fit(const nn::Matrix& points, std::size_t n, const EMOptions& options,
                std::uint64_t seed);

struct VqLoss {
  double loss = 0.0;
  std::vector<double> grad_code;     // 2 (e - p): first term only
  std::vector<double> grad_persona;  // 2 beta (p - e): second term only
};

// ||sg[p] - e||^2 + beta ||sg[e] - p||^2.
VqLoss vq_loss(std::span<const double> p, std::span<const double> e, double beta);
// Graph node for the same loss; p and e are 1 x d.
nn::Var vq_loss_var(const nn::Var& p, const nn::Var& e, double beta);

struct ContrastiveLoss {
  double loss = 0.0;
  std::vector<double> grad_persona;
  nn::Matrix grad_codes;
};

// Cross-entropy of cosine-similarity logits sim(p, e_j) / tau against k.
ContrastiveLoss contrastive_loss(std::span<const double> p, const nn::Matrix& codes, std::size_t k,
                                 double tau);
nn::Var contrastive_loss_var(const nn::Var& p, const nn::Var& codes, std::size_t k, double tau);

struct Utilization {
  std::vector<double> histogram;  // normalized usage
  double perplexity = 0.0;
  std::uint64_t lookups = 0;
};

// Throws when no lookup has been recorded.
Utilization utilization(const PersonaCodebook& codebook);

// Header (magic, version, N, d, strategy, seed) then row-major little-endian
// 32-bit floats.
void export_codebook(const std::filesystem::path& path, const PersonaCodebook& codebook);
PersonaCodebook import_codebook(const std::filesystem::path& path);

}  // namespace morpheus::codebook
