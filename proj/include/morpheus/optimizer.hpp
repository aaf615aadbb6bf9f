#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "morpheus/neural.hpp"

namespace morpheus::trainer {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int warmup_steps = 0;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

// Adam with a linear warmup to the peak rate. Moments are kept per parameter
// name and, like parameters, rounded to the float grid after each update so a
// checkpoint restores them exactly.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  // Updates every parameter that requires grad and holds one; returns the
  // pre-clip gradient norm.
  double step(const std::vector<nn::NamedParameter>& parameters);
  double current_rate() const;

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  const AdamOptions& options() const { return options_; }

  std::map<std::string, nn::Matrix>& first_moments() { return m_; }
  std::map<std::string, nn::Matrix>& second_moments() { return v_; }
  const std::map<std::string, nn::Matrix>& first_moments() const { return m_; }
  const std::map<std::string, nn::Matrix>& second_moments() const { return v_; }

 private:
  AdamOptions options_;
  std::uint64_t steps_ = 0;
  std::map<std::string, nn::Matrix> m_;
  std::map<std::string, nn::Matrix> v_;
};

}  // namespace morpheus::trainer
