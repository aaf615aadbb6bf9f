#pragma once

// Shared fixtures and hand-rolled generators for the unit tests.

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "morpheus/config.hpp"
#include "morpheus/corpus.hpp"
#include "morpheus/random.hpp"
#include "morpheus/tensor.hpp"

namespace testing {

inline morpheus::nn::Matrix random_matrix(std::size_t rows, std::size_t cols, morpheus::Rng& rng,
                                          double scale = 1.0) {
  morpheus::nn::Matrix m(rows, cols);
  for (double& x : m.data) x = morpheus::normal(rng, 0.0, scale);
  return m;
}

inline std::vector<double> random_vector(std::size_t n, morpheus::Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = morpheus::normal(rng, 0.0, scale);
  return v;
}

// A handful of roles with short dialogues; trains in well under a second per epoch.
inline morpheus::corpus::SyntheticSpec tiny_spec() {
  auto spec = morpheus::corpus::SyntheticSpec::default_spec();
  spec.roles_count = 6;
  spec.dialogues_per_role = 4;
  spec.valid_fraction = 0.17;
  spec.test_fraction = 0.17;
  return spec;
}

inline morpheus::trainer::TrainingConfig tiny_config() {
  morpheus::trainer::TrainingConfig c;
  c.codes = 8;
  c.segments = 2;
  c.d = 16;
  c.layers = 1;
  c.heads = 2;
  c.max_sequence_length = 64;
  c.learning_rate = 3e-3;
  c.warmup_steps = 0;
  c.batch_size = 4;
  c.stage1_epochs = 1;
  c.stage3_epochs = 1;
  c.max_response_tokens = 8;
  c.seed = 11;
  return c;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("morpheus_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  static int& counter() {
    static int n = 0;
    return n;
  }
  std::filesystem::path path_;
};

}  // namespace testing
