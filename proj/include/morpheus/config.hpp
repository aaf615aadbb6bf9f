#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "morpheus/codebook.hpp"
#include "morpheus/neural.hpp"

namespace morpheus::trainer {

enum class JointMode { summed, alternating };

struct TrainingConfig {
  // Codebook size N and prefix length M.
  int codes = 100;
  int segments = 4;
  int d = 64;
  int layers = 2;
  int heads = 2;
  int max_sequence_length = 128;
  double dropout = 0.0;

  double beta = 0.05;
  double tau = 0.5;
  double lambda_g = 1.0;
  double lambda_v = 1.0;
  double lambda_d = 1.0;
  double lambda_c = 1.0;

  double learning_rate = 1e-4;
  int warmup_steps = 100;
  double clip_norm = 1.0;
  int batch_size = 16;
  int stage1_epochs = 1;
  int stage3_epochs = 1;
  std::uint64_t seed = 0;
  codebook::InitStrategy init_strategy = codebook::InitStrategy::em;
  // Segments per batch for the average initializer; 0 picks |segments| / N.
  int average_batch = 0;
  int em_max_iters = 100;
  double em_tol = 1e-6;
  bool peft = false;
  // Prefix from straight-through quantized codes instead of the encoder outputs.
  bool straight_through = false;
  JointMode joint_mode = JointMode::summed;
  // Without a prefix and without the codebook terms: the persona-masked baseline.
  bool unconditioned = false;

  double nucleus_p = 0.9;
  double temperature = 1.0;
  int max_response_tokens = 24;
  // Experimental: sample codes from P(y|c) instead of taking the argmax.
  bool sample_codes = false;

  int self_bleu_cap = 200;

  void validate() const;
  neural::ModelConfig model_config(int vocab_size) const;

  // Canonical "key=value" lines in a fixed order.
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  std::string to_text() const;
  // FNV-1a of to_text(), as 16 hex digits.
  std::string hash() const;

  // Throws UsageError on an unknown key or unparsable value.
  void set(std::string_view key, std::string_view value);

  bool operator==(const TrainingConfig&) const = default;
};

// Flat "key = value" lines; '#' starts a comment. Values override `base`.
TrainingConfig parse_config(std::string_view text, TrainingConfig base = {});
TrainingConfig load_config(const std::filesystem::path& path, TrainingConfig base = {});

std::string to_string(JointMode mode);

}  // namespace morpheus::trainer
