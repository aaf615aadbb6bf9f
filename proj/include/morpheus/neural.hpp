#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "morpheus/corpus.hpp"
#include "morpheus/random.hpp"
#include "morpheus/tensor.hpp"

namespace morpheus::nn {

struct NamedParameter {
  std::string name;
  Var var;
};

// Owns a flat, ordered list of named parameters. Move-only: parameters are
// shared graph nodes, and a copy would alias them.
class Module {
 public:
  Module() = default;
  Module(Module&&) = default;
  Module& operator=(Module&&) = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void set_trainable(bool trainable);
  void zero_grad();

 protected:
  Var add_parameter(std::string name, Matrix init);

 private:
  std::vector<NamedParameter> params_;
};

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

}  // namespace morpheus::nn

namespace morpheus::neural {

using corpus::TokenId;

struct ModelConfig {
  int d = 64;
  int layers = 2;
  int heads = 2;
  int max_sequence_length = 128;
  int vocab_size = 0;
  double dropout = 0.0;
  // Prefix length M: persona segments per sample.
  int segments = 4;

  // Hidden size and depth of the pretrained decoders the method was built on.
  static ModelConfig full_scale(int vocab_size);
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TransformerLayer {
  nn::Var ln1_gain, ln1_bias;
  nn::Var wq, bq, wk, bk, wv, bv, wo, bo;
  nn::Var ln2_gain, ln2_bias;
  nn::Var w1, b1, w2, b2;
};

// Per-layer key/value prefix slots (M x d each), consumed as past keys/values.
struct PrefixState {
  std::size_t length = 0;
  std::vector<nn::Var> keys;
  std::vector<nn::Var> values;
};

class PersonaEncoder : public nn::Module {
 public:
  PersonaEncoder(const ModelConfig& config, std::uint64_t seed);

  // 1 x d: mean-pooled final states; the learned null vector for no tokens.
  nn::Var encode(std::span<const TokenId> tokens) const;
  const nn::Var& null_vector() const { return null_vector_; }
  void set_dropout_rng(Rng* rng) { dropout_rng_ = rng; }

 private:
  ModelConfig config_;
  nn::Var token_embedding_, position_embedding_;
  std::vector<TransformerLayer> layers_;
  nn::Var final_gain_, final_bias_;
  nn::Var null_vector_;
  Rng* dropout_rng_ = nullptr;
};

class PrefixProjection : public nn::Module {
 public:
  PrefixProjection(const ModelConfig& config, std::uint64_t seed);

  // One 1 x d vector per slot; slot order is preserved.
  PrefixState build(std::span<const nn::Var> vectors) const;

 private:
  ModelConfig config_;
  std::vector<nn::Var> key_proj_;
  std::vector<nn::Var> value_proj_;
};

class Decoder : public nn::Module {
 public:
  Decoder(const ModelConfig& config, std::uint64_t seed);

  // T x d final-layer (normalized) states; causal, optionally prefix-conditioned.
  nn::Var hidden_states(std::span<const TokenId> tokens, const PrefixState* prefix) const;
  // T x V scores through the tied token embedding.
  nn::Var logits(const nn::Var& hidden) const;
  const nn::Var& token_embedding() const { return token_embedding_; }
  void set_dropout_rng(Rng* rng) { dropout_rng_ = rng; }

 private:
  ModelConfig config_;
  nn::Var token_embedding_, position_embedding_;
  std::vector<TransformerLayer> layers_;
  nn::Var final_gain_, final_bias_;
  Rng* dropout_rng_ = nullptr;
};

// The text-side networks plus the vocabulary they share.
struct DialogueModel {
  ModelConfig config;
  corpus::Vocab vocab;
  PersonaEncoder encoder;
  Decoder decoder;
  PrefixProjection projection;

  DialogueModel(ModelConfig config, corpus::Vocab vocab, std::uint64_t seed);
  DialogueModel(DialogueModel&&) = default;
  DialogueModel& operator=(DialogueModel&&) = default;
};

struct EncodedPersona {
  std::vector<double> vector;
  std::string source_segment;
  std::optional<int> code_index;
};

struct HiddenState {
  std::vector<double> vector;
};

nn::Var encode_persona_var(const DialogueModel& model, std::string_view segment);
EncodedPersona encode_persona(const DialogueModel& model, std::string_view segment);

// 1 x d state at the last history token, no prefix.
nn::Var encode_history_var(const DialogueModel& model, std::span<const TokenId> history);
HiddenState encode_history(const DialogueModel& model, const std::vector<corpus::Turn>& history,
                           std::string_view responder_id);

// Exactly `config.segments` vectors of dimension d.
PrefixState build_prefix(const DialogueModel& model, std::span<const nn::Var> vectors);
PrefixState build_prefix(const DialogueModel& model, const std::vector<std::vector<double>>& vectors);

// Mean teacher-forced NLL of response tokens followed by end-of-response.
nn::Var decode_nll_var(const DialogueModel& model, const PrefixState* prefix,
                       std::span<const TokenId> history, std::span<const TokenId> response);
double decode_nll(const DialogueModel& model, const PrefixState* prefix,
                  std::span<const TokenId> history, std::span<const TokenId> response);

std::vector<double> logits_next(const DialogueModel& model, const PrefixState* prefix,
                                std::span<const TokenId> context);

struct GradcheckReport {
  double max_relative_error = 0.0;
  std::size_t probes = 0;
  std::string worst_parameter;
  bool passed = false;
};

// Central finite differences on `probes_per_parameter` random coordinates of
// every parameter that requires grad. Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradcheckReport gradcheck(const std::function<nn::Var()>& loss_fn,
                          const std::vector<nn::NamedParameter>& parameters, double epsilon,
                          double tolerance, std::size_t probes_per_parameter = 8,
                          std::uint64_t seed = 0, double floor = 1e-6);

}  // namespace morpheus::neural
