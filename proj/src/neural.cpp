#include "morpheus/neural.hpp"

#include <cmath>

#include "morpheus/errors.hpp"

namespace morpheus::nn {

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.value().size();
  return n;
}

void Module::set_trainable(bool trainable) {
  for (auto& p : params_) p.var.set_requires_grad(trainable);
}

void Module::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

Var Module::add_parameter(std::string name, Matrix init) {
  snap_to_float(init);
  Var v(std::move(init), true);
  params_.push_back({std::move(name), v});
  return v;
}

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& x : m.data) x = normal(rng, 0.0, stddev);
  return m;
}

}  // namespace morpheus::nn

namespace morpheus::neural {

using nn::Matrix;
using nn::Var;

namespace {

constexpr double kInitStd = 0.02;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename AddFn>
TransformerLayer make_layer(AddFn&& add, const std::string& prefix, std::size_t d, Rng& rng) {
  auto w = [&](const char* n, std::size_t r, std::size_t c) {
    return add(prefix + n, nn::random_normal(r, c, kInitStd, rng));
  };
  auto zeros = [&](const char* n, std::size_t c) { return add(prefix + n, Matrix(1, c)); };
  auto ones = [&](const char* n, std::size_t c) { return add(prefix + n, Matrix(1, c, 1.0)); };
  TransformerLayer L;
  L.ln1_gain = ones("ln1_gain", d);
  L.ln1_bias = zeros("ln1_bias", d);
  L.wq = w("wq", d, d);
  L.bq = zeros("bq", d);
  L.wk = w("wk", d, d);
  L.bk = zeros("bk", d);
  L.wv = w("wv", d, d);
  L.bv = zeros("bv", d);
  L.wo = w("wo", d, d);
  L.bo = zeros("bo", d);
  L.ln2_gain = ones("ln2_gain", d);
  L.ln2_bias = zeros("ln2_bias", d);
  L.w1 = w("w1", d, 4 * d);
  L.b1 = zeros("b1", 4 * d);
  L.w2 = w("w2", 4 * d, d);
  L.b2 = zeros("b2", d);
  return L;
}

Var maybe_dropout(const Var& x, double rate, Rng* rng) {
  if (!rng || rate <= 0.0) return x;
  return nn::dropout(x, rate, *rng);
}

Var linear(const Var& x, const Var& w, const Var& b) { return nn::add_row(nn::matmul(x, w), b); }

Var run_layer(const TransformerLayer& L, Var x, std::size_t heads, bool causal,
              nn::AttentionPrefix prefix, double dropout, Rng* rng) {
  Var h = nn::layer_norm(x, L.ln1_gain, L.ln1_bias);
  Var q = linear(h, L.wq, L.bq);
  Var k = linear(h, L.wk, L.bk);
  Var v = linear(h, L.wv, L.bv);
  Var a = linear(nn::attention(q, k, v, heads, causal, prefix), L.wo, L.bo);
  x = nn::add(x, maybe_dropout(a, dropout, rng));
  Var h2 = nn::layer_norm(x, L.ln2_gain, L.ln2_bias);
  Var f = linear(nn::gelu(linear(h2, L.w1, L.b1)), L.w2, L.b2);
  return nn::add(x, maybe_dropout(f, dropout, rng));
}

Var embed(const Var& tokens_table, const Var& positions_table, std::span<const TokenId> tokens) {
  std::vector<std::int32_t> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i);
  return nn::add(nn::embedding(tokens_table, tokens), nn::embedding(positions_table, pos));
}

void check_length(std::size_t n, const ModelConfig& config, const char* what) {
  if (n > static_cast<std::size_t>(config.max_sequence_length)) {
    throw DataError(std::string(what) + ": sequence of " + std::to_string(n) +
                    " tokens exceeds max_sequence_length " +
                    std::to_string(config.max_sequence_length));
  }
}

}  // namespace

ModelConfig ModelConfig::full_scale(int vocab_size) {
  ModelConfig c;
  c.d = 768;
  c.layers = 12;
  c.heads = 12;
  c.max_sequence_length = 1024;
  c.vocab_size = vocab_size;
  c.dropout = 0.1;
  return c;
}

void ModelConfig::validate() const {
  if (d <= 0 || layers <= 0 || heads <= 0 || max_sequence_length <= 0 || vocab_size <= 0 ||
      segments <= 0) {
    throw UsageError("model config: all sizes must be positive");
  }
  if (d % heads != 0) throw UsageError("model config: d must be divisible by heads");
  if (dropout < 0.0 || dropout >= 1.0) throw UsageError("model config: dropout must be in [0, 1)");
}

PersonaEncoder::PersonaEncoder(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(config_.d);
  auto add = [this](std::string name, Matrix m) { return add_parameter(std::move(name), std::move(m)); };
  token_embedding_ = add("encoder.token_embedding",
                         nn::random_normal(static_cast<std::size_t>(config_.vocab_size), d, kInitStd, rng));
  position_embedding_ = add("encoder.position_embedding",
                            nn::random_normal(static_cast<std::size_t>(config_.max_sequence_length), d,
                                              kInitStd, rng));
  for (int l = 0; l < config_.layers; ++l) {
    layers_.push_back(make_layer(add, "encoder.layer" + std::to_string(l) + ".", d, rng));
  }
  final_gain_ = add("encoder.final_gain", Matrix(1, d, 1.0));
  final_bias_ = add("encoder.final_bias", Matrix(1, d));
  null_vector_ = add("encoder.null_vector", nn::random_normal(1, d, 1.0, rng));
}

Var PersonaEncoder::encode(std::span<const TokenId> tokens) const {
  if (tokens.empty()) return null_vector_;
  check_length(tokens.size(), config_, "encode_persona");
  Var x = embed(token_embedding_, position_embedding_, tokens);
  for (const auto& L : layers_) {
    x = run_layer(L, x, static_cast<std::size_t>(config_.heads), /*causal=*/false, {},
                  config_.dropout, dropout_rng_);
  }
  return nn::mean_rows(nn::layer_norm(x, final_gain_, final_bias_));
}

PrefixProjection::PrefixProjection(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(config_.d);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string base = "projection.layer" + std::to_string(l) + ".";
    key_proj_.push_back(add_parameter(base + "key", nn::random_normal(d, d, kInitStd, rng)));
    value_proj_.push_back(add_parameter(base + "value", nn::random_normal(d, d, kInitStd, rng)));
  }
}

PrefixState PrefixProjection::build(std::span<const Var> vectors) const {
  if (vectors.empty()) throw UsageError("build_prefix: no vectors");
  for (const auto& v : vectors) {
    if (v.rows() != 1 || v.cols() != static_cast<std::size_t>(config_.d)) {
      throw UsageError("build_prefix: expected 1 x " + std::to_string(config_.d) + " vectors");
    }
  }
  Var stacked = nn::concat_rows(vectors);
  PrefixState state;
  state.length = vectors.size();
  for (std::size_t l = 0; l < key_proj_.size(); ++l) {
    state.keys.push_back(nn::matmul(stacked, key_proj_[l]));
    state.values.push_back(nn::matmul(stacked, value_proj_[l]));
  }
  return state;
}

Decoder::Decoder(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(config_.d);
  auto add = [this](std::string name, Matrix m) { return add_parameter(std::move(name), std::move(m)); };
  token_embedding_ = add("decoder.token_embedding",
                         nn::random_normal(static_cast<std::size_t>(config_.vocab_size), d, kInitStd, rng));
  position_embedding_ = add("decoder.position_embedding",
                            nn::random_normal(static_cast<std::size_t>(config_.max_sequence_length), d,
                                              kInitStd, rng));
  for (int l = 0; l < config_.layers; ++l) {
    layers_.push_back(make_layer(add, "decoder.layer" + std::to_string(l) + ".", d, rng));
  }
  final_gain_ = add("decoder.final_gain", Matrix(1, d, 1.0));
  final_bias_ = add("decoder.final_bias", Matrix(1, d));
}

Var Decoder::hidden_states(std::span<const TokenId> tokens, const PrefixState* prefix) const {
  if (tokens.empty()) throw UsageError("decoder: empty input");
  check_length(tokens.size(), config_, "decoder");
  if (prefix && prefix->keys.size() != layers_.size()) {
    throw UsageError("decoder: prefix layer count mismatch");
  }
  Var x = embed(token_embedding_, position_embedding_, tokens);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    nn::AttentionPrefix ap;
    if (prefix) ap = {&prefix->keys[l], &prefix->values[l]};
    x = run_layer(layers_[l], x, static_cast<std::size_t>(config_.heads), /*causal=*/true, ap,
                  config_.dropout, dropout_rng_);
  }
  return nn::layer_norm(x, final_gain_, final_bias_);
}

Var Decoder::logits(const Var& hidden) const { return nn::matmul_nt(hidden, token_embedding_); }

DialogueModel::DialogueModel(ModelConfig cfg, corpus::Vocab v, std::uint64_t seed)
    : config([&] {
        if (cfg.vocab_size == 0) cfg.vocab_size = static_cast<int>(v.size());
        if (static_cast<std::size_t>(cfg.vocab_size) != v.size()) {
          throw UsageError("model config: vocab_size does not match the vocabulary");
        }
        cfg.validate();
        return cfg;
      }()),
      vocab(std::move(v)),
      encoder(config, mix_seed(seed, 1)),
      decoder(config, mix_seed(seed, 2)),
      projection(config, mix_seed(seed, 3)) {}

Var encode_persona_var(const DialogueModel& model, std::string_view segment) {
  const auto tokens = model.vocab.tokenize(segment);
  return model.encoder.encode(tokens);
}

EncodedPersona encode_persona(const DialogueModel& model, std::string_view segment) {
  nn::NoGradGuard guard;
  Var v = encode_persona_var(model, segment);
  return {v.value().data, std::string(segment), std::nullopt};
}

Var encode_history_var(const DialogueModel& model, std::span<const TokenId> history) {
  if (history.empty()) throw UsageError("encode_history: empty history");
  Var h = model.decoder.hidden_states(history, nullptr);
  return nn::slice_rows(h, h.rows() - 1, 1);
}

HiddenState encode_history(const DialogueModel& model, const std::vector<corpus::Turn>& history,
                           std::string_view responder_id) {
  if (history.empty()) throw UsageError("encode_history: empty history");
  nn::NoGradGuard guard;
  const auto tokens = corpus::history_tokens(model.vocab, history, responder_id);
  return {encode_history_var(model, tokens).value().data};
}

PrefixState build_prefix(const DialogueModel& model, std::span<const Var> vectors) {
  if (vectors.size() != static_cast<std::size_t>(model.config.segments)) {
    throw UsageError("build_prefix: expected " + std::to_string(model.config.segments) +
                     " vectors, got " + std::to_string(vectors.size()));
  }
  return model.projection.build(vectors);
}

PrefixState build_prefix(const DialogueModel& model, const std::vector<std::vector<double>>& vectors) {
  std::vector<Var> vars;
  for (const auto& v : vectors) vars.push_back(nn::constant(Matrix::row_vector(v)));
  return build_prefix(model, vars);
}

Var decode_nll_var(const DialogueModel& model, const PrefixState* prefix,
                   std::span<const TokenId> history, std::span<const TokenId> response) {
  if (response.empty()) throw UsageError("decode_nll: empty response");
  std::vector<TokenId> input(history.begin(), history.end());
  input.push_back(corpus::Vocab::kBeginResponse);
  input.insert(input.end(), response.begin(), response.end());
  check_length(input.size(), model.config, "decode_nll");

  std::vector<TokenId> targets(response.begin(), response.end());
  targets.push_back(corpus::Vocab::kEndResponse);
  Var hidden = model.decoder.hidden_states(input, prefix);
  Var tail = nn::slice_rows(hidden, history.size(), targets.size());
  return nn::cross_entropy(model.decoder.logits(tail), targets);
}

double decode_nll(const DialogueModel& model, const PrefixState* prefix,
                  std::span<const TokenId> history, std::span<const TokenId> response) {
  nn::NoGradGuard guard;
  return decode_nll_var(model, prefix, history, response).item();
}

std::vector<double> logits_next(const DialogueModel& model, const PrefixState* prefix,
                                std::span<const TokenId> context) {
  nn::NoGradGuard guard;
  Var hidden = model.decoder.hidden_states(context, prefix);
  Var last = nn::slice_rows(hidden, hidden.rows() - 1, 1);
  return model.decoder.logits(last).value().data;
}

GradcheckReport gradcheck(const std::function<Var()>& loss_fn,
                          const std::vector<nn::NamedParameter>& parameters, double epsilon,
                          double tolerance, std::size_t probes_per_parameter, std::uint64_t seed,
                          double floor) {
  for (const auto& p : parameters) p.var.node()->grad = Matrix();
  Var loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericalError("gradcheck: non-finite loss");
  nn::backward(loss);

  Rng rng(seed);
  GradcheckReport report;
  nn::NoGradGuard guard;
  for (const auto& p : parameters) {
    if (!p.var.requires_grad()) continue;
    const Matrix analytic = p.var.grad();
    Matrix& value = p.var.node()->value;
    for (std::size_t probe = 0; probe < probes_per_parameter; ++probe) {
      const std::size_t idx = uniform_index(rng, value.size());
      const double original = value.data[idx];
      value.data[idx] = original + epsilon;
      const double plus = loss_fn().item();
      value.data[idx] = original - epsilon;
      const double minus = loss_fn().item();
      value.data[idx] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericalError("gradcheck: non-finite loss under perturbation");
      }
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double a = analytic.data[idx];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.probes;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_parameter = p.name + "[" + std::to_string(idx) + "]";
      }
    }
  }
  for (const auto& p : parameters) p.var.node()->grad = Matrix();
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace morpheus::neural
