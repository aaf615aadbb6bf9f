#include "morpheus/inference.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include "morpheus/errors.hpp"

namespace morpheus::inference {

using corpus::TokenId;
using corpus::Vocab;

DialogueContext context_of(const corpus::DialogueSample& sample) {
  return {sample.history, sample.responder_id};
}

SamplingConfig sampling_from(const trainer::TrainingConfig& config) {
  return {config.nucleus_p, config.temperature, config.max_response_tokens, config.sample_codes};
}

namespace {

std::vector<double> tempered_probs(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw UsageError("nucleus: temperature must be positive");
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw NumericalError("nucleus: non-finite logit");
    scaled[i] = logits[i] / temperature;
  }
  return nn::softmax(scaled);
}

std::vector<std::size_t> sorted_support(const std::vector<double>& probs, double p, double* mass) {
  if (!(p > 0.0 && p <= 1.0)) throw UsageError("nucleus: p must be in (0, 1]");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cum += probs[order[keep]];
    ++keep;
    if (cum >= p) break;
  }
  order.resize(keep);
  *mass = cum;
  return order;
}

std::size_t sample_index(const std::vector<double>& probs, Rng& rng) {
  const double u = uniform01(rng);
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return i;
  }
  return probs.size() - 1;
}

}  // namespace

std::vector<TokenId> nucleus_support(std::span<const double> logits, double p, double temperature) {
  double mass = 0.0;
  const auto order = sorted_support(tempered_probs(logits, temperature), p, &mass);
  return {order.begin(), order.end()};
}

TokenId nucleus_sample(std::span<const double> logits, double p, double temperature, Rng& rng) {
  if (logits.empty()) throw UsageError("nucleus: empty logits");
  const auto probs = tempered_probs(logits, temperature);
  double mass = 0.0;
  const auto order = sorted_support(probs, p, &mass);
  std::vector<double> kept(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) kept[i] = probs[order[i]] / mass;
  return static_cast<TokenId>(order[sample_index(kept, rng)]);
}

namespace {

std::vector<TokenId> context_tokens(const trainer::Morpheus& m, const DialogueContext& context,
                                    int max_tokens, bool* truncated) {
  if (context.history.empty()) throw UsageError("generate: empty history");
  const int budget = m.config.max_sequence_length - max_tokens - 1;
  if (budget < 1) throw UsageError("generate: max_tokens leaves no room for history");
  return corpus::history_window(m.model.vocab, context.history, context.responder_id,
                                static_cast<std::size_t>(budget), truncated);
}

std::vector<predictor::CodePrediction> codes_for(const trainer::Morpheus& m,
                                                 std::span<const TokenId> history, bool sample,
                                                 Rng& rng) {
  nn::NoGradGuard guard;
  const nn::Var c = neural::encode_history_var(m.model, history);
  if (!sample) return predictor::predict_codes(*m.classifier, c.value().data);
  const nn::Matrix logits = m.classifier->logits(c).value();
  std::vector<predictor::CodePrediction> out;
  for (std::size_t h = 0; h < logits.rows; ++h) {
    const auto probs = nn::softmax(logits.row(h));
    const std::size_t k = sample_index(probs, rng);
    out.push_back({k, probs[k]});
  }
  return out;
}

}  // namespace

std::vector<predictor::CodePrediction> predict_context_codes(const trainer::Morpheus& m,
                                                             const DialogueContext& context) {
  trainer::require_stage(m, trainer::Stage::pc_init, "code prediction");
  Rng rng(0);
  const auto history = context_tokens(m, context, m.config.max_response_tokens, nullptr);
  return codes_for(m, history, false, rng);
}

Generation generate(const trainer::Morpheus& m, const DialogueContext& context,
                    const SamplingConfig& sampling, std::uint64_t seed) {
  if (sampling.max_tokens < 1) throw UsageError("generate: max_tokens must be >= 1");
  const bool baseline = m.config.unconditioned;
  if (!baseline) trainer::require_stage(m, trainer::Stage::pc_init, "generate");
  if (baseline && m.stage < trainer::Stage::joint) {
    throw DataError("generate: baseline checkpoint has not been trained");
  }
  Rng rng(seed);
  Generation out;
  std::vector<TokenId> ids = context_tokens(m, context, sampling.max_tokens, &out.context_truncated);

  neural::PrefixState prefix;
  const neural::PrefixState* prefix_ptr = nullptr;
  if (!baseline) {
    out.codes = codes_for(m, ids, sampling.sample_codes, rng);
    std::vector<std::vector<double>> vectors;
    for (const auto& c : out.codes) {
      const auto row = m.codebook->code(c.index);
      vectors.emplace_back(row.begin(), row.end());
    }
    prefix = neural::build_prefix(m.model, vectors);
    prefix_ptr = &prefix;
  }

  ids.push_back(Vocab::kBeginResponse);
  for (int t = 0; t < sampling.max_tokens; ++t) {
    const auto logits = neural::logits_next(m.model, prefix_ptr, ids);
    const TokenId next = nucleus_sample(logits, sampling.p, sampling.temperature, rng);
    if (next == Vocab::kEndResponse) break;
    out.tokens.push_back(next);
    ids.push_back(next);
  }
  out.text = m.model.vocab.detokenize(out.tokens);
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

}  // namespace

ChatSession::ChatSession(const trainer::Morpheus& m, ChatOptions options)
    : model_(m), options_(std::move(options)), context_{{}, options_.bot_id} {}

std::string ChatSession::handle(std::string line, bool& quit) {
  quit = false;
  line = trim(line);
  if (line == "/quit") {
    quit = true;
    return {};
  }
  if (line == "/reset") {
    context_.history.clear();
    last_codes_.clear();
    return "(history cleared)\n";
  }
  if (line == "/codes") {
    if (last_codes_.empty()) return "(no codes yet)\n";
    std::string out = "codes:";
    for (const auto& c : last_codes_) out += " " + std::to_string(c.index);
    return out + "\n";
  }
  if (line.empty()) return {};

  std::string notice;
  if (line.size() > options_.max_input_chars) {
    line.resize(options_.max_input_chars);
    notice = "(warning: input truncated to " + std::to_string(options_.max_input_chars) + " characters)\n";
  }
  context_.history.push_back({options_.user_id, line});
  const Generation g = generate(model_, context_, options_.sampling, options_.seed + turn_++);
  if (g.context_truncated) {
    // Forget turns that have scrolled out of the window.
    const auto budget = static_cast<std::size_t>(model_.config.max_sequence_length -
                                                 options_.sampling.max_tokens - 1);
    while (context_.history.size() > 1) {
      bool cut = false;
      corpus::history_window(model_.model.vocab, context_.history, context_.responder_id, budget, &cut);
      if (!cut) break;
      context_.history.erase(context_.history.begin());
    }
  }
  last_codes_ = g.codes;
  const std::string reply = g.text.empty() ? "..." : g.text;
  context_.history.push_back({options_.bot_id, reply});
  return notice + reply + "\n";
}

int chat_repl(const trainer::Morpheus& m, const ChatOptions& options, std::istream& in,
              std::ostream& out) {
  ChatSession session(m, options);
  std::string line;
  out << "> " << std::flush;
  while (std::getline(in, line)) {
    bool quit = false;
    out << session.handle(line, quit);
    if (quit) break;
    out << "> " << std::flush;
  }
  out << '\n';
  return 0;
}

}  // namespace morpheus::inference
