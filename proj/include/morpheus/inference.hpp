#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "morpheus/corpus.hpp"
#include "morpheus/predictor.hpp"
#include "morpheus/trainer.hpp"

namespace morpheus::inference {

// What generation may see: the conversation so far and who answers. There is
// deliberately no persona field.
struct DialogueContext {
  std::vector<corpus::Turn> history;
  std::string responder_id;
};

DialogueContext context_of(const corpus::DialogueSample& sample);

struct SamplingConfig {
  double p = 0.9;
  double temperature = 1.0;
  int max_tokens = 24;
  bool sample_codes = false;
};

SamplingConfig sampling_from(const trainer::TrainingConfig& config);

struct Generation {
  std::string text;
  std::vector<corpus::TokenId> tokens;
  std::vector<predictor::CodePrediction> codes;  // empty for the unconditioned baseline
  bool context_truncated = false;
};

// Token ids kept by the nucleus for these logits, in sampling order.
std::vector<corpus::TokenId> nucleus_support(std::span<const double> logits, double p, double temperature);
corpus::TokenId nucleus_sample(std::span<const double> logits, double p, double temperature, Rng& rng);

std::vector<predictor::CodePrediction> predict_context_codes(const trainer::Morpheus& m,
                                                             const DialogueContext& context);

// Persona-free generation. Models trained as the unconditioned baseline decode
// without a prefix; otherwise the predicted codes' vectors form the prefix.
Generation generate(const trainer::Morpheus& m, const DialogueContext& context,
                    const SamplingConfig& sampling, std::uint64_t seed);

struct ChatOptions {
  SamplingConfig sampling;
  std::uint64_t seed = 0;
  std::string user_id = "user";
  std::string bot_id = "bot";
  // Longest accepted input, in characters.
  std::size_t max_input_chars = 500;
};

// One chat conversation: a rolling whole-turn history and the last codes.
class ChatSession {
 public:
  ChatSession(const trainer::Morpheus& m, ChatOptions options);

  // Handles one input line (a message or a /command) and returns the text to
  // print; sets `quit` on /quit.
  std::string handle(std::string line, bool& quit);

  const DialogueContext& context() const { return context_; }
  const std::vector<predictor::CodePrediction>& last_codes() const { return last_codes_; }

 private:
  const trainer::Morpheus& model_;
  ChatOptions options_;
  DialogueContext context_;
  std::vector<predictor::CodePrediction> last_codes_;
  std::uint64_t turn_ = 0;
};

// Reads lines from `in` until /quit or end of input. Returns 0.
int chat_repl(const trainer::Morpheus& m, const ChatOptions& options, std::istream& in,
              std::ostream& out);

}  // namespace morpheus::inference
