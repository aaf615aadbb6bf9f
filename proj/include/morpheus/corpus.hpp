#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "morpheus/errors.hpp"

namespace morpheus::corpus {

using TokenId = std::int32_t;

struct Turn {
  std::string speaker;
  std::string utterance;

  bool operator==(const Turn&) const = default;
};

// One training record. At inference only `history` and `responder_id` are
// consulted; see inference::DialogueContext.
struct DialogueSample {
  std::vector<std::string> persona_sentences;
  std::vector<Turn> history;
  std::string response;
  std::string responder_id;

  bool operator==(const DialogueSample&) const = default;
};

// Throws DataError describing the first violated invariant. `allow_empty_persona`
// is set for inference-time (persona-masked) records.
void validate_sample(const DialogueSample& sample, bool allow_empty_persona = false);

struct LoadReport {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<std::string> errors;  // "line N: field: message"
};

// Reads the one-record-per-line corpus format. Malformed records are skipped
// and listed in `report`; a corpus with no valid record is an error.
std::vector<DialogueSample> load_corpus(const std::filesystem::path& path,
                                        std::optional<std::size_t> limit = std::nullopt,
                                        LoadReport* report = nullptr);

// Parses one corpus line. Throws DataError with the offending field path.
DialogueSample parse_record(std::string_view line);
std::string format_record(const DialogueSample& sample);
void write_corpus(const std::filesystem::path& path, const std::vector<DialogueSample>& samples);

std::vector<std::string> split_persona(std::string_view persona_text);

// Exactly `m` segments: truncated, or padded with empty segments.
std::vector<std::string> fit_segments(std::vector<std::string> segments, int m);

// Lowercased word/punctuation split. Apostrophes stay inside words.
std::vector<std::string> word_tokens(std::string_view text);

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBeginResponse = 2;
  static constexpr TokenId kEndResponse = 3;
  static constexpr TokenId kSpeakerOther = 4;  // speaker-A: anyone but the responder
  static constexpr TokenId kSpeakerSelf = 5;   // speaker-B: the responder
  static constexpr TokenId kReservedCount = 6;

  Vocab();

  // Tokens ordered by descending frequency, ties broken lexicographically.
  static Vocab build(const std::vector<DialogueSample>& samples, std::size_t min_count = 1);
  static Vocab from_tokens(const std::vector<std::string>& tokens);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return id_to_token_.size(); }
  bool built() const { return built_; }
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  // Non-reserved tokens in id order.
  std::vector<std::string> tokens() const;

  std::vector<TokenId> tokenize(std::string_view text) const;
  // Reserved ids other than unk are skipped.
  std::string detokenize(const std::vector<TokenId>& ids) const;

 private:
  void add(const std::string& token);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  bool built_ = false;
};

// History as decoder input: per turn a speaker marker (self for the responder)
// followed by the utterance tokens.
std::vector<TokenId> history_tokens(const Vocab& vocab, const std::vector<Turn>& history,
                                    std::string_view responder_id);

// As history_tokens, keeping only the most recent whole turns that fit in
// `max_tokens`. A final turn that alone is too long keeps its marker and the
// tail of its utterance; `truncated` reports whether anything was dropped.
std::vector<TokenId> history_window(const Vocab& vocab, const std::vector<Turn>& history,
                                    std::string_view responder_id, std::size_t max_tokens,
                                    bool* truncated = nullptr);

class IdfTable {
 public:
  IdfTable() = default;
  IdfTable(std::unordered_map<std::string, std::size_t> document_frequency,
           std::size_t document_count);

  double idf(std::string_view token) const;
  std::size_t document_count() const { return document_count_; }
  std::size_t document_frequency(std::string_view token) const;
  // Multiplies every weight by `factor` > 0; unseen tokens scale alike.
  IdfTable scaled(double factor) const;

 private:
  std::unordered_map<std::string, std::size_t> df_;
  std::size_t document_count_ = 0;
  double scale_ = 1.0;
};

// Document = one sample's history utterances plus its response.
IdfTable build_idf(const std::vector<DialogueSample>& samples);
IdfTable build_idf_from_documents(const std::vector<std::string>& documents);

struct SlotSpec {
  std::string name;
  std::vector<std::string> values;
  // "{v}" is replaced by the value.
  std::vector<std::string> persona_templates;
  std::string question;
  std::string answer_template;
  // One indirect hint utterance per value (same order as `values`).
  std::vector<std::string> hints;
};

struct SyntheticSpec {
  std::vector<SlotSpec> slots;
  std::vector<std::string> small_talk;
  int roles_count = 30;
  int turns_per_dialogue = 2;  // hint exchanges before the final question
  int dialogues_per_role = 16;
  // Chance that the asked slot is among the hinted ones; otherwise only the
  // persona tells the answer.
  double hint_rate = 0.5;
  double valid_fraction = 0.1;
  double test_fraction = 0.2;
  std::uint64_t seed = 7;

  static SyntheticSpec default_spec();
  static SyntheticSpec from_json(std::string_view text);
  std::string to_json() const;
  void validate() const;
};

struct SyntheticRole {
  std::string id;
  std::vector<std::size_t> value_index;  // per slot
};

struct SyntheticCorpus {
  std::vector<DialogueSample> train;
  std::vector<DialogueSample> valid;
  std::vector<DialogueSample> test;
  std::vector<SyntheticRole> train_roles;
  std::vector<SyntheticRole> valid_roles;
  std::vector<SyntheticRole> test_roles;
};

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

}  // namespace morpheus::corpus
