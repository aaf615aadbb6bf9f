#include "morpheus/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace morpheus::corpus {

namespace {

using nlohmann::json;

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

[[noreturn]] void schema_error(const std::string& field, const std::string& message) {
  throw DataError(field + ": " + message);
}

std::string require_string(const json& value, const std::string& field) {
  if (!value.is_string()) schema_error(field, "expected string");
  return value.get<std::string>();
}

}  // namespace

void validate_sample(const DialogueSample& sample, bool allow_empty_persona) {
  if (sample.history.empty()) schema_error("history", "must be non-empty");
  for (std::size_t i = 0; i < sample.history.size(); ++i) {
    const auto& turn = sample.history[i];
    if (trim(turn.speaker).empty()) {
      schema_error("history[" + std::to_string(i) + "][0]", "empty speaker");
    }
    if (trim(turn.utterance).empty()) {
      schema_error("history[" + std::to_string(i) + "][1]", "empty utterance");
    }
  }
  if (trim(sample.response).empty()) schema_error("response", "empty utterance");
  if (trim(sample.responder_id).empty()) schema_error("responder", "empty role identifier");
  if (sample.history.back().speaker == sample.responder_id) {
    schema_error("history", "last turn is spoken by the responder");
  }
  if (!allow_empty_persona && sample.persona_sentences.empty()) {
    schema_error("persona", "must be non-empty for training records");
  }
}

DialogueSample parse_record(std::string_view line) {
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("<record>: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) schema_error("<record>", "expected object");
  for (const char* key : {"persona", "history", "response", "responder"}) {
    if (!doc.contains(key)) schema_error(key, "missing");
  }

  DialogueSample sample;
  const json& persona = doc["persona"];
  if (!persona.is_array()) schema_error("persona", "expected array");
  for (std::size_t i = 0; i < persona.size(); ++i) {
    sample.persona_sentences.push_back(
        require_string(persona[i], "persona[" + std::to_string(i) + "]"));
  }

  const json& history = doc["history"];
  if (!history.is_array()) schema_error("history", "expected array");
  for (std::size_t i = 0; i < history.size(); ++i) {
    const std::string path = "history[" + std::to_string(i) + "]";
    const json& pair = history[i];
    if (!pair.is_array() || pair.size() != 2) schema_error(path, "expected [speaker, utterance]");
    sample.history.push_back(
        {require_string(pair[0], path + "[0]"), require_string(pair[1], path + "[1]")});
  }
  sample.response = require_string(doc["response"], "response");
  sample.responder_id = require_string(doc["responder"], "responder");
  validate_sample(sample, /*allow_empty_persona=*/true);
  return sample;
}

std::string format_record(const DialogueSample& sample) {
  json history = json::array();
  for (const auto& turn : sample.history) history.push_back({turn.speaker, turn.utterance});
  json doc = {{"persona", sample.persona_sentences},
              {"history", history},
              {"response", sample.response},
              {"responder", sample.responder_id}};
  return doc.dump();
}

std::vector<DialogueSample> load_corpus(const std::filesystem::path& path,
                                        std::optional<std::size_t> limit, LoadReport* report) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path.string());

  LoadReport local;
  LoadReport& rep = report ? *report : local;
  std::vector<DialogueSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (limit && samples.size() >= *limit) break;
    if (trim(line).empty()) continue;
    try {
      samples.push_back(parse_record(line));
      ++rep.accepted;
    } catch (const DataError& e) {
      ++rep.rejected;
      rep.errors.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (samples.empty()) {
    std::string msg = "empty corpus: " + path.string();
    if (!rep.errors.empty()) msg += " (" + rep.errors.front() + ")";
    throw DataError(msg);
  }
  return samples;
}

void write_corpus(const std::filesystem::path& path, const std::vector<DialogueSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus file: " + path.string());
  for (const auto& s : samples) out << format_record(s) << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

std::vector<std::string> split_persona(std::string_view persona_text) {
  std::vector<std::string> segments;
  std::size_t start = 0;
  while (start <= persona_text.size()) {
    std::size_t dot = persona_text.find('.', start);
    if (dot == std::string_view::npos) dot = persona_text.size();
    std::string seg = trim(persona_text.substr(start, dot - start));
    if (!seg.empty()) segments.push_back(std::move(seg));
    start = dot + 1;
  }
  return segments;
}

std::vector<std::string> fit_segments(std::vector<std::string> segments, int m) {
  if (m <= 0) throw UsageError("fit_segments: M must be positive");
  segments.resize(static_cast<std::size_t>(m));
  return segments;
}

std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c) && raw != '\'') {
      flush();
      out.emplace_back(1, raw);
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

// ---------------------------------------------------------------- Vocab

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<unk>", "<bor>", "<eor>", "<spk_a>", "<spk_b>"}) add(t);
}

void Vocab::add(const std::string& token) {
  if (token_to_id_.count(token)) return;
  token_to_id_.emplace(token, static_cast<TokenId>(id_to_token_.size()));
  id_to_token_.push_back(token);
}

Vocab Vocab::build(const std::vector<DialogueSample>& samples, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  auto count = [&](std::string_view text) {
    for (auto& t : word_tokens(text)) ++counts[t];
  };
  for (const auto& s : samples) {
    for (const auto& p : s.persona_sentences) count(p);
    for (const auto& turn : s.history) count(turn.utterance);
    count(s.response);
  }
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (auto& [tok, n] : ordered) {
    if (n >= min_count) tokens.push_back(tok);
  }
  return from_tokens(tokens);
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (const auto& t : tokens) {
    if (t.empty()) throw DataError("vocabulary: empty token");
    if (v.token_to_id_.count(t)) throw DataError("vocabulary: duplicate token '" + t + "'");
    v.add(t);
  }
  v.built_ = true;
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file: " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(tokens);
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary file: " + path.string());
  for (const auto& t : tokens()) out << t << '\n';
}

TokenId Vocab::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw UsageError("token id out of range: " + std::to_string(id));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocab::tokens() const {
  return {id_to_token_.begin() + kReservedCount, id_to_token_.end()};
}

std::vector<TokenId> Vocab::tokenize(std::string_view text) const {
  if (!built_) throw UsageError("tokenize called before vocabulary construction");
  std::vector<TokenId> ids;
  for (const auto& t : word_tokens(text)) ids.push_back(id(t));
  return ids;
}

std::string Vocab::detokenize(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < kReservedCount && id != kUnk) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

std::vector<TokenId> history_tokens(const Vocab& vocab, const std::vector<Turn>& history,
                                    std::string_view responder_id) {
  std::vector<TokenId> ids;
  for (const auto& turn : history) {
    ids.push_back(turn.speaker == responder_id ? Vocab::kSpeakerSelf : Vocab::kSpeakerOther);
    auto words = vocab.tokenize(turn.utterance);
    ids.insert(ids.end(), words.begin(), words.end());
  }
  return ids;
}

std::vector<TokenId> history_window(const Vocab& vocab, const std::vector<Turn>& history,
                                    std::string_view responder_id, std::size_t max_tokens,
                                    bool* truncated) {
  if (truncated) *truncated = false;
  std::vector<std::vector<TokenId>> turns;
  for (const auto& turn : history) turns.push_back(history_tokens(vocab, {turn}, responder_id));
  std::size_t used = 0;
  std::size_t first = turns.size();
  while (first > 0 && used + turns[first - 1].size() <= max_tokens) used += turns[--first].size();
  std::vector<TokenId> ids;
  if (first == turns.size() && !turns.empty() && max_tokens > 0) {
    const auto& last = turns.back();
    ids.push_back(last.front());
    ids.insert(ids.end(), last.end() - static_cast<std::ptrdiff_t>(max_tokens - 1), last.end());
    if (truncated) *truncated = true;
    return ids;
  }
  if (first > 0 && truncated) *truncated = true;
  for (std::size_t i = first; i < turns.size(); ++i) ids.insert(ids.end(), turns[i].begin(), turns[i].end());
  return ids;
}

// ---------------------------------------------------------------- IDF

IdfTable::IdfTable(std::unordered_map<std::string, std::size_t> document_frequency,
                   std::size_t document_count)
    : df_(std::move(document_frequency)), document_count_(document_count) {}

std::size_t IdfTable::document_frequency(std::string_view token) const {
  auto it = df_.find(std::string(token));
  return it == df_.end() ? 0 : it->second;
}

double IdfTable::idf(std::string_view token) const {
  const double n = static_cast<double>(document_count_);
  const double df = static_cast<double>(document_frequency(token));
  return scale_ * (std::log((1.0 + n) / (1.0 + df)) + 1.0);
}

IdfTable IdfTable::scaled(double factor) const {
  if (!(factor > 0.0)) throw UsageError("IDF scale factor must be positive");
  IdfTable copy = *this;
  copy.scale_ *= factor;
  return copy;
}

IdfTable build_idf_from_documents(const std::vector<std::string>& documents) {
  if (documents.empty()) throw DataError("build_idf: empty corpus");
  std::unordered_map<std::string, std::size_t> df;
  for (const auto& doc : documents) {
    auto words = word_tokens(doc);
    std::set<std::string> unique(words.begin(), words.end());
    for (const auto& w : unique) ++df[w];
  }
  return IdfTable(std::move(df), documents.size());
}

IdfTable build_idf(const std::vector<DialogueSample>& samples) {
  std::vector<std::string> docs;
  docs.reserve(samples.size());
  for (const auto& s : samples) {
    std::string doc;
    for (const auto& turn : s.history) doc += turn.utterance + ' ';
    doc += s.response;
    docs.push_back(std::move(doc));
  }
  return build_idf_from_documents(docs);
}

}  // namespace morpheus::corpus
