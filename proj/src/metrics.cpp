#include "morpheus/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include "binary_io.hpp"
#include "morpheus/errors.hpp"
#include "morpheus/random.hpp"

namespace morpheus::metrics {

namespace {

using Gram = std::vector<std::string>;

std::map<Gram, std::size_t> ngram_counts(const Tokens& tokens, int n) {
  std::map<Gram, std::size_t> counts;
  const auto len = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + len <= tokens.size(); ++i) {
    ++counts[Gram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                  tokens.begin() + static_cast<std::ptrdiff_t>(i + len))];
  }
  return counts;
}

double modified_precision(const Tokens& hyp, const std::vector<Tokens>& refs, int n) {
  const auto hyp_counts = ngram_counts(hyp, n);
  std::size_t total = 0;
  for (const auto& [g, c] : hyp_counts) total += c;
  if (total == 0) return kSmoothing;
  std::map<Gram, std::size_t> max_ref;
  for (const auto& r : refs) {
    for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
  }
  std::size_t matched = 0;
  for (const auto& [g, c] : hyp_counts) {
    auto it = max_ref.find(g);
    if (it != max_ref.end()) matched += std::min(c, it->second);
  }
  if (matched == 0) return kSmoothing;
  return static_cast<double>(matched) / static_cast<double>(total);
}

double brevity_penalty(std::size_t hyp_len, const std::vector<Tokens>& refs) {
  // Closest reference length; the shorter wins ties.
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto diff = [&](std::size_t l) { return l > hyp_len ? l - hyp_len : hyp_len - l; };
    if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) best = r.size();
  }
  if (hyp_len >= best) return 1.0;
  return std::exp(1.0 - static_cast<double>(best) / static_cast<double>(hyp_len));
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

}  // namespace

double bleu_n(const Tokens& hypothesis, const std::vector<Tokens>& references, int n) {
  if (n != 1 && n != 2) throw UsageError("bleu: n must be 1 or 2");
  if (references.empty()) throw UsageError("bleu: no references");
  if (hypothesis.empty()) return 0.0;
  double log_p = 0.0;
  for (int k = 1; k <= n; ++k) log_p += std::log(modified_precision(hypothesis, references, k));
  return brevity_penalty(hypothesis.size(), references) * std::exp(log_p / n);
}

double bleu_n(const Tokens& hypothesis, const Tokens& reference, int n) {
  return bleu_n(hypothesis, std::vector<Tokens>{reference}, n);
}

double rouge_l(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  std::vector<std::size_t> prev(ref.size() + 1, 0), cur(ref.size() + 1, 0);
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      cur[j] = hyp[i - 1] == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[ref.size()]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(hyp.size());
  const double r = lcs / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

double distinct_n(const std::vector<Tokens>& responses, int n) {
  if (n < 1) throw UsageError("distinct_n: n must be >= 1");
  std::set<Gram> unique;
  std::size_t total = 0;
  for (const auto& r : responses) {
    for (const auto& [g, c] : ngram_counts(r, n)) {
      unique.insert(g);
      total += c;
    }
  }
  if (total == 0) throw UsageError("distinct_n: no " + std::to_string(n) + "-grams in the corpus");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

double self_bleu(const std::vector<Tokens>& responses, std::size_t cap, std::uint64_t seed, int order) {
  if (responses.size() < 2) throw UsageError("self_bleu: needs at least 2 responses");
  std::vector<std::size_t> picked(responses.size());
  for (std::size_t i = 0; i < picked.size(); ++i) picked[i] = i;
  if (cap > 0 && cap < picked.size()) {
    Rng rng(seed);
    shuffle(picked, rng);
    picked.resize(cap);
    std::sort(picked.begin(), picked.end());
  }
  double sum = 0.0;
  for (std::size_t i : picked) {
    std::vector<Tokens> refs;
    for (std::size_t j = 0; j < responses.size(); ++j) {
      if (j != i) refs.push_back(responses[j]);
    }
    sum += bleu_n(responses[i], refs, order);
  }
  return sum / static_cast<double>(picked.size());
}

double p_co(const Tokens& response, const Tokens& persona, const corpus::IdfTable& idf) {
  if (response.empty() || persona.empty()) return 0.0;
  std::map<std::string, double> a, b;
  for (const auto& t : response) a[t] += 1.0;
  for (const auto& t : persona) b[t] += 1.0;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (auto& [t, v] : a) {
    v *= idf.idf(t);
    na += v * v;
  }
  for (auto& [t, v] : b) {
    v *= idf.idf(t);
    nb += v * v;
    if (auto it = a.find(t); it != a.end()) dot += it->second * v;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 1.0);
}

std::string Report::format() const {
  const std::vector<std::pair<std::string, double>> rows = {
      {"bleu1", bleu1}, {"bleu2", bleu2}, {"rouge_l", rouge_l}, {"dist1", dist1},
      {"dist2", dist2}, {"sbleu", self_bleu}, {"p_co", p_co}};
  std::string out;
  out += "corpus_size=" + std::to_string(corpus_size) + "\n";
  out += "config_hash=" + config_hash + "\n";
  out += "bleu_averaging=sentence\n";
  for (const auto& [k, v] : rows) out += k + "=" + percent(v) + "\n";
  out += "\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-12s| %-24s| %-16s| %s\n", "", "Coherence", "Diversity", "Consistency");
  out += line;
  std::snprintf(line, sizeof line, "%-12s| %7s %7s %7s | %7s %7s | %7s %7s\n", "", "BLEU-1", "BLEU-2",
                "ROUGE-L", "Dist-1", "Dist-2", "sBLEU", "P-Co");
  out += line;
  std::snprintf(line, sizeof line, "%-12s| %7s %7s %7s | %7s %7s | %7s %7s\n", "score", percent(bleu1).c_str(),
                percent(bleu2).c_str(), percent(rouge_l).c_str(), percent(dist1).c_str(),
                percent(dist2).c_str(), percent(self_bleu).c_str(), percent(p_co).c_str());
  out += line;
  return out;
}

Report evaluate(const std::vector<std::string>& outputs, const std::vector<std::string>& references,
                const std::vector<std::string>& personas, const corpus::IdfTable& idf,
                const SuiteConfig& config) {
  if (outputs.size() != references.size() || outputs.size() != personas.size()) {
    throw DataError("evaluate: length mismatch (outputs " + std::to_string(outputs.size()) +
                    ", references " + std::to_string(references.size()) + ", personas " +
                    std::to_string(personas.size()) + ")");
  }
  if (outputs.empty()) throw DataError("evaluate: no samples");
  std::vector<Tokens> hyp, ref, per;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    hyp.push_back(corpus::word_tokens(outputs[i]));
    ref.push_back(corpus::word_tokens(references[i]));
    per.push_back(corpus::word_tokens(personas[i]));
  }
  Report r;
  r.corpus_size = outputs.size();
  const double n = static_cast<double>(outputs.size());
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    r.bleu1 += bleu_n(hyp[i], ref[i], 1) / n;
    r.bleu2 += bleu_n(hyp[i], ref[i], 2) / n;
    r.rouge_l += rouge_l(hyp[i], ref[i]) / n;
    r.p_co += p_co(hyp[i], per[i], idf) / n;
  }
  auto safe_distinct = [&](int k) {
    try {
      return distinct_n(hyp, k);
    } catch (const UsageError&) {
      return 0.0;
    }
  };
  r.dist1 = safe_distinct(1);
  r.dist2 = safe_distinct(2);
  r.self_bleu = hyp.size() >= 2 ? self_bleu(hyp, config.self_bleu_cap, config.seed) : 0.0;
  const std::string key = config.model_config_hash + "|sbleu_cap=" + std::to_string(config.self_bleu_cap) +
                          "|seed=" + std::to_string(config.seed) + "|sbleu_order=2|smoothing=1e-9";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(key)));
  r.config_hash = buf;
  return r;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

Report evaluate_suite(const std::filesystem::path& outputs, const std::filesystem::path& references,
                      const std::filesystem::path& personas, const corpus::IdfTable& idf,
                      const SuiteConfig& config) {
  return evaluate(read_lines(outputs), read_lines(references), read_lines(personas), idf, config);
}

}  // namespace morpheus::metrics
