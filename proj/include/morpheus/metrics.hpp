#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "morpheus/corpus.hpp"

namespace morpheus::metrics {

using Tokens = std::vector<std::string>;

inline constexpr double kSmoothing = 1e-9;

// Modified n-gram precision with brevity penalty; n = 2 is the geometric mean
// of the unigram and bigram precisions. A precision with no matches becomes
// kSmoothing. Several references clip jointly and the closest length sets
// the brevity penalty.
double bleu_n(const Tokens& hypothesis, const Tokens& reference, int n);
double bleu_n(const Tokens& hypothesis, const std::vector<Tokens>& references, int n);

// LCS-based F1.
double rouge_l(const Tokens& hypothesis, const Tokens& reference);

// Corpus-level unique n-grams over total n-grams.
double distinct_n(const std::vector<Tokens>& responses, int n);

// Mean BLEU-`order` of each response against all others; at most `cap`
// responses are scored, chosen by a seeded subsample.
double self_bleu(const std::vector<Tokens>& responses, std::size_t cap, std::uint64_t seed = 0,
                 int order = 2);

// Cosine between IDF-weighted term-frequency vectors.
double p_co(const Tokens& response, const Tokens& persona, const corpus::IdfTable& idf);

struct SuiteConfig {
  std::size_t self_bleu_cap = 200;
  std::uint64_t seed = 0;
  // Folded into the reported hash alongside the suite's own settings.
  std::string model_config_hash;
};

struct Report {
  std::size_t corpus_size = 0;
  double bleu1 = 0.0, bleu2 = 0.0, rouge_l = 0.0;
  double dist1 = 0.0, dist2 = 0.0, self_bleu = 0.0, p_co = 0.0;
  std::string config_hash;

  // "key=value" machine block followed by an aligned table; percentages, 2 decimals.
  std::string format() const;
};

// Aligned lists of outputs, references and personas (one persona text per sample).
Report evaluate(const std::vector<std::string>& outputs, const std::vector<std::string>& references,
                const std::vector<std::string>& personas, const corpus::IdfTable& idf,
                const SuiteConfig& config);

// Same, over files with one entry per line.
Report evaluate_suite(const std::filesystem::path& outputs, const std::filesystem::path& references,
                      const std::filesystem::path& personas, const corpus::IdfTable& idf,
                      const SuiteConfig& config);

std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace morpheus::metrics
