#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

#include "morpheus/errors.hpp"
#include "morpheus/metrics.hpp"
#include "morpheus/random.hpp"

using namespace morpheus;
using namespace morpheus::metrics;

namespace {

Tokens words(std::string_view s) { return corpus::word_tokens(s); }

Tokens random_sentence(Rng& rng, std::size_t max_len, int alphabet) {
  const std::size_t len = 1 + uniform_index(rng, max_len);
  Tokens out;
  for (std::size_t i = 0; i < len; ++i) out.push_back(std::string(1, static_cast<char>('a' + uniform_index(rng, alphabet))));
  return out;
}

// Exhaustive LCS over subsequences of the shorter side; fine for length <= 10.
std::size_t lcs_brute(const Tokens& a, const Tokens& b) {
  const Tokens& s = a.size() <= b.size() ? a : b;
  const Tokens& t = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << s.size()); ++mask) {
    Tokens sub;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (mask & (1u << i)) sub.push_back(s[i]);
    std::size_t j = 0;
    for (const auto& w : t)
      if (j < sub.size() && w == sub[j]) ++j;
    if (j == sub.size()) best = std::max(best, sub.size());
  }
  return best;
}

std::map<Tokens, int> grams(const Tokens& t, std::size_t n) {
  std::map<Tokens, int> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

double bleu_oracle(const Tokens& hyp, const Tokens& ref, int order) {
  double log_sum = 0.0;
  for (int n = 1; n <= order; ++n) {
    const auto h = grams(hyp, n), r = grams(ref, n);
    int match = 0, total = 0;
    for (const auto& [g, c] : h) {
      total += c;
      auto it = r.find(g);
      if (it != r.end()) match += std::min(c, it->second);
    }
    log_sum += std::log(match == 0 ? kSmoothing : double(match) / total);
  }
  const double c = double(hyp.size()), rl = double(ref.size());
  const double bp = c >= rl ? 1.0 : std::exp(1.0 - rl / c);
  return bp * std::exp(log_sum / order);
}

}  // namespace

TEST_CASE("bleu examples") {
  CHECK(bleu_n(words("a b c"), words("a x c"), 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(bleu_n(words("a"), words("a b"), 1) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(bleu_n(words("a"), words("a b"), 1) == doctest::Approx(0.3679).epsilon(1e-4));
  CHECK(bleu_n(words("i like dogs ."), words("i like dogs ."), 2) == doctest::Approx(1.0));
  // Clipping: "the the the" against "the cat" matches once.
  CHECK(bleu_n(words("the the the"), words("the cat"), 1) == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(bleu_n(words("a"), words("a"), 3), UsageError);
  CHECK_THROWS_AS(bleu_n(words("a"), std::vector<Tokens>{}, 1), UsageError);
}

TEST_CASE("bleu agrees with an n-gram counting oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const auto h = random_sentence(rng, 9, 4);
    const auto r = random_sentence(rng, 9, 4);
    for (int n : {1, 2}) {
      INFO("trial " << trial << " n " << n);
      CHECK(bleu_n(h, r, n) == doctest::Approx(bleu_oracle(h, r, n)).epsilon(1e-9));
    }
  }
}

TEST_CASE("multi-reference bleu clips jointly") {
  const std::vector<Tokens> refs{words("a b"), words("c d")};
  CHECK(bleu_n(words("a c"), refs, 1) == doctest::Approx(1.0));
  CHECK(bleu_n(words("a c"), std::vector<Tokens>{words("a b")}, 1) == doctest::Approx(0.5));
}

TEST_CASE("rouge-l examples and brute-force agreement") {
  CHECK(rouge_l(words("a b c"), words("a c")) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(rouge_l(words("a b"), words("c d")) == 0.0);
  CHECK(rouge_l(words("x y z"), words("x y z")) == doctest::Approx(1.0));

  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    const auto h = random_sentence(rng, 9, 3);
    const auto r = random_sentence(rng, 9, 3);
    const double l = double(lcs_brute(h, r));
    const double expect = l == 0 ? 0.0 : 2.0 * (l / h.size()) * (l / r.size()) / (l / h.size() + l / r.size());
    INFO("trial " << trial);
    CHECK(rouge_l(h, r) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("distinct-n examples") {
  CHECK(distinct_n({words("a b a")}, 1) == doctest::Approx(2.0 / 3.0));
  CHECK(distinct_n({words("a b a")}, 2) == doctest::Approx(1.0));
  CHECK(distinct_n({words("a b"), words("a b")}, 2) == doctest::Approx(0.5));
  CHECK(distinct_n({words("a b"), words("b a")}, 1) == doctest::Approx(0.5));
  CHECK_THROWS_AS(distinct_n({words("a")}, 2), UsageError);
  CHECK_THROWS_AS(distinct_n({}, 1), UsageError);
  CHECK_THROWS_AS(distinct_n({words("a")}, 0), UsageError);
}

TEST_CASE("distinct-n is invariant to response order and bounded") {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Tokens> rs;
    for (int i = 0; i < 6; ++i) rs.push_back(random_sentence(rng, 6, 5));
    auto shuffled = rs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (int n : {1, 2}) {
      std::size_t total = 0;
      for (const auto& r : rs) total += r.size() >= std::size_t(n) ? r.size() - n + 1 : 0;
      if (total == 0) continue;
      const double d = distinct_n(rs, n);
      CHECK(d == distinct_n(shuffled, n));
      CHECK(d > 0.0);
      CHECK(d <= 1.0);
    }
  }
}

TEST_CASE("self-bleu examples") {
  // Each side: unigram 1/2, bigram smoothed to 1e-9.
  CHECK(self_bleu({words("a b"), words("a c")}, 10) == doctest::Approx(std::sqrt(0.5 * kSmoothing)).epsilon(1e-9));
  CHECK(self_bleu({words("a b c"), words("a b c"), words("a b c")}, 10) == doctest::Approx(1.0));
  CHECK_THROWS_AS(self_bleu({words("a b")}, 10), UsageError);
}

TEST_CASE("self-bleu subsampling is seeded") {
  Rng rng(14);
  std::vector<Tokens> rs;
  for (int i = 0; i < 40; ++i) rs.push_back(random_sentence(rng, 6, 4));
  CHECK(self_bleu(rs, 10, 5) == self_bleu(rs, 10, 5));
  const double full = self_bleu(rs, 40, 0);
  CHECK(full == self_bleu(rs, 1000, 9));
}

TEST_CASE("p-co examples and idf scale invariance") {
  const corpus::IdfTable unit;  // empty table: every weight is 1
  CHECK(unit.idf("hiking") == doctest::Approx(1.0));
  CHECK(p_co(words("hiking fun"), words("hiking trails"), unit) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p_co(words("dogs"), words("cats"), unit) == 0.0);
  CHECK(p_co(words("i like dogs"), words("i like dogs"), unit) == doctest::Approx(1.0));

  const corpus::IdfTable idf({{"i", 90}, {"like", 60}, {"dogs", 3}, {"cats", 2}}, 100);
  Rng rng(15);
  const Tokens pool{"i", "like", "dogs", "cats", "hiking", "fun"};
  for (int trial = 0; trial < 100; ++trial) {
    Tokens a, b;
    for (int i = 0; i < 5; ++i) a.push_back(pool[uniform_index(rng, pool.size())]);
    for (int i = 0; i < 4; ++i) b.push_back(pool[uniform_index(rng, pool.size())]);
    const double factor = std::exp(normal(rng, 0.0, 2.0));
    const double base = p_co(a, b, idf);
    CHECK(p_co(a, b, idf.scaled(factor)) == doctest::Approx(base).epsilon(1e-9));
    CHECK(base >= 0.0);
    CHECK(base <= 1.0 + 1e-12);
  }
}

TEST_CASE("evaluate checks alignment and formats deterministically") {
  const std::vector<std::string> out{"i like dogs .", "i enjoy hiking ."};
  const std::vector<std::string> ref{"i like cats .", "i enjoy hiking ."};
  const std::vector<std::string> per{"i have a dog.", "i enjoy hiking."};
  const auto r1 = evaluate(out, ref, per, corpus::IdfTable{}, SuiteConfig{});
  const auto r2 = evaluate(out, ref, per, corpus::IdfTable{}, SuiteConfig{});
  CHECK(r1.format() == r2.format());
  CHECK(r1.corpus_size == 2u);
  CHECK(r1.bleu1 == doctest::Approx((0.75 + 1.0) / 2.0));
  const auto text = r1.format();
  CHECK(text.find("bleu1=87.50") != std::string::npos);
  CHECK(text.find("BLEU-1") != std::string::npos);

  SuiteConfig other;
  other.model_config_hash = "abc";
  CHECK(evaluate(out, ref, per, corpus::IdfTable{}, other).config_hash != r1.config_hash);

  CHECK_THROWS_AS(evaluate(out, {"x"}, per, corpus::IdfTable{}, SuiteConfig{}), DataError);
}

TEST_CASE("evaluate_suite reads line files") {
  const auto dir = std::filesystem::temp_directory_path() / "morpheus_test_metrics";
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const char* text) {
    std::ofstream(dir / name) << text;
    return dir / name;
  };
  const auto o = write("out.txt", "i like dogs .\ni enjoy hiking .\n");
  const auto r = write("ref.txt", "i like cats .\ni enjoy hiking .\n");
  const auto p = write("per.txt", "i have a dog.\ni enjoy hiking.\n");
  const auto short_ref = write("short.txt", "i like cats .\n");
  const auto report = evaluate_suite(o, r, p, corpus::IdfTable{}, SuiteConfig{});
  CHECK(report.corpus_size == 2u);
  CHECK_THROWS_AS(evaluate_suite(o, short_ref, p, corpus::IdfTable{}, SuiteConfig{}), DataError);
  CHECK_THROWS_AS(read_lines(dir / "missing.txt"), DataError);
  std::filesystem::remove_all(dir);
}
