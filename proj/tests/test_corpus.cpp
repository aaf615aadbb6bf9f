#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <set>

#include "morpheus/corpus.hpp"
#include "support.hpp"

using namespace morpheus;
using namespace morpheus::corpus;

namespace {

DialogueSample simple_sample() {
  DialogueSample s;
  s.persona_sentences = {"i like hiking."};
  s.history = {{"user", "how are you ?"}};
  s.response = "i am fine .";
  s.responder_id = "bot";
  return s;
}

void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
  std::ofstream f(p);
  for (const auto& l : lines) f << l << "\n";
}

}  // namespace

TEST_CASE("split_persona follows the period rule") {
  CHECK(split_persona("I enjoy hiking. I'm a bank teller.") ==
        std::vector<std::string>{"I enjoy hiking", "I'm a bank teller"});
  CHECK(split_persona("").empty());
  CHECK(split_persona("a.b..c.") == std::vector<std::string>{"a", "b", "c"});
  CHECK(split_persona("  spaced  .  out ") == std::vector<std::string>{"spaced", "out"});
}

TEST_CASE("split_persona never yields a period or an empty segment") {
  Rng rng(3);
  const std::string alphabet = "ab. ";
  for (int trial = 0; trial < 500; ++trial) {
    std::string s;
    const auto len = uniform_index(rng, 20);
    for (std::size_t i = 0; i < len; ++i) s += alphabet[uniform_index(rng, alphabet.size())];
    for (const auto& seg : split_persona(s)) {
      CHECK(seg.find('.') == std::string::npos);
      CHECK(!seg.empty());
      CHECK(seg.front() != ' ');
      CHECK(seg.back() != ' ');
    }
  }
}

TEST_CASE("fit_segments truncates and pads") {
  CHECK(fit_segments({"a", "b", "c"}, 2) == std::vector<std::string>{"a", "b"});
  CHECK(fit_segments({"a"}, 3) == std::vector<std::string>{"a", "", ""});
  CHECK(fit_segments({"a", "b"}, 2) == std::vector<std::string>{"a", "b"});
  CHECK_THROWS_AS(fit_segments({"a"}, 0), UsageError);
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> segs(uniform_index(rng, 8), "x");
    const int m = 1 + static_cast<int>(uniform_index(rng, 6));
    CHECK(fit_segments(segs, m).size() == static_cast<std::size_t>(m));
  }
}

TEST_CASE("vocabulary reserves ids and round-trips text") {
  const Vocab empty;
  CHECK(empty.token(Vocab::kPad) == "<pad>");
  CHECK(empty.token(Vocab::kSpeakerSelf) == "<spk_b>");
  CHECK_THROWS_AS(empty.tokenize("hello"), UsageError);

  const Vocab v = Vocab::from_tokens({"hi", "there", ".", "i", "like", "hiking"});
  CHECK(v.tokenize("Hi there.") == std::vector<TokenId>{v.id("hi"), v.id("there"), v.id(".")});
  CHECK(v.tokenize("zzyzx") == std::vector<TokenId>{Vocab::kUnk});
  CHECK(v.detokenize(v.tokenize("i like hiking")) == "i like hiking");
  CHECK(v.id("hi") == Vocab::kReservedCount);
}

TEST_CASE("vocabulary build orders by frequency then lexicographically and is bijective") {
  DialogueSample s = simple_sample();
  s.response = "b a b c";
  const Vocab v = Vocab::build({s});
  const auto tokens = v.tokens();
  std::set<std::string> unique(tokens.begin(), tokens.end());
  CHECK(unique.size() == tokens.size());
  for (const auto& t : tokens) CHECK(v.token(v.id(t)) == t);
  CHECK(v.id("b") < v.id("a"));  // b occurs twice

  testing::TempDir dir("vocab");
  v.save(dir / "vocab.txt");
  const Vocab loaded = Vocab::load(dir / "vocab.txt");
  CHECK(loaded.tokens() == v.tokens());
}

TEST_CASE("load_corpus: valid records, limits and rejections") {
  testing::TempDir dir("corpus");
  const auto one = dir / "one.jsonl";
  write_corpus(one, {simple_sample()});
  const auto loaded = load_corpus(one);
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0].persona_sentences == std::vector<std::string>{"i like hiking."});
  CHECK(loaded[0] == simple_sample());

  std::vector<DialogueSample> fifty;
  for (int i = 0; i < 50; ++i) {
    auto s = simple_sample();
    s.response = "reply " + std::to_string(i);
    fifty.push_back(s);
  }
  const auto many = dir / "many.jsonl";
  write_corpus(many, fifty);
  const auto first10 = load_corpus(many, 10);
  REQUIRE(first10.size() == 10);
  for (int i = 0; i < 10; ++i) CHECK(first10[static_cast<std::size_t>(i)].response == "reply " + std::to_string(i));

  const auto mixed = dir / "mixed.jsonl";
  write_lines(mixed, {format_record(simple_sample()),
                      R"({"persona":[],"history":[],"response":"x","responder":"bot"})",
                      "not json", format_record(simple_sample())});
  LoadReport report;
  const auto ok = load_corpus(mixed, std::nullopt, &report);
  CHECK(ok.size() == 2);
  CHECK(report.rejected == 2);
  REQUIRE(report.errors.size() == 2);
  CHECK(report.errors[0].rfind("line 2: history", 0) == 0);
  CHECK(report.errors[1].rfind("line 3:", 0) == 0);

  CHECK_THROWS_AS(load_corpus(dir / "missing.jsonl"), DataError);
  const auto bad = dir / "bad.jsonl";
  write_lines(bad, {R"({"persona":[],"history":[],"response":"x","responder":"bot"})"});
  CHECK_THROWS_AS(load_corpus(bad), DataError);
}

TEST_CASE("parse_record reports field paths") {
  CHECK_THROWS_WITH_AS(parse_record(R"({"persona":[1],"history":[["a","b"]],"response":"x","responder":"c"})"),
                       doctest::Contains("persona[0]"), DataError);
  CHECK_THROWS_WITH_AS(parse_record(R"({"persona":[],"history":[["bot","b"]],"response":"x","responder":"bot"})"),
                       doctest::Contains("history"), DataError);
  CHECK_THROWS_WITH_AS(parse_record(R"({"persona":[],"history":[["a","  "]],"response":"x","responder":"c"})"),
                       doctest::Contains("history[0]"), DataError);
}

TEST_CASE("validate_sample enforces the record invariants") {
  auto s = simple_sample();
  CHECK_NOTHROW(validate_sample(s));
  s.persona_sentences.clear();
  CHECK_THROWS_AS(validate_sample(s), DataError);
  CHECK_NOTHROW(validate_sample(s, true));
  s = simple_sample();
  s.history.back().speaker = s.responder_id;
  CHECK_THROWS_AS(validate_sample(s), DataError);
  s = simple_sample();
  s.response = "   ";
  CHECK_THROWS_AS(validate_sample(s), DataError);
}

TEST_CASE("history tokens mark the responder") {
  const Vocab v = Vocab::from_tokens({"hi", "yo"});
  const std::vector<Turn> h = {{"user", "hi"}, {"bot", "yo"}, {"user", "hi hi"}};
  const auto ids = history_tokens(v, h, "bot");
  const std::vector<TokenId> want = {Vocab::kSpeakerOther, v.id("hi"), Vocab::kSpeakerSelf, v.id("yo"),
                                     Vocab::kSpeakerOther, v.id("hi"), v.id("hi")};
  CHECK(ids == want);

  bool truncated = false;
  const auto window = history_window(v, h, "bot", 5, &truncated);
  CHECK(truncated);
  CHECK(window == std::vector<TokenId>(want.begin() + 2, want.end()));
  const auto all = history_window(v, h, "bot", 100, &truncated);
  CHECK(!truncated);
  CHECK(all == want);
  const auto tail = history_window(v, h, "bot", 2, &truncated);
  CHECK(tail == std::vector<TokenId>{Vocab::kSpeakerOther, v.id("hi")});
}

TEST_CASE("build_idf matches the smoothed formula") {
  // Three documents; "common" in all, "rare" in one.
  std::vector<DialogueSample> docs(3, simple_sample());
  docs[0].response = "common rare";
  docs[1].response = "common";
  docs[2].response = "common";
  for (auto& d : docs) d.history = {{"user", "x"}};
  const IdfTable idf = build_idf(docs);
  CHECK(idf.document_count() == 3);
  CHECK(idf.idf("common") == doctest::Approx(std::log(4.0 / 4.0) + 1.0).epsilon(1e-12));
  CHECK(idf.idf("rare") == doctest::Approx(std::log(4.0 / 2.0) + 1.0).epsilon(1e-12));
  CHECK(idf.idf("unseen") == doctest::Approx(std::log(4.0 / 1.0) + 1.0).epsilon(1e-12));
  CHECK_THROWS_AS(build_idf({}), DataError);
}

TEST_CASE("idf weights are positive and non-increasing in document frequency") {
  Rng rng(9);
  const std::vector<std::string> words = {"a", "b", "c", "d", "e", "f"};
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::string> docs;
    const auto n = 1 + uniform_index(rng, 10);
    for (std::size_t i = 0; i < n; ++i) {
      std::string doc;
      for (std::size_t k = 0; k < 1 + uniform_index(rng, 5); ++k) doc += words[uniform_index(rng, words.size())] + " ";
      docs.push_back(doc);
    }
    const IdfTable idf = build_idf_from_documents(docs);
    for (const auto& a : words) {
      CHECK(idf.idf(a) > 0.0);
      for (const auto& b : words) {
        if (idf.document_frequency(a) <= idf.document_frequency(b)) CHECK(idf.idf(a) >= idf.idf(b));
      }
    }
  }
}

TEST_CASE("synthetic corpus is deterministic, partitioned and template-derived") {
  const auto spec = SyntheticSpec::default_spec();
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);

  std::set<std::string> train, valid, test;
  for (const auto& r : a.train_roles) train.insert(r.id);
  for (const auto& r : a.valid_roles) valid.insert(r.id);
  for (const auto& r : a.test_roles) test.insert(r.id);
  CHECK(train.size() + valid.size() + test.size() == 30);
  for (const auto& id : test) {
    CHECK(train.count(id) == 0);
    CHECK(valid.count(id) == 0);
  }
  for (const auto& id : valid) CHECK(train.count(id) == 0);
  for (const auto& s : a.test) CHECK(test.count(s.responder_id) == 1);

  // Each persona has one sentence per slot; answers name the responder's value.
  for (const auto& s : a.train) {
    CHECK_NOTHROW(validate_sample(s));
    CHECK(s.persona_sentences.size() == spec.slots.size());
    for (std::size_t k = 0; k < spec.slots.size(); ++k) {
      if (s.history.back().utterance != spec.slots[k].question) continue;
      bool found = false;
      for (const auto& v : spec.slots[k].values) {
        if (s.persona_sentences[k].find(v) != std::string::npos) {
          CHECK(s.response.find(v) != std::string::npos);
          found = true;
        }
      }
      CHECK(found);
    }
  }

  bool saw_hiking = false;
  for (const auto& s : a.train) {
    if (s.persona_sentences[0].find("hiking") != std::string::npos &&
        s.history.back().utterance == spec.slots[0].question) {
      CHECK(s.response.find("hiking") != std::string::npos);
      saw_hiking = true;
    }
  }
  CHECK(saw_hiking);

  auto small = spec;
  small.roles_count = 2;
  CHECK_THROWS_AS(generate_synthetic(small), UsageError);
}

TEST_CASE("synthetic spec round-trips through JSON") {
  auto spec = testing::tiny_spec();
  spec.seed = 99;
  const auto back = SyntheticSpec::from_json(spec.to_json());
  CHECK(back.to_json() == spec.to_json());
  CHECK(generate_synthetic(back).train == generate_synthetic(spec).train);
}
