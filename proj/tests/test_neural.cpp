#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "morpheus/errors.hpp"
#include "morpheus/neural.hpp"
#include "support.hpp"

using namespace morpheus;
using namespace morpheus::neural;
using nn::Matrix;
using nn::Var;

namespace {

corpus::Vocab toy_vocab() {
  const auto data = corpus::generate_synthetic(testing::tiny_spec());
  return corpus::Vocab::build(data.train);
}

ModelConfig toy_config(int vocab) {
  ModelConfig c;
  c.d = 16;
  c.layers = 2;
  c.heads = 2;
  c.max_sequence_length = 48;
  c.vocab_size = vocab;
  c.segments = 3;
  return c;
}

struct Toy {
  DialogueModel model;
  Toy() : model(toy_config(static_cast<int>(toy_vocab().size())), toy_vocab(), 21) {}

  std::vector<TokenId> tokens(std::string_view text) const { return model.vocab.tokenize(text); }
  std::vector<Var> persona(std::initializer_list<std::string_view> segs) const {
    std::vector<Var> out;
    for (auto s : segs) out.push_back(encode_persona_var(model, s));
    return out;
  }
};

void zero_parameters(const nn::Module& m) {
  for (const auto& p : m.parameters()) {
    auto& v = const_cast<Var&>(p.var).mutable_value();
    for (double& x : v.data) x = 0.0;
  }
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c = toy_config(10);
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = toy_config(0);
  CHECK_THROWS_AS(c.validate(), UsageError);
  const auto big = ModelConfig::full_scale(100);
  CHECK(big.d == 768);
  CHECK(big.layers == 12);
}

TEST_CASE("encode_persona is deterministic and separates segments") {
  Toy t;
  const auto a = encode_persona(t.model, "i enjoy hiking.");
  const auto b = encode_persona(t.model, "i enjoy hiking.");
  const auto c = encode_persona(t.model, "i work as a nurse.");
  CHECK(a.vector == b.vector);
  CHECK(a.vector.size() == 16u);
  CHECK(a.vector != c.vector);
  for (double x : a.vector) CHECK(std::isfinite(x));
  CHECK(encode_persona(t.model, "").vector == t.model.encoder.null_vector().value().data);
}

TEST_CASE("encode_persona rejects segments beyond the context") {
  Toy t;
  std::string longest;
  for (int i = 0; i < 60; ++i) longest += "i ";
  CHECK_THROWS_AS(encode_persona(t.model, longest), DataError);
}

TEST_CASE("encode_history is deterministic, sensitive and rejects empty input") {
  Toy t;
  const std::vector<corpus::Turn> h1{{"user", "what is your job ?"}};
  const std::vector<corpus::Turn> h2{{"user", "what is your pet ?"}};
  CHECK(encode_history(t.model, h1, "bot").vector == encode_history(t.model, h1, "bot").vector);
  CHECK(encode_history(t.model, h1, "bot").vector != encode_history(t.model, h2, "bot").vector);
  CHECK_THROWS_AS(encode_history(t.model, {}, "bot"), UsageError);
}

TEST_CASE("build_prefix shape and order contract") {
  Toy t;
  const auto vs = t.persona({"i enjoy hiking.", "i work as a nurse.", "i have a pet dog."});
  const auto prefix = build_prefix(t.model, vs);
  CHECK(prefix.length == 3u);
  REQUIRE(prefix.keys.size() == 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(prefix.keys[l].rows() == 3u);
    CHECK(prefix.values[l].rows() == 3u);
    CHECK(prefix.keys[l].cols() == 16u);
  }
  const std::vector<Var> swapped{vs[1], vs[0], vs[2]};
  const auto other = build_prefix(t.model, swapped);
  const auto& k = prefix.keys[0].value();
  const auto& ks = other.keys[0].value();
  for (std::size_t c = 0; c < 16; ++c) {
    CHECK(ks(0, c) == k(1, c));
    CHECK(ks(1, c) == k(0, c));
  }
  CHECK(ks != k);

  const std::vector<Var> two{vs[0], vs[1]};
  CHECK_THROWS_AS(build_prefix(t.model, two), UsageError);
  std::vector<Var> bad = vs;
  bad[2] = Var(Matrix(1, 5));
  CHECK_THROWS_AS(build_prefix(t.model, bad), UsageError);
}

TEST_CASE("decode_nll is non-negative and reacts to the prefix") {
  Toy t;
  const auto history = t.tokens("what do you do for fun ?");
  const auto response = t.tokens("i enjoy hiking .");
  const double plain = decode_nll(t.model, nullptr, history, response);
  const auto prefix = build_prefix(t.model, t.persona({"i enjoy hiking.", "", "i have a pet dog."}));
  const double conditioned = decode_nll(t.model, &prefix, history, response);
  CHECK(plain > 0.0);
  CHECK(conditioned > 0.0);
  CHECK(plain != conditioned);
  CHECK_THROWS_AS(decode_nll(t.model, nullptr, history, {}), UsageError);
}

TEST_CASE("uniform-logit model gives ln V") {
  Toy t;
  zero_parameters(t.model.decoder);
  const auto v = static_cast<double>(t.model.vocab.size());
  const auto history = t.tokens("how is it going ?");
  CHECK(decode_nll(t.model, nullptr, history, t.tokens("i am a nurse .")) ==
        doctest::Approx(std::log(v)).epsilon(1e-12));
  CHECK(decode_nll(t.model, nullptr, history, t.tokens("fish")) == doctest::Approx(std::log(v)).epsilon(1e-12));
}

TEST_CASE("sequence overflow is an error") {
  Toy t;
  std::vector<TokenId> history(47, t.tokens("i").front());
  CHECK_THROWS_AS(decode_nll(t.model, nullptr, history, t.tokens("i am")), DataError);
  std::vector<TokenId> context(49, t.tokens("i").front());
  CHECK_THROWS_AS(logits_next(t.model, nullptr, context), DataError);
}

TEST_CASE("logits_next shape, determinism and the conditioning-off identity") {
  Toy t;
  const auto context = t.tokens("what is your job ?");
  const auto base = logits_next(t.model, nullptr, context);
  CHECK(base.size() == t.model.vocab.size());
  CHECK(base == logits_next(t.model, nullptr, context));

  const auto prefix_vectors = t.persona({"i enjoy chess.", "i work as a pilot.", ""});
  const auto prefix = build_prefix(t.model, prefix_vectors);
  CHECK(logits_next(t.model, &prefix, context) != base);

  zero_parameters(t.model.projection);
  const auto zeroed = build_prefix(t.model, prefix_vectors);
  const auto off = logits_next(t.model, &zeroed, context);
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(off[i] == doctest::Approx(base[i]).epsilon(1e-12));
}

TEST_CASE("gradcheck on a quadratic and a constant") {
  const Var x(Matrix::from_rows({{1.0, 2.0}}), true);
  const std::vector<nn::NamedParameter> params{{"x", x}};
  const auto quad = gradcheck([&] { return nn::square_norm(x); }, params, 1e-4, 1e-6, 2);
  CHECK(quad.passed);
  CHECK(quad.max_relative_error < 1e-6);
  nn::backward(nn::square_norm(x));
  CHECK(x.grad() == Matrix::from_rows({{2.0, 4.0}}));

  const Var y(Matrix::from_rows({{3.0}}), true);
  const auto flat = gradcheck([&] { return nn::scale(nn::detach(y), 0.0); }, {{"y", y}}, 1e-4, 1e-6, 1);
  CHECK(flat.passed);
}

TEST_CASE("gradcheck reports non-finite losses") {
  const Var x(Matrix::from_rows({{1.0}}), true);
  CHECK_THROWS_AS(gradcheck([&] { return nn::scale(x, std::nan("")); }, {{"x", x}}, 1e-4, 1e-4), NumericalError);
}

TEST_CASE("decode_nll gradients match finite differences through encoder, projection and decoder") {
  Toy t;
  const auto history = t.tokens("do you have any pets ?");
  const auto response = t.tokens("i have a dog .");
  auto loss = [&] {
    const auto prefix = build_prefix(t.model, t.persona({"i have a pet dog.", "i enjoy chess.", ""}));
    return decode_nll_var(t.model, &prefix, history, response);
  };
  std::vector<nn::NamedParameter> params;
  for (const nn::Module* m : {static_cast<const nn::Module*>(&t.model.encoder),
                              static_cast<const nn::Module*>(&t.model.decoder),
                              static_cast<const nn::Module*>(&t.model.projection)}) {
    params.insert(params.end(), m->parameters().begin(), m->parameters().end());
  }
  const auto report = gradcheck(loss, params, 1e-4, 1e-4, 3, 5);
  INFO("worst parameter: " << report.worst_parameter << " err " << report.max_relative_error);
  CHECK(report.passed);
  CHECK(report.max_relative_error <= 1e-4);
}

TEST_CASE("separately constructed models with one seed are identical") {
  Toy a, b;
  const auto& pa = a.model.decoder.parameters();
  const auto& pb = b.model.decoder.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].var.value() == pb[i].var.value());
}
