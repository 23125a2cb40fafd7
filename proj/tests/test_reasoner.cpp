#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "chainrec/reasoner.hpp"

using namespace chainrec;

namespace {

ReasonerConfig small_config() {
  ReasonerConfig cfg;
  cfg.vocab_size = 20;
  cfg.embed_dim = 4;
  return cfg;
}

Passage make_passage(std::vector<int> tokens, std::vector<Mention> mentions) {
  Passage p;
  p.id = "p";
  p.tokens = std::move(tokens);
  p.mentions = std::move(mentions);
  return p;
}

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  std::vector<double> v(r * c);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::matrix(r, c, std::move(v));
}

// Scalar feed-forward 4 -> 1 with pinned weights.
struct PinnedFfn {
  ParameterSet params;
  FeedForward ffn;
  double w[4] = {0.3, -0.2, 0.5, 0.1};
  double bias = -0.05;

  PinnedFfn() {
    Rng rng(0);
    ffn = FeedForward(params, "ffn", 4, 1, rng);
    auto wt = params.at("ffn.weight").mutable_data();
    std::copy(w, w + 4, wt.begin());
    params.at("ffn.bias").mutable_data()[0] = bias;
  }
  double eval(double b, double bt) const {
    return std::tanh(w[0] * b + w[1] * bt + w[2] * (b - bt) + w[3] * b * bt + bias);
  }
};

}  // namespace

TEST_CASE("attention layer scalar hand example") {
  PinnedFfn f;
  Graph g;
  // attended rows a = 1, 2; attending row b = 3: weights softmax(3, 6)
  Tensor out = attention_layer(g, f.params, f.ffn, Tensor::matrix(2, 1, {1, 2}), Tensor::matrix(1, 1, {3}));
  const double e3 = std::exp(3.0), e6 = std::exp(6.0);
  const double bt = (1 * e3 + 2 * e6) / (e3 + e6);
  CHECK(out.shape() == Shape{1, 1});
  CHECK(out.at(0, 0) == doctest::Approx(f.eval(3, bt)).epsilon(1e-12));

  // Self-attention over one position attends to itself.
  Graph g2;
  Tensor self = attention_layer(g2, f.params, f.ffn, Tensor::matrix(1, 1, {0.7}), Tensor::matrix(1, 1, {0.7}));
  CHECK(self.at(0, 0) == doctest::Approx(f.eval(0.7, 0.7)).epsilon(1e-12));

  Graph g3;
  CHECK_THROWS_AS(attention_layer(g3, f.params, f.ffn, Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(1, 1, {1})),
                  DimensionError);
}

TEST_CASE("reader_encode shape and grad_check") {
  Rng rng(3);
  Reasoner r(small_config(), rng);
  Rng data(4);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor q = random_matrix(data, 2, 4), p = random_matrix(data, 3, 4);
    std::vector<double> w(3 * 4);
    for (double& x : w) x = data.uniform(-1, 1);
    Tensor weights = Tensor::matrix(3, 4, w);
    std::vector<Tensor> inputs;
    for (const auto& [name, t] : r.params().entries())
      if (name != "reasoner.embed" && name.rfind("reasoner.head", 0) != 0) inputs.push_back(t);
    auto report = grad_check(
        [&](Graph& g) { return g.sum(g.mul(r.reader_encode(g, q, p), weights)); }, inputs);
    CHECK_MESSAGE(report.pass, "max error ", report.max_error);

    auto wrt_input = grad_check(
        [&](Graph& g, const Tensor& x) { return g.sum(g.mul(r.reader_encode(g, q, x), weights)); }, p);
    CHECK_MESSAGE(wrt_input.pass, "max error ", wrt_input.max_error);
  }
  Graph g;
  Tensor q = random_matrix(data, 5, 4), p = random_matrix(data, 1, 4);
  CHECK(r.reader_encode(g, q, p).shape() == Shape{1, 4});
}

TEST_CASE("entity_distribution contracts") {
  Rng rng(5);
  Reasoner r(small_config(), rng);
  Graph g;
  const std::vector<int> question = {1, 2};

  auto single = r.entity_distribution(g, question, make_passage({3, 4, 5}, {{"A", 1, 2}}));
  CHECK(single.entities == std::vector<std::string>{"A"});
  CHECK(single.probs.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(top1_entity(single) == "A");

  CHECK_THROWS_AS(r.entity_distribution(g, question, make_passage({3, 4}, {})), NoEntityError);

  // Two entities mentioned at the same span share its mass equally.
  auto twins = r.entity_distribution(
      g, question, make_passage({3, 4, 5, 6}, {{"A", 1, 2}, {"B", 1, 2}, {"C", 3, 4}}));
  CHECK(twins.prob("A") == twins.prob("B"));
  CHECK(twins.prob("A") + twins.prob("B") + twins.prob("C") == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(twins.prob("Z") == 0.0);

  Rng data(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> tokens;
    const std::size_t m = 2 + data.index(8);
    for (std::size_t i = 0; i < m; ++i) tokens.push_back(static_cast<int>(data.index(20)));
    std::vector<Mention> mentions;
    const std::size_t nm = 1 + data.index(4);
    for (std::size_t i = 0; i < nm; ++i) {
      const std::size_t s = data.index(m);
      mentions.push_back({"E" + std::to_string(data.index(3)), s, s + 1 + data.index(m - s)});
    }
    Passage p = make_passage(tokens, mentions);
    auto d = r.entity_distribution(g, question, p);
    double total = 0.0;
    for (std::size_t e = 0; e < d.entities.size(); ++e) {
      CHECK(p.mentions_entity(d.entities[e]));
      CHECK(d.probs.at(e) >= 0.0);
      total += d.probs.at(e);
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
    for (std::size_t t = 0; t < m; ++t) {
      bool covered = false;
      for (const Mention& mm : mentions) covered = covered || (mm.start <= t && t < mm.end);
      if (!covered) CHECK(d.token_probs.at(t) == 0.0);
    }
  }
}

TEST_CASE("entity probability sums its mention tokens") {
  Graph g;
  const std::vector<double> s = {0.4, -1.2, 2.0, 0.3, 0.9, -0.5};
  Passage p = make_passage({1, 2, 3, 4, 5, 6}, {{"A", 1, 2}, {"B", 2, 3}, {"A", 4, 5}});
  auto d = aggregate_entities(g, Tensor::vector(s), p);
  const double z = std::exp(s[1]) + std::exp(s[2]) + std::exp(s[4]);
  CHECK(d.prob("A") == doctest::Approx((std::exp(s[1]) + std::exp(s[4])) / z).epsilon(1e-12));
  CHECK(d.prob("B") == doctest::Approx(std::exp(s[2]) / z).epsilon(1e-12));

  // Overlapping mentions: A covers tokens 1..2, B covers token 2.
  Passage overlap = make_passage({1, 2, 3, 4}, {{"A", 1, 3}, {"B", 2, 3}});
  auto o = aggregate_entities(g, Tensor::vector({0.0, 0.5, 1.0, 0.0}), overlap);
  const double p1 = std::exp(0.5), p2 = std::exp(1.0);
  CHECK(o.prob("A") == doctest::Approx((p1 + p2) / (p1 + 2 * p2)).epsilon(1e-12));
  CHECK(o.prob("B") == doctest::Approx(p2 / (p1 + 2 * p2)).epsilon(1e-12));
}

TEST_CASE("reasoner_loss") {
  Graph g;
  Passage p = make_passage({1, 2, 3}, {{"A", 0, 1}, {"B", 2, 3}});
  auto d = aggregate_entities(g, Tensor::vector({1.0, 0.0, -0.5}), p);
  const double pa = std::exp(1.0) / (std::exp(1.0) + std::exp(-0.5)), pb = 1.0 - pa;

  CHECK(reasoner_loss(g, d, {}).item() ==
        doctest::Approx(-(std::log(1 - pa) + std::log(1 - pb)) / 2).epsilon(1e-12));
  CHECK(reasoner_loss(g, d, {"A", "B"}).item() ==
        doctest::Approx(-(std::log(pa) + std::log(pb)) / 2).epsilon(1e-12));
  CHECK(reasoner_loss(g, d, {"A"}).item() ==
        doctest::Approx(-(std::log(pa) + std::log(1 - pb)) / 2).epsilon(1e-12));
  CHECK(reasoner_loss(g, d, {"A"}).item() >= 0.0);
  CHECK_THROWS_AS(reasoner_loss(g, d, {"Z"}), std::invalid_argument);

  auto one = aggregate_entities(g, Tensor::vector({0.0, 3.0, 0.0}), make_passage({1, 2, 3}, {{"A", 1, 2}}));
  CHECK(reasoner_loss(g, one, {"A"}).item() == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(reasoner_loss(g, one, {"A"}).item() >= 0.0);
}

TEST_CASE("reasoner_loss passes grad_check over every parameter") {
  Rng rng(9);
  Reasoner r(small_config(), rng);
  Passage p = make_passage({3, 4, 5, 6, 7}, {{"A", 0, 1}, {"B", 2, 4}, {"C", 4, 5}});
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : r.params().entries()) inputs.push_back(t);
  auto report = grad_check(
      [&](Graph& g) { return reasoner_loss(g, r.entity_distribution(g, {1, 2, 8}, p), {"B"}); }, inputs);
  CHECK_MESSAGE(report.pass, "max error ", report.max_error);
}

TEST_CASE("top1_entity") {
  EntityDistribution tie;
  tie.entities = {"A", "B"};
  tie.probs = Tensor::vector({0.5, 0.5});
  CHECK(top1_entity(tie) == "A");
  EntityDistribution empty;
  CHECK_THROWS_AS(top1_entity(empty), NoEntityError);

  Rng data(12);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(6);
    for (double& x : s) x = data.uniform(-2, 2);
    Passage p = make_passage({1, 2, 3, 4, 5, 6}, {{"C", 0, 1}, {"A", 2, 3}, {"B", 5, 6}});
    Graph g;
    const std::string base = top1_entity(aggregate_entities(g, Tensor::vector(s), p));
    const double c = 0.1 + 5.0 * data.uniform();
    std::vector<double> scaled = s;
    for (double& x : scaled) x *= c;
    CHECK(top1_entity(aggregate_entities(g, Tensor::vector(scaled), p)) == base);
  }
}
