#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "chainrec/eval.hpp"

using namespace chainrec;

namespace {

const std::filesystem::path fixtures = CHAINREC_FIXTURES;

CandidateChain chain(std::vector<std::string> passages, std::vector<std::string> links) {
  return CandidateChain{std::move(passages), std::move(links)};
}

GoldAnnotation gold_of(const std::string& id, std::vector<CandidateChain> chains, bool ambiguous = false) {
  GoldAnnotation g;
  g.question_id = id;
  g.gold_chains = std::move(chains);
  g.ambiguous = ambiguous;
  return g;
}

Prediction pred_of(const std::string& id, std::optional<CandidateChain> c) {
  Prediction p;
  p.question_id = id;
  p.chain = std::move(c);
  return p;
}

// Random gold set and predictions drawn from small passage/entity alphabets.
std::pair<std::vector<Prediction>, std::vector<GoldAnnotation>> random_case(Rng& rng, std::size_t n) {
  const std::vector<std::string> ps = {"a", "b", "c", "d"}, es = {"x", "y"};
  auto random_chain = [&] {
    std::vector<std::string> p = ps;
    for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.index(i)]);
    return chain({p[0], p[1]}, {es[rng.index(es.size())]});
  };
  std::vector<Prediction> preds;
  std::vector<GoldAnnotation> gold;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = "q" + std::to_string(i);
    std::vector<CandidateChain> g = {random_chain()};
    if (rng.bernoulli(0.3)) g.push_back(random_chain());
    gold.push_back(gold_of(id, g, rng.bernoulli(0.2)));
    if (rng.bernoulli(0.1))
      preds.push_back(pred_of(id, std::nullopt));
    else if (rng.bernoulli(0.4))
      preds.push_back(pred_of(id, g[rng.index(g.size())]));
    else
      preds.push_back(pred_of(id, random_chain()));
  }
  return {preds, gold};
}

}  // namespace

TEST_CASE("mode examples") {
  const std::vector<GoldAnnotation> gold = {gold_of("q", {chain({"a", "b"}, {"x"})})};
  auto acc = [&](const CandidateChain& c, EvalMode m) {
    return *chain_accuracy({pred_of("q", c)}, gold, m).rate();
  };
  CHECK(acc(chain({"a", "b"}, {"x"}), EvalMode::PassageEm) == 1.0);
  CHECK(acc(chain({"a", "b"}, {"x"}), EvalMode::FullChain) == 1.0);
  CHECK(acc(chain({"b", "a"}, {"x"}), EvalMode::FullChain) == 0.0);
  CHECK(acc(chain({"b", "a"}, {"x"}), EvalMode::PassageEm) == 1.0);
  CHECK(acc(chain({"a", "b"}, {"y"}), EvalMode::FullChain) == 0.0);
  CHECK(acc(chain({"a", "b"}, {"y"}), EvalMode::PassageEm) == 1.0);
  CHECK(acc(chain({"a", "c"}, {"x"}), EvalMode::PassageEm) == 0.0);
}

TEST_CASE("non-unique gold chains are matched by membership") {
  const std::vector<GoldAnnotation> gold = {gold_of("q", {chain({"a", "b"}, {"x"}), chain({"c", "b"}, {"y"})})};
  CHECK(*chain_accuracy({pred_of("q", chain({"c", "b"}, {"y"}))}, gold, EvalMode::FullChain).rate() == 1.0);
  CHECK(*chain_accuracy({pred_of("q", chain({"c", "b"}, {"x"}))}, gold, EvalMode::FullChain).rate() == 0.0);
}

TEST_CASE("missing chain counts as incorrect and lowers coverage") {
  const std::vector<GoldAnnotation> gold = {gold_of("q1", {chain({"a", "b"}, {"x"})}),
                                            gold_of("q2", {chain({"a", "b"}, {"x"})})};
  EvalReport rep = evaluate({pred_of("q1", std::nullopt), pred_of("q2", chain({"a", "b"}, {"x"}))}, gold,
                            EvalMode::PassageEm);
  CHECK(rep.passage_em.correct == 1);
  CHECK(rep.passage_em.evaluated == 2);
  CHECK(rep.coverage.correct == 1);
  CHECK(rep.records[0].head_correct == false);
}

TEST_CASE("id mismatches are errors") {
  const std::vector<GoldAnnotation> gold = {gold_of("q1", {chain({"a", "b"}, {"x"})})};
  CHECK_THROWS_AS(chain_accuracy({pred_of("q2", std::nullopt)}, gold, EvalMode::PassageEm), EvalError);
  CHECK_THROWS_AS(chain_accuracy({}, gold, EvalMode::PassageEm), EvalError);
  CHECK_THROWS_AS(chain_accuracy({pred_of("q1", std::nullopt), pred_of("q1", std::nullopt)}, gold,
                                 EvalMode::PassageEm),
                  EvalError);
  CHECK_THROWS_AS(chain_accuracy({pred_of("q1", std::nullopt), pred_of("q9", std::nullopt)}, gold,
                                 EvalMode::PassageEm),
                  EvalError);
}

TEST_CASE("metric properties hold on random prediction sets") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    auto [preds, gold] = random_case(rng, 1 + rng.index(30));
    EvalReport rep = evaluate(preds, gold, EvalMode::PassageEm);

    // full-chain correctness implies passage-set correctness on the same subset
    CHECK(chain_accuracy(preds, gold, EvalMode::PassageEm, false).correct >=
          chain_accuracy(preds, gold, EvalMode::FullChain, false).correct);
    for (const QuestionRecord& r : rep.records) CHECK((!r.full_chain || r.passage_em));

    // gold predictions score 1 in both modes
    std::vector<Prediction> perfect;
    for (const GoldAnnotation& g : gold) perfect.push_back(pred_of(g.question_id, g.gold_chains.back()));
    CHECK(*chain_accuracy(perfect, gold, EvalMode::PassageEm).rate() == 1.0);
    if (auto r = chain_accuracy(perfect, gold, EvalMode::FullChain).rate()) CHECK(*r == 1.0);

    // question order does not matter
    auto p2 = preds;
    auto g2 = gold;
    std::reverse(p2.begin(), p2.end());
    for (std::size_t i = g2.size(); i > 1; --i) std::swap(g2[i - 1], g2[rng.index(i)]);
    for (EvalMode m : {EvalMode::PassageEm, EvalMode::FullChain}) {
      Rate a = chain_accuracy(preds, gold, m), b = chain_accuracy(p2, g2, m);
      CHECK(a.correct == b.correct);
      CHECK(a.evaluated == b.evaluated);
    }

    // every rate lies in [0, 1] with its denominator
    for (const Rate& r : {rep.chain_accuracy, rep.passage_em, rep.full_chain, rep.head_recall, rep.tail_recall})
      if (auto v = r.rate()) {
        CHECK(*v >= 0.0);
        CHECK(*v <= 1.0);
        CHECK(r.correct <= r.evaluated);
      }
  }
}

TEST_CASE("head and tail recall match a direct recount over unambiguous questions") {
  Rng rng(37);
  for (int trial = 0; trial < 30; ++trial) {
    auto [preds, gold] = random_case(rng, 1 + rng.index(25));
    HeadTailRecall got = head_tail_recall(preds, gold);
    std::size_t n = 0, heads = 0, tails = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (gold[i].ambiguous) continue;
      ++n;
      if (!preds[i].chain) continue;
      bool h = false, t = false;
      for (const CandidateChain& g : gold[i].gold_chains) {
        h = h || g.passage_ids.front() == preds[i].chain->passage_ids.front();
        t = t || g.passage_ids.back() == preds[i].chain->passage_ids.back();
      }
      heads += h;
      tails += t;
    }
    CHECK(got.head.evaluated == n);
    CHECK(got.tail.evaluated == n);
    CHECK(got.head.correct == heads);
    CHECK(got.tail.correct == tails);
  }
}

TEST_CASE("head and tail recall examples") {
  std::vector<GoldAnnotation> gold = {gold_of("q1", {chain({"a", "b"}, {"x"})}),
                                      gold_of("q2", {chain({"c", "d"}, {"x"})})};
  auto all = head_tail_recall({pred_of("q1", chain({"a", "b"}, {"x"})), pred_of("q2", chain({"c", "d"}, {"x"}))}, gold);
  CHECK(*all.head.rate() == 1.0);
  CHECK(*all.tail.rate() == 1.0);
  auto tails_only =
      head_tail_recall({pred_of("q1", chain({"c", "b"}, {"x"})), pred_of("q2", chain({"a", "d"}, {"x"}))}, gold);
  CHECK(*tails_only.head.rate() == 0.0);
  CHECK(*tails_only.tail.rate() == 1.0);

  for (GoldAnnotation& g : gold) g.ambiguous = true;
  auto none = head_tail_recall({pred_of("q1", std::nullopt), pred_of("q2", std::nullopt)}, gold);
  CHECK_FALSE(none.head.rate().has_value());
  EvalReport rep = evaluate({pred_of("q1", std::nullopt), pred_of("q2", std::nullopt)}, gold, EvalMode::PassageEm);
  CHECK(report_json(rep).contains("undefined"));
}

TEST_CASE("random baseline examples and exact expectation oracle") {
  std::vector<GoldAnnotation> gold;
  std::vector<std::vector<CandidateChain>> chains;
  for (int i = 0; i < 50; ++i) {
    gold.push_back(gold_of("q" + std::to_string(i), {chain({"a", "b"}, {"x"})}));
    chains.push_back({chain({"a", "b"}, {"x"})});
  }
  RandomBaseline one = random_baseline(chains, gold, EvalMode::PassageEm, 100, 1);
  CHECK(one.exact == 1.0);
  CHECK(one.monte_carlo == 1.0);

  for (auto& c : chains)
    c = {chain({"a", "b"}, {"x"}), chain({"a", "c"}, {"x"}), chain({"d", "b"}, {"x"}), chain({"d", "c"}, {"x"})};
  RandomBaseline quarter = random_baseline(chains, gold, EvalMode::PassageEm, 1000, 2);
  CHECK(quarter.exact == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(std::abs(quarter.monte_carlo - quarter.exact) <= 3 * quarter.stderr_);

  // mixed |C| and gold counts against a hand-written expectation
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<GoldAnnotation> g;
    std::vector<std::vector<CandidateChain>> c;
    double expect = 0.0;
    const std::size_t n = 5 + rng.index(40);
    for (std::size_t q = 0; q < n; ++q) {
      const std::size_t size = 1 + rng.index(6), hits = rng.index(size + 1);
      std::vector<CandidateChain> cq, gq = {chain({"g0", "t"}, {"x"})};
      for (std::size_t k = 0; k < size; ++k) {
        const std::string head = (k < hits ? "g" : "n") + std::to_string(k);
        cq.push_back(chain({head, "t"}, {"x"}));
        if (k < hits) gq.push_back(chain({head, "t"}, {"x"}));
      }
      g.push_back(gold_of("q" + std::to_string(q), gq));
      c.push_back(cq);
      expect += static_cast<double>(hits) / static_cast<double>(size);
    }
    expect /= static_cast<double>(n);
    RandomBaseline b = random_baseline(c, g, EvalMode::PassageEm, 1000, trial);
    CHECK(b.exact == doctest::Approx(expect).epsilon(1e-12));
    CHECK(std::abs(b.monte_carlo - b.exact) <= 3 * b.stderr_ + 1e-12);
  }
  CHECK_THROWS_AS(random_baseline({}, gold, EvalMode::PassageEm, 10, 0), EvalError);
}

TEST_CASE("predictions file round-trips including null chains") {
  const auto path = std::filesystem::temp_directory_path() / "chainrec_test_eval_preds.jsonl";
  std::vector<Prediction> preds = {pred_of("a", chain({"p", "q"}, {"x"})), pred_of("b", std::nullopt)};
  preds[0].logprob = -1.25;
  save_predictions(path, preds);
  auto back = load_predictions(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].chain == preds[0].chain);
  CHECK(back[0].logprob == -1.25);
  CHECK_FALSE(back[1].chain.has_value());
  std::ofstream(path) << "{\"chain\": null}\n";
  CHECK_THROWS_AS(load_predictions(path), EvalError);
  std::filesystem::remove(path);
}

TEST_CASE("token-answer fixture gives the hand-computed scores") {
  const auto corpus = load_corpus(fixtures / "hotpot_corpus.jsonl");
  const auto gold = load_gold(fixtures / "hotpot_gold.jsonl");
  const auto preds = load_predictions(fixtures / "hotpot_preds.jsonl");
  REQUIRE(corpus.size() == 20);
  for (const QuestionInstance& q : corpus) CHECK(q.answer_tokens.has_value());
  std::ifstream in(fixtures / "hotpot_expected.json");
  const nlohmann::json expected = nlohmann::json::parse(in);

  EvalReport rep = evaluate(preds, gold, EvalMode::PassageEm);
  auto same = [&](const Rate& r, const char* key) {
    CHECK(r.correct == expected.at(key).at("correct").get<std::size_t>());
    CHECK(r.evaluated == expected.at(key).at("evaluated").get<std::size_t>());
  };
  same(rep.passage_em, "passage_em");
  same(rep.full_chain, "full_chain");
  same(rep.head_recall, "head_recall");
  same(rep.tail_recall, "tail_recall");
  std::vector<std::string> correct;
  for (const QuestionRecord& r : rep.records)
    if (r.passage_em) correct.push_back(r.question_id);
  CHECK(correct == expected.at("correct_passage_em").get<std::vector<std::string>>());
}

TEST_CASE("predict emits a null chain when C is empty") {
  SynthConfig sc;
  sc.questions = 4;
  SyntheticCorpus synth = generate_synthetic(sc, 3);
  QuestionInstance broken = synth.instances[0];
  broken.id = "broken";
  for (Passage& p : broken.passages) p.mentions.clear();
  std::vector<QuestionInstance> corpus = {synth.instances[1], broken};
  TrainConfig cfg;
  Rng init(1);
  Ranker ranker(cfg.ranker_config(sc.vocab_size, true), init);
  for (bool independent : {false, true}) {
    auto preds = predict(ranker, nullptr, corpus, 2, Direction::TailFirst, independent);
    REQUIRE(preds.size() == 2);
    REQUIRE(preds[0].chain.has_value());
    auto c = extract_chains(corpus[0], 2);
    CHECK(std::find(c.begin(), c.end(), *preds[0].chain) != c.end());
    CHECK_FALSE(preds[1].chain.has_value());
  }
}

TEST_CASE("suite config parses, validates and rejects unknown keys") {
  nlohmann::json j = {{"name", "t"},
                      {"seed", 3},
                      {"runs", 2},
                      {"mode", "full_chain"},
                      {"train", {{"episodes", 10}}},
                      {"datasets", {{{"name", "d"}, {"synth", {{"pool_size", 5}}}, {"direction_ablation", true}}}}};
  SuiteConfig s;
  from_json(j, s);
  CHECK(s.runs == 2);
  CHECK(s.mode == EvalMode::FullChain);
  CHECK(s.train.episodes == 10);
  CHECK(s.datasets.at(0).synth.pool_size == 5);
  CHECK(s.datasets.at(0).direction_ablation);
  nlohmann::json back = s;
  SuiteConfig again;
  from_json(back, again);
  CHECK(nlohmann::json(again) == back);

  SuiteConfig bad;
  auto with = [&](const char* key, nlohmann::json v) {
    nlohmann::json k = j;
    k[key] = v;
    return k;
  };
  CHECK_THROWS_AS(from_json(with("extra", 1), bad), ConfigError);
  CHECK_THROWS_AS(from_json(with("runs", 0), bad), ConfigError);
  CHECK_THROWS_AS(from_json(with("mode", "exact"), bad), ConfigError);
  CHECK_THROWS_AS(from_json(with("datasets", nlohmann::json::array()), bad), ConfigError);
  CHECK_THROWS_AS(from_json(with("datasets", {{{"name", "d"}, {"synth", {{"nope", 1}}}}}), bad), ConfigError);
  CHECK_THROWS_AS(from_json(with("datasets", {{{"name", "d"}, {"oops", true}}}), bad), ConfigError);
}

TEST_CASE("small benchmark has one row per method and is reproducible") {
  SuiteConfig s;
  s.seed = 4;
  s.runs = 2;
  s.train_questions = 20;
  s.dev_questions = 10;
  s.random_trials = 50;
  s.train.episodes = 40;
  s.train.embed_dim = 4;
  s.train.hidden_dim = 2;
  s.train.num_layers = 1;
  s.train.match_dim = 2;
  s.train.reasoner_embed_dim = 4;
  s.train.cooperative_epochs = 2;
  s.bonus_values = {0.0, 1.0};
  DatasetSpec d;
  d.name = "tiny";
  d.direction_ablation = true;
  d.placement_ablation = true;
  d.bonus_sweep = true;
  s.datasets = {d};
  const auto out = std::filesystem::temp_directory_path() / "chainrec_test_eval_bench";
  std::filesystem::remove_all(out);
  BenchmarkResult a = run_benchmark(s, out);
  BenchmarkResult b = run_benchmark(s);
  const DatasetResult& r = a.dataset("tiny");
  for (const char* row : {rows::kRandom, rows::kIndependent, rows::kConditional, rows::kCooperative,
                          rows::kHeadFirst, rows::kOtherPlacement})
    CHECK_MESSAGE(r.accuracy.count(row) == 1, row);
  CHECK(r.accuracy.count(rows::bonus_row(0.0)) == 1);
  for (const auto& [row, acc] : r.accuracy) CHECK(acc.size() == 2);
  CHECK(benchmark_json(a) == benchmark_json(b));
  CHECK(std::filesystem::exists(out / "report.json"));
  CHECK(std::filesystem::exists(out / "tables.txt"));
  CHECK(std::filesystem::exists(out / "tiny" / "run1" / rows::kCooperative / "reasoner.ckpt"));
  const std::string tables = benchmark_tables(a);
  for (const char* row : {"random", "independent", "conditional", "cooperative"})
    CHECK(tables.find(row) != std::string::npos);
  std::filesystem::remove_all(out);
}
