#include "chainrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace chainrec {

using json = nlohmann::ordered_json;

const char* eval_mode_name(EvalMode m) { return m == EvalMode::FullChain ? "full_chain" : "passage_em"; }

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "passage_em") return EvalMode::PassageEm;
  if (s == "full_chain") return EvalMode::FullChain;
  throw ConfigError("eval mode must be passage_em or full_chain, got " + s);
}

const char* method_name(Method m) {
  switch (m) {
    case Method::Random: return "random";
    case Method::Independent: return "independent";
    case Method::Conditional: return "conditional";
    case Method::Cooperative: return "cooperative";
  }
  return "?";
}

std::optional<double> Rate::rate() const {
  if (evaluated == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(evaluated);
}

namespace {

std::vector<std::string> string_list(const json& j, const std::string& what, std::size_t line) {
  if (!j.is_array()) throw EvalError("line " + std::to_string(line) + ": " + what + " must be an array");
  std::vector<std::string> out;
  for (const json& s : j) {
    if (!s.is_string())
      throw EvalError("line " + std::to_string(line) + ": " + what + " must hold strings");
    out.push_back(s.get<std::string>());
  }
  return out;
}

std::set<std::string> passage_set(const CandidateChain& c) {
  return {c.passage_ids.begin(), c.passage_ids.end()};
}

double sample_mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

std::vector<Prediction> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot open predictions " + path.string());
  std::vector<Prediction> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw EvalError("line " + std::to_string(line) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.at("id").is_string())
      throw EvalError("line " + std::to_string(line) + ": prediction needs a string id");
    Prediction p;
    p.question_id = j.at("id").get<std::string>();
    if (j.contains("chain") && !j.at("chain").is_null()) {
      const json& c = j.at("chain");
      if (!c.is_object() || !c.contains("passages"))
        throw EvalError("line " + std::to_string(line) + ": chain needs passages");
      CandidateChain chain;
      chain.passage_ids = string_list(c.at("passages"), "chain passages", line);
      if (c.contains("links") && !c.at("links").is_null())
        chain.links = string_list(c.at("links"), "chain links", line);
      p.chain = std::move(chain);
    }
    if (j.contains("logprob") && j.at("logprob").is_number()) p.logprob = j.at("logprob").get<double>();
    out.push_back(std::move(p));
  }
  return out;
}

void save_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds) {
  std::ofstream out(path);
  if (!out) throw EvalError("cannot write predictions " + path.string());
  for (const Prediction& p : preds) {
    json j;
    j["id"] = p.question_id;
    if (p.chain) {
      json c;
      c["passages"] = p.chain->passage_ids;
      c["links"] = p.chain->links;
      j["chain"] = std::move(c);
    } else {
      j["chain"] = nullptr;
    }
    j["logprob"] = p.logprob;
    out << j.dump() << '\n';
  }
}

bool chain_correct(const CandidateChain& chain, const GoldAnnotation& gold, EvalMode mode) {
  for (const CandidateChain& g : gold.gold_chains) {
    if (mode == EvalMode::PassageEm ? passage_set(chain) == passage_set(g) : chain == g) return true;
  }
  return false;
}

std::vector<QuestionRecord> score_predictions(const std::vector<Prediction>& preds,
                                              const std::vector<GoldAnnotation>& gold) {
  std::map<std::string, const Prediction*> by_id;
  for (const Prediction& p : preds)
    if (!by_id.emplace(p.question_id, &p).second)
      throw EvalError("duplicate prediction for question " + p.question_id);
  std::set<std::string> gold_ids;
  for (const GoldAnnotation& g : gold) {
    if (!gold_ids.insert(g.question_id).second)
      throw EvalError("duplicate gold record for question " + g.question_id);
    if (!by_id.count(g.question_id)) throw EvalError("no prediction for question " + g.question_id);
  }
  for (const auto& [id, _] : by_id)
    if (!gold_ids.count(id)) throw EvalError("prediction for unknown question " + id);

  std::vector<QuestionRecord> out;
  for (const GoldAnnotation& g : gold) {
    const Prediction& p = *by_id.at(g.question_id);
    QuestionRecord r;
    r.question_id = g.question_id;
    r.ambiguous = g.ambiguous;
    r.covered = p.chain.has_value() && !p.chain->passage_ids.empty();
    if (r.covered) {
      r.passage_em = chain_correct(*p.chain, g, EvalMode::PassageEm);
      r.full_chain = chain_correct(*p.chain, g, EvalMode::FullChain);
    }
    if (!g.ambiguous) {
      bool head = false, tail = false;
      if (r.covered)
        for (const CandidateChain& c : g.gold_chains) {
          if (c.passage_ids.empty()) continue;
          head = head || p.chain->passage_ids.front() == c.passage_ids.front();
          tail = tail || p.chain->passage_ids.back() == c.passage_ids.back();
        }
      r.head_correct = head;
      r.tail_correct = tail;
    }
    out.push_back(r);
  }
  return out;
}

Rate chain_accuracy(const std::vector<Prediction>& preds, const std::vector<GoldAnnotation>& gold,
                    EvalMode mode, bool exclude_ambiguous) {
  Rate rate;
  for (const QuestionRecord& r : score_predictions(preds, gold)) {
    if (mode == EvalMode::FullChain && exclude_ambiguous && r.ambiguous) continue;
    ++rate.evaluated;
    rate.correct += mode == EvalMode::PassageEm ? r.passage_em : r.full_chain;
  }
  return rate;
}

HeadTailRecall head_tail_recall(const std::vector<Prediction>& preds, const std::vector<GoldAnnotation>& gold) {
  HeadTailRecall out;
  for (const QuestionRecord& r : score_predictions(preds, gold)) {
    if (!r.head_correct) continue;
    ++out.head.evaluated;
    ++out.tail.evaluated;
    out.head.correct += *r.head_correct;
    out.tail.correct += *r.tail_correct;
  }
  return out;
}

EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<GoldAnnotation>& gold,
                    EvalMode mode, const nlohmann::json& config) {
  EvalReport rep;
  rep.mode = mode;
  rep.config = config;
  rep.records = score_predictions(preds, gold);
  for (const QuestionRecord& r : rep.records) {
    ++rep.passage_em.evaluated;
    rep.passage_em.correct += r.passage_em;
    ++rep.coverage.evaluated;
    rep.coverage.correct += r.covered;
    if (!r.ambiguous) {
      ++rep.full_chain.evaluated;
      rep.full_chain.correct += r.full_chain;
      ++rep.head_recall.evaluated;
      ++rep.tail_recall.evaluated;
      rep.head_recall.correct += r.head_correct.value_or(false);
      rep.tail_recall.correct += r.tail_correct.value_or(false);
    }
  }
  rep.chain_accuracy = mode == EvalMode::PassageEm ? rep.passage_em : rep.full_chain;
  return rep;
}

namespace {

json rate_json(const Rate& r) {
  json j;
  const auto v = r.rate();
  j["rate"] = v ? json(*v) : json(nullptr);
  j["correct"] = r.correct;
  j["evaluated"] = r.evaluated;
  return j;
}

}  // namespace

nlohmann::json report_json(const EvalReport& rep) {
  json j;
  j["mode"] = eval_mode_name(rep.mode);
  j["chain_accuracy"] = rate_json(rep.chain_accuracy);
  j["passage_em"] = rate_json(rep.passage_em);
  j["full_chain"] = rate_json(rep.full_chain);
  j["head_recall"] = rate_json(rep.head_recall);
  j["tail_recall"] = rate_json(rep.tail_recall);
  j["coverage"] = rate_json(rep.coverage);
  if (rep.head_recall.evaluated == 0)
    j["undefined"] = json::array({"head_recall and tail_recall: no unambiguous question"});
  json records = json::array();
  for (const QuestionRecord& r : rep.records) {
    json x;
    x["id"] = r.question_id;
    x["ambiguous"] = r.ambiguous;
    x["covered"] = r.covered;
    x["passage_em"] = r.passage_em;
    x["full_chain"] = r.full_chain;
    x["head_correct"] = r.head_correct ? json(*r.head_correct) : json(nullptr);
    x["tail_correct"] = r.tail_correct ? json(*r.tail_correct) : json(nullptr);
    records.push_back(std::move(x));
  }
  j["records"] = std::move(records);
  j["config"] = rep.config;
  return nlohmann::json::parse(j.dump());
}

RandomBaseline random_baseline(const std::vector<std::vector<CandidateChain>>& chains,
                               const std::vector<GoldAnnotation>& gold, EvalMode mode,
                               std::size_t trials, std::uint64_t seed) {
  if (chains.size() != gold.size())
    throw EvalError("random_baseline: " + std::to_string(chains.size()) + " candidate sets for " +
                    std::to_string(gold.size()) + " gold records");
  RandomBaseline out;
  out.trials = trials;
  out.questions = gold.size();
  if (gold.empty()) return out;

  std::vector<std::vector<bool>> correct(gold.size());
  double exact = 0.0;
  for (std::size_t q = 0; q < gold.size(); ++q) {
    std::size_t hits = 0;
    for (const CandidateChain& c : chains[q]) {
      correct[q].push_back(chain_correct(c, gold[q], mode));
      hits += correct[q].back();
    }
    if (!chains[q].empty()) exact += static_cast<double>(hits) / static_cast<double>(chains[q].size());
  }
  out.exact = exact / static_cast<double>(gold.size());

  if (trials == 0) return out;
  Rng rng(seed);
  std::size_t total = 0;
  for (std::size_t t = 0; t < trials; ++t)
    for (std::size_t q = 0; q < gold.size(); ++q)
      if (!chains[q].empty()) total += correct[q][rng.index(chains[q].size())];
  const double n = static_cast<double>(trials) * static_cast<double>(gold.size());
  out.monte_carlo = static_cast<double>(total) / n;
  out.stderr_ = std::sqrt(out.monte_carlo * (1.0 - out.monte_carlo) / n);
  return out;
}

std::vector<Prediction> predict(const Ranker& ranker, const Reasoner* reasoner,
                                const std::vector<QuestionInstance>& corpus, int hops,
                                Direction direction, bool independent) {
  std::vector<Prediction> out;
  out.reserve(corpus.size());
  for (const QuestionInstance& inst : corpus) {
    Prediction p;
    p.question_id = inst.id;
    const std::vector<CandidateChain> chains = extract_chains(inst, hops);
    if (chains.empty()) {
      out.push_back(std::move(p));
      continue;
    }
    Ranker::ScoredChain best = independent ? ranker.decode_independent(inst, chains, hops)
                                           : ranker.decode_from_candidates(inst, chains, hops, direction);
    if (reasoner) {
      // 2-hop: the reader reads the tail; 3-hop: head for e1, tail for e2.
      CandidateChain wanted = best.chain;
      auto read = [&](const std::string& pid) -> std::optional<std::string> {
        const Passage& passage = inst.passage(pid);
        if (passage.mentions.empty()) return std::nullopt;
        Graph g;
        return top1_entity(reasoner->entity_distribution(g, inst.question, passage));
      };
      if (hops == 2) {
        if (auto e = read(wanted.passage_ids.back())) wanted.links = {*e};
      } else {
        if (auto e = read(wanted.passage_ids.front())) wanted.links[0] = *e;
        if (auto e = read(wanted.passage_ids.back())) wanted.links[1] = *e;
      }
      if (std::find(chains.begin(), chains.end(), wanted) != chains.end()) best.chain = wanted;
    }
    p.chain = best.chain;
    p.logprob = best.logprob;
    out.push_back(std::move(p));
  }
  return out;
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"hops", c.hops},
                     {"questions", c.questions},
                     {"pool_size", c.pool_size},
                     {"vocab_size", c.vocab_size},
                     {"relations", c.relations},
                     {"fillers", c.fillers},
                     {"passage_length", c.passage_length},
                     {"distractor_rate", c.distractor_rate},
                     {"decoys_min", c.decoys_min},
                     {"decoys_max", c.decoys_max},
                     {"decoy_mix", c.decoy_mix},
                     {"lookalike_rate", c.lookalike_rate},
                     {"lookalike_mix", c.lookalike_mix},
                     {"aliases", c.aliases},
                     {"alias_rate", c.alias_rate},
                     {"consistent_aliases", c.consistent_aliases},
                     {"shuffle_question_relations", c.shuffle_question_relations},
                     {"incidental_entities", c.incidental_entities}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  if (!j.is_object()) throw ConfigError("synth config must be a JSON object");
  nlohmann::json defaults = c;
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) throw ConfigError("unknown synth config key: " + key);
  try {
    if (j.contains("hops")) c.hops = j.at("hops").get<int>();
    if (j.contains("questions")) c.questions = j.at("questions").get<std::size_t>();
    if (j.contains("pool_size")) c.pool_size = j.at("pool_size").get<std::size_t>();
    if (j.contains("vocab_size")) c.vocab_size = j.at("vocab_size").get<std::size_t>();
    if (j.contains("relations")) c.relations = j.at("relations").get<std::size_t>();
    if (j.contains("fillers")) c.fillers = j.at("fillers").get<std::size_t>();
    if (j.contains("passage_length")) c.passage_length = j.at("passage_length").get<std::size_t>();
    if (j.contains("distractor_rate")) c.distractor_rate = j.at("distractor_rate").get<double>();
    if (j.contains("decoys_min")) c.decoys_min = j.at("decoys_min").get<std::size_t>();
    if (j.contains("decoys_max")) c.decoys_max = j.at("decoys_max").get<std::size_t>();
    if (j.contains("decoy_mix")) c.decoy_mix = j.at("decoy_mix").get<std::vector<double>>();
    if (j.contains("lookalike_rate")) c.lookalike_rate = j.at("lookalike_rate").get<double>();
    if (j.contains("lookalike_mix")) c.lookalike_mix = j.at("lookalike_mix").get<std::vector<double>>();
    if (j.contains("aliases")) c.aliases = j.at("aliases").get<std::size_t>();
    if (j.contains("alias_rate")) c.alias_rate = j.at("alias_rate").get<double>();
    if (j.contains("consistent_aliases")) c.consistent_aliases = j.at("consistent_aliases").get<bool>();
    if (j.contains("shuffle_question_relations"))
      c.shuffle_question_relations = j.at("shuffle_question_relations").get<bool>();
    if (j.contains("incidental_entities"))
      c.incidental_entities = j.at("incidental_entities").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  c.validate();
}

namespace rows {
std::string bonus_row(double r) {
  std::ostringstream s;
  s << "cooperative_r" << r;
  return s.str();
}
}  // namespace rows

void SuiteConfig::validate() const {
  if (runs == 0) throw ConfigError("suite: runs must be at least 1");
  if (train_questions == 0 || dev_questions == 0)
    throw ConfigError("suite: train_questions and dev_questions must be at least 1");
  if (datasets.empty()) throw ConfigError("suite: no datasets");
  std::set<std::string> names;
  for (const DatasetSpec& d : datasets) {
    if (d.name.empty()) throw ConfigError("suite: dataset without a name");
    if (!names.insert(d.name).second) throw ConfigError("suite: duplicate dataset " + d.name);
    d.synth.validate();
  }
  for (double r : bonus_values)
    if (!(r >= 0)) throw ConfigError("suite: bonus values must be non-negative");
  train.validate();
}

void to_json(nlohmann::json& j, const SuiteConfig& c) {
  nlohmann::json datasets = nlohmann::json::array();
  for (const DatasetSpec& d : c.datasets)
    datasets.push_back({{"name", d.name},
                        {"synth", d.synth},
                        {"methods", d.methods},
                        {"direction_ablation", d.direction_ablation},
                        {"placement_ablation", d.placement_ablation},
                        {"bonus_sweep", d.bonus_sweep}});
  j = nlohmann::json{{"name", c.name},
                     {"seed", c.seed},
                     {"runs", c.runs},
                     {"train_questions", c.train_questions},
                     {"dev_questions", c.dev_questions},
                     {"random_trials", c.random_trials},
                     {"mode", eval_mode_name(c.mode)},
                     {"train", c.train},
                     {"bonus_values", c.bonus_values},
                     {"datasets", datasets}};
}

void from_json(const nlohmann::json& j, SuiteConfig& c) {
  if (!j.is_object()) throw ConfigError("suite config must be a JSON object");
  static const std::set<std::string> keys = {"name", "seed", "runs", "train_questions", "dev_questions",
                                             "random_trials", "mode", "train", "bonus_values", "datasets"};
  for (const auto& [key, _] : j.items())
    if (!keys.count(key)) throw ConfigError("unknown suite config key: " + key);
  try {
    if (j.contains("name")) c.name = j.at("name").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("runs")) c.runs = j.at("runs").get<std::size_t>();
    if (j.contains("train_questions")) c.train_questions = j.at("train_questions").get<std::size_t>();
    if (j.contains("dev_questions")) c.dev_questions = j.at("dev_questions").get<std::size_t>();
    if (j.contains("random_trials")) c.random_trials = j.at("random_trials").get<std::size_t>();
    if (j.contains("mode")) c.mode = parse_eval_mode(j.at("mode").get<std::string>());
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("bonus_values")) c.bonus_values = j.at("bonus_values").get<std::vector<double>>();
    if (j.contains("datasets")) {
      c.datasets.clear();
      static const std::set<std::string> dkeys = {"name", "synth", "methods", "direction_ablation",
                                                  "placement_ablation", "bonus_sweep"};
      for (const auto& dj : j.at("datasets")) {
        if (!dj.is_object()) throw ConfigError("suite: dataset entries must be objects");
        for (const auto& [key, _] : dj.items())
          if (!dkeys.count(key)) throw ConfigError("unknown dataset key: " + key);
        DatasetSpec d;
        d.name = dj.at("name").get<std::string>();
        if (dj.contains("synth")) from_json(dj.at("synth"), d.synth);
        if (dj.contains("methods")) d.methods = dj.at("methods").get<bool>();
        if (dj.contains("direction_ablation")) d.direction_ablation = dj.at("direction_ablation").get<bool>();
        if (dj.contains("placement_ablation")) d.placement_ablation = dj.at("placement_ablation").get<bool>();
        if (dj.contains("bonus_sweep")) d.bonus_sweep = dj.at("bonus_sweep").get<bool>();
        c.datasets.push_back(std::move(d));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("suite config: ") + e.what());
  }
  c.validate();
}

SuiteConfig load_suite_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open suite " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("suite " + path.string() + ": " + e.what());
  }
  SuiteConfig s;
  from_json(j, s);
  return s;
}

const DatasetResult& BenchmarkResult::dataset(const std::string& name) const {
  for (const DatasetResult& d : datasets)
    if (d.name == name) return d;
  throw std::out_of_range("no dataset named " + name);
}

double BenchmarkResult::mean(const std::vector<double>& v) { return sample_mean(v); }

namespace {

constexpr std::uint64_t kDataStream = 11;
constexpr std::uint64_t kTrainStream = 12;
constexpr std::uint64_t kRandomStream = 13;

struct RowOutcome {
  double accuracy = 0.0;
  double head = 0.0;
  double tail = 0.0;
};

class RunContext {
 public:
  RunContext(const SuiteConfig& suite, const std::vector<QuestionInstance>& dev,
             const std::vector<GoldAnnotation>& dev_gold, int hops, std::filesystem::path dir)
      : suite_(suite), dev_(dev), gold_(dev_gold), hops_(hops), dir_(std::move(dir)) {}

  DevEvaluator evaluator(Direction direction, bool independent) const {
    return [this, direction, independent](const Ranker& r, const Reasoner* reasoner) -> std::optional<double> {
      return evaluate(predict(r, reasoner, dev_, hops_, direction, independent), gold_, suite_.mode)
          .chain_accuracy.rate();
    };
  }

  RowOutcome finish(const std::string& row, const Ranker& ranker, const Reasoner* reasoner,
                    Direction direction, bool independent, const std::vector<LogEntry>& log,
                    const nlohmann::json& config) const {
    auto preds = predict(ranker, reasoner, dev_, hops_, direction, independent);
    EvalReport rep = evaluate(preds, gold_, suite_.mode, config);
    if (!dir_.empty()) {
      const std::filesystem::path d = dir_ / row;
      std::filesystem::create_directories(d);
      ranker.params().save(d / "ranker.ckpt");
      if (reasoner) reasoner->params().save(d / "reasoner.ckpt");
      save_predictions(d / "predictions.jsonl", preds);
      write_log(d / "log.jsonl", log);
      std::ofstream out(d / "report.json");
      out << report_json(rep).dump(2) << '\n';
    }
    return {rep.chain_accuracy.rate().value_or(0.0), rep.head_recall.rate().value_or(0.0),
            rep.tail_recall.rate().value_or(0.0)};
  }

  std::filesystem::path checkpoint_dir(const std::string& row) const {
    return dir_.empty() ? std::filesystem::path() : dir_ / row / "trainer";
  }

 private:
  const SuiteConfig& suite_;
  const std::vector<QuestionInstance>& dev_;
  const std::vector<GoldAnnotation>& gold_;
  int hops_;
  std::filesystem::path dir_;
};

Direction other(Direction d) { return d == Direction::TailFirst ? Direction::HeadFirst : Direction::TailFirst; }

BonusPlacement other(BonusPlacement p) {
  return p == BonusPlacement::FirstStep ? BonusPlacement::SecondStep : BonusPlacement::FirstStep;
}

std::string direction_row(Direction d) { return std::string("conditional_") + direction_name(d); }

}  // namespace

BenchmarkResult run_benchmark(const SuiteConfig& suite, const std::filesystem::path& out) {
  suite.validate();
  BenchmarkResult result;
  result.suite = suite;
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t di = 0; di < suite.datasets.size(); ++di) {
    const DatasetSpec& spec = suite.datasets[di];
    DatasetResult dr;
    dr.name = spec.name;
    auto record = [&](const std::string& row, const RowOutcome& o) {
      dr.accuracy[row].push_back(o.accuracy);
      dr.head_recall[row].push_back(o.head);
      dr.tail_recall[row].push_back(o.tail);
    };

    for (std::size_t run = 0; run < suite.runs; ++run) {
      SynthConfig sc = spec.synth;
      sc.questions = suite.train_questions + suite.dev_questions;
      const std::uint64_t data_seed = Rng::derive(suite.seed, {kDataStream, di, run}).next();
      SyntheticCorpus synth = generate_synthetic(sc, data_seed);
      const auto split = static_cast<std::ptrdiff_t>(suite.train_questions);
      std::vector<QuestionInstance> train(synth.instances.begin(), synth.instances.begin() + split);
      std::vector<QuestionInstance> dev(synth.instances.begin() + split, synth.instances.end());
      std::vector<GoldAnnotation> dev_gold(synth.gold.begin() + split, synth.gold.end());

      std::vector<std::vector<CandidateChain>> dev_chains;
      double cand = 0.0, heads = 0.0, tails = 0.0;
      for (const QuestionInstance& q : dev) {
        dev_chains.push_back(extract_chains(q, sc.hops));
        const HeadTailSets s = head_tail_sets(dev_chains.back());
        cand += static_cast<double>(dev_chains.back().size());
        heads += static_cast<double>(s.heads.size());
        tails += static_cast<double>(s.tails.size());
      }
      const double nd = static_cast<double>(dev.size());
      dr.mean_candidates.push_back(cand / nd);
      dr.mean_heads.push_back(heads / nd);
      dr.mean_tails.push_back(tails / nd);
      dr.random.push_back(random_baseline(dev_chains, dev_gold, suite.mode, suite.random_trials,
                                          Rng::derive(suite.seed, {kRandomStream, di, run}).next()));

      std::filesystem::path dir;
      if (!out.empty()) {
        dir = out / spec.name / ("run" + std::to_string(run));
        std::filesystem::create_directories(dir);
        save_corpus(dir / "train.jsonl", train);
        save_corpus(dir / "dev.jsonl", dev);
        save_gold(dir / "dev_gold.jsonl", dev_gold);
      }
      RunContext ctx(suite, dev, dev_gold, sc.hops, dir);

      TrainConfig cfg = suite.train;
      cfg.hops = sc.hops;
      cfg.vocab_size = sc.vocab_size;
      cfg.seed = Rng::derive(suite.seed, {kTrainStream, di, run}).next();
      const nlohmann::json cfg_json = cfg;

      auto train_conditional = [&](Direction d) {
        TrainConfig c = cfg;
        c.direction = d;
        TrainIo io;
        io.checkpoint_dir = ctx.checkpoint_dir(direction_row(d));
        RankerRun r = train_ranker(train, c, true, ctx.evaluator(d, false), io);
        record(direction_row(d), ctx.finish(direction_row(d), r.ranker, nullptr, d, false, r.log, c));
        return r;
      };

      if (spec.methods) {
        dr.accuracy[rows::kRandom].push_back(dr.random.back().exact);

        TrainIo io;
        io.checkpoint_dir = ctx.checkpoint_dir(rows::kIndependent);
        RankerRun indep = train_ranker(train, cfg, false, ctx.evaluator(cfg.direction, true), io);
        record(rows::kIndependent,
               ctx.finish(rows::kIndependent, indep.ranker, nullptr, cfg.direction, true, indep.log, cfg_json));
      }

      if (!spec.methods && !spec.direction_ablation && !spec.placement_ablation && !spec.bonus_sweep) continue;
      RankerRun cond = train_conditional(cfg.direction);
      dr.accuracy[rows::kConditional].push_back(dr.accuracy[direction_row(cfg.direction)].back());
      dr.head_recall[rows::kConditional].push_back(dr.head_recall[direction_row(cfg.direction)].back());
      dr.tail_recall[rows::kConditional].push_back(dr.tail_recall[direction_row(cfg.direction)].back());
      if (spec.direction_ablation) train_conditional(other(cfg.direction));

      auto cooperative = [&](const std::string& row, double bonus, BonusPlacement placement) {
        TrainConfig c = cfg;
        c.bonus = bonus;
        c.bonus_placement = placement;
        CooperativeRun co = train_cooperative(train, c, cond.ranker, ctx.evaluator(c.direction, false));
        record(row, ctx.finish(row, co.ranker, &co.reasoner, c.direction, false, co.log, c));
      };
      if (spec.methods) cooperative(rows::kCooperative, cfg.bonus, cfg.bonus_placement);
      if (spec.placement_ablation) cooperative(rows::kOtherPlacement, cfg.bonus, other(cfg.bonus_placement));
      if (spec.bonus_sweep)
        for (double r : suite.bonus_values) {
          if (spec.methods && r == cfg.bonus) {
            record(rows::bonus_row(r), {dr.accuracy[rows::kCooperative].back(),
                                        dr.head_recall[rows::kCooperative].back(),
                                        dr.tail_recall[rows::kCooperative].back()});
            continue;
          }
          cooperative(rows::bonus_row(r), r, cfg.bonus_placement);
        }
    }
    if (!spec.direction_ablation) {
      const std::string row = direction_row(suite.train.direction);
      dr.accuracy.erase(row);
      dr.head_recall.erase(row);
      dr.tail_recall.erase(row);
    }
    result.datasets.push_back(std::move(dr));
  }

  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    std::ofstream(out / "report.json") << benchmark_json(result).dump(2) << '\n';
    std::ofstream(out / "tables.txt") << benchmark_tables(result);
  }
  return result;
}

nlohmann::json benchmark_json(const BenchmarkResult& result) {
  json j;
  j["suite"] = json::parse(nlohmann::json(result.suite).dump());
  j["notes"] = json::array(
      {"accuracy is dev chain accuracy in the suite mode, one value per run",
       "random is the exact expectation over C; monte_carlo and stderr are listed under random_baseline",
       "cooperative_other_step moves the Reasoner bonus to the other selection step; the inverse-direction "
       "mechanics are not defined precisely, so this row is a faithful variant, not a replica"});
  json datasets = json::array();
  for (const DatasetResult& d : result.datasets) {
    json dj;
    dj["name"] = d.name;
    json rowj;
    for (const auto& [row, acc] : d.accuracy) {
      json r;
      r["accuracy"] = acc;
      r["mean"] = sample_mean(acc);
      r["std"] = sample_std(acc);
      if (d.head_recall.count(row)) {
        r["head_recall"] = d.head_recall.at(row);
        r["tail_recall"] = d.tail_recall.at(row);
      }
      rowj[row] = std::move(r);
    }
    dj["rows"] = std::move(rowj);
    json rnd = json::array();
    for (const RandomBaseline& b : d.random)
      rnd.push_back({{"exact", b.exact},
                     {"monte_carlo", b.monte_carlo},
                     {"stderr", b.stderr_},
                     {"trials", b.trials},
                     {"questions", b.questions}});
    dj["random_baseline"] = std::move(rnd);
    dj["mean_candidates"] = d.mean_candidates;
    dj["mean_head_candidates"] = d.mean_heads;
    dj["mean_tail_candidates"] = d.mean_tails;
    datasets.push_back(std::move(dj));
  }
  j["datasets"] = std::move(datasets);
  return nlohmann::json::parse(j.dump());
}

std::string benchmark_tables(const BenchmarkResult& result) {
  std::ostringstream s;
  auto cell = [](const std::vector<double>& v) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(1) << 100.0 * sample_mean(v);
    if (v.size() > 1) c << " +- " << std::setprecision(1) << 100.0 * sample_std(v);
    return c.str();
  };
  const int w = 26;

  s << "Reasoning chain selection, dev " << eval_mode_name(result.suite.mode) << " (%), mean +- std over "
    << result.suite.runs << " runs\n\n";
  s << std::left << std::setw(w) << "Model";
  for (const DatasetResult& d : result.datasets)
    if (d.accuracy.count(rows::kRandom)) s << std::setw(w) << d.name;
  s << "\n";
  for (const char* row : {rows::kRandom, rows::kIndependent, rows::kConditional, rows::kCooperative}) {
    s << std::setw(w) << row;
    for (const DatasetResult& d : result.datasets) {
      if (!d.accuracy.count(rows::kRandom)) continue;
      s << std::setw(w) << (d.accuracy.count(row) ? cell(d.accuracy.at(row)) : "-");
    }
    s << "\n";
  }

  for (const DatasetResult& d : result.datasets) {
    std::vector<std::string> ablation;
    for (const auto& [row, _] : d.accuracy)
      if (row != rows::kRandom && row != rows::kIndependent && row != rows::kConditional &&
          row != rows::kCooperative)
        ablation.push_back(row);
    if (ablation.empty()) continue;
    s << "\nAblation on " << d.name << " (%)\n";
    s << std::setw(w) << "Setting" << std::setw(w) << "Chain" << std::setw(w) << "Head" << std::setw(w) << "Tail"
      << "\n";
    for (const std::string& row : ablation)
      s << std::setw(w) << row << std::setw(w) << cell(d.accuracy.at(row)) << std::setw(w)
        << cell(d.head_recall.at(row)) << std::setw(w) << cell(d.tail_recall.at(row)) << "\n";
  }

  s << "\nCandidate statistics on dev (mean per question)\n";
  s << std::setw(w) << "Dataset" << std::setw(w) << "|C|" << std::setw(w) << "|P_H|" << std::setw(w) << "|P_T|"
    << "\n";
  for (const DatasetResult& d : result.datasets) {
    std::ostringstream c, h, t;
    c << std::fixed << std::setprecision(2) << sample_mean(d.mean_candidates);
    h << std::fixed << std::setprecision(2) << sample_mean(d.mean_heads);
    t << std::fixed << std::setprecision(2) << sample_mean(d.mean_tails);
    s << std::setw(w) << d.name << std::setw(w) << c.str() << std::setw(w) << h.str() << std::setw(w) << t.str()
      << "\n";
  }
  s << "\ncooperative_other_step moves the bonus to the other selection step; the inverse-direction\n"
       "mechanics are not defined precisely, so that row is a faithful variant.\n";
  return s.str();
}

}  // namespace chainrec
