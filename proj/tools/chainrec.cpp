#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "chainrec/eval.hpp"
#include "chainrec/gradsuite.hpp"

using namespace chainrec;
namespace fs = std::filesystem;

namespace {

nlohmann::ordered_json chain_json(const CandidateChain& c) {
  return {{"passages", c.passage_ids}, {"links", c.links}};
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

enum class TrainMode { Ranker, Independent, Cooperative };

TrainMode parse_train_mode(const std::string& s) {
  if (s == "ranker") return TrainMode::Ranker;
  if (s == "independent") return TrainMode::Independent;
  if (s == "cooperative") return TrainMode::Cooperative;
  throw ConfigError("train mode must be ranker, independent or cooperative, got " + s);
}

int gen_synth(const fs::path& config, const fs::path& out, std::uint64_t seed) {
  SynthConfig cfg;
  if (!config.empty()) from_json(read_json(config), cfg);
  SyntheticCorpus corpus = generate_synthetic(cfg, seed);
  fs::create_directories(out);
  save_corpus(out / "corpus.jsonl", corpus.instances);
  save_gold(out / "gold.jsonl", corpus.gold);
  nlohmann::json echo = cfg;
  echo["seed"] = seed;
  write_json(out / "synth_config.json", echo);
  std::cout << "wrote " << corpus.instances.size() << " instances to " << out.string() << "\n";
  return 0;
}

int extract(const fs::path& corpus_path, int hops, const fs::path& out_path) {
  const auto corpus = load_corpus(corpus_path);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path.string());
  std::size_t total = 0, empty = 0;
  for (const QuestionInstance& inst : corpus) {
    const auto chains = extract_chains(inst, hops);
    nlohmann::ordered_json j;
    j["id"] = inst.id;
    j["chains"] = nlohmann::ordered_json::array();
    for (const CandidateChain& c : chains) j["chains"].push_back(chain_json(c));
    out << j.dump() << '\n';
    total += chains.size();
    empty += chains.empty();
  }
  std::cout << corpus.size() << " questions, " << total << " chains, " << empty << " with empty C\n";
  return 0;
}

int train(const fs::path& corpus_path, TrainMode mode, const fs::path& config, const fs::path& out,
          std::uint64_t seed, const fs::path& resume) {
  TrainConfig cfg;
  if (!config.empty()) cfg = load_train_config(config);
  cfg.seed = seed;
  const auto corpus = load_corpus(corpus_path);
  if (cfg.vocab_size == 0) cfg.vocab_size = vocabulary_bound(corpus);
  fs::create_directories(out);

  TrainIo io;
  // cooperative mode keeps the resumable warm-start Ranker stage in warm/
  io.checkpoint_dir = mode == TrainMode::Cooperative ? out / "warm" : out;
  io.resume_dir = resume;
  RankerRun run = train_ranker(corpus, cfg, mode != TrainMode::Independent, {}, io);
  std::vector<LogEntry> log = run.log;
  if (mode == TrainMode::Cooperative) {
    CooperativeRun co = train_cooperative(corpus, cfg, run.ranker);
    co.ranker.params().save(out / "ranker.ckpt");
    co.reasoner.params().save(out / "reasoner.ckpt");
    log.insert(log.end(), co.log.begin(), co.log.end());
  }
  write_log(out / "log.jsonl", log);
  static const char* names[] = {"ranker", "independent", "cooperative"};
  write_json(out / "model.json", {{"mode", names[static_cast<int>(mode)]}, {"config", cfg}});
  std::cout << "trained " << names[static_cast<int>(mode)] << " for " << run.episodes_done << " episodes; "
            << "checkpoints in " << out.string() << "\n";
  return 0;
}

int predict_cmd(const fs::path& corpus_path, const fs::path& model_dir, const fs::path& out_path,
                const std::string& direction_override) {
  const nlohmann::json model = read_json(model_dir / "model.json");
  TrainConfig cfg;
  from_json(model.at("config"), cfg);
  const std::string mode = model.at("mode").get<std::string>();
  const bool independent = mode == "independent";
  const Direction direction = direction_override.empty() ? cfg.direction : parse_direction(direction_override);

  Rng init(cfg.seed);
  Ranker ranker(cfg.ranker_config(cfg.vocab_size, !independent), init);
  ranker.params().assign(ParameterSet::load(model_dir / "ranker.ckpt"));
  std::optional<Reasoner> reasoner;
  if (mode == "cooperative") {
    reasoner.emplace(cfg.reasoner_config(cfg.vocab_size), init);
    reasoner->params().assign(ParameterSet::load(model_dir / "reasoner.ckpt"));
  }
  const auto corpus = load_corpus(corpus_path);
  auto preds = predict(ranker, reasoner ? &*reasoner : nullptr, corpus, cfg.hops, direction, independent);
  save_predictions(out_path, preds);
  std::cout << "wrote " << preds.size() << " predictions to " << out_path.string() << "\n";
  return 0;
}

int eval_cmd(const fs::path& corpus_path, const fs::path& gold_path, const fs::path& preds_path,
             const std::string& mode_name, const fs::path& report_path) {
  const EvalMode mode = parse_eval_mode(mode_name);
  const auto gold = load_gold(gold_path);
  if (!corpus_path.empty()) {
    const auto corpus = load_corpus(corpus_path);
    std::set<std::string> ids;
    for (const QuestionInstance& q : corpus) ids.insert(q.id);
    for (const GoldAnnotation& g : gold)
      if (!ids.count(g.question_id)) throw EvalError("gold question " + g.question_id + " is not in the corpus");
  }
  const auto preds = load_predictions(preds_path);
  nlohmann::json echo = {{"corpus", corpus_path.string()},
                         {"gold", gold_path.string()},
                         {"preds", preds_path.string()},
                         {"mode", mode_name}};
  EvalReport rep = evaluate(preds, gold, mode, echo);
  nlohmann::json j = report_json(rep);
  if (!report_path.empty()) write_json(report_path, j);
  auto show = [](const char* name, const Rate& r) {
    std::cout << name << ": ";
    if (auto v = r.rate())
      std::cout << *v;
    else
      std::cout << "undefined";
    std::cout << " (" << r.correct << "/" << r.evaluated << ")\n";
  };
  show("chain_accuracy", rep.chain_accuracy);
  show("passage_em", rep.passage_em);
  show("full_chain", rep.full_chain);
  show("head_recall", rep.head_recall);
  show("tail_recall", rep.tail_recall);
  show("coverage", rep.coverage);
  return 0;
}

int benchmark_cmd(const fs::path& suite_path, const fs::path& out, std::uint64_t seed) {
  SuiteConfig suite = load_suite_config(suite_path);
  suite.seed = seed;
  BenchmarkResult result = run_benchmark(suite, out);
  std::cout << benchmark_tables(result) << "\nwall time " << result.seconds << " s\n";
  return 0;
}

int gradcheck_cmd(std::uint64_t seed, std::size_t configs) {
  bool ok = true;
  for (const GradSuiteEntry& e : gradient_suite(seed, configs)) {
    std::cout << (e.pass() ? "PASS " : "FAIL ") << e.name << " " << e.passed << "/" << e.configs
              << " max_rel_error " << e.max_error << "\n";
    ok = ok && e.pass();
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reasoning chain selection from question-answer supervision"};
  app.require_subcommand(1);

  fs::path config, out, corpus, gold, preds, report, suite, model, resume;
  std::uint64_t seed = 0;
  int hops = 2;
  std::string mode, direction;
  std::size_t configs = 10;

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic corpus with planted gold chains");
  gen->add_option("--config", config, "synth config JSON (defaults when omitted)");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "master seed")->required();

  auto* ext = app.add_subcommand("extract-chains", "write the candidate chain set C per question");
  ext->add_option("--corpus", corpus)->required();
  ext->add_option("--hops", hops)->required()->check(CLI::IsMember({2, 3}));
  ext->add_option("--out", out)->required();

  auto* tr = app.add_subcommand("train", "train a Ranker (and Reasoner in cooperative mode)");
  tr->add_option("--corpus", corpus)->required();
  tr->add_option("--mode", mode)->required()->check(CLI::IsMember({"ranker", "independent", "cooperative"}));
  tr->add_option("--config", config, "train config JSON (defaults when omitted)");
  tr->add_option("--out", out, "checkpoint directory")->required();
  tr->add_option("--seed", seed)->required();
  tr->add_option("--resume", resume, "checkpoint directory to resume Ranker training from");

  auto* pr = app.add_subcommand("predict", "decode one chain per question with a trained model");
  pr->add_option("--corpus", corpus)->required();
  pr->add_option("--model", model, "directory written by train")->required();
  pr->add_option("--out", out, "predictions JSONL")->required();
  pr->add_option("--direction", direction, "override the trained direction")
      ->check(CLI::IsMember({"tail_first", "head_first"}));

  auto* ev = app.add_subcommand("eval", "score predictions against gold chains");
  ev->add_option("--corpus", corpus, "corpus JSONL; gold ids are checked against it");
  ev->add_option("--gold", gold)->required();
  ev->add_option("--preds", preds)->required();
  ev->add_option("--mode", mode)->required()->check(CLI::IsMember({"passage_em", "full_chain"}));
  ev->add_option("--report", report, "report JSON");

  auto* bm = app.add_subcommand("benchmark", "run the method comparison and ablation suite");
  bm->add_option("--suite", suite)->required();
  bm->add_option("--out", out)->required();
  bm->add_option("--seed", seed, "master seed; replaces the suite's seed")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable unit");
  gc->add_option("--seed", seed, "seed for the random configurations")->capture_default_str();
  gc->add_option("--configs", configs, "random configurations per unit")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return gen_synth(config, out, seed);
    if (*ext) return extract(corpus, hops, out);
    if (*tr) return train(corpus, parse_train_mode(mode), config, out, seed, resume);
    if (*pr) return predict_cmd(corpus, model, out, direction);
    if (*ev) return eval_cmd(corpus, gold, preds, mode, report);
    if (*bm) return benchmark_cmd(suite, out, seed);
    if (*gc) return gradcheck_cmd(seed, configs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
