// Runs the eight acceptance criteria and prints one PASS/FAIL line each.

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

#include "CLI11.hpp"
#include "brute_force.hpp"
#include "chainrec/eval.hpp"
#include "chainrec/gradsuite.hpp"

using namespace chainrec;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string pct(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(1);
  s << 100.0 * v;
  return s.str();
}

Outcome oracle_equivalence() {
  const auto start = Clock::now();
  std::size_t compared = 0, mismatches = 0;
  for (int hops : {2, 3}) {
    SynthConfig cfg;
    cfg.hops = hops;
    cfg.questions = 500;
    cfg.pool_size = hops == 2 ? 6 : 8;
    cfg.decoy_mix = {1, 1, 1, 1, 1, 1};
    cfg.decoys_max = 3;
    cfg.incidental_entities = 1;
    for (const QuestionInstance& inst : generate_synthetic(cfg, 1000 + hops).instances) {
      std::set<std::vector<std::string>> got;
      for (const CandidateChain& c : extract_chains(inst, hops)) got.insert(c.interleaved());
      mismatches += got != oracle::enumerate(inst, hops);
      ++compared;
    }
  }
  const double secs = seconds_since(start);
  return {mismatches == 0 && compared == 1000 && secs < 30.0,
          std::to_string(compared) + " instances, " + std::to_string(mismatches) + " mismatches, " +
              std::to_string(secs) + " s"};
}

Outcome gradient_suite_check() {
  const auto start = Clock::now();
  std::size_t units = 0, failed = 0;
  double worst = 0.0;
  std::string failures;
  for (const GradSuiteEntry& e : gradient_suite(0, 10)) {
    ++units;
    worst = std::max(worst, e.max_error);
    if (!e.pass() || e.configs < 10) {
      ++failed;
      failures += " " + e.name;
    }
  }
  const double secs = seconds_since(start);
  return {failed == 0 && secs < 120.0, std::to_string(units) + " units x 10 configs, max rel error " +
                                           std::to_string(worst) + ", " + std::to_string(secs) + " s" +
                                           (failures.empty() ? "" : ", failed:" + failures)};
}

Outcome reward_tables() {
  std::size_t cases = 0, wrong = 0;
  HeadTailSets sets;
  sets.heads = {"h"};
  sets.tails = {"t"};
  for (bool hi : {false, true})
    for (bool ti : {false, true}) {
      auto r = reward_2hop(hi ? "h" : "x", ti ? "t" : "y", sets);
      wrong += r[0] != (hi ? 1.0 : 0.0) || r[1] != (ti ? 1.0 : 0.0);
      ++cases;
    }
  const std::vector<CandidateChain> chains = {{{"h", "m", "t"}, {"a", "b"}}};
  for (bool hi : {false, true})
    for (bool mi : {false, true})
      for (bool ti : {false, true}) {
        const std::string h = hi ? "h" : "h0", m = mi ? "m" : "m0", t = ti ? "t" : "t0";
        HeadTailSets s3;
        s3.heads = {"h"};
        s3.tails = {"t"};
        auto r = reward_3hop(h, m, t, chains, s3);
        const bool in_c = hi && mi && ti;
        wrong += r[0] != (hi ? 1.0 : 0.0) || r[1] != (in_c ? 1.0 : 0.0) || r[2] != (ti ? 1.0 : 0.0);
        ++cases;
      }
  for (double bonus : {0.0, 1.0}) {
    wrong += reward_cooperative(false, true, bonus) != 0.0;
    wrong += reward_cooperative(true, false, bonus) != 1.0;
    wrong += reward_cooperative(true, true, bonus) != 1.0 + bonus;
    cases += 3;
  }
  return {wrong == 0 && cases == 18, std::to_string(cases) + " cases (4 + 8 + 3x2), " + std::to_string(wrong) +
                                         " wrong"};
}

Outcome method_ordering(const BenchmarkResult& result) {
  const DatasetResult& main = result.dataset("main");
  const DatasetResult& ambiguous = result.dataset("entity_ambiguous");
  auto m = [](const DatasetResult& d, const char* row) { return BenchmarkResult::mean(d.accuracy.at(row)); };
  const double random = m(main, rows::kRandom), indep = m(main, rows::kIndependent),
               cond = m(main, rows::kConditional);
  const double amb_cond = m(ambiguous, rows::kConditional), amb_coop = m(ambiguous, rows::kCooperative);
  const bool order = random + 0.10 <= indep && indep <= cond - 0.05;
  const bool coop = amb_cond <= amb_coop && amb_coop - amb_cond >= 0.01;
  const bool fast = result.seconds < 1800.0;
  return {order && coop && fast,
          "main: random " + pct(random) + ", independent " + pct(indep) + ", conditional " + pct(cond) +
              "; entity_ambiguous: conditional " + pct(amb_cond) + ", cooperative " + pct(amb_coop) + "; " +
              std::to_string(result.seconds) + " s"};
}

Outcome direction_ablation(const BenchmarkResult& result) {
  const DatasetResult& d = result.dataset("direction");
  const auto& tail = d.accuracy.at("conditional_tail_first");
  const auto& head = d.accuracy.at(rows::kHeadFirst);
  bool ok = tail.size() == 3 && head.size() == 3;
  std::string detail = "tail_first vs head_first per seed:";
  for (std::size_t i = 0; i < tail.size() && i < head.size(); ++i) {
    ok = ok && tail[i] >= head[i];
    detail += " " + pct(tail[i]) + "/" + pct(head[i]);
  }
  detail += "; mean |P_H| " + std::to_string(BenchmarkResult::mean(d.mean_heads)) + ", |P_T| " +
            std::to_string(BenchmarkResult::mean(d.mean_tails));
  return {ok, detail};
}

Outcome random_sanity(const std::vector<const BenchmarkResult*>& results) {
  std::size_t checked = 0, bad = 0;
  double worst = 0.0;
  for (const BenchmarkResult* r : results)
    for (const DatasetResult& d : r->datasets)
      for (const RandomBaseline& b : d.random) {
        ++checked;
        const double gap = std::abs(b.monte_carlo - b.exact);
        if (b.stderr_ > 0) worst = std::max(worst, gap / b.stderr_);
        bad += b.stderr_ > 0 ? gap > 3 * b.stderr_ : gap > 1e-12;
      }
  return {bad == 0 && checked > 0, std::to_string(checked) + " suites checked, worst gap " +
                                        std::to_string(worst) + " stderr"};
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream in(entry.path(), std::ios::binary);
    out[fs::relative(entry.path(), root).string()] =
        std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return out;
}

Outcome determinism(const SuiteConfig& full, const fs::path& out, BenchmarkResult& first) {
  SuiteConfig s = full;
  s.runs = 2;
  s.train_questions = 60;
  s.dev_questions = 20;
  s.random_trials = 200;
  s.train.episodes = 240;
  s.train.cooperative_epochs = 2;
  for (DatasetSpec& d : s.datasets) {
    d.direction_ablation = true;
    d.placement_ablation = true;
    d.bonus_sweep = true;
  }
  fs::remove_all(out / "a");
  fs::remove_all(out / "b");
  first = run_benchmark(s, out / "a");
  run_benchmark(s, out / "b");
  const auto a = read_tree(out / "a"), b = read_tree(out / "b");
  std::size_t differing = 0;
  for (const auto& [name, bytes] : a) {
    auto it = b.find(name);
    differing += it == b.end() || it->second != bytes;
  }
  differing += b.size() > a.size() ? b.size() - a.size() : 0;
  std::size_t checkpoints = 0;
  for (const auto& [name, _] : a) checkpoints += name.ends_with(".ckpt");
  return {differing == 0 && checkpoints > 0, std::to_string(a.size()) + " files (" + std::to_string(checkpoints) +
                                                  " checkpoints), " + std::to_string(differing) + " differ"};
}

Outcome format_fidelity(const fs::path& fixtures) {
  const auto corpus = load_corpus(fixtures / "hotpot_corpus.jsonl");
  const auto gold = load_gold(fixtures / "hotpot_gold.jsonl");
  const auto preds = load_predictions(fixtures / "hotpot_preds.jsonl");
  std::ifstream in(fixtures / "hotpot_expected.json");
  const nlohmann::json expected = nlohmann::json::parse(in);
  const Rate r = chain_accuracy(preds, gold, EvalMode::PassageEm);
  const auto want_correct = expected.at("passage_em").at("correct").get<std::size_t>();
  const auto want_total = expected.at("passage_em").at("evaluated").get<std::size_t>();
  std::set<std::string> got_ids;
  for (const QuestionRecord& q : score_predictions(preds, gold))
    if (q.passage_em) got_ids.insert(q.question_id);
  const auto want_ids = expected.at("correct_passage_em").get<std::set<std::string>>();
  return {corpus.size() == 20 && r.correct == want_correct && r.evaluated == want_total && got_ids == want_ids,
          "passage_em " + std::to_string(r.correct) + "/" + std::to_string(r.evaluated) + ", expected " +
              std::to_string(want_correct) + "/" + std::to_string(want_total)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path suite_path = CHAINREC_SUITE, out = fs::temp_directory_path() / "chainrec_acceptance";
  fs::path fixtures = CHAINREC_FIXTURES;
  app.add_option("--suite", suite_path, "benchmark suite for criteria 4 to 6")->capture_default_str();
  app.add_option("--out", out, "scratch directory for benchmark outputs")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  bool all = true;
  auto report = [&](int id, const char* name, const Outcome& o) {
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " " << name << ": " << o.detail
              << std::endl;
    all = all && o.pass;
  };
  auto guarded = [&](int id, const char* name, const std::function<Outcome()>& f) {
    try {
      report(id, name, f());
    } catch (const std::exception& e) {
      report(id, name, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, "oracle equivalence", oracle_equivalence);
  guarded(2, "gradient suite", gradient_suite_check);
  guarded(3, "reward truth tables", reward_tables);

  std::optional<BenchmarkResult> bench;
  std::string bench_error;
  try {
    SuiteConfig suite = load_suite_config(suite_path);
    fs::remove_all(out / "benchmark");
    bench = run_benchmark(suite, out / "benchmark");
  } catch (const std::exception& e) {
    bench_error = e.what();
  }
  auto with_bench = [&](int id, const char* name, Outcome (*f)(const BenchmarkResult&)) {
    if (!bench)
      report(id, name, {false, "benchmark failed: " + bench_error});
    else
      guarded(id, name, [&] { return f(*bench); });
  };
  with_bench(4, "method ordering", method_ordering);
  with_bench(5, "direction ablation", direction_ablation);

  BenchmarkResult small;
  Outcome det;
  try {
    det = determinism(load_suite_config(suite_path), out / "determinism", small);
  } catch (const std::exception& e) {
    det = {false, std::string("error: ") + e.what()};
  }
  std::vector<const BenchmarkResult*> generated;
  if (bench) generated.push_back(&*bench);
  if (!small.datasets.empty()) generated.push_back(&small);
  guarded(6, "random baseline sanity", [&] { return random_sanity(generated); });
  report(7, "determinism", det);
  guarded(8, "format fidelity", [&] { return format_fidelity(fixtures); });

  if (bench) std::cout << "\n" << benchmark_tables(*bench);
  return all ? 0 : 1;
}
