#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chainrec/corpus.hpp"
#include "chainrec/ranker.hpp"
#include "chainrec/reasoner.hpp"
#include "chainrec/training.hpp"
#include "json.hpp"

namespace chainrec {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EvalMode { PassageEm, FullChain };
const char* eval_mode_name(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);

// One line of the predicted-chain JSONL. A question without any candidate
// chain is written with a null chain and counts as incorrect.
struct Prediction {
  std::string question_id;
  std::optional<CandidateChain> chain;
  double logprob = 0.0;
};

std::vector<Prediction> load_predictions(const std::filesystem::path& path);
void save_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds);

// correct / evaluated; rate is empty when nothing was evaluated.
struct Rate {
  std::size_t correct = 0;
  std::size_t evaluated = 0;
  std::optional<double> rate() const;
};

struct QuestionRecord {
  std::string question_id;
  bool ambiguous = false;
  bool covered = false;  // a chain was predicted
  bool passage_em = false;
  bool full_chain = false;
  std::optional<bool> head_correct;  // unambiguous questions only
  std::optional<bool> tail_correct;
};

// Joins predictions to gold by question id. Both files must hold the same
// id set; anything else is an EvalError.
std::vector<QuestionRecord> score_predictions(const std::vector<Prediction>& preds,
                                              const std::vector<GoldAnnotation>& gold);

// passage_em counts every question; full_chain skips ambiguous questions
// unless exclude_ambiguous is false.
Rate chain_accuracy(const std::vector<Prediction>& preds, const std::vector<GoldAnnotation>& gold,
                    EvalMode mode, bool exclude_ambiguous = true);

struct HeadTailRecall {
  Rate head;
  Rate tail;
};
HeadTailRecall head_tail_recall(const std::vector<Prediction>& preds, const std::vector<GoldAnnotation>& gold);

struct EvalReport {
  EvalMode mode = EvalMode::PassageEm;
  Rate chain_accuracy;  // in `mode`
  Rate passage_em;
  Rate full_chain;
  Rate head_recall;
  Rate tail_recall;
  Rate coverage;  // questions with a predicted chain
  std::vector<QuestionRecord> records;
  nlohmann::json config;  // echoed verbatim
};

EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<GoldAnnotation>& gold,
                    EvalMode mode, const nlohmann::json& config = nlohmann::json::object());
nlohmann::json report_json(const EvalReport& report);

// True when `chain` is correct for `gold` under `mode`.
bool chain_correct(const CandidateChain& chain, const GoldAnnotation& gold, EvalMode mode);

struct RandomBaseline {
  double exact = 0.0;        // mean over questions of (#correct chains in C) / |C|
  double monte_carlo = 0.0;  // mean accuracy over the sampled trials
  double stderr_ = 0.0;      // binomial normal approximation
  std::size_t trials = 0;
  std::size_t questions = 0;
};

// Uniform choice from C per question. chains[i] belongs to gold[i]; an empty
// C counts as incorrect.
RandomBaseline random_baseline(const std::vector<std::vector<CandidateChain>>& chains,
                               const std::vector<GoldAnnotation>& gold, EvalMode mode,
                               std::size_t trials, std::uint64_t seed);

enum class Method { Random, Independent, Conditional, Cooperative };
const char* method_name(Method m);

// Decodes one chain per question. Conditional and cooperative rank C by
// chain likelihood; independent uses per-role argmax. With a reasoner the
// link entities are taken from its top-1 predictions whenever C holds the
// same passages joined by that entity.
std::vector<Prediction> predict(const Ranker& ranker, const Reasoner* reasoner,
                                const std::vector<QuestionInstance>& corpus, int hops,
                                Direction direction, bool independent);

void to_json(nlohmann::json& j, const SynthConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, SynthConfig& cfg);

struct DatasetSpec {
  std::string name;
  SynthConfig synth;
  bool methods = true;             // random / independent / conditional / cooperative rows
  bool direction_ablation = false; // head-first conditional next to tail-first
  bool placement_ablation = false; // cooperative bonus on the other step
  bool bonus_sweep = false;        // cooperative at every value of SuiteConfig::bonus_values
};

struct SuiteConfig {
  std::string name = "synthetic";
  std::uint64_t seed = 0;
  std::size_t runs = 3;
  std::size_t train_questions = 1000;
  std::size_t dev_questions = 200;
  std::size_t random_trials = 1000;
  EvalMode mode = EvalMode::PassageEm;
  TrainConfig train;
  std::vector<double> bonus_values = {0.5, 1.0, 2.0};
  std::vector<DatasetSpec> datasets;

  void validate() const;
};

void to_json(nlohmann::json& j, const SuiteConfig& cfg);
void from_json(const nlohmann::json& j, SuiteConfig& cfg);
SuiteConfig load_suite_config(const std::filesystem::path& path);

// Row label -> per-run accuracies, in run order.
struct DatasetResult {
  std::string name;
  std::map<std::string, std::vector<double>> accuracy;
  std::map<std::string, std::vector<double>> head_recall;
  std::map<std::string, std::vector<double>> tail_recall;
  std::vector<RandomBaseline> random;
  std::vector<double> mean_candidates;  // mean |C| over dev questions, per run
  std::vector<double> mean_heads;       // mean |P_H|
  std::vector<double> mean_tails;       // mean |P_T|
};

struct BenchmarkResult {
  SuiteConfig suite;
  std::vector<DatasetResult> datasets;
  double seconds = 0.0;  // wall time; kept out of the written reports

  const DatasetResult& dataset(const std::string& name) const;
  static double mean(const std::vector<double>& v);
};

// Runs every configured dataset and seed. When out is non-empty, writes
// report.json, tables.txt and per-run checkpoints, predictions and logs.
BenchmarkResult run_benchmark(const SuiteConfig& suite, const std::filesystem::path& out = {});

nlohmann::json benchmark_json(const BenchmarkResult& result);
std::string benchmark_tables(const BenchmarkResult& result);

// Row labels used in DatasetResult.
namespace rows {
inline constexpr const char* kRandom = "random";
inline constexpr const char* kIndependent = "independent";
inline constexpr const char* kConditional = "conditional";
inline constexpr const char* kCooperative = "cooperative";
inline constexpr const char* kHeadFirst = "conditional_head_first";
inline constexpr const char* kOtherPlacement = "cooperative_other_step";
std::string bonus_row(double r);
}  // namespace rows

}  // namespace chainrec
