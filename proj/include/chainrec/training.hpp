#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "chainrec/corpus.hpp"
#include "chainrec/ranker.hpp"
#include "chainrec/reasoner.hpp"
#include "json.hpp"

namespace chainrec {

// Which Ranker step receives the Reasoner bonus in 2-hop training.
//   SecondStep: the Reasoner reads the first selection and the second
//               selection is rewarded when it mentions the predicted entity.
//   FirstStep:  the Reasoner reads the second selection and the first
//               selection is rewarded when it mentions the predicted entity.
//   Both:       both of the above.
// 3-hop always rewards head and tail by their link into the middle passage.
enum class BonusPlacement { SecondStep, FirstStep, Both };

const char* bonus_placement_name(BonusPlacement p);
BonusPlacement parse_bonus_placement(const std::string& s);

enum class OptimizerKind { Sgd, Adam };
const char* optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  int hops = 2;
  Direction direction = Direction::TailFirst;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double learning_rate = 1e-2;
  std::size_t episodes = 10000;  // Ranker episodes; an epoch is one pass over the corpus
  std::size_t batch_size = 8;
  bool use_baseline = true;
  double baseline_decay = 0.9;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;

  // model sizes; vocab_size 0 means the corpus vocabulary bound
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 8;
  std::size_t num_layers = 2;
  std::size_t match_dim = 8;
  std::size_t reasoner_embed_dim = 16;

  // cooperative game
  double bonus = 1.0;
  BonusPlacement bonus_placement = BonusPlacement::SecondStep;
  std::size_t cooperative_epochs = 4;
  std::size_t reasoner_epochs_per_cycle = 1;
  std::size_t ranker_epochs_per_cycle = 1;
  double reasoner_learning_rate = 5e-2;

  void validate() const;
  RankerConfig ranker_config(std::size_t vocab, bool conditional) const;
  ReasonerConfig reasoner_config(std::size_t vocab) const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, TrainConfig& cfg);
TrainConfig load_train_config(const std::filesystem::path& path);

std::array<double, 2> reward_2hop(const std::string& head, const std::string& tail,
                                  const HeadTailSets& sets);
std::array<double, 3> reward_3hop(const std::string& head, const std::string& middle,
                                  const std::string& tail, const std::vector<CandidateChain>& chains,
                                  const HeadTailSets& sets);
// 0 when the selection is outside `eligible`, 1 + bonus when the selected
// passage mentions the predicted entity, 1 otherwise.
double reward_cooperative(const Passage& selected, const std::optional<std::string>& predicted,
                          const std::set<std::string>& eligible, double bonus);
double reward_cooperative(bool eligible, bool entity_connects, double bonus);

// One sampled rollout with the graph that owns its log-probabilities.
struct Episode {
  std::unique_ptr<Graph> graph;
  RankerState state;
  EpisodeTrace trace;
};

// Plain SGD or Adam, chosen by the config.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}
  void step(ParameterSet& params);
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);
  OptimizerKind kind() const { return kind_; }

 private:
  OptimizerKind kind_ = OptimizerKind::Sgd;
  double lr_ = 1e-2;
  Adam adam_;
};

// Per-step exponential moving average of rewards.
class Baseline {
 public:
  Baseline() = default;
  Baseline(std::size_t steps, double decay, bool enabled)
      : values_(steps, 0.0), decay_(decay), enabled_(enabled) {}

  double value(std::size_t step) const { return enabled_ ? values_.at(step) : 0.0; }
  void update(const std::vector<double>& mean_rewards);
  const std::vector<double>& values() const { return values_; }
  void set_values(std::vector<double> v) { values_ = std::move(v); }

 private:
  std::vector<double> values_;
  double decay_ = 0.9;
  bool enabled_ = true;
};

struct UpdateStats {
  double mean_reward = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
};

// -sum_s (reward_s - baseline_s) * logprob_s for one episode.
Tensor surrogate_loss(Graph& g, const RankerState& state, const std::vector<double>& advantages);

// Accumulates the batch-averaged surrogate gradient of every episode,
// clips, takes one optimizer step, then updates the baseline. Without an
// optimizer the step is plain SGD at cfg.learning_rate.
UpdateStats policy_gradient_step(std::vector<Episode>& batch, ParameterSet& params,
                                 Baseline& baseline, const TrainConfig& cfg,
                                 Optimizer* optimizer = nullptr);

// Samples one episode and fills per-step rewards from C. With a reasoner,
// the configured steps carry the cooperative bonus.
Episode run_episode(const Ranker& ranker, const Reasoner* reasoner, const QuestionInstance& inst,
                    const std::vector<CandidateChain>& chains, const TrainConfig& cfg, Rng& rng);

struct LogEntry {
  std::size_t epoch = 0;
  std::string phase;  // "ranker" or "reasoner"
  double mean_reward = 0.0;
  double loss = 0.0;
  std::optional<double> dev_accuracy;
};
void to_json(nlohmann::json& j, const LogEntry& e);
void write_log(const std::filesystem::path& path, const std::vector<LogEntry>& log);

// Optional dev-set scorer; training itself never reads gold annotations.
using DevEvaluator = std::function<std::optional<double>(const Ranker&, const Reasoner*)>;

struct TrainIo {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::filesystem::path resume_dir;      // empty: fresh start
  std::size_t stop_after_epochs = 0;     // nonzero: return early (for resumable runs)
};

struct RankerRun {
  Ranker ranker;
  std::vector<LogEntry> log;
  std::size_t episodes_done = 0;
};

// REINFORCE training over the full pool with rewards from C.
RankerRun train_ranker(const std::vector<QuestionInstance>& corpus, const TrainConfig& cfg,
                       bool conditional = true, const DevEvaluator& dev = {},
                       const TrainIo& io = {});

struct CooperativeRun {
  Ranker ranker;
  Reasoner reasoner;
  std::vector<LogEntry> log;
};

// Alternates Reasoner and Ranker epochs starting from a trained Ranker.
CooperativeRun train_cooperative(const std::vector<QuestionInstance>& corpus, const TrainConfig& cfg,
                                 const Ranker& warm, const DevEvaluator& dev = {});

// Checkpoint directory layout: ranker.ckpt (parameters), optimizer.ckpt
// (optimizer moments) and trainer_state.json (episode counter, baseline,
// log so far).
void save_training_state(const std::filesystem::path& dir, const Ranker& ranker,
                         const Optimizer& optimizer, const Baseline& baseline,
                         std::size_t episodes_done, const std::vector<LogEntry>& log,
                         const TrainConfig& cfg);

}  // namespace chainrec
