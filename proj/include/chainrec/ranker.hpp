#pragma once

#include <optional>
#include <string>
#include <vector>

#include "chainrec/corpus.hpp"
#include "chainrec/nn.hpp"

namespace chainrec {

enum class Direction { HeadFirst, TailFirst };
enum class DecodeMode { Sample, Greedy };
enum class Role { Head, Middle, Tail };

const char* direction_name(Direction d);
Direction parse_direction(const std::string& s);
const char* role_name(Role r);

class NoCandidateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RankerConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 8;  // per direction; encodings are 2 * hidden_dim wide
  std::size_t num_layers = 2;
  std::size_t match_dim = 8;
  // false gives the independent baseline: Q^t = Q^0 and no update network
  bool conditional = true;

  std::size_t query_dim() const { return 2 * hidden_dim; }
  void validate() const;
};

struct MatchResult {
  Tensor state;  // [match_dim]
  Tensor score;  // scalar
};

struct RankerState {
  std::size_t step = 0;
  Tensor query;                      // [N x query_dim]
  std::vector<std::size_t> selected;  // pool indices, in selection order
  std::vector<Tensor> step_logprobs;  // scalars in the owning graph
};

// Question and passage encodings for one instance in one graph.
struct EncodedPool {
  Tensor question;               // [N x d]
  std::vector<Tensor> passages;  // [M_i x d]
};

// Order in which roles are selected for a given hop count and direction.
// 3-hop always selects head and tail from the original query first.
std::vector<Role> selection_roles(int hops, Direction direction);

struct StepRecord {
  Role role = Role::Head;
  std::vector<double> distribution;
  std::size_t chosen = 0;
  std::string passage_id;
  double logprob = 0.0;
  double reward = 0.0;
};

struct EpisodeTrace {
  std::string question_id;
  std::vector<StepRecord> steps;
  // Reasoner predictions used for the cooperative bonus, one per read passage.
  std::vector<std::string> reasoner_entities;

  // Passage id selected for a role, empty when the role was not selected.
  std::string passage_for(Role role) const;
};

// Selected passages in chain order (head first). Links are the
// lexicographically smallest shared entity, or empty when none is shared.
CandidateChain chain_from_trace(const QuestionInstance& inst, const EpisodeTrace& trace);

class Ranker {
 public:
  Ranker() = default;
  Ranker(const RankerConfig& cfg, Rng& rng);

  const RankerConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  EncodedPool encode(Graph& g, const QuestionInstance& inst) const;

  MatchResult match_score(Graph& g, const Tensor& query, const Tensor& passage) const;

  RankerState initial_state(const EncodedPool& pool) const;

  // Softmax over unmasked match scores against the state's query. When
  // matches is non-null it receives one entry per pool passage (masked
  // entries hold undefined tensors).
  Tensor select_distribution(Graph& g, const RankerState& state, const EncodedPool& pool,
                             const Mask& mask, std::vector<MatchResult>* matches = nullptr) const;

  RankerState advance(Graph& g, const RankerState& state, std::size_t chosen,
                      const Tensor& matching_state, const Tensor& logprob) const;

  // One rollout. forced, when given, fixes the pool index of each step.
  struct Rollout {
    RankerState state;
    EpisodeTrace trace;
  };
  Rollout rollout(Graph& g, const QuestionInstance& inst, const EncodedPool& pool, int hops,
                  Direction direction, DecodeMode mode, Rng* rng,
                  const std::vector<std::size_t>* forced = nullptr) const;

  std::pair<CandidateChain, EpisodeTrace> decode_chain(const QuestionInstance& inst, int hops,
                                                       Direction direction, DecodeMode mode,
                                                       Rng* rng) const;

  struct ScoredChain {
    CandidateChain chain;
    double logprob = 0.0;
  };
  // Teacher-forced log-likelihood of every chain; result follows the
  // input order.
  std::vector<ScoredChain> score_chains(const QuestionInstance& inst,
                                        const std::vector<CandidateChain>& chains, int hops,
                                        Direction direction) const;

  // Highest scoring member of C; ties go to the smallest chain.
  ScoredChain decode_from_candidates(const QuestionInstance& inst,
                                     const std::vector<CandidateChain>& chains, int hops,
                                     Direction direction) const;

  // Independent selection: the best tail among C's tails and the best head
  // among C's heads (and middle for 3-hop), each ranked by its own score
  // against the original question.
  ScoredChain decode_independent(const QuestionInstance& inst,
                                 const std::vector<CandidateChain>& chains, int hops) const;

 private:
  RankerConfig cfg_;
  ParameterSet params_;
  Embedding embed_;
  GruEncoder encoder_;
  GruLayer match_gru_;
  Linear score_;
  FeedForward update_;
};

}  // namespace chainrec
