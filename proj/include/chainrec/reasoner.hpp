#pragma once

#include <set>
#include <string>
#include <vector>

#include "chainrec/corpus.hpp"
#include "chainrec/nn.hpp"

namespace chainrec {

class NoEntityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ReasonerConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  // per direction of both reader GRUs; 0 means embed_dim / 2 (at least 1)
  std::size_t hidden_dim = 0;

  std::size_t reader_hidden() const;
  void validate() const;
};

struct EntityDistribution {
  std::string passage_id;
  std::vector<std::string> entities;  // sorted, each mentioned in the passage
  Tensor probs;                       // [entities.size()], sums to 1
  Tensor token_probs;                 // [M], 0 on tokens outside every mention

  double prob(const std::string& entity) const;
};

// One attention layer of the reader. Every row b_k of `attending` attends
// over the rows of `attended` with weights softmax_j(a_j . b_k), and the
// result is ffn([b, b~, b - b~, b * b~]) with one output row per b_k.
Tensor attention_layer(Graph& g, const ParameterSet& params, const FeedForward& ffn,
                       const Tensor& attended, const Tensor& attending);

class Reasoner {
 public:
  Reasoner() = default;
  Reasoner(const ReasonerConfig& cfg, Rng& rng);

  const ReasonerConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // Q^r [N x E], H^r [M x E] -> [M x 2 * reader_hidden]
  Tensor reader_encode(Graph& g, const Tensor& question, const Tensor& passage) const;

  // Per-token scores [M] for a passage given the question tokens.
  Tensor token_scores(Graph& g, const std::vector<int>& question, const Passage& passage) const;

  EntityDistribution entity_distribution(Graph& g, const std::vector<int>& question,
                                         const Passage& passage) const;

 private:
  ReasonerConfig cfg_;
  ParameterSet params_;
  Embedding embed_;
  FeedForward att1_;
  GruEncoder gru1_;
  FeedForward att2_;
  GruEncoder gru2_;
  Linear head_;
};

// Token-level softmax over mention tokens aggregated to entities by summing
// each entity's token positions; renormalized when mentions overlap.
EntityDistribution aggregate_entities(Graph& g, const Tensor& token_scores, const Passage& passage);

// Mean binary cross-entropy over the mentioned entities.
Tensor reasoner_loss(Graph& g, const EntityDistribution& dist, const std::set<std::string>& positives);

// Argmax entity; ties go to the smallest entity id.
std::string top1_entity(const EntityDistribution& dist);

}  // namespace chainrec
