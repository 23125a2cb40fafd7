#include "chainrec/reasoner.hpp"

#include <algorithm>
#include <map>

namespace chainrec {

std::size_t ReasonerConfig::reader_hidden() const {
  if (hidden_dim > 0) return hidden_dim;
  return std::max<std::size_t>(1, embed_dim / 2);
}

void ReasonerConfig::validate() const {
  if (vocab_size == 0 || embed_dim == 0)
    throw std::invalid_argument("ReasonerConfig: vocab_size and embed_dim must be at least 1");
}

double EntityDistribution::prob(const std::string& entity) const {
  auto it = std::lower_bound(entities.begin(), entities.end(), entity);
  if (it == entities.end() || *it != entity) return 0.0;
  return probs.at(static_cast<std::size_t>(it - entities.begin()));
}

Tensor attention_layer(Graph& g, const ParameterSet& params, const FeedForward& ffn,
                       const Tensor& attended, const Tensor& attending) {
  if (attended.shape().rank() != 2 || attending.shape().rank() != 2 ||
      attended.shape()[1] != attending.shape()[1])
    throw DimensionError("attention_layer: expected [N x d] and [M x d], got " +
                         attended.shape().str() + " and " + attending.shape().str());
  if (attended.shape()[0] == 0 || attending.shape()[0] == 0)
    throw DimensionError("attention_layer: empty input");
  // row k of the affinity matrix holds b_k . a_j for every attended row j
  Tensor weights = g.softmax_rows(g.matmul(attending, g.transpose(attended)));
  Tensor summary = g.matmul(weights, attended);
  Tensor features = g.concat(
      {attending, summary, g.sub(attending, summary), g.mul(attending, summary)});
  return ffn.forward(g, params, features);
}

Reasoner::Reasoner(const ReasonerConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const std::size_t e = cfg.embed_dim, h = cfg.reader_hidden();
  EncoderConfig enc{cfg.vocab_size, e, h, 1, true};
  embed_ = Embedding(params_, "reasoner.embed", cfg.vocab_size, e, rng);
  att1_ = FeedForward(params_, "reasoner.att1", 4 * e, e, rng);
  gru1_ = GruEncoder(params_, "reasoner.gru1", e, enc, rng);
  att2_ = FeedForward(params_, "reasoner.att2", 8 * h, e, rng);
  gru2_ = GruEncoder(params_, "reasoner.gru2", e, enc, rng);
  head_ = Linear(params_, "reasoner.head", 2 * h, 1, rng);
}

Tensor Reasoner::reader_encode(Graph& g, const Tensor& question, const Tensor& passage) const {
  Tensor m1 = attention_layer(g, params_, att1_, question, passage);
  Tensor h1 = gru1_.forward(g, params_, m1);
  Tensor m2 = attention_layer(g, params_, att2_, h1, h1);
  return gru2_.forward(g, params_, g.add(m1, m2));
}

Tensor Reasoner::token_scores(Graph& g, const std::vector<int>& question,
                              const Passage& passage) const {
  Tensor q = embed_.forward(g, params_, question);
  Tensor p = embed_.forward(g, params_, passage.tokens);
  Tensor hp = reader_encode(g, q, p);
  return g.reshape(head_.forward(g, params_, hp), Shape{passage.tokens.size()});
}

EntityDistribution Reasoner::entity_distribution(Graph& g, const std::vector<int>& question,
                                                 const Passage& passage) const {
  if (passage.mentions.empty())
    throw NoEntityError("passage " + passage.id + " mentions no entity");
  return aggregate_entities(g, token_scores(g, question, passage), passage);
}

EntityDistribution aggregate_entities(Graph& g, const Tensor& token_scores, const Passage& passage) {
  if (passage.mentions.empty())
    throw NoEntityError("passage " + passage.id + " mentions no entity");
  const std::size_t m = token_scores.numel();
  if (token_scores.shape().rank() != 1 || m != passage.tokens.size())
    throw DimensionError("aggregate_entities: expected one score per token, got " +
                         token_scores.shape().str());

  std::map<std::string, std::set<std::size_t>> positions;
  Mask covered(m, false);
  for (const Mention& mention : passage.mentions)
    for (std::size_t t = mention.start; t < mention.end; ++t) {
      positions[mention.entity].insert(t);
      covered.at(t) = true;
    }

  EntityDistribution dist;
  dist.passage_id = passage.id;
  for (const auto& [entity, _] : positions) dist.entities.push_back(entity);
  const std::size_t n = dist.entities.size();

  std::vector<double> assign(m * n, 0.0);
  std::vector<std::size_t> claims(m, 0);
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t t : positions[dist.entities[e]]) {
      assign[t * n + e] = 1.0;
      ++claims[t];
    }
  const bool overlap = std::any_of(claims.begin(), claims.end(), [](std::size_t c) { return c > 1; });

  dist.token_probs = g.softmax(token_scores, covered);
  Tensor summed = g.reshape(
      g.matmul(g.reshape(dist.token_probs, Shape{1, m}), Tensor::matrix(m, n, std::move(assign))),
      Shape{n});
  dist.probs = overlap ? g.normalize(summed) : summed;
  return dist;
}

Tensor reasoner_loss(Graph& g, const EntityDistribution& dist, const std::set<std::string>& positives) {
  if (dist.entities.empty()) throw NoEntityError("reasoner_loss: empty entity set");
  for (const std::string& p : positives)
    if (!std::binary_search(dist.entities.begin(), dist.entities.end(), p))
      throw std::invalid_argument("reasoner_loss: positive " + p + " is not mentioned in passage " +
                                  dist.passage_id);
  std::vector<bool> targets;
  for (const std::string& e : dist.entities) targets.push_back(positives.count(e) > 0);
  return cross_entropy(g, dist.probs, targets);
}

std::string top1_entity(const EntityDistribution& dist) {
  if (dist.entities.empty()) throw NoEntityError("top1_entity: empty distribution");
  std::size_t best = 0;
  for (std::size_t i = 1; i < dist.entities.size(); ++i)
    if (dist.probs.at(i) > dist.probs.at(best)) best = i;
  return dist.entities[best];
}

}  // namespace chainrec
