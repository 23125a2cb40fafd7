#include "chainrec/ranker.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace chainrec {

const char* direction_name(Direction d) { return d == Direction::HeadFirst ? "head_first" : "tail_first"; }

Direction parse_direction(const std::string& s) {
  if (s == "head_first") return Direction::HeadFirst;
  if (s == "tail_first") return Direction::TailFirst;
  throw std::invalid_argument("direction must be head_first or tail_first, got " + s);
}

const char* role_name(Role r) {
  switch (r) {
    case Role::Head: return "head";
    case Role::Middle: return "middle";
    case Role::Tail: return "tail";
  }
  return "?";
}

void RankerConfig::validate() const {
  if (vocab_size == 0 || embed_dim == 0 || hidden_dim == 0 || num_layers == 0 || match_dim == 0)
    throw std::invalid_argument("RankerConfig: every size must be at least 1");
}

std::vector<Role> selection_roles(int hops, Direction direction) {
  if (hops == 2)
    return direction == Direction::TailFirst ? std::vector<Role>{Role::Tail, Role::Head}
                                             : std::vector<Role>{Role::Head, Role::Tail};
  if (hops == 3) return {Role::Head, Role::Tail, Role::Middle};
  throw std::invalid_argument("hops must be 2 or 3");
}

std::string EpisodeTrace::passage_for(Role role) const {
  for (const StepRecord& s : steps)
    if (s.role == role) return s.passage_id;
  return "";
}

CandidateChain chain_from_trace(const QuestionInstance& inst, const EpisodeTrace& trace) {
  CandidateChain c;
  for (Role r : {Role::Head, Role::Middle, Role::Tail}) {
    std::string id = trace.passage_for(r);
    if (!id.empty()) c.passage_ids.push_back(id);
  }
  for (std::size_t i = 0; i + 1 < c.passage_ids.size(); ++i) {
    auto a = inst.passage(c.passage_ids[i]).entities();
    auto b = inst.passage(c.passage_ids[i + 1]).entities();
    std::vector<std::string> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    c.links.push_back(common.empty() ? std::string() : common.front());
  }
  return c;
}

Ranker::Ranker(const RankerConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  EncoderConfig enc{cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.num_layers, true};
  const std::size_t d = cfg.query_dim();
  embed_ = Embedding(params_, "ranker.embed", cfg.vocab_size, cfg.embed_dim, rng);
  encoder_ = GruEncoder(params_, "ranker.enc", cfg.embed_dim, enc, rng);
  match_gru_ = GruLayer(params_, "ranker.match", 4 * d, cfg.match_dim, rng);
  score_ = Linear(params_, "ranker.score", cfg.match_dim, 1, rng);
  if (cfg.conditional) update_ = FeedForward(params_, "ranker.update", d + cfg.match_dim, d, rng);
}

EncodedPool Ranker::encode(Graph& g, const QuestionInstance& inst) const {
  EncodedPool pool;
  pool.question = encoder_.forward(g, params_, embed_.forward(g, params_, inst.question));
  pool.passages.reserve(inst.passages.size());
  for (const Passage& p : inst.passages)
    pool.passages.push_back(encoder_.forward(g, params_, embed_.forward(g, params_, p.tokens)));
  return pool;
}

MatchResult Ranker::match_score(Graph& g, const Tensor& query, const Tensor& passage) const {
  if (query.shape().rank() != 2 || passage.shape().rank() != 2 || query.shape()[0] == 0)
    throw DimensionError("match_score: expected [N x d] and [M x d], got " + query.shape().str() +
                         " and " + passage.shape().str());
  if (passage.shape()[0] == 0) throw DimensionError("match_score: empty passage");
  // e_jk = q_j . h_k, attention normalized over passage positions k
  Tensor attention = g.softmax_rows(g.matmul(query, g.transpose(passage)));
  Tensor attended = g.matmul(attention, passage);
  Tensor features =
      g.concat({query, attended, g.sub(query, attended), g.mul(query, attended)});
  Tensor states = match_gru_.forward(g, params_, features, false);
  MatchResult r;
  r.state = g.max_pool_over_time(states);
  r.score = g.reshape(score_.forward(g, params_, r.state), Shape{});
  return r;
}

RankerState Ranker::initial_state(const EncodedPool& pool) const {
  RankerState s;
  s.query = pool.question;
  return s;
}

namespace {

struct Scores {
  Tensor scores;  // [K]
  std::vector<MatchResult> matches;
};

Mask selection_mask(std::size_t k, const std::vector<std::size_t>& taken) {
  Mask m(k, true);
  for (std::size_t i : taken) m.at(i) = false;
  return m;
}

}  // namespace

static Scores score_pool(const Ranker& r, Graph& g, const Tensor& query, const EncodedPool& pool,
                         const Mask& mask) {
  const std::size_t k = pool.passages.size();
  if (mask.size() != k) throw DimensionError("select_distribution: mask size does not match pool");
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
    throw NoCandidateError("select_distribution: every passage is masked");
  Scores out;
  out.matches.resize(k);
  std::vector<Tensor> parts;
  parts.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!mask[i]) {
      parts.push_back(Tensor::vector({0.0}));
      continue;
    }
    out.matches[i] = r.match_score(g, query, pool.passages[i]);
    parts.push_back(g.reshape(out.matches[i].score, Shape{1}));
  }
  out.scores = g.concat(parts);
  return out;
}

Tensor Ranker::select_distribution(Graph& g, const RankerState& state, const EncodedPool& pool,
                                   const Mask& mask, std::vector<MatchResult>* matches) const {
  Scores s = score_pool(*this, g, state.query, pool, mask);
  if (matches) *matches = s.matches;
  return g.softmax(s.scores, mask);
}

RankerState Ranker::advance(Graph& g, const RankerState& state, std::size_t chosen,
                            const Tensor& matching_state, const Tensor& logprob) const {
  RankerState next = state;
  next.step = state.step + 1;
  next.selected.push_back(chosen);
  next.step_logprobs.push_back(logprob);
  if (cfg_.conditional) {
    const std::size_t n = state.query.shape()[0];
    Tensor joined = g.concat({state.query, g.repeat_rows(matching_state, n)});
    next.query = update_.forward(g, params_, joined);
  }
  return next;
}

namespace {

// Rollout bookkeeping: `base` is the advanced state, `pending` holds
// selections scored against base.query but not yet folded into it (the
// 3-hop head and tail are both scored against Q^0).
struct Frame {
  RankerState base;
  struct Pending {
    std::size_t index;
    Tensor state;
    Tensor logprob;
  };
  std::vector<Pending> pending;

  std::vector<std::size_t> taken() const {
    std::vector<std::size_t> t = base.selected;
    for (const Pending& p : pending) t.push_back(p.index);
    return t;
  }
};

}  // namespace

static Frame step_frame(const Ranker& r, Graph& g, const Frame& f, int hops, std::size_t step,
                        std::size_t chosen, const MatchResult& match, const Tensor& logprob) {
  Frame next = f;
  next.pending.push_back({chosen, match.state, logprob});
  // 2-hop folds every step; 3-hop folds after head and tail are both chosen.
  const bool fold = hops == 2 || step + 1 >= 2;
  if (fold) {
    for (const auto& p : next.pending) next.base = r.advance(g, next.base, p.index, p.state, p.logprob);
    next.pending.clear();
  }
  return next;
}

Ranker::Rollout Ranker::rollout(Graph& g, const QuestionInstance& inst, const EncodedPool& pool,
                                int hops, Direction direction, DecodeMode mode, Rng* rng,
                                const std::vector<std::size_t>* forced) const {
  const std::vector<Role> roles = selection_roles(hops, direction);
  const std::size_t k = pool.passages.size();
  if (k < roles.size())
    throw NoCandidateError("pool of " + std::to_string(k) + " passages cannot fill " +
                           std::to_string(roles.size()) + " steps");
  if (forced && forced->size() != roles.size())
    throw std::invalid_argument("rollout: forced selection has the wrong length");
  if (!forced && mode == DecodeMode::Sample && !rng)
    throw std::invalid_argument("rollout: sample mode needs an rng");

  Rollout out;
  out.trace.question_id = inst.id;
  Frame frame;
  frame.base = initial_state(pool);
  for (std::size_t s = 0; s < roles.size(); ++s) {
    const Mask mask = selection_mask(k, frame.taken());
    Scores sc = score_pool(*this, g, frame.base.query, pool, mask);
    Tensor probs = g.softmax(sc.scores, mask);
    Tensor logps = g.log_softmax(sc.scores, mask);

    std::size_t chosen = 0;
    if (forced) {
      chosen = forced->at(s);
      if (chosen >= k || !mask[chosen])
        throw NoCandidateError("rollout: forced passage index " + std::to_string(chosen) +
                               " is masked or out of range");
    } else if (mode == DecodeMode::Greedy) {
      double best = -1.0;
      for (std::size_t i = 0; i < k; ++i)
        if (mask[i] && probs.at(i) > best) best = probs.at(i), chosen = i;
    } else {
      const double u = rng->uniform();
      double cum = 0.0;
      std::size_t last = k;
      chosen = k;
      for (std::size_t i = 0; i < k; ++i) {
        if (!mask[i]) continue;
        last = i;
        cum += probs.at(i);
        if (u < cum) {
          chosen = i;
          break;
        }
      }
      if (chosen == k) chosen = last;
    }

    Tensor logprob = g.pick(logps, chosen);
    StepRecord rec;
    rec.role = roles[s];
    rec.distribution = probs.values();
    rec.chosen = chosen;
    rec.passage_id = inst.passages[chosen].id;
    rec.logprob = logprob.item();
    out.trace.steps.push_back(std::move(rec));
    frame = step_frame(*this, g, frame, hops, s, chosen, sc.matches[chosen], logprob);
  }
  out.state = frame.base;
  return out;
}

std::pair<CandidateChain, EpisodeTrace> Ranker::decode_chain(const QuestionInstance& inst, int hops,
                                                             Direction direction, DecodeMode mode,
                                                             Rng* rng) const {
  if (inst.passages.empty()) throw NoCandidateError("decode_chain: empty pool");
  Graph g;
  EncodedPool pool = encode(g, inst);
  Rollout r = rollout(g, inst, pool, hops, direction, mode, rng);
  return {chain_from_trace(inst, r.trace), r.trace};
}

namespace {

// Pool indices of a chain in selection order.
std::vector<std::size_t> selection_order(const QuestionInstance& inst, const CandidateChain& c,
                                         int hops, Direction direction) {
  if (c.passage_ids.size() != static_cast<std::size_t>(hops))
    throw std::invalid_argument("chain " + c.str() + " does not have " + std::to_string(hops) +
                                " passages");
  std::vector<std::size_t> out;
  for (Role role : selection_roles(hops, direction)) {
    std::size_t pos = role == Role::Head ? 0 : role == Role::Tail ? c.passage_ids.size() - 1 : 1;
    auto idx = inst.passage_index(c.passage_ids[pos]);
    if (!idx) throw std::invalid_argument("chain references unknown passage " + c.passage_ids[pos]);
    out.push_back(*idx);
  }
  return out;
}

}  // namespace

std::vector<Ranker::ScoredChain> Ranker::score_chains(const QuestionInstance& inst,
                                                      const std::vector<CandidateChain>& chains,
                                                      int hops, Direction direction) const {
  Graph g;
  EncodedPool pool = encode(g, inst);
  const std::size_t k = pool.passages.size();

  struct Node {
    Frame frame;
    std::vector<double> logps;
    std::vector<MatchResult> matches;
  };
  std::map<std::vector<std::size_t>, Node> cache;
  auto node_for = [&](const std::vector<std::size_t>& prefix) -> Node& {
    auto it = cache.find(prefix);
    if (it != cache.end()) return it->second;
    Node n;
    if (prefix.empty()) {
      n.frame.base = initial_state(pool);
    } else {
      std::vector<std::size_t> parent_prefix(prefix.begin(), prefix.end() - 1);
      Node& parent = cache.at(parent_prefix);
      const std::size_t c = prefix.back();
      Tensor lp = Tensor::scalar(parent.logps[c]);
      n.frame = step_frame(*this, g, parent.frame, hops, prefix.size() - 1, c, parent.matches[c], lp);
    }
    if (prefix.size() < static_cast<std::size_t>(hops)) {
      const Mask mask = selection_mask(k, n.frame.taken());
      Scores sc = score_pool(*this, g, n.frame.base.query, pool, mask);
      n.logps = g.log_softmax(sc.scores, mask).values();
      n.matches = std::move(sc.matches);
    }
    return cache.emplace(prefix, std::move(n)).first->second;
  };

  std::vector<ScoredChain> out;
  for (const CandidateChain& c : chains) {
    std::vector<std::size_t> order = selection_order(inst, c, hops, direction);
    std::set<std::size_t> distinct(order.begin(), order.end());
    if (distinct.size() != order.size())
      throw std::invalid_argument("chain " + c.str() + " repeats a passage");
    double total = 0.0;
    std::vector<std::size_t> prefix;
    node_for(prefix);
    for (std::size_t idx : order) {
      total += cache.at(prefix).logps[idx];
      prefix.push_back(idx);
      if (prefix.size() < order.size()) node_for(prefix);
    }
    out.push_back({c, total});
  }
  return out;
}

Ranker::ScoredChain Ranker::decode_from_candidates(const QuestionInstance& inst,
                                                   const std::vector<CandidateChain>& chains,
                                                   int hops, Direction direction) const {
  if (chains.empty()) throw NoCandidateError("decode_from_candidates: empty candidate set");
  std::vector<CandidateChain> unique = chains;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  auto scored = score_chains(inst, unique, hops, direction);
  // unique is sorted, so the first maximum is the smallest chain among ties
  std::size_t best = 0;
  for (std::size_t i = 1; i < scored.size(); ++i)
    if (scored[i].logprob > scored[best].logprob) best = i;
  return scored[best];
}

Ranker::ScoredChain Ranker::decode_independent(const QuestionInstance& inst,
                                               const std::vector<CandidateChain>& chains,
                                               int hops) const {
  if (chains.empty()) throw NoCandidateError("decode_independent: empty candidate set");
  Graph g;
  EncodedPool pool = encode(g, inst);
  const std::size_t k = pool.passages.size();
  Scores sc = score_pool(*this, g, pool.question, pool, Mask(k, true));
  const std::vector<double> logps = g.log_softmax(sc.scores, Mask(k, true)).values();

  std::vector<std::set<std::size_t>> eligible(static_cast<std::size_t>(hops));
  for (const CandidateChain& c : chains)
    for (std::size_t pos = 0; pos < c.passage_ids.size(); ++pos)
      eligible[pos].insert(*inst.passage_index(c.passage_ids[pos]));

  // Tail first, then head, then middle; each excludes earlier picks.
  std::vector<std::size_t> positions = {static_cast<std::size_t>(hops) - 1, 0};
  if (hops == 3) positions.push_back(1);
  std::vector<std::size_t> picked(static_cast<std::size_t>(hops), k);
  double total = 0.0;
  for (std::size_t pos : positions) {
    std::size_t best = k;
    for (std::size_t i : eligible[pos]) {
      if (std::find(picked.begin(), picked.end(), i) != picked.end()) continue;
      if (best == k || logps[i] > logps[best]) best = i;
    }
    if (best == k) throw NoCandidateError("decode_independent: no eligible passage for a position");
    picked[pos] = best;
    total += logps[best];
  }

  CandidateChain assembled;
  for (std::size_t i : picked) assembled.passage_ids.push_back(inst.passages[i].id);
  // Prefer the smallest member of C over these passages; otherwise link
  // through the smallest shared entity.
  std::optional<CandidateChain> member;
  for (const CandidateChain& c : chains)
    if (c.passage_ids == assembled.passage_ids && (!member || c < *member)) member = c;
  if (member) return {*member, total};
  EpisodeTrace t;
  std::vector<Role> roles = {Role::Head, Role::Middle, Role::Tail};
  if (hops == 2) roles = {Role::Head, Role::Tail};
  for (std::size_t pos = 0; pos < picked.size(); ++pos) {
    StepRecord rec;
    rec.role = roles[pos];
    rec.passage_id = inst.passages[picked[pos]].id;
    t.steps.push_back(rec);
  }
  return {chain_from_trace(inst, t), total};
}

}  // namespace chainrec
