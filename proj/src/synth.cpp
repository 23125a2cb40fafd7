#include <algorithm>
#include <map>
#include <numeric>

#include "chainrec/corpus.hpp"

namespace chainrec {

void SynthConfig::validate() const {
  if (hops != 2 && hops != 3) throw ConfigError("synth: hops must be 2 or 3");
  if (pool_size < static_cast<std::size_t>(hops))
    throw ConfigError("synth: pool_size " + std::to_string(pool_size) + " is smaller than hops");
  if (passage_length < 3) throw ConfigError("synth: passage_length must be at least 3");
  if (relations < static_cast<std::size_t>(hops) + 2)
    throw ConfigError("synth: need at least hops + 2 relations");
  if (fillers < 1) throw ConfigError("synth: need at least one filler token");
  if (distractor_rate < 0.0 || distractor_rate > 1.0)
    throw ConfigError("synth: distractor_rate must lie in [0, 1]");
  if (lookalike_rate < 0.0 || lookalike_rate > 1.0)
    throw ConfigError("synth: lookalike_rate must lie in [0, 1]");
  if (decoys_min > decoys_max) throw ConfigError("synth: decoys_min exceeds decoys_max");
  if (distractor_rate > 0.0 && decoys_min == 0)
    throw ConfigError("synth: decoys_min must be at least 1 when distractor_rate > 0");
  if (decoy_mix.size() != decoy_kind_count)
    throw ConfigError("synth: decoy_mix needs one weight per decoy kind");
  if (alias_rate < 0.0 || alias_rate > 1.0) throw ConfigError("synth: alias_rate must lie in [0, 1]");
  if (alias_rate > 0.0 && aliases == 0) throw ConfigError("synth: alias_rate > 0 needs aliases >= 1");
  double total = 0.0;
  for (double w : decoy_mix) {
    if (w < 0.0) throw ConfigError("synth: decoy_mix weights must be non-negative");
    total += w;
  }
  if (distractor_rate > 0.0 && total <= 0.0) throw ConfigError("synth: decoy_mix is all zero");
  if (!lookalike_mix.empty()) {
    if (lookalike_mix.size() != decoy_kind_count)
      throw ConfigError("synth: lookalike_mix needs one weight per decoy kind");
    double lt = 0.0;
    for (double w : lookalike_mix) {
      if (w < 0.0) throw ConfigError("synth: lookalike_mix weights must be non-negative");
      lt += w;
    }
    if (lookalike_rate > 0.0 && lt <= 0.0) throw ConfigError("synth: lookalike_mix is all zero");
  }
  if (distractor_rate > 0.0 && pool_size < static_cast<std::size_t>(hops) + 1)
    throw ConfigError("synth: pool has no room for decoys");
  const std::size_t special = 1 + relations + fillers + aliases;
  // Each instance draws fresh entities for every passage slot.
  const std::size_t need = (4 + incidental_entities) * pool_size + 8;
  if (incidental_entities + 3 > passage_length)
    throw ConfigError("synth: passage_length leaves no room for incidental entities");
  if (vocab_size < special + need)
    throw ConfigError("synth: vocab_size " + std::to_string(vocab_size) + " leaves fewer than " +
                      std::to_string(need) + " entity tokens");
}

SynthVocabulary SynthVocabulary::layout(const SynthConfig& cfg) {
  SynthVocabulary v;
  v.wh = 0;
  v.relation_begin = 1;
  v.relation_end = v.relation_begin + static_cast<int>(cfg.relations);
  v.filler_begin = v.relation_end;
  v.filler_end = v.filler_begin + static_cast<int>(cfg.fillers);
  v.alias_begin = v.filler_end;
  v.alias_end = v.alias_begin + static_cast<int>(cfg.aliases);
  v.entity_begin = v.alias_end;
  v.entity_end = static_cast<int>(cfg.vocab_size);
  return v;
}

namespace {

struct Fact {
  int subject, relation, object;
};

struct Draft {
  std::vector<Fact> facts;
  std::vector<int> incidental;  // entities placed at filler positions
};

class Builder {
 public:
  Builder(const SynthConfig& cfg, Rng& rng) : cfg_(cfg), vocab_(SynthVocabulary::layout(cfg)), rng_(rng) {
    entities_.resize(static_cast<std::size_t>(vocab_.entity_end - vocab_.entity_begin));
    std::iota(entities_.begin(), entities_.end(), vocab_.entity_begin);
    relations_.resize(cfg.relations);
    std::iota(relations_.begin(), relations_.end(), vocab_.relation_begin);
    shuffle(relations_);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng_.index(i)]);
  }

  // Distinct within an instance.
  int fresh_entity() {
    const std::size_t remaining = entities_.size() - used_;
    std::size_t pick = used_ + rng_.index(remaining);
    std::swap(entities_[used_], entities_[pick]);
    return entities_[used_++];
  }

  // The first `reserved` relations are the question's; others are noise.
  int question_relation(std::size_t i) const { return relations_[i]; }
  int other_relation(std::size_t reserved) {
    return relations_[reserved + rng_.index(relations_.size() - reserved)];
  }

  Passage realize(const Draft& d, const std::string& id) {
    const std::size_t L = cfg_.passage_length;
    std::vector<int> tokens(L, -1);
    std::vector<bool> entity_slot(L, false);
    // facts are laid out back to back at a random offset
    const std::size_t fact_len = 3 * d.facts.size();
    const std::size_t span = std::min(fact_len, L);
    std::size_t offset = rng_.index(L - span + 1);
    std::size_t pos = offset;
    for (const Fact& f : d.facts) {
      for (int tok : {f.subject, f.relation, f.object}) {
        if (pos >= L) break;
        tokens[pos++] = tok;
      }
    }
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < L; ++i)
      if (tokens[i] < 0) free.push_back(i);
    shuffle(free);
    std::size_t used = 0;
    for (int e : d.incidental) {
      if (used == free.size()) break;
      tokens[free[used++]] = e;
    }
    for (std::size_t i = 0; i < L; ++i)
      if (tokens[i] < 0)
        tokens[i] = vocab_.filler_begin + static_cast<int>(rng_.index(cfg_.fillers));

    Passage p;
    p.id = id;
    p.tokens = tokens;
    for (std::size_t i = 0; i < L; ++i) {
      if (tokens[i] < vocab_.entity_begin) continue;
      p.mentions.push_back({SynthVocabulary::entity_name(tokens[i]), i, i + 1});
      if (cfg_.alias_rate <= 0.0) continue;
      if (tokens[i] == query_) continue;
      if (cfg_.consistent_aliases) {
        p.tokens[i] = surface(tokens[i]);
      } else if (rng_.bernoulli(cfg_.alias_rate)) {
        p.tokens[i] = vocab_.alias_begin + static_cast<int>(rng_.index(cfg_.aliases));
      }
    }
    return p;
  }

  void set_query(int entity) { query_ = entity; }

  // Instance-wide surface token of an entity under consistent aliasing.
  int surface(int entity) {
    auto it = alias_of_.find(entity);
    if (it == alias_of_.end()) {
      const bool aliased = rng_.bernoulli(cfg_.alias_rate);
      const int a = vocab_.alias_begin + static_cast<int>(rng_.index(cfg_.aliases));
      it = alias_of_.emplace(entity, aliased ? a : entity).first;
    }
    return it->second;
  }
  Rng& rng() { return rng_; }
  const SynthVocabulary& vocab() const { return vocab_; }

 private:
  const SynthConfig& cfg_;
  SynthVocabulary vocab_;
  Rng& rng_;
  std::vector<int> entities_;
  std::vector<int> relations_;
  std::size_t used_ = 0;
  int query_ = -1;
  std::map<int, int> alias_of_;
};

DecoyKind draw_kind(const std::vector<double>& mix, Rng& rng, bool allow_pair) {
  double total = 0.0;
  for (std::size_t k = 0; k < mix.size(); ++k)
    if (allow_pair || k != static_cast<std::size_t>(DecoyKind::TailPair)) total += mix[k];
  if (total <= 0.0) return DecoyKind::NoiseHead;
  double u = rng.uniform() * total;
  for (std::size_t k = 0; k < mix.size(); ++k) {
    if (!allow_pair && k == static_cast<std::size_t>(DecoyKind::TailPair)) continue;
    if (u < mix[k]) return static_cast<DecoyKind>(k);
    u -= mix[k];
  }
  for (std::size_t k = mix.size(); k-- > 0;)
    if (mix[k] > 0.0 && (allow_pair || k != static_cast<std::size_t>(DecoyKind::TailPair)))
      return static_cast<DecoyKind>(k);
  return DecoyKind::NoiseHead;
}

struct Plan {
  std::vector<Draft> drafts;  // index 0..hops-1 is the gold chain, head first
  std::vector<int> bridges;
  int answer = 0;
  int query = 0;
  std::vector<int> question;
};

// Gold chain X -r1-> B1 (-r2-> B2) -rn-> A, question [wh, rn, ..., r1, X].
Plan plan_gold(Builder& b, int hops, bool shuffle_relations) {
  Plan plan;
  plan.query = b.fresh_entity();
  b.set_query(plan.query);
  for (int i = 0; i + 1 < hops; ++i) plan.bridges.push_back(b.fresh_entity());
  plan.answer = b.fresh_entity();
  std::vector<int> nodes = {plan.query};
  nodes.insert(nodes.end(), plan.bridges.begin(), plan.bridges.end());
  nodes.push_back(plan.answer);
  for (int i = 0; i < hops; ++i)
    plan.drafts.push_back({{{nodes[i], b.question_relation(i), nodes[i + 1]}}, {}});
  plan.question.push_back(b.vocab().wh);
  std::vector<int> rels;
  for (int i = hops; i-- > 0;) rels.push_back(b.question_relation(i));
  if (shuffle_relations) b.shuffle(rels);
  plan.question.insert(plan.question.end(), rels.begin(), rels.end());
  plan.question.push_back(plan.query);
  return plan;
}

// Appends an in-C decoy (linked == true) or its off-C lookalike.
void add_decoy_2hop(Builder& b, Plan& plan, DecoyKind kind, bool linked, std::vector<Draft>& out) {
  const int X = plan.query, B = plan.bridges[0], A = plan.answer;
  const int r1 = b.question_relation(0), r2 = b.question_relation(1);
  Draft& tail = plan.drafts[1];
  switch (kind) {
    case DecoyKind::RelationHead:
      out.push_back({{{X, r2, linked ? B : b.fresh_entity()}}, {}});
      break;
    case DecoyKind::RelationTail:
      out.push_back({{{linked ? B : b.fresh_entity(), r1, b.fresh_entity()}}, {}});
      break;
    case DecoyKind::NoiseHead:
      out.push_back({{{b.fresh_entity(), b.other_relation(2), linked ? B : b.fresh_entity()}}, {}});
      break;
    case DecoyKind::EntityHead: {
      const int link = b.fresh_entity();
      if (linked) tail.incidental.push_back(link);
      out.push_back({{{X, b.other_relation(2), b.fresh_entity()}}, {link}});
      break;
    }
    case DecoyKind::TailPair: {
      const int bridge = b.fresh_entity();
      out.push_back({{{bridge, b.other_relation(2), linked ? A : b.fresh_entity()}}, {}});
      out.push_back({{{b.fresh_entity(), b.other_relation(2), bridge}}, {}});
      break;
    }
    case DecoyKind::MirrorHead:
      out.push_back({{{b.fresh_entity(), r2, linked ? B : b.fresh_entity()}}, {}});
      break;
  }
}

void add_decoy_3hop(Builder& b, Plan& plan, DecoyKind kind, bool linked, std::vector<Draft>& out) {
  const int X = plan.query, B1 = plan.bridges[0], B2 = plan.bridges[1], A = plan.answer;
  switch (kind) {
    case DecoyKind::RelationHead:
    case DecoyKind::NoiseHead:
    case DecoyKind::EntityHead:
    case DecoyKind::MirrorHead:
      // alternative head reaching the gold middle passage
      out.push_back({{{X, b.other_relation(3), b.fresh_entity()}}, {linked ? B1 : b.fresh_entity()}});
      break;
    case DecoyKind::RelationTail:
      // alternative middle between the gold head and tail
      out.push_back({{{linked ? B1 : b.fresh_entity(), b.other_relation(3), b.fresh_entity()}},
                     {linked ? B2 : b.fresh_entity()}});
      break;
    case DecoyKind::TailPair:
      // alternative answer-bearing tail hanging off the gold middle passage
      out.push_back({{{linked ? B2 : b.fresh_entity(), b.other_relation(3), A}}, {}});
      break;
  }
}

Draft noise(Builder& b, int hops) {
  return {{{b.fresh_entity(), b.other_relation(static_cast<std::size_t>(hops)), b.fresh_entity()}}, {}};
}

}  // namespace

SyntheticCorpus generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SyntheticCorpus out;
  for (std::size_t q = 0; q < cfg.questions; ++q) {
    Rng rng = Rng::derive(seed, {q});
    Builder b(cfg, rng);
    Plan plan = plan_gold(b, cfg.hops, cfg.shuffle_question_relations);
    const std::size_t K = cfg.pool_size;
    const std::size_t hops = static_cast<std::size_t>(cfg.hops);

    std::vector<Draft> extra;
    if (rng.bernoulli(cfg.distractor_rate)) {
      const std::size_t want = cfg.decoys_min + rng.index(cfg.decoys_max - cfg.decoys_min + 1);
      for (std::size_t d = 0; d < want && hops + extra.size() < K; ++d) {
        const bool room_for_pair = cfg.hops == 3 || hops + extra.size() + 2 <= K;
        DecoyKind kind = draw_kind(cfg.decoy_mix, rng, room_for_pair);
        if (cfg.hops == 2)
          add_decoy_2hop(b, plan, kind, true, extra);
        else
          add_decoy_3hop(b, plan, kind, true, extra);
      }
    }
    while (hops + extra.size() < K) {
      if (rng.bernoulli(cfg.lookalike_rate)) {
        const bool room_for_pair = cfg.hops == 3 || hops + extra.size() + 2 <= K;
        DecoyKind kind = draw_kind(cfg.lookalike_mix.empty() ? cfg.decoy_mix : cfg.lookalike_mix, rng,
                                   room_for_pair);
        if (cfg.hops == 2)
          add_decoy_2hop(b, plan, kind, false, extra);
        else
          add_decoy_3hop(b, plan, kind, false, extra);
      } else {
        extra.push_back(noise(b, cfg.hops));
      }
    }

    std::vector<Draft> drafts = plan.drafts;
    drafts.insert(drafts.end(), extra.begin(), extra.end());
    for (Draft& d : drafts)
      while (d.incidental.size() < cfg.incidental_entities) d.incidental.push_back(b.fresh_entity());
    std::vector<std::size_t> order(drafts.size());
    std::iota(order.begin(), order.end(), 0);
    b.shuffle(order);

    QuestionInstance inst;
    inst.id = "q" + std::to_string(q);
    inst.question = plan.question;
    inst.answer_entity = SynthVocabulary::entity_name(plan.answer);
    inst.query_entities = {SynthVocabulary::entity_name(plan.query)};
    std::vector<std::string> gold_ids(hops);
    inst.passages.resize(drafts.size());
    for (std::size_t slot = 0; slot < order.size(); ++slot) {
      const std::size_t d = order[slot];
      const std::string pid = "p" + std::to_string(slot);
      inst.passages[slot] = b.realize(drafts[d], pid);
      if (d < hops) gold_ids[d] = pid;
    }

    CandidateChain gold_chain;
    gold_chain.passage_ids = gold_ids;
    for (int e : plan.bridges) gold_chain.links.push_back(SynthVocabulary::entity_name(e));

    GoldAnnotation gold;
    gold.question_id = inst.id;
    gold.gold_chains = {gold_chain};
    std::size_t with_answer = 0;
    for (const std::string& id : gold_ids) with_answer += contains_answer(inst.passage(id), inst);
    gold.ambiguous = with_answer != 1 || !contains_answer(inst.passage(gold_ids.back()), inst);

    out.instances.push_back(std::move(inst));
    out.gold.push_back(std::move(gold));
  }
  return out;
}

}  // namespace chainrec
