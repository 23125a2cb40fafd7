#pragma once

// Independent chain enumerator used as a test oracle. It works from raw
// mention lists and deliberately shares no code with the library's
// extraction routines.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "chainrec/corpus.hpp"
#include "chainrec/rng.hpp"

namespace oracle {

inline bool mentions(const chainrec::Passage& p, const std::string& e) {
  for (const auto& m : p.mentions)
    if (m.entity == e) return true;
  return false;
}

inline bool has_answer(const chainrec::Passage& p, const chainrec::QuestionInstance& q) {
  if (q.answer_entity) return mentions(p, *q.answer_entity);
  const auto& a = *q.answer_tokens;
  if (a.empty() || a.size() > p.tokens.size()) return false;
  for (std::size_t s = 0; s + a.size() <= p.tokens.size(); ++s) {
    bool all = true;
    for (std::size_t k = 0; k < a.size(); ++k) all = all && p.tokens[s + k] == a[k];
    if (all) return true;
  }
  return false;
}

// Interleaved chains (p1, e1, p2, ...) as a set.
inline std::set<std::vector<std::string>> enumerate(const chainrec::QuestionInstance& q, int hops) {
  std::set<std::vector<std::string>> out;
  const auto& ps = q.passages;
  if (hops == 2) {
    for (const auto& h : ps)
      for (const auto& t : ps) {
        if (&h == &t || !has_answer(t, q)) continue;
        for (const auto& mh : h.mentions)
          for (const auto& mt : t.mentions)
            if (mh.entity == mt.entity) out.insert({h.id, mh.entity, t.id});
      }
    return out;
  }
  for (const auto& h : ps) {
    bool head = false;
    for (const auto& e : q.query_entities) head = head || mentions(h, e);
    if (!head) continue;
    for (const auto& m : ps)
      for (const auto& t : ps) {
        if (&h == &m || &m == &t || &h == &t || !has_answer(t, q)) continue;
        for (const auto& a : h.mentions)
          for (const auto& b : m.mentions) {
            if (a.entity != b.entity) continue;
            for (const auto& c : m.mentions)
              for (const auto& d : t.mentions)
                if (c.entity == d.entity) out.insert({h.id, a.entity, m.id, c.entity, t.id});
          }
      }
  }
  return out;
}

// Mix of generator output and dense random entity graphs.
inline std::vector<chainrec::QuestionInstance> random_instances(int hops, std::size_t n,
                                                               std::uint64_t seed) {
  std::vector<chainrec::QuestionInstance> out;
  chainrec::SynthConfig cfg;
  cfg.hops = hops;
  cfg.questions = n / 2;
  cfg.pool_size = hops == 2 ? 6 : 8;
  cfg.decoy_mix = {1, 1, 1, 1, 1, 1};
  cfg.decoys_max = 3;
  auto synth = chainrec::generate_synthetic(cfg, seed);
  out = synth.instances;

  chainrec::Rng rng(seed * 31 + 7);
  while (out.size() < n) {
    chainrec::QuestionInstance q;
    q.id = "r" + std::to_string(out.size());
    q.question = {1, 2};
    const std::size_t k = 2 + rng.index(6);
    const std::size_t n_ent = 3 + rng.index(6);
    auto name = [](std::size_t e) { return "E" + std::to_string(e); };
    q.answer_entity = name(rng.index(n_ent));
    q.query_entities = {name(rng.index(n_ent))};
    for (std::size_t i = 0; i < k; ++i) {
      chainrec::Passage p;
      p.id = "p" + std::to_string(i);
      const std::size_t len = 1 + rng.index(6);
      for (std::size_t t = 0; t < len; ++t) p.tokens.push_back(static_cast<int>(rng.index(20)));
      const std::size_t nm = rng.index(4);
      for (std::size_t m = 0; m < nm; ++m) {
        const std::size_t s = rng.index(len);
        const std::size_t e = s + 1 + rng.index(len - s);
        p.mentions.push_back({name(rng.index(n_ent)), s, e});
      }
      q.passages.push_back(std::move(p));
    }
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace oracle
