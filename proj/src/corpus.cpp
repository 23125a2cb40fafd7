#include "chainrec/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace chainrec {

using json = nlohmann::ordered_json;

bool Passage::mentions_entity(const std::string& entity) const {
  return std::any_of(mentions.begin(), mentions.end(),
                     [&](const Mention& m) { return m.entity == entity; });
}

std::vector<std::string> Passage::entities() const {
  std::vector<std::string> out;
  out.reserve(mentions.size());
  for (const Mention& m : mentions) out.push_back(m.entity);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::optional<std::size_t> QuestionInstance::passage_index(const std::string& passage_id) const {
  for (std::size_t i = 0; i < passages.size(); ++i)
    if (passages[i].id == passage_id) return i;
  return std::nullopt;
}

const Passage& QuestionInstance::passage(const std::string& passage_id) const {
  auto i = passage_index(passage_id);
  if (!i) throw std::out_of_range("question " + id + " has no passage " + passage_id);
  return passages[*i];
}

bool QuestionInstance::operator==(const QuestionInstance& o) const {
  return id == o.id && question == o.question && answer_entity == o.answer_entity &&
         answer_tokens == o.answer_tokens && query_entities == o.query_entities &&
         passages == o.passages;
}

std::vector<std::string> CandidateChain::interleaved() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < passage_ids.size(); ++i) {
    out.push_back(passage_ids[i]);
    if (i < links.size()) out.push_back(links[i]);
  }
  return out;
}

std::string CandidateChain::str() const {
  std::string out;
  for (std::size_t i = 0; i < passage_ids.size(); ++i) {
    out += passage_ids[i];
    if (i < links.size()) out += " -" + links[i] + "-> ";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Errors

const char* corpus_error_name(CorpusError::Kind kind) {
  switch (kind) {
    case CorpusError::Kind::Io: return "io";
    case CorpusError::Kind::MalformedJson: return "malformed-json";
    case CorpusError::Kind::Schema: return "schema";
    case CorpusError::Kind::MentionRange: return "mention-range";
    case CorpusError::Kind::DuplicatePassage: return "duplicate-passage";
    case CorpusError::Kind::DuplicateQuestion: return "duplicate-question";
  }
  return "?";
}

CorpusError::CorpusError(Kind kind, std::size_t line, const std::string& message)
    : std::runtime_error("line " + std::to_string(line) + ": " + corpus_error_name(kind) + ": " +
                         message),
      kind_(kind),
      line_(line) {}

// ---------------------------------------------------------------------------
// JSONL

namespace {

[[noreturn]] void schema(std::size_t line, const std::string& msg) {
  throw CorpusError(CorpusError::Kind::Schema, line, msg);
}

const json& field(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) schema(line, std::string("missing field \"") + key + "\"");
  return *it;
}

std::string string_field(const json& obj, const char* key, std::size_t line) {
  const json& v = field(obj, key, line);
  if (!v.is_string()) schema(line, std::string("field \"") + key + "\" must be a string");
  return v.get<std::string>();
}

std::vector<int> token_list(const json& v, const std::string& what, std::size_t line) {
  if (!v.is_array()) schema(line, what + " must be an array of token ids");
  std::vector<int> out;
  out.reserve(v.size());
  for (const json& t : v) {
    if (!t.is_number_integer() || t.get<long long>() < 0 ||
        t.get<long long>() > std::numeric_limits<int>::max())
      schema(line, what + " must hold non-negative integer token ids");
    out.push_back(t.get<int>());
  }
  return out;
}

std::vector<std::string> string_list(const json& v, const std::string& what, std::size_t line) {
  if (!v.is_array()) schema(line, what + " must be an array of strings");
  std::vector<std::string> out;
  for (const json& s : v) {
    if (!s.is_string()) schema(line, what + " must be an array of strings");
    out.push_back(s.get<std::string>());
  }
  return out;
}

json parse_json(const std::string& text, std::size_t line) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw CorpusError(CorpusError::Kind::MalformedJson, line, e.what());
  }
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw CorpusError(CorpusError::Kind::Io, 0, "cannot open " + path.string());
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (blank(text)) continue;
    f(text, line);
  }
}

json chain_json(const CandidateChain& c) {
  json j;
  j["passages"] = c.passage_ids;
  j["links"] = c.links;
  return j;
}

CandidateChain parse_chain(const json& j, std::size_t line) {
  if (!j.is_object()) schema(line, "chain must be an object");
  CandidateChain c;
  c.passage_ids = string_list(field(j, "passages", line), "chain passages", line);
  const json& links = field(j, "links", line);
  if (!links.is_null()) c.links = string_list(links, "chain links", line);
  return c;
}

}  // namespace

QuestionInstance parse_instance(const std::string& text, std::size_t line) {
  json j = parse_json(text, line);
  if (!j.is_object()) schema(line, "record must be a JSON object");
  QuestionInstance inst;
  inst.id = string_field(j, "id", line);
  inst.question = token_list(field(j, "question", line), "question", line);
  if (inst.question.empty()) schema(line, "question " + inst.id + " has no tokens");

  const json& ae = field(j, "answer_entity", line);
  const json& at = field(j, "answer_tokens", line);
  if (ae.is_null() == at.is_null())
    schema(line, "exactly one of answer_entity / answer_tokens must be non-null");
  if (!ae.is_null()) {
    if (!ae.is_string()) schema(line, "answer_entity must be a string or null");
    inst.answer_entity = ae.get<std::string>();
  } else {
    inst.answer_tokens = token_list(at, "answer_tokens", line);
    if (inst.answer_tokens->empty()) schema(line, "answer_tokens must be non-empty");
  }
  inst.query_entities = string_list(field(j, "query_entities", line), "query_entities", line);

  const json& ps = field(j, "passages", line);
  if (!ps.is_array() || ps.empty()) schema(line, "passages must be a non-empty array");
  std::set<std::string> seen;
  for (const json& pj : ps) {
    if (!pj.is_object()) schema(line, "passage must be an object");
    Passage p;
    p.id = string_field(pj, "id", line);
    if (!seen.insert(p.id).second)
      throw CorpusError(CorpusError::Kind::DuplicatePassage, line,
                        "duplicate passage id " + p.id + " in question " + inst.id);
    p.tokens = token_list(field(pj, "tokens", line), "passage " + p.id + " tokens", line);
    if (p.tokens.empty()) schema(line, "passage " + p.id + " has no tokens");
    const json& ms = field(pj, "mentions", line);
    if (!ms.is_array()) schema(line, "passage " + p.id + " mentions must be an array");
    for (const json& mj : ms) {
      if (!mj.is_object()) schema(line, "mention must be an object");
      Mention m;
      m.entity = string_field(mj, "entity", line);
      const json& s = field(mj, "start", line);
      const json& e = field(mj, "end", line);
      if (!s.is_number_integer() || !e.is_number_integer())
        schema(line, "mention offsets must be integers");
      const long long start = s.get<long long>(), end = e.get<long long>();
      if (start < 0 || start >= end || end > static_cast<long long>(p.tokens.size()))
        throw CorpusError(CorpusError::Kind::MentionRange, line,
                          "passage " + p.id + ": mention " + m.entity + " [" +
                              std::to_string(start) + ", " + std::to_string(end) +
                              ") outside " + std::to_string(p.tokens.size()) + " tokens");
      m.start = static_cast<std::size_t>(start);
      m.end = static_cast<std::size_t>(end);
      p.mentions.push_back(std::move(m));
    }
    inst.passages.push_back(std::move(p));
  }
  for (const std::string& q : inst.query_entities) {
    bool found = std::any_of(inst.passages.begin(), inst.passages.end(),
                             [&](const Passage& p) { return p.mentions_entity(q); });
    if (!found) inst.degenerate = true;
  }
  return inst;
}

std::string format_instance(const QuestionInstance& inst) {
  json j;
  j["id"] = inst.id;
  j["question"] = inst.question;
  j["answer_entity"] = inst.answer_entity ? json(*inst.answer_entity) : json(nullptr);
  j["answer_tokens"] = inst.answer_tokens ? json(*inst.answer_tokens) : json(nullptr);
  j["query_entities"] = inst.query_entities;
  json ps = json::array();
  for (const Passage& p : inst.passages) {
    json pj;
    pj["id"] = p.id;
    pj["tokens"] = p.tokens;
    json ms = json::array();
    for (const Mention& m : p.mentions) ms.push_back({{"entity", m.entity}, {"start", m.start}, {"end", m.end}});
    pj["mentions"] = std::move(ms);
    ps.push_back(std::move(pj));
  }
  j["passages"] = std::move(ps);
  return j.dump();
}

std::vector<QuestionInstance> load_corpus(const std::filesystem::path& path) {
  std::vector<QuestionInstance> out;
  std::set<std::string> ids;
  for_each_line(path, [&](const std::string& text, std::size_t line) {
    QuestionInstance inst = parse_instance(text, line);
    if (!ids.insert(inst.id).second)
      throw CorpusError(CorpusError::Kind::DuplicateQuestion, line, "duplicate question id " + inst.id);
    out.push_back(std::move(inst));
  });
  return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<QuestionInstance>& corpus) {
  std::ofstream out(path);
  if (!out) throw CorpusError(CorpusError::Kind::Io, 0, "cannot write " + path.string());
  for (const QuestionInstance& inst : corpus) out << format_instance(inst) << '\n';
}

std::vector<GoldAnnotation> load_gold(const std::filesystem::path& path) {
  std::vector<GoldAnnotation> out;
  for_each_line(path, [&](const std::string& text, std::size_t line) {
    json j = parse_json(text, line);
    if (!j.is_object()) schema(line, "record must be a JSON object");
    GoldAnnotation g;
    g.question_id = string_field(j, "id", line);
    const json& amb = field(j, "ambiguous", line);
    if (!amb.is_boolean()) schema(line, "ambiguous must be a boolean");
    g.ambiguous = amb.get<bool>();
    const json& chains = field(j, "gold_chains", line);
    if (!chains.is_array()) schema(line, "gold_chains must be an array");
    for (const json& c : chains) g.gold_chains.push_back(parse_chain(c, line));
    out.push_back(std::move(g));
  });
  return out;
}

void save_gold(const std::filesystem::path& path, const std::vector<GoldAnnotation>& gold) {
  std::ofstream out(path);
  if (!out) throw CorpusError(CorpusError::Kind::Io, 0, "cannot write " + path.string());
  for (const GoldAnnotation& g : gold) {
    json j;
    j["id"] = g.question_id;
    j["ambiguous"] = g.ambiguous;
    json chains = json::array();
    for (const CandidateChain& c : g.gold_chains) chains.push_back(chain_json(c));
    j["gold_chains"] = std::move(chains);
    out << j.dump() << '\n';
  }
}

std::size_t vocabulary_bound(const std::vector<QuestionInstance>& corpus) {
  int top = -1;
  for (const QuestionInstance& inst : corpus) {
    for (int t : inst.question) top = std::max(top, t);
    if (inst.answer_tokens)
      for (int t : *inst.answer_tokens) top = std::max(top, t);
    for (const Passage& p : inst.passages)
      for (int t : p.tokens) top = std::max(top, t);
  }
  return static_cast<std::size_t>(top + 1);
}

// ---------------------------------------------------------------------------
// Candidate chains

bool contains_answer(const Passage& p, const QuestionInstance& inst) {
  if (inst.answer_entity) return p.mentions_entity(*inst.answer_entity);
  if (!inst.answer_tokens || inst.answer_tokens->empty()) return false;
  const auto& a = *inst.answer_tokens;
  return std::search(p.tokens.begin(), p.tokens.end(), a.begin(), a.end()) != p.tokens.end();
}

namespace {

std::vector<std::string> shared(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::string> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

void sort_unique(std::vector<CandidateChain>& chains) {
  std::sort(chains.begin(), chains.end());
  chains.erase(std::unique(chains.begin(), chains.end()), chains.end());
}

}  // namespace

std::vector<CandidateChain> extract_chains_2hop(const QuestionInstance& inst) {
  const std::size_t k = inst.passages.size();
  std::vector<std::vector<std::string>> ents(k);
  std::vector<bool> answer(k);
  for (std::size_t i = 0; i < k; ++i) {
    ents[i] = inst.passages[i].entities();
    answer[i] = contains_answer(inst.passages[i], inst);
  }
  std::vector<CandidateChain> out;
  for (std::size_t t = 0; t < k; ++t) {
    if (!answer[t]) continue;
    for (std::size_t h = 0; h < k; ++h) {
      if (h == t) continue;
      for (const std::string& e : shared(ents[h], ents[t]))
        out.push_back({{inst.passages[h].id, inst.passages[t].id}, {e}});
    }
  }
  sort_unique(out);
  return out;
}

std::vector<CandidateChain> extract_chains_3hop(const QuestionInstance& inst) {
  const std::size_t k = inst.passages.size();
  std::vector<CandidateChain> out;
  if (inst.query_entities.empty()) return out;
  std::vector<std::vector<std::string>> ents(k);
  std::vector<bool> answer(k), head(k);
  for (std::size_t i = 0; i < k; ++i) {
    ents[i] = inst.passages[i].entities();
    answer[i] = contains_answer(inst.passages[i], inst);
    head[i] = std::any_of(inst.query_entities.begin(), inst.query_entities.end(),
                          [&](const std::string& q) { return inst.passages[i].mentions_entity(q); });
  }
  for (std::size_t h = 0; h < k; ++h) {
    if (!head[h]) continue;
    for (std::size_t t = 0; t < k; ++t) {
      if (!answer[t] || t == h) continue;
      for (std::size_t m = 0; m < k; ++m) {
        if (m == h || m == t) continue;
        const auto first = shared(ents[h], ents[m]);
        if (first.empty()) continue;
        const auto second = shared(ents[m], ents[t]);
        for (const std::string& e1 : first)
          for (const std::string& e2 : second)
            out.push_back({{inst.passages[h].id, inst.passages[m].id, inst.passages[t].id}, {e1, e2}});
      }
    }
  }
  sort_unique(out);
  return out;
}

std::vector<CandidateChain> extract_chains(const QuestionInstance& inst, int hops) {
  if (hops == 2) return extract_chains_2hop(inst);
  if (hops == 3) return extract_chains_3hop(inst);
  throw std::invalid_argument("hops must be 2 or 3, got " + std::to_string(hops));
}

HeadTailSets head_tail_sets(const std::vector<CandidateChain>& chains) {
  HeadTailSets s;
  for (const CandidateChain& c : chains) {
    if (c.passage_ids.empty()) continue;
    s.heads.insert(c.passage_ids.front());
    s.tails.insert(c.passage_ids.back());
  }
  return s;
}

std::string chain_violation(const QuestionInstance& inst, const CandidateChain& chain) {
  const std::size_t n = chain.passage_ids.size();
  if (n != 2 && n != 3) return "chain length " + std::to_string(n) + " is not 2 or 3";
  if (chain.links.size() != n - 1) return "chain needs " + std::to_string(n - 1) + " links";
  std::set<std::string> distinct(chain.passage_ids.begin(), chain.passage_ids.end());
  if (distinct.size() != n) return "chain repeats a passage";
  std::vector<const Passage*> ps;
  for (const std::string& id : chain.passage_ids) {
    auto i = inst.passage_index(id);
    if (!i) return "unknown passage " + id;
    ps.push_back(&inst.passages[*i]);
  }
  for (std::size_t i = 0; i + 1 < n; ++i)
    if (!ps[i]->mentions_entity(chain.links[i]) || !ps[i + 1]->mentions_entity(chain.links[i]))
      return "link " + chain.links[i] + " is not shared by " + ps[i]->id + " and " + ps[i + 1]->id;
  if (!contains_answer(*ps.back(), inst)) return "final passage " + ps.back()->id + " lacks the answer";
  return "";
}

}  // namespace chainrec
