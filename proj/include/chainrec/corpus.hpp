#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainrec/rng.hpp"

namespace chainrec {

struct Mention {
  std::string entity;
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive

  bool operator==(const Mention&) const = default;
};

struct Passage {
  std::string id;
  std::vector<int> tokens;
  std::vector<Mention> mentions;

  bool mentions_entity(const std::string& entity) const;
  // Distinct mentioned entity ids, sorted.
  std::vector<std::string> entities() const;

  bool operator==(const Passage&) const = default;
};

struct QuestionInstance {
  std::string id;
  std::vector<int> question;
  std::optional<std::string> answer_entity;
  std::optional<std::vector<int>> answer_tokens;
  std::vector<std::string> query_entities;
  std::vector<Passage> passages;
  // Set on load when a query entity is mentioned by no passage.
  bool degenerate = false;

  std::optional<std::size_t> passage_index(const std::string& passage_id) const;
  const Passage& passage(const std::string& passage_id) const;

  bool operator==(const QuestionInstance& other) const;
};

// Always stored head to tail.
struct CandidateChain {
  std::vector<std::string> passage_ids;
  std::vector<std::string> links;

  std::size_t hops() const { return passage_ids.size(); }
  // Interleaved p1, e1, p2, ..., pn.
  std::vector<std::string> interleaved() const;
  std::string str() const;

  bool operator==(const CandidateChain&) const = default;
  bool operator<(const CandidateChain& other) const { return interleaved() < other.interleaved(); }
};

struct GoldAnnotation {
  std::string question_id;
  std::vector<CandidateChain> gold_chains;
  bool ambiguous = false;
};

class CorpusError : public std::runtime_error {
 public:
  enum class Kind { Io, MalformedJson, Schema, MentionRange, DuplicatePassage, DuplicateQuestion };

  CorpusError(Kind kind, std::size_t line, const std::string& message);
  Kind kind() const { return kind_; }
  std::size_t line() const { return line_; }

 private:
  Kind kind_;
  std::size_t line_;
};

const char* corpus_error_name(CorpusError::Kind kind);

std::vector<QuestionInstance> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const std::vector<QuestionInstance>& corpus);
// Parses one JSONL record; line is used for error context.
QuestionInstance parse_instance(const std::string& text, std::size_t line);
std::string format_instance(const QuestionInstance& inst);

std::vector<GoldAnnotation> load_gold(const std::filesystem::path& path);
void save_gold(const std::filesystem::path& path, const std::vector<GoldAnnotation>& gold);

// Largest token id used anywhere in the corpus, plus one.
std::size_t vocabulary_bound(const std::vector<QuestionInstance>& corpus);

bool contains_answer(const Passage& p, const QuestionInstance& inst);

// Sorted, duplicate free.
std::vector<CandidateChain> extract_chains_2hop(const QuestionInstance& inst);
std::vector<CandidateChain> extract_chains_3hop(const QuestionInstance& inst);
std::vector<CandidateChain> extract_chains(const QuestionInstance& inst, int hops);

struct HeadTailSets {
  std::set<std::string> heads;
  std::set<std::string> tails;
};
HeadTailSets head_tail_sets(const std::vector<CandidateChain>& chains);

// Empty string when the chain satisfies every structural constraint, else
// the first violation.
std::string chain_violation(const QuestionInstance& inst, const CandidateChain& chain);

enum class DecoyKind {
  // head-position passage using the tail relation, linked through the bridge
  RelationHead,
  // passage repeating the head relation from the bridge entity
  RelationTail,
  // head-position passage with an unrelated relation, linked through the bridge
  NoiseHead,
  // query-entity passage with an unrelated relation, linked only through an
  // incidental entity of the gold tail
  EntityHead,
  // second answer-bearing passage with its own head
  TailPair,
  // head-position passage carrying the tail's relation, linked through the bridge
  MirrorHead,
};
inline constexpr std::size_t decoy_kind_count = 6;

struct SynthConfig {
  int hops = 2;
  std::size_t questions = 100;
  std::size_t pool_size = 6;
  std::size_t vocab_size = 400;
  std::size_t relations = 24;
  std::size_t fillers = 40;
  std::size_t passage_length = 8;
  // fraction of instances given at least one decoy inside C
  double distractor_rate = 0.8;
  // decoys inside C per distracted instance, drawn uniformly in [min, max]
  std::size_t decoys_min = 1;
  std::size_t decoys_max = 2;
  // relative weights for the decoy kinds in DecoyKind order
  std::vector<double> decoy_mix = {1.0, 1.0, 1.0, 0.0, 0.0, 0.0};
  // probability that each remaining pool slot repeats a decoy pattern
  // without the shared entity (so it stays outside C)
  double lookalike_rate = 0.7;
  // decoy kinds used for lookalikes; empty means decoy_mix
  std::vector<double> lookalike_mix;
  // Surface aliasing: a mention of a non-query entity is written with one of
  // `aliases` shared alias tokens with probability alias_rate. The mention
  // keeps its entity id, so links are unchanged. Per-mention aliasing hides
  // links; consistent aliasing draws one surface token per entity for the
  // whole instance, so a shared entity shows the same token everywhere.
  std::size_t aliases = 0;
  double alias_rate = 0.0;
  bool consistent_aliases = false;
  // Write the question's relation tokens in random order, so the question
  // alone does not tell which relation belongs to which hop.
  bool shuffle_question_relations = false;
  // Every passage is topped up to this many entities outside its facts.
  std::size_t incidental_entities = 0;

  void validate() const;
};

// Token id layout shared by generator and tooling.
struct SynthVocabulary {
  int wh = 0;
  int relation_begin = 0, relation_end = 0;
  int filler_begin = 0, filler_end = 0;
  int alias_begin = 0, alias_end = 0;
  int entity_begin = 0, entity_end = 0;

  static SynthVocabulary layout(const SynthConfig& cfg);
  static std::string entity_name(int token) { return "e" + std::to_string(token); }
};

struct SyntheticCorpus {
  std::vector<QuestionInstance> instances;
  std::vector<GoldAnnotation> gold;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

SyntheticCorpus generate_synthetic(const SynthConfig& cfg, std::uint64_t seed);

}  // namespace chainrec
