#include "chainrec/training.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace chainrec {

using nlohmann::json;

namespace {

// Stream tags for Rng::derive so that every consumer gets its own sequence.
constexpr std::uint64_t kRankerInit = 1;
constexpr std::uint64_t kReasonerInit = 2;
constexpr std::uint64_t kRankerEpisode = 3;
constexpr std::uint64_t kRankerShuffle = 4;
constexpr std::uint64_t kCoopEpisode = 5;
constexpr std::uint64_t kCoopShuffle = 6;

std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

Ranker deep_copy(const Ranker& r) {
  Ranker out = r;
  out.params() = r.params().clone();
  return out;
}

}  // namespace

const char* bonus_placement_name(BonusPlacement p) {
  switch (p) {
    case BonusPlacement::SecondStep: return "second_step";
    case BonusPlacement::FirstStep: return "first_step";
    case BonusPlacement::Both: return "both";
  }
  return "?";
}

BonusPlacement parse_bonus_placement(const std::string& s) {
  if (s == "second_step") return BonusPlacement::SecondStep;
  if (s == "first_step") return BonusPlacement::FirstStep;
  if (s == "both") return BonusPlacement::Both;
  throw ConfigError("bonus_placement must be second_step, first_step or both, got " + s);
}

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("optimizer must be sgd or adam, got " + s);
}

void Optimizer::step(ParameterSet& params) {
  if (kind_ == OptimizerKind::Adam)
    adam_.step(params, lr_);
  else
    params.sgd_step(lr_);
}

void Optimizer::save(const std::filesystem::path& path) const { adam_.save(path); }
void Optimizer::load(const std::filesystem::path& path) { adam_.load(path); }

void TrainConfig::validate() const {
  if (hops != 2 && hops != 3) throw ConfigError("hops must be 2 or 3");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (!(reasoner_learning_rate > 0)) throw ConfigError("reasoner_learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(baseline_decay >= 0 && baseline_decay < 1)) throw ConfigError("baseline_decay must lie in [0, 1)");
  if (!(bonus >= 0)) throw ConfigError("bonus must be non-negative");
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (reasoner_epochs_per_cycle + ranker_epochs_per_cycle == 0)
    throw ConfigError("alternation schedule needs at least one epoch per cycle");
  if (embed_dim == 0 || hidden_dim == 0 || num_layers == 0 || match_dim == 0 || reasoner_embed_dim == 0)
    throw ConfigError("model sizes must be at least 1");
}

RankerConfig TrainConfig::ranker_config(std::size_t vocab, bool conditional) const {
  RankerConfig r;
  r.vocab_size = vocab;
  r.embed_dim = embed_dim;
  r.hidden_dim = hidden_dim;
  r.num_layers = num_layers;
  r.match_dim = match_dim;
  r.conditional = conditional;
  return r;
}

ReasonerConfig TrainConfig::reasoner_config(std::size_t vocab) const {
  ReasonerConfig r;
  r.vocab_size = vocab;
  r.embed_dim = reasoner_embed_dim;
  return r;
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"hops", c.hops},
           {"direction", direction_name(c.direction)},
           {"optimizer", optimizer_name(c.optimizer)},
           {"learning_rate", c.learning_rate},
           {"episodes", c.episodes},
           {"batch_size", c.batch_size},
           {"use_baseline", c.use_baseline},
           {"baseline_decay", c.baseline_decay},
           {"clip_norm", c.clip_norm},
           {"seed", c.seed},
           {"vocab_size", c.vocab_size},
           {"embed_dim", c.embed_dim},
           {"hidden_dim", c.hidden_dim},
           {"num_layers", c.num_layers},
           {"match_dim", c.match_dim},
           {"reasoner_embed_dim", c.reasoner_embed_dim},
           {"bonus", c.bonus},
           {"bonus_placement", bonus_placement_name(c.bonus_placement)},
           {"cooperative_epochs", c.cooperative_epochs},
           {"reasoner_epochs_per_cycle", c.reasoner_epochs_per_cycle},
           {"ranker_epochs_per_cycle", c.ranker_epochs_per_cycle},
           {"reasoner_learning_rate", c.reasoner_learning_rate}};
}

void from_json(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  json defaults = c;
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) throw ConfigError("unknown train config key: " + key);
  try {
    if (j.contains("hops")) c.hops = j.at("hops").get<int>();
    if (j.contains("direction")) c.direction = parse_direction(j.at("direction").get<std::string>());
    if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("episodes")) c.episodes = j.at("episodes").get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("use_baseline")) c.use_baseline = j.at("use_baseline").get<bool>();
    if (j.contains("baseline_decay")) c.baseline_decay = j.at("baseline_decay").get<double>();
    if (j.contains("clip_norm")) c.clip_norm = j.at("clip_norm").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("vocab_size")) c.vocab_size = j.at("vocab_size").get<std::size_t>();
    if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<std::size_t>();
    if (j.contains("hidden_dim")) c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    if (j.contains("num_layers")) c.num_layers = j.at("num_layers").get<std::size_t>();
    if (j.contains("match_dim")) c.match_dim = j.at("match_dim").get<std::size_t>();
    if (j.contains("reasoner_embed_dim")) c.reasoner_embed_dim = j.at("reasoner_embed_dim").get<std::size_t>();
    if (j.contains("bonus")) c.bonus = j.at("bonus").get<double>();
    if (j.contains("bonus_placement"))
      c.bonus_placement = parse_bonus_placement(j.at("bonus_placement").get<std::string>());
    if (j.contains("cooperative_epochs")) c.cooperative_epochs = j.at("cooperative_epochs").get<std::size_t>();
    if (j.contains("reasoner_epochs_per_cycle"))
      c.reasoner_epochs_per_cycle = j.at("reasoner_epochs_per_cycle").get<std::size_t>();
    if (j.contains("ranker_epochs_per_cycle"))
      c.ranker_epochs_per_cycle = j.at("ranker_epochs_per_cycle").get<std::size_t>();
    if (j.contains("reasoner_learning_rate"))
      c.reasoner_learning_rate = j.at("reasoner_learning_rate").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  TrainConfig cfg;
  from_json(j, cfg);
  return cfg;
}

std::array<double, 2> reward_2hop(const std::string& head, const std::string& tail,
                                  const HeadTailSets& sets) {
  return {sets.heads.count(head) ? 1.0 : 0.0, sets.tails.count(tail) ? 1.0 : 0.0};
}

std::array<double, 3> reward_3hop(const std::string& head, const std::string& middle,
                                  const std::string& tail, const std::vector<CandidateChain>& chains,
                                  const HeadTailSets& sets) {
  const std::vector<std::string> triple = {head, middle, tail};
  const bool on_path = std::any_of(chains.begin(), chains.end(),
                                   [&](const CandidateChain& c) { return c.passage_ids == triple; });
  return {sets.heads.count(head) ? 1.0 : 0.0, on_path ? 1.0 : 0.0, sets.tails.count(tail) ? 1.0 : 0.0};
}

double reward_cooperative(bool eligible, bool entity_connects, double bonus) {
  if (!eligible) return 0.0;
  return entity_connects ? 1.0 + bonus : 1.0;
}

double reward_cooperative(const Passage& selected, const std::optional<std::string>& predicted,
                          const std::set<std::string>& eligible, double bonus) {
  return reward_cooperative(eligible.count(selected.id) > 0,
                            predicted.has_value() && selected.mentions_entity(*predicted), bonus);
}

void Baseline::update(const std::vector<double>& mean_rewards) {
  if (mean_rewards.size() != values_.size())
    throw std::invalid_argument("baseline update: wrong number of steps");
  for (std::size_t s = 0; s < values_.size(); ++s)
    values_[s] = decay_ * values_[s] + (1.0 - decay_) * mean_rewards[s];
}

Tensor surrogate_loss(Graph& g, const RankerState& state, const std::vector<double>& advantages) {
  if (advantages.size() != state.step_logprobs.size())
    throw std::invalid_argument("surrogate_loss: one advantage per step required");
  if (advantages.empty()) throw std::invalid_argument("surrogate_loss: empty episode");
  Tensor total = g.affine(state.step_logprobs[0], -advantages[0], 0.0);
  for (std::size_t s = 1; s < advantages.size(); ++s)
    total = g.add(total, g.affine(state.step_logprobs[s], -advantages[s], 0.0));
  return total;
}

UpdateStats policy_gradient_step(std::vector<Episode>& batch, ParameterSet& params,
                                 Baseline& baseline, const TrainConfig& cfg, Optimizer* optimizer) {
  if (batch.empty()) throw std::invalid_argument("policy_gradient_step: empty batch");
  const std::size_t steps = batch.front().trace.steps.size();
  const double scale = 1.0 / static_cast<double>(batch.size());
  params.zero_grad();
  UpdateStats stats;
  std::vector<double> mean_rewards(steps, 0.0);
  for (Episode& ep : batch) {
    if (ep.trace.steps.size() != steps) throw std::invalid_argument("policy_gradient_step: ragged batch");
    std::vector<double> adv(steps);
    for (std::size_t s = 0; s < steps; ++s) {
      const double r = ep.trace.steps[s].reward;
      adv[s] = r - baseline.value(s);
      mean_rewards[s] += r * scale;
      stats.mean_reward += r * scale / static_cast<double>(steps);
    }
    Tensor loss = ep.graph->affine(surrogate_loss(*ep.graph, ep.state, adv), scale, 0.0);
    stats.loss += loss.item();
    ep.graph->backward(loss);
  }
  stats.grad_norm = params.clip_grad_norm(cfg.clip_norm);
  if (optimizer)
    optimizer->step(params);
  else
    params.sgd_step(cfg.learning_rate);
  baseline.update(mean_rewards);
  return stats;
}

namespace {

std::optional<std::string> predict_link(const Reasoner& reasoner, const QuestionInstance& inst,
                                        const Passage& p) {
  if (p.mentions.empty()) return std::nullopt;
  Graph g;
  return top1_entity(reasoner.entity_distribution(g, inst.question, p));
}

}  // namespace

Episode run_episode(const Ranker& ranker, const Reasoner* reasoner, const QuestionInstance& inst,
                    const std::vector<CandidateChain>& chains, const TrainConfig& cfg, Rng& rng) {
  Episode ep;
  ep.graph = std::make_unique<Graph>();
  EncodedPool pool = ranker.encode(*ep.graph, inst);
  auto out = ranker.rollout(*ep.graph, inst, pool, cfg.hops, cfg.direction, DecodeMode::Sample, &rng);
  ep.state = std::move(out.state);
  ep.trace = std::move(out.trace);
  auto& steps = ep.trace.steps;
  const HeadTailSets sets = head_tail_sets(chains);
  auto eligible = [&](Role role) -> const std::set<std::string>& {
    return role == Role::Tail ? sets.tails : sets.heads;
  };

  if (cfg.hops == 2) {
    auto r = reward_2hop(ep.trace.passage_for(Role::Head), ep.trace.passage_for(Role::Tail), sets);
    for (StepRecord& s : steps) s.reward = s.role == Role::Head ? r[0] : r[1];
    if (!reasoner) return ep;
    const Passage& first = inst.passages[steps[0].chosen];
    const Passage& second = inst.passages[steps[1].chosen];
    if (cfg.bonus_placement != BonusPlacement::FirstStep) {
      auto e = predict_link(*reasoner, inst, first);
      ep.trace.reasoner_entities.push_back(e.value_or(""));
      steps[1].reward = reward_cooperative(second, e, eligible(steps[1].role), cfg.bonus);
    }
    if (cfg.bonus_placement != BonusPlacement::SecondStep) {
      auto e = predict_link(*reasoner, inst, second);
      ep.trace.reasoner_entities.push_back(e.value_or(""));
      steps[0].reward = reward_cooperative(first, e, eligible(steps[0].role), cfg.bonus);
    }
    return ep;
  }

  const std::string h = ep.trace.passage_for(Role::Head), m = ep.trace.passage_for(Role::Middle),
                    t = ep.trace.passage_for(Role::Tail);
  auto r = reward_3hop(h, m, t, chains, sets);
  for (StepRecord& s : steps) s.reward = s.role == Role::Head ? r[0] : s.role == Role::Middle ? r[1] : r[2];
  if (!reasoner) return ep;
  const Passage& middle = inst.passage(m);
  for (StepRecord& s : steps) {
    if (s.role == Role::Middle) continue;
    auto e = predict_link(*reasoner, inst, inst.passages[s.chosen]);
    ep.trace.reasoner_entities.push_back(e.value_or(""));
    s.reward = reward_cooperative(s.reward > 0, e.has_value() && middle.mentions_entity(*e), cfg.bonus);
  }
  return ep;
}

void to_json(json& j, const LogEntry& e) {
  j = json{{"epoch", e.epoch}, {"phase", e.phase}, {"mean_reward", e.mean_reward}, {"loss", e.loss}};
  j["dev_accuracy"] = e.dev_accuracy ? json(*e.dev_accuracy) : json(nullptr);
}

namespace {

LogEntry log_from_json(const json& j) {
  LogEntry e;
  e.epoch = j.at("epoch").get<std::size_t>();
  e.phase = j.at("phase").get<std::string>();
  e.mean_reward = j.at("mean_reward").get<double>();
  e.loss = j.at("loss").get<double>();
  if (!j.at("dev_accuracy").is_null()) e.dev_accuracy = j.at("dev_accuracy").get<double>();
  return e;
}

}  // namespace

void write_log(const std::filesystem::path& path, const std::vector<LogEntry>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write log " + path.string());
  for (const LogEntry& e : log) out << json(e).dump() << "\n";
}

void save_training_state(const std::filesystem::path& dir, const Ranker& ranker,
                         const Optimizer& optimizer, const Baseline& baseline,
                         std::size_t episodes_done, const std::vector<LogEntry>& log,
                         const TrainConfig& cfg) {
  std::filesystem::create_directories(dir);
  ranker.params().save(dir / "ranker.ckpt");
  optimizer.save(dir / "optimizer.ckpt");
  json state{{"format", "chainrec-trainer-1"},
             {"config", cfg},
             {"rng", {{"seed", cfg.seed}, {"episodes_done", episodes_done}}},
             {"baseline", baseline.values()},
             {"log", log}};
  std::ofstream out(dir / "trainer_state.json");
  if (!out) throw CheckpointError("cannot write trainer state in " + dir.string());
  out << state.dump(2) << "\n";
}

RankerRun train_ranker(const std::vector<QuestionInstance>& corpus, const TrainConfig& cfg,
                       bool conditional, const DevEvaluator& dev, const TrainIo& io) {
  cfg.validate();
  const std::size_t vocab = cfg.vocab_size ? cfg.vocab_size : vocabulary_bound(corpus);
  Rng init = Rng::derive(cfg.seed, {kRankerInit});
  RankerRun run{Ranker(cfg.ranker_config(vocab, conditional), init), {}, 0};
  Baseline baseline(static_cast<std::size_t>(cfg.hops), cfg.baseline_decay, cfg.use_baseline);
  Optimizer optimizer(cfg.optimizer, cfg.learning_rate);

  if (!io.resume_dir.empty()) {
    std::ifstream in(io.resume_dir / "trainer_state.json");
    if (!in) throw CheckpointError("no trainer state in " + io.resume_dir.string());
    json state = json::parse(in);
    if (state.at("rng").at("seed").get<std::uint64_t>() != cfg.seed)
      throw CheckpointError("checkpoint was written with a different seed");
    run.ranker.params().assign(ParameterSet::load(io.resume_dir / "ranker.ckpt"));
    optimizer.load(io.resume_dir / "optimizer.ckpt");
    run.episodes_done = state.at("rng").at("episodes_done").get<std::size_t>();
    baseline.set_values(state.at("baseline").get<std::vector<double>>());
    for (const json& e : state.at("log")) run.log.push_back(log_from_json(e));
  }

  std::vector<std::size_t> usable;
  std::vector<std::vector<CandidateChain>> chains(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].passages.size() < static_cast<std::size_t>(cfg.hops)) continue;
    chains[i] = extract_chains(corpus[i], cfg.hops);
    usable.push_back(i);
  }
  const std::size_t n = usable.size();
  if (n == 0) return run;

  std::size_t epochs_this_call = 0;
  while (run.episodes_done < cfg.episodes) {
    const std::size_t epoch = run.episodes_done / n;
    std::size_t pos = run.episodes_done % n;
    const std::vector<std::size_t> order = shuffled(n, Rng::derive(cfg.seed, {kRankerShuffle, epoch}));
    double reward_sum = 0.0, loss_sum = 0.0;
    std::size_t episodes = 0, updates = 0;
    while (pos < n && run.episodes_done < cfg.episodes) {
      const std::size_t take = std::min({cfg.batch_size, n - pos, cfg.episodes - run.episodes_done});
      std::vector<Episode> batch;
      for (std::size_t b = 0; b < take; ++b) {
        const std::size_t idx = usable[order[pos + b]];
        Rng rng = Rng::derive(cfg.seed, {kRankerEpisode, epoch, idx});
        batch.push_back(run_episode(run.ranker, nullptr, corpus[idx], chains[idx], cfg, rng));
      }
      UpdateStats st = policy_gradient_step(batch, run.ranker.params(), baseline, cfg, &optimizer);
      reward_sum += st.mean_reward * static_cast<double>(take);
      loss_sum += st.loss;
      episodes += take;
      ++updates;
      pos += take;
      run.episodes_done += take;
    }
    LogEntry entry{epoch, "ranker", reward_sum / static_cast<double>(episodes),
                   loss_sum / static_cast<double>(updates), std::nullopt};
    if (dev) entry.dev_accuracy = dev(run.ranker, nullptr);
    run.log.push_back(entry);
    if (!io.checkpoint_dir.empty())
      save_training_state(io.checkpoint_dir, run.ranker, optimizer, baseline, run.episodes_done,
                          run.log, cfg);
    if (io.stop_after_epochs && ++epochs_this_call >= io.stop_after_epochs) break;
  }
  return run;
}

CooperativeRun train_cooperative(const std::vector<QuestionInstance>& corpus, const TrainConfig& cfg,
                                 const Ranker& warm, const DevEvaluator& dev) {
  cfg.validate();
  const std::size_t vocab = cfg.vocab_size ? cfg.vocab_size : vocabulary_bound(corpus);
  Rng init = Rng::derive(cfg.seed, {kReasonerInit});
  CooperativeRun run{deep_copy(warm), Reasoner(cfg.reasoner_config(vocab), init), {}};
  Baseline baseline(static_cast<std::size_t>(cfg.hops), cfg.baseline_decay, cfg.use_baseline);
  Optimizer ranker_opt(cfg.optimizer, cfg.learning_rate);
  Optimizer reasoner_opt(cfg.optimizer, cfg.reasoner_learning_rate);

  std::vector<std::size_t> usable;
  std::vector<std::vector<CandidateChain>> chains(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].passages.size() < static_cast<std::size_t>(cfg.hops)) continue;
    chains[i] = extract_chains(corpus[i], cfg.hops);
    usable.push_back(i);
  }
  const std::size_t n = usable.size();
  const std::size_t cycle = cfg.reasoner_epochs_per_cycle + cfg.ranker_epochs_per_cycle;

  for (std::size_t epoch = 0; epoch < cfg.cooperative_epochs; ++epoch) {
    const bool reasoner_phase = epoch % cycle < cfg.reasoner_epochs_per_cycle;
    const std::vector<std::size_t> order = shuffled(n, Rng::derive(cfg.seed, {kCoopShuffle, epoch}));
    LogEntry entry{epoch, reasoner_phase ? "reasoner" : "ranker", 0.0, 0.0, std::nullopt};
    double reward_sum = 0.0, loss_sum = 0.0;
    std::size_t episodes = 0, updates = 0;

    if (reasoner_phase) {
      // Examples: (read passage, positives) from rewarded Ranker selections.
      struct Example {
        std::size_t inst;
        std::size_t passage;
        std::set<std::string> positives;
      };
      std::vector<Example> pending;
      auto flush = [&] {
        if (pending.empty()) return;
        ParameterSet& params = run.reasoner.params();
        params.zero_grad();
        Graph g;
        const double scale = 1.0 / static_cast<double>(pending.size());
        Tensor total;
        for (const Example& ex : pending) {
          const QuestionInstance& q = corpus[ex.inst];
          Tensor l = reasoner_loss(
              g, run.reasoner.entity_distribution(g, q.question, q.passages[ex.passage]), ex.positives);
          Tensor scaled = g.affine(l, scale, 0.0);
          total = total.defined() ? g.add(total, scaled) : scaled;
        }
        loss_sum += total.item();
        ++updates;
        g.backward(total);
        params.clip_grad_norm(cfg.clip_norm);
        reasoner_opt.step(params);
        pending.clear();
      };
      auto add_example = [&](std::size_t idx, std::size_t read, std::size_t adjacent) {
        const QuestionInstance& q = corpus[idx];
        const Passage& p = q.passages[read];
        if (p.mentions.empty()) return;
        std::set<std::string> pos;
        for (const std::string& e : p.entities())
          if (q.passages[adjacent].mentions_entity(e)) pos.insert(e);
        pending.push_back({idx, read, std::move(pos)});
        if (pending.size() >= cfg.batch_size) flush();
      };
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = usable[order[k]];
        Rng rng = Rng::derive(cfg.seed, {kCoopEpisode, epoch, idx});
        Episode ep = run_episode(run.ranker, nullptr, corpus[idx], chains[idx], cfg, rng);
        const auto& st = ep.trace.steps;
        double r = 0.0;
        for (const StepRecord& s : st) r += s.reward / static_cast<double>(st.size());
        reward_sum += r;
        ++episodes;
        if (cfg.hops == 2) {
          if (st[0].reward <= 0 || st[1].reward <= 0) continue;
          if (cfg.bonus_placement != BonusPlacement::FirstStep) add_example(idx, st[0].chosen, st[1].chosen);
          if (cfg.bonus_placement != BonusPlacement::SecondStep) add_example(idx, st[1].chosen, st[0].chosen);
        } else {
          const StepRecord* mid = nullptr;
          for (const StepRecord& s : st)
            if (s.role == Role::Middle) mid = &s;
          if (mid->reward <= 0) continue;
          for (const StepRecord& s : st)
            if (s.role != Role::Middle) add_example(idx, s.chosen, mid->chosen);
        }
      }
      flush();
    } else {
      for (std::size_t pos = 0; pos < n; pos += cfg.batch_size) {
        const std::size_t take = std::min(cfg.batch_size, n - pos);
        std::vector<Episode> batch;
        for (std::size_t b = 0; b < take; ++b) {
          const std::size_t idx = usable[order[pos + b]];
          Rng rng = Rng::derive(cfg.seed, {kCoopEpisode, epoch, idx});
          batch.push_back(run_episode(run.ranker, &run.reasoner, corpus[idx], chains[idx], cfg, rng));
        }
        UpdateStats st = policy_gradient_step(batch, run.ranker.params(), baseline, cfg, &ranker_opt);
        reward_sum += st.mean_reward * static_cast<double>(take);
        loss_sum += st.loss;
        episodes += take;
        ++updates;
      }
    }
    entry.mean_reward = episodes ? reward_sum / static_cast<double>(episodes) : 0.0;
    entry.loss = updates ? loss_sum / static_cast<double>(updates) : 0.0;
    if (dev) entry.dev_accuracy = dev(run.ranker, &run.reasoner);
    run.log.push_back(entry);
  }
  return run;
}

}  // namespace chainrec
