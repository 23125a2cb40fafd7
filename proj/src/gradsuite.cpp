#include "chainrec/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "chainrec/nn.hpp"
#include "chainrec/ranker.hpp"
#include "chainrec/reasoner.hpp"
#include "chainrec/rng.hpp"
#include "chainrec/training.hpp"

namespace chainrec {

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true) {
  std::vector<double> v(shape.numel());
  for (double& x : v) x = rng.uniform(-1.5, 1.5);
  return Tensor::from(shape, std::move(v), requires_grad);
}

// Distinct upstream weight per output coordinate.
Tensor weighted_sum(Graph& g, const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  return g.sum(g.mul(y, Tensor::from(y.shape(), std::move(w))));
}

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

std::vector<Tensor> all_params(const ParameterSet& p) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : p.entries()) out.push_back(t);
  return out;
}

// Random pool over a small vocabulary; passage i mentions entity "E<i>" and
// "E<i+1>", so neighbours share an entity.
QuestionInstance random_instance(Rng& rng, std::size_t vocab, std::size_t pool) {
  QuestionInstance q;
  q.id = "q";
  q.answer_entity = "E" + std::to_string(pool);
  q.query_entities = {"E0"};
  for (std::size_t t = 0, n = dim(rng, 1, 4); t < n; ++t) q.question.push_back(static_cast<int>(rng.index(vocab)));
  for (std::size_t i = 0; i < pool; ++i) {
    Passage p;
    p.id = "p" + std::to_string(i);
    const std::size_t len = dim(rng, 2, 5);
    for (std::size_t t = 0; t < len; ++t) p.tokens.push_back(static_cast<int>(rng.index(vocab)));
    p.mentions = {Mention{"E" + std::to_string(i), 0, 1}, Mention{"E" + std::to_string(i + 1), len - 1, len}};
    q.passages.push_back(std::move(p));
  }
  return q;
}

}  // namespace

std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed, std::size_t configs, double eps, double tol) {
  std::vector<GradSuiteEntry> out;
  auto entry = [&](const std::string& name) -> GradSuiteEntry& {
    for (GradSuiteEntry& e : out)
      if (e.name == name) return e;
    out.push_back(GradSuiteEntry{name});
    return out.back();
  };
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    GradSuiteEntry& e = entry(name);
    ++e.configs;
    e.passed += r.pass;
    e.max_error = std::max(e.max_error, r.max_error);
  };

  for (std::size_t c = 0; c < configs; ++c) {
    Rng rng = Rng::derive(seed, {1, c});
    const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4), h = dim(rng, 1, 3);
    const std::uint64_t wseed = rng.next();

    // tensor ops, each checked with respect to its first input
    Tensor mk = random_tensor(rng, Shape{m, k}, false);
    Tensor kn = random_tensor(rng, Shape{k, n}, false);
    Tensor vk = random_tensor(rng, Shape{k}, false);
    std::vector<int> ids(dim(rng, 1, 5));
    for (int& id : ids) id = static_cast<int>(rng.index(m));
    Mask mask(k + 1, true);
    mask[rng.index(k + 1)] = false;
    Tensor gx = random_tensor(rng, Shape{m, 3 * h}, false);
    Tensor gu = random_tensor(rng, Shape{h, 3 * h}, false);
    Tensor gb = random_tensor(rng, Shape{3 * h}, false);
    const bool reverse = rng.bernoulli(0.5);
    const std::size_t r_idx = rng.index(m), c0 = rng.index(k), pick = rng.index(k);
    const double alpha = rng.uniform(-3, 3), beta = rng.uniform(-1, 1);

    using Op = std::function<Tensor(Graph&, const Tensor&)>;
    const std::vector<std::tuple<const char*, Shape, Op>> ops = {
        {"matmul", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.matmul(x, kn); }},
        {"transpose", Shape{m, k}, [](Graph& g, const Tensor& x) { return g.transpose(x); }},
        {"add", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.add(g.add(x, mk), vk); }},
        {"sub", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.sub(mk, x); }},
        {"mul", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.mul(x, g.tanh(x)); }},
        {"affine", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.affine(x, alpha, beta); }},
        {"tanh", Shape{m, k}, [](Graph& g, const Tensor& x) { return g.tanh(x); }},
        {"sigmoid", Shape{m, k}, [](Graph& g, const Tensor& x) { return g.sigmoid(x); }},
        {"log", Shape{m, k}, [](Graph& g, const Tensor& x) { return g.log(g.affine(g.mul(x, x), 1.0, 0.5)); }},
        {"clamp", Shape{m, k}, [](Graph& g, const Tensor& x) { return g.clamp(x, -5.0, 5.0); }},
        {"concat", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.concat({x, mk, g.tanh(x)}); }},
        {"gather_rows", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.gather_rows(x, ids); }},
        {"row", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.row(x, r_idx); }},
        {"slice_cols", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.slice_cols(x, c0, k - c0); }},
        {"stack_rows", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.stack_rows({x, g.row(x, r_idx)}); }},
        {"repeat_rows", Shape{k}, [&](Graph& g, const Tensor& x) { return g.repeat_rows(x, m); }},
        {"reshape", Shape{m, k}, [&](Graph& g, const Tensor& x) { return g.reshape(x, Shape{m * k}); }},
        {"max_pool_over_time", Shape{m, k}, [](Graph& g, const Tensor& x) { return g.max_pool_over_time(x); }},
        {"softmax", Shape{k + 1}, [&](Graph& g, const Tensor& x) { return g.softmax(x, mask); }},
        {"log_softmax", Shape{k + 1}, [&](Graph& g, const Tensor& x) { return g.log_softmax(x, mask); }},
        {"softmax_rows", Shape{m, k}, [](Graph& g, const Tensor& x) { return g.softmax_rows(x); }},
        {"sum", Shape{m, k}, [](Graph& g, const Tensor& x) { return g.sum(g.tanh(x)); }},
        {"mean", Shape{m, k}, [](Graph& g, const Tensor& x) { return g.mean(g.tanh(x)); }},
        {"pick", Shape{k}, [&](Graph& g, const Tensor& x) { return g.pick(g.softmax(x), pick); }},
        {"normalize", Shape{k}, [](Graph& g, const Tensor& x) { return g.normalize(g.sigmoid(x)); }},
        {"gru_sequence", Shape{m, 3 * h}, [&](Graph& g, const Tensor& x) { return g.gru_sequence(x, gu, gb, reverse); }},
        {"gru_sequence_hidden", Shape{h, 3 * h}, [&](Graph& g, const Tensor& x) { return g.gru_sequence(gx, x, gb, reverse); }},
        {"gru_sequence_bias", Shape{3 * h}, [&](Graph& g, const Tensor& x) { return g.gru_sequence(gx, gu, x, reverse); }},
        {"unary", Shape{m, k},
         [](Graph& g, const Tensor& x) {
           return g.unary(x, [](double v) { return v * v * v; }, [](double v) { return 3 * v * v; });
         }},
    };
    for (const auto& [name, shape, op] : ops) {
      Tensor x = random_tensor(rng, shape);
      record(std::string("op.") + name,
             grad_check([&](Graph& g, const Tensor& in) { return weighted_sum(g, op(g, in), wseed); }, x, eps, tol));
    }

    // nn layers over their parameters
    {
      const std::size_t vocab = dim(rng, 3, 8), d = dim(rng, 1, 4), T = dim(rng, 1, 4);
      std::vector<int> tokens(T);
      for (int& t : tokens) t = static_cast<int>(rng.index(vocab));
      Rng init = Rng::derive(seed, {2, c});
      ParameterSet p;
      Embedding emb(p, "emb", vocab, d, init);
      Linear lin(p, "lin", d, h, init);
      FeedForward ffn(p, "ffn", d, h, init);
      GruLayer gru(p, "gru", d, h, init);
      EncoderConfig ecfg{vocab, d, h, dim(rng, 1, 2), rng.bernoulli(0.7)};
      GruEncoder enc(p, "enc", d, ecfg, init);
      Tensor xin = random_tensor(rng, Shape{T, d}, false);
      auto params_of = [&](const std::string& prefix) {
        std::vector<Tensor> v;
        for (const auto& [name, t] : p.entries())
          if (name.rfind(prefix, 0) == 0) v.push_back(t);
        return v;
      };
      record("nn.embedding", grad_check([&](Graph& g) { return weighted_sum(g, emb.forward(g, p, tokens), wseed); },
                                        params_of("emb"), eps, tol));
      record("nn.linear", grad_check([&](Graph& g) { return weighted_sum(g, lin.forward(g, p, xin), wseed); },
                                     params_of("lin"), eps, tol));
      record("nn.feed_forward", grad_check([&](Graph& g) { return weighted_sum(g, ffn.forward(g, p, xin), wseed); },
                                           params_of("ffn"), eps, tol));
      record("nn.gru_layer",
             grad_check([&](Graph& g) { return weighted_sum(g, gru.forward(g, p, xin, reverse), wseed); },
                        params_of("gru"), eps, tol));
      record("nn.gru_encoder", grad_check([&](Graph& g) { return weighted_sum(g, enc.forward(g, p, xin), wseed); },
                                          params_of("enc"), eps, tol));
      std::vector<bool> targets(T * h);
      for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = i % 2 == 0;
      record("nn.cross_entropy",
             grad_check(
                 [&](Graph& g) {
                   Tensor y = lin.forward(g, p, xin);
                   return cross_entropy(g, g.softmax(g.reshape(y, Shape{y.numel()})), targets);
                 },
                 params_of("lin"), eps, tol));
    }

    // Ranker match_score and the frozen-trace surrogate
    {
      RankerConfig rc;
      rc.vocab_size = dim(rng, 6, 12);
      rc.embed_dim = dim(rng, 2, 4);
      rc.hidden_dim = dim(rng, 1, 3);
      rc.num_layers = dim(rng, 1, 2);
      rc.match_dim = dim(rng, 1, 4);
      rc.conditional = rng.bernoulli(0.7);
      Rng init = Rng::derive(seed, {3, c});
      Ranker ranker(rc, init);
      Tensor q = random_tensor(rng, Shape{dim(rng, 1, 3), rc.query_dim()}, false);
      Tensor ph = random_tensor(rng, Shape{dim(rng, 1, 4), rc.query_dim()}, false);
      std::vector<Tensor> match_params;
      for (const auto& [name, t] : ranker.params().entries())
        if (name.rfind("ranker.match", 0) == 0 || name.rfind("ranker.score", 0) == 0) match_params.push_back(t);
      record("ranker.match_score",
             grad_check([&](Graph& g) { return ranker.match_score(g, q, ph).score; }, match_params, eps, tol));

      const int hops = rng.bernoulli(0.5) ? 2 : 3;
      const Direction direction = rng.bernoulli(0.5) ? Direction::TailFirst : Direction::HeadFirst;
      QuestionInstance inst = random_instance(rng, rc.vocab_size, dim(rng, 3, 5));
      std::vector<std::size_t> forced(inst.passages.size());
      std::iota(forced.begin(), forced.end(), 0);
      for (std::size_t i = forced.size(); i > 1; --i) std::swap(forced[i - 1], forced[rng.index(i)]);
      forced.resize(static_cast<std::size_t>(hops));
      std::vector<double> advantages(forced.size());
      for (double& a : advantages) a = rng.uniform(-1.5, 1.5);
      record("training.policy_surrogate",
             grad_check(
                 [&](Graph& g) {
                   EncodedPool pool = ranker.encode(g, inst);
                   auto roll = ranker.rollout(g, inst, pool, hops, direction, DecodeMode::Greedy, nullptr, &forced);
                   return surrogate_loss(g, roll.state, advantages);
                 },
                 all_params(ranker.params()), eps, tol));
    }

    // Reasoner reader_encode over its parameters and its passage input
    {
      ReasonerConfig cfg;
      cfg.vocab_size = dim(rng, 4, 8);
      cfg.embed_dim = dim(rng, 2, 4);
      cfg.hidden_dim = dim(rng, 1, 3);
      Rng init = Rng::derive(seed, {4, c});
      Reasoner reasoner(cfg, init);
      Tensor q = random_tensor(rng, Shape{dim(rng, 1, 3), cfg.embed_dim}, false);
      Tensor p = random_tensor(rng, Shape{dim(rng, 1, 4), cfg.embed_dim});
      std::vector<Tensor> params;
      for (const auto& [name, t] : reasoner.params().entries())
        if (name != "reasoner.embed" && name.rfind("reasoner.head", 0) != 0) params.push_back(t);
      record("reasoner.reader_encode",
             grad_check([&](Graph& g) { return weighted_sum(g, reasoner.reader_encode(g, q, p), wseed); }, params,
                        eps, tol));
      record("reasoner.reader_encode_input",
             grad_check([&](Graph& g, const Tensor& x) { return weighted_sum(g, reasoner.reader_encode(g, q, x), wseed); },
                        p, eps, tol));
    }
  }
  return out;
}

}  // namespace chainrec
