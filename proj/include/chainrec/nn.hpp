#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainrec/rng.hpp"
#include "chainrec/tensor.hpp"

namespace chainrec {

class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Named trainable tensors, ordered by name.
class ParameterSet {
 public:
  // Registers a parameter drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor& add(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);
  // Registers a parameter with explicit values.
  Tensor& add(const std::string& name, Tensor value);

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;
  const std::map<std::string, Tensor>& entries() const { return params_; }

  void zero_grad();
  double grad_norm() const;
  // Rescales gradients so their global L2 norm is at most max_norm. Returns
  // the norm before clipping.
  double clip_grad_norm(double max_norm);
  void sgd_step(double lr);

  // Independent copy of every tensor.
  ParameterSet clone() const;
  // Overwrites values of matching names; shapes must agree.
  void assign(const ParameterSet& other);
  bool same_values(const ParameterSet& other) const;

  // Checkpoint layout (all integers little-endian):
  //   magic "CRCKPT01" (8 bytes)
  //   u64 entry count
  //   per entry: u32 name length, name bytes, u32 rank, u64 extents[rank],
  //              u64 byte offset of the entry's data within the data block
  //   data block: float64 little-endian arrays, entries in name order
  void save(const std::filesystem::path& path) const;
  static ParameterSet load(const std::filesystem::path& path);

 private:
  std::map<std::string, Tensor> params_;
};

// Adam with bias correction. Moments are kept per parameter name and can be
// checkpointed in the ParameterSet format (entries "m:<name>", "v:<name>",
// plus a scalar "step").
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterSet& params, double lr);
  std::size_t steps() const { return steps_; }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  double beta1_, beta2_, eps_;
  std::size_t steps_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 8;
  std::size_t num_layers = 2;
  bool bidirectional = true;

  std::size_t output_dim() const { return bidirectional ? 2 * hidden_dim : hidden_dim; }
  void validate() const;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParameterSet& params, std::string name, std::size_t vocab_size, std::size_t dim,
            Rng& rng);

  // [T x dim]; an empty id list gives a 0 x dim tensor.
  Tensor forward(Graph& g, const ParameterSet& params, std::span<const int> ids) const;
  std::size_t dim() const { return dim_; }

 private:
  std::string name_;
  std::size_t vocab_size_ = 0;
  std::size_t dim_ = 0;
};

// x W + b
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, std::string prefix, std::size_t in, std::size_t out, Rng& rng);

  // Accepts [d_in], [1 x d_in] or [T x d_in]; vectors come back as [d_out].
  Tensor forward(Graph& g, const ParameterSet& params, const Tensor& x) const;
  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }

 private:
  std::string prefix_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

// tanh(x W + b). The activation choice lives here only.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterSet& params, std::string prefix, std::size_t in, std::size_t out, Rng& rng)
      : linear_(params, std::move(prefix), in, out, rng) {}

  Tensor forward(Graph& g, const ParameterSet& params, const Tensor& x) const;
  std::size_t in_dim() const { return linear_.in_dim(); }
  std::size_t out_dim() const { return linear_.out_dim(); }

 private:
  Linear linear_;
};

// Single-direction GRU layer.
//
//   gx = x W + bx,  gh = h U + bh      (both [3h], blocks ordered z | r | n)
//   z  = sigmoid(gx_z + gh_z)          update gate
//   r  = sigmoid(gx_r + gh_r)          reset gate
//   n  = tanh(gx_n + r * gh_n)         candidate
//   h' = (1 - z) * n + z * h
//
// The initial state is zero.
class GruLayer {
 public:
  GruLayer() = default;
  GruLayer(ParameterSet& params, std::string prefix, std::size_t in, std::size_t hidden, Rng& rng);

  // x: [T x in] -> [T x hidden]. reverse runs from t = T-1 down to 0 and
  // writes outputs at their original time index.
  Tensor forward(Graph& g, const ParameterSet& params, const Tensor& x, bool reverse) const;
  std::size_t hidden_dim() const { return hidden_; }
  const std::string& prefix() const { return prefix_; }

 private:
  std::string prefix_;
  std::size_t in_ = 0;
  std::size_t hidden_ = 0;
};

// Stacked (optionally bidirectional) GRU. Layer l > 0 consumes layer l-1's
// concatenated output.
class GruEncoder {
 public:
  GruEncoder() = default;
  GruEncoder(ParameterSet& params, const std::string& prefix, std::size_t in,
             const EncoderConfig& cfg, Rng& rng);

  // [T x in] -> [T x output_dim]; T must be at least 1.
  Tensor forward(Graph& g, const ParameterSet& params, const Tensor& x) const;
  std::size_t output_dim() const { return cfg_.output_dim(); }
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  std::vector<GruLayer> forward_;
  std::vector<GruLayer> backward_;
};

// Per-entity binary cross-entropy averaged over entries:
//   -mean_e [ y_e log p_e + (1 - y_e) log(1 - p_e) ]
// with p clamped to [1e-12, 1 - 1e-12].
Tensor cross_entropy(Graph& g, const Tensor& probs, const std::vector<bool>& targets);

}  // namespace chainrec
