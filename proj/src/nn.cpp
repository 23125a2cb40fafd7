#include "chainrec/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace chainrec {

// ---------------------------------------------------------------------------
// ParameterSet

Tensor& ParameterSet::add(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::vector<double> values(shape.numel());
  for (double& v : values) v = rng.uniform(-bound, bound);
  return add(name, Tensor::from(shape, std::move(values), true));
}

Tensor& ParameterSet::add(const std::string& name, Tensor value) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor t = Tensor::from(value.shape(), value.values(), true);
  return params_.emplace(name, std::move(t)).first->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::size_t ParameterSet::element_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

double ParameterSet::grad_norm() const {
  double sq = 0.0;
  for (const auto& [name, t] : params_)
    if (t.has_grad())
      for (double v : t.grad()) sq += v * v;
  return std::sqrt(sq);
}

double ParameterSet::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, t] : params_)
      if (t.has_grad())
        for (double& v : t.mutable_grad()) v *= scale;
  }
  return norm;
}

void ParameterSet::sgd_step(double lr) {
  for (auto& [name, t] : params_) {
    if (!t.has_grad()) continue;
    std::span<double> w = t.mutable_data();
    std::span<double> g = t.mutable_grad();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  }
}

void Adam::step(ParameterSet& params, double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (const auto& [name, entry] : params.entries()) {
    Tensor& t = params.at(name);
    if (!t.has_grad()) continue;
    std::span<double> w = t.mutable_data();
    std::span<double> g = t.mutable_grad();
    auto& m = m_[name];
    auto& v = v_[name];
    m.resize(w.size(), 0.0);
    v.resize(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Adam::save(const std::filesystem::path& path) const {
  ParameterSet out;
  out.add("step", Tensor::scalar(static_cast<double>(steps_)));
  for (const auto& [name, m] : m_) out.add("m:" + name, Tensor::vector(m));
  for (const auto& [name, v] : v_) out.add("v:" + name, Tensor::vector(v));
  out.save(path);
}

void Adam::load(const std::filesystem::path& path) {
  ParameterSet in = ParameterSet::load(path);
  m_.clear();
  v_.clear();
  for (const auto& [name, t] : in.entries()) {
    if (name == "step") {
      steps_ = static_cast<std::size_t>(t.item());
    } else if (name.rfind("m:", 0) == 0) {
      m_[name.substr(2)] = t.values();
    } else if (name.rfind("v:", 0) == 0) {
      v_[name.substr(2)] = t.values();
    } else {
      throw CheckpointError("unexpected optimizer entry " + name);
    }
  }
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (const auto& [name, t] : params_) out.params_.emplace(name, t.clone());
  return out;
}

void ParameterSet::assign(const ParameterSet& other) {
  for (auto& [name, t] : params_) {
    const Tensor& src = other.at(name);
    if (!(src.shape() == t.shape()))
      throw DimensionError("assign " + name + ": " + src.shape().str() + " vs " + t.shape().str());
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
}

bool ParameterSet::same_values(const ParameterSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (const auto& [name, t] : params_) {
    if (!other.contains(name)) return false;
    const Tensor& o = other.at(name);
    if (!(o.shape() == t.shape())) return false;
    if (std::memcmp(o.data().data(), t.data().data(), t.numel() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

namespace {

constexpr char kMagic[8] = {'C', 'R', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T)))
    throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<T>(v);
}

void put_double(std::ostream& out, double value) {
  put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(value));
}

double get_double(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

}  // namespace

void ParameterSet::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint64_t>(out, params_.size());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params_) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& s = t.shape();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.rank()));
    for (std::size_t i = 0; i < s.rank(); ++i) put_le<std::uint64_t>(out, s[i]);
    put_le<std::uint64_t>(out, offset);
    offset += t.numel() * sizeof(double);
  }
  for (const auto& [name, t] : params_)
    for (double v : t.data()) put_double(out, v);
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

ParameterSet ParameterSet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("not a checkpoint: " + path.string());
  const auto count = get_le<std::uint64_t>(in);
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (std::uint64_t e = 0; e < count; ++e) {
    Entry entry;
    const auto len = get_le<std::uint32_t>(in);
    entry.name.resize(len);
    if (!in.read(entry.name.data(), len)) throw CheckpointError("checkpoint truncated");
    const auto rank = get_le<std::uint32_t>(in);
    std::vector<std::size_t> dims;
    for (std::uint32_t i = 0; i < rank; ++i) dims.push_back(get_le<std::uint64_t>(in));
    switch (rank) {
      case 0: entry.shape = Shape{}; break;
      case 1: entry.shape = Shape{dims[0]}; break;
      case 2: entry.shape = Shape{dims[0], dims[1]}; break;
      case 3: entry.shape = Shape{dims[0], dims[1], dims[2]}; break;
      case 4: entry.shape = Shape{dims[0], dims[1], dims[2], dims[3]}; break;
      default: throw CheckpointError("unsupported rank in checkpoint");
    }
    entry.offset = get_le<std::uint64_t>(in);
    entries.push_back(std::move(entry));
  }
  const std::streampos data_start = in.tellg();
  ParameterSet out;
  for (const Entry& entry : entries) {
    in.seekg(data_start + static_cast<std::streamoff>(entry.offset));
    std::vector<double> values(entry.shape.numel());
    for (double& v : values) v = get_double(in);
    out.add(entry.name, Tensor::from(entry.shape, std::move(values)));
  }
  return out;
}

void EncoderConfig::validate() const {
  if (vocab_size < 1 || embed_dim < 1 || hidden_dim < 1 || num_layers < 1)
    throw std::invalid_argument("EncoderConfig: every count must be at least 1");
}

// ---------------------------------------------------------------------------
// Layers

Embedding::Embedding(ParameterSet& params, std::string name, std::size_t vocab_size,
                     std::size_t dim, Rng& rng)
    : name_(std::move(name)), vocab_size_(vocab_size), dim_(dim) {
  // Unit-variance rows: uniform(-sqrt(3), sqrt(3)).
  std::vector<double> values(vocab_size * dim);
  for (double& v : values) v = rng.uniform(-std::sqrt(3.0), std::sqrt(3.0));
  params.add(name_, Tensor::from(Shape{vocab_size, dim}, std::move(values), true));
}

Tensor Embedding::forward(Graph& g, const ParameterSet& params, std::span<const int> ids) const {
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_)
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(vocab_size_));
  return g.gather_rows(params.at(name_), ids);
}

Linear::Linear(ParameterSet& params, std::string prefix, std::size_t in, std::size_t out, Rng& rng)
    : prefix_(std::move(prefix)), in_(in), out_(out) {
  params.add(prefix_ + ".weight", Shape{in, out}, in, rng);
  params.add(prefix_ + ".bias", Shape{out}, in, rng);
}

Tensor Linear::forward(Graph& g, const ParameterSet& params, const Tensor& x) const {
  if (x.shape().last() != in_)
    throw DimensionError(prefix_ + ": expected trailing extent " + std::to_string(in_) + ", got " +
                         x.shape().str());
  const bool vector_input = x.shape().rank() == 1;
  Tensor x2 = vector_input ? g.reshape(x, Shape{1, in_}) : x;
  Tensor y = g.add(g.matmul(x2, params.at(prefix_ + ".weight")), params.at(prefix_ + ".bias"));
  return vector_input ? g.reshape(y, Shape{out_}) : y;
}

Tensor FeedForward::forward(Graph& g, const ParameterSet& params, const Tensor& x) const {
  return g.tanh(linear_.forward(g, params, x));
}

GruLayer::GruLayer(ParameterSet& params, std::string prefix, std::size_t in, std::size_t hidden,
                   Rng& rng)
    : prefix_(std::move(prefix)), in_(in), hidden_(hidden) {
  params.add(prefix_ + ".w_input", Shape{in, 3 * hidden}, in, rng);
  params.add(prefix_ + ".w_hidden", Shape{hidden, 3 * hidden}, hidden, rng);
  params.add(prefix_ + ".b_input", Shape{3 * hidden}, hidden, rng);
  params.add(prefix_ + ".b_hidden", Shape{3 * hidden}, hidden, rng);
}

Tensor GruLayer::forward(Graph& g, const ParameterSet& params, const Tensor& x,
                         bool reverse) const {
  if (x.shape().rank() != 2 || x.shape()[1] != in_)
    throw DimensionError(prefix_ + ": expected [T x " + std::to_string(in_) + "], got " +
                         x.shape().str());
  const std::size_t T = x.shape()[0];
  if (T == 0) throw DimensionError(prefix_ + ": empty sequence");
  Tensor gates_x =
      g.add(g.matmul(x, params.at(prefix_ + ".w_input")), params.at(prefix_ + ".b_input"));
  return g.gru_sequence(gates_x, params.at(prefix_ + ".w_hidden"), params.at(prefix_ + ".b_hidden"),
                        reverse);
}

GruEncoder::GruEncoder(ParameterSet& params, const std::string& prefix, std::size_t in,
                       const EncoderConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  std::size_t layer_in = in;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string base = prefix + ".l" + std::to_string(l);
    forward_.emplace_back(params, base + ".fwd", layer_in, cfg.hidden_dim, rng);
    if (cfg.bidirectional) backward_.emplace_back(params, base + ".bwd", layer_in, cfg.hidden_dim, rng);
    layer_in = cfg.output_dim();
  }
}

Tensor GruEncoder::forward(Graph& g, const ParameterSet& params, const Tensor& x) const {
  Tensor h = x;
  for (std::size_t l = 0; l < forward_.size(); ++l) {
    Tensor f = forward_[l].forward(g, params, h, false);
    h = cfg_.bidirectional ? g.concat({f, backward_[l].forward(g, params, h, true)}) : f;
  }
  return h;
}

Tensor cross_entropy(Graph& g, const Tensor& probs, const std::vector<bool>& targets) {
  if (probs.shape().rank() != 1 || probs.numel() != targets.size() || targets.empty())
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for probabilities " + probs.shape().str());
  for (double p : probs.data())
    if (!(p >= -1e-9 && p <= 1.0 + 1e-9))
      throw DegenerateDistributionError("cross_entropy: probability " + std::to_string(p) +
                                        " outside [0, 1]");
  constexpr double kEps = 1e-12;
  Tensor p = g.clamp(probs, kEps, 1.0 - kEps);
  Tensor log_p = g.log(p);
  Tensor log_not_p = g.log(g.affine(p, -1.0, 1.0));
  std::vector<double> y(targets.size()), not_y(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    y[i] = targets[i] ? 1.0 : 0.0;
    not_y[i] = 1.0 - y[i];
  }
  Tensor terms = g.add(g.mul(log_p, Tensor::vector(y)), g.mul(log_not_p, Tensor::vector(not_y)));
  return g.affine(g.mean(terms), -1.0, 0.0);
}

}  // namespace chainrec
