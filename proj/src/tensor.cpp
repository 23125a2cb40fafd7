#include "chainrec/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace chainrec {

namespace {

std::atomic<std::uint64_t> next_graph_id{1};

[[noreturn]] void dim_error(const std::string& op, const Shape& a, const Shape& b) {
  throw DimensionError(op + ": incompatible shapes " + a.str() + " and " + b.str());
}

[[noreturn]] void dim_error(const std::string& op, const Shape& a) {
  throw DimensionError(op + ": unsupported shape " + a.str());
}

std::vector<double>& grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shape

Shape::Shape(std::initializer_list<std::size_t> dims) {
  if (dims.size() > kMaxRank) throw DimensionError("Shape: rank above " + std::to_string(kMaxRank));
  for (std::size_t d : dims) dims_[rank_++] = d;
}

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
  return n;
}

std::string Shape::str() const {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < rank_; ++i) {
    if (i) out << 'x';
    out << dims_[i];
  }
  out << ']';
  return out.str();
}

bool Shape::operator==(const Shape& other) const {
  if (rank_ != other.rank_) return false;
  for (std::size_t i = 0; i < rank_; ++i)
    if (dims_[i] != other.dims_[i]) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from(shape, std::vector<double>(shape.numel(), 0.0), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape.numel())
    throw DimensionError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                         shape.str());
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from(Shape{}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape s{values.size()};
  return from(s, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return from(Shape{rows, cols}, std::move(values), requires_grad);
}

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  return s.rank() == 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const { return shape().last(); }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor " + shape().str() + " is not a scalar");
  return impl_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() { return grad_buffer(*impl_); }

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const {
  return from(shape(), impl_->data, impl_->requires_grad);
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Affine: return "affine";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Log: return "log";
    case OpKind::Clamp: return "clamp";
    case OpKind::Concat: return "concat";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Row: return "row";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::StackRows: return "stack_rows";
    case OpKind::RepeatRows: return "repeat_rows";
    case OpKind::Reshape: return "reshape";
    case OpKind::MaxPoolTime: return "max_pool_over_time";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Pick: return "pick";
    case OpKind::Normalize: return "normalize";
    case OpKind::GruSequence: return "gru_sequence";
    case OpKind::Unary: return "unary";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph plumbing

Graph::Graph() : id_(next_graph_id.fetch_add(1)) {}

std::size_t Graph::node_of(const Tensor& t) {
  if (!t.defined()) throw GraphError("undefined tensor used as op input");
  const TensorImpl* impl = t.identity();
  if (impl->graph_id == id_) return impl->node_id;
  if (impl->graph_id != 0) throw GraphError("tensor belongs to a different graph");
  auto it = leaf_nodes_.find(impl);
  if (it != leaf_nodes_.end()) return it->second;
  Node leaf;
  leaf.kind = OpKind::Leaf;
  leaf.output = t;
  std::size_t id = nodes_.size();
  nodes_.push_back(std::move(leaf));
  leaf_nodes_.emplace(impl, id);
  return id;
}

Tensor Graph::emit(OpKind kind, std::vector<std::size_t> inputs, Shape shape,
                   std::vector<double> data) {
  return emit(kind, std::move(inputs), shape, std::move(data), Node{});
}

Tensor Graph::emit(OpKind kind, std::vector<std::size_t> inputs, Shape shape,
                   std::vector<double> data, Node extra) {
  if (backward_done_) throw GraphError("graph already consumed by backward");
  bool rg = false;
  for (std::size_t i : inputs) rg = rg || nodes_[i].output.requires_grad();
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(data);
  impl->requires_grad = rg;
  impl->graph_id = id_;
  impl->node_id = nodes_.size();
  extra.kind = kind;
  extra.inputs = std::move(inputs);
  extra.output = Tensor(std::move(impl));
  nodes_.push_back(std::move(extra));
  return nodes_.back().output;
}

// ---------------------------------------------------------------------------
// Forward ops

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank() != 2 || sb.rank() != 2 || sa[1] != sb[0]) dim_error("matmul", sa, sb);
  std::size_t ia = node_of(a), ib = node_of(b);
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return emit(OpKind::MatMul, {ia, ib}, Shape{m, n}, std::move(out));
}

Tensor Graph::transpose(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.rank() != 2) dim_error("transpose", s);
  std::size_t ia = node_of(a);
  const std::size_t m = s[0], n = s[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i * n + j);
  return emit(OpKind::Transpose, {ia}, Shape{n, m}, std::move(out));
}

namespace {

// 0: same shape, 1: b broadcast over rows of a
int broadcast_mode(const std::string& op, const Shape& a, const Shape& b) {
  if (a == b) return 0;
  if (b.rank() == 1 && a.rank() >= 1 && b[0] == a.last()) return 1;
  dim_error(op, a, b);
}

}  // namespace

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  int mode = broadcast_mode("add", a.shape(), b.shape());
  std::size_t ia = node_of(a), ib = node_of(b);
  std::vector<double> out(a.values());
  const std::size_t d = b.numel();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.at(mode == 0 ? i : i % d);
  Node extra;
  extra.p0 = mode;
  return emit(OpKind::Add, {ia, ib}, a.shape(), std::move(out), std::move(extra));
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) dim_error("sub", a.shape(), b.shape());
  std::size_t ia = node_of(a), ib = node_of(b);
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.at(i);
  return emit(OpKind::Sub, {ia, ib}, a.shape(), std::move(out));
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) dim_error("mul", a.shape(), b.shape());
  std::size_t ia = node_of(a), ib = node_of(b);
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.at(i);
  return emit(OpKind::Mul, {ia, ib}, a.shape(), std::move(out));
}

Tensor Graph::affine(const Tensor& a, double alpha, double beta) {
  std::size_t ia = node_of(a);
  std::vector<double> out(a.values());
  for (double& v : out) v = alpha * v + beta;
  Node extra;
  extra.p0 = alpha;
  extra.p1 = beta;
  return emit(OpKind::Affine, {ia}, a.shape(), std::move(out), std::move(extra));
}

Tensor Graph::tanh(const Tensor& a) {
  std::size_t ia = node_of(a);
  std::vector<double> out(a.values());
  for (double& v : out) v = std::tanh(v);
  return emit(OpKind::Tanh, {ia}, a.shape(), std::move(out));
}

Tensor Graph::sigmoid(const Tensor& a) {
  std::size_t ia = node_of(a);
  std::vector<double> out(a.values());
  for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
  return emit(OpKind::Sigmoid, {ia}, a.shape(), std::move(out));
}

Tensor Graph::log(const Tensor& a) {
  std::size_t ia = node_of(a);
  std::vector<double> out(a.values());
  for (double& v : out) v = std::log(v);
  return emit(OpKind::Log, {ia}, a.shape(), std::move(out));
}

Tensor Graph::clamp(const Tensor& a, double lo, double hi) {
  std::size_t ia = node_of(a);
  std::vector<double> out(a.values());
  for (double& v : out) v = std::clamp(v, lo, hi);
  Node extra;
  extra.p0 = lo;
  extra.p1 = hi;
  return emit(OpKind::Clamp, {ia}, a.shape(), std::move(out), std::move(extra));
}

Tensor Graph::concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.rank() != 1 && s0.rank() != 2) dim_error("concat", s0);
  const std::size_t rows = s0.rank() == 2 ? s0[0] : 1;
  std::size_t total = 0;
  std::vector<std::size_t> ids, widths;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.rank() != s0.rank() || (s.rank() == 2 && s[0] != rows)) dim_error("concat", s0, s);
    ids.push_back(node_of(p));
    widths.push_back(s.last());
    total += s.last();
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = widths[k];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].data().data() + r * w, w, out.data() + r * total + offset);
    offset += w;
  }
  Shape shape = s0.rank() == 2 ? Shape{rows, total} : Shape{total};
  Node extra;
  extra.index = std::move(widths);
  return emit(OpKind::Concat, std::move(ids), shape, std::move(out), std::move(extra));
}

Tensor Graph::gather_rows(const Tensor& table, std::span<const int> ids) {
  const Shape& s = table.shape();
  if (s.rank() != 2) dim_error("gather_rows", s);
  const std::size_t d = s[1];
  std::vector<double> out(ids.size() * d);
  Node extra;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= s[0])
      throw DimensionError("gather_rows: id " + std::to_string(ids[t]) + " outside table " +
                           s.str());
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
    extra.index.push_back(static_cast<std::size_t>(ids[t]));
  }
  std::size_t it = node_of(table);
  return emit(OpKind::GatherRows, {it}, Shape{ids.size(), d}, std::move(out), std::move(extra));
}

Tensor Graph::row(const Tensor& a, std::size_t i) {
  const Shape& s = a.shape();
  if (s.rank() != 2 || i >= s[0]) dim_error("row " + std::to_string(i), s);
  std::size_t ia = node_of(a);
  const std::size_t d = s[1];
  std::vector<double> out(a.data().begin() + i * d, a.data().begin() + (i + 1) * d);
  Node extra;
  extra.index = {i};
  return emit(OpKind::Row, {ia}, Shape{1, d}, std::move(out), std::move(extra));
}

Tensor Graph::slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  const Shape& s = a.shape();
  if (s.rank() != 2 || start + len > s[1]) dim_error("slice_cols", s);
  std::size_t ia = node_of(a);
  const std::size_t m = s[0], n = s[1];
  std::vector<double> out(m * len);
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(a.data().data() + r * n + start, len, out.data() + r * len);
  Node extra;
  extra.index = {start, len};
  return emit(OpKind::SliceCols, {ia}, Shape{m, len}, std::move(out), std::move(extra));
}

Tensor Graph::stack_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("stack_rows: no inputs");
  const std::size_t d = parts[0].shape().last();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  std::vector<double> out;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.rank() != 2 || s[1] != d) dim_error("stack_rows", parts[0].shape(), s);
    ids.push_back(node_of(p));
    rows += s[0];
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return emit(OpKind::StackRows, std::move(ids), Shape{rows, d}, std::move(out));
}

Tensor Graph::repeat_rows(const Tensor& v, std::size_t n) {
  const Shape& s = v.shape();
  if (!(s.rank() == 1 || (s.rank() == 2 && s[0] == 1))) dim_error("repeat_rows", s);
  std::size_t iv = node_of(v);
  const std::size_t d = s.last();
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(v.data().data(), d, out.data() + r * d);
  return emit(OpKind::RepeatRows, {iv}, Shape{n, d}, std::move(out));
}

Tensor Graph::reshape(const Tensor& a, Shape shape) {
  if (shape.numel() != a.numel()) dim_error("reshape", a.shape(), shape);
  std::size_t ia = node_of(a);
  return emit(OpKind::Reshape, {ia}, shape, a.values());
}

Tensor Graph::max_pool_over_time(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.rank() != 2 || s[0] == 0) dim_error("max_pool_over_time", s);
  std::size_t ix = node_of(x);
  const std::size_t T = s[0], d = s[1];
  std::vector<double> out(d);
  Node extra;
  extra.index.assign(d, 0);
  for (std::size_t j = 0; j < d; ++j) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < T; ++t)
      if (x.at(t * d + j) > x.at(best * d + j)) best = t;
    extra.index[j] = best;
    out[j] = x.at(best * d + j);
  }
  return emit(OpKind::MaxPoolTime, {ix}, Shape{d}, std::move(out), std::move(extra));
}

namespace {

Mask resolve_mask(const std::string& op, const Tensor& x, const Mask& mask) {
  if (x.shape().rank() != 1) dim_error(op, x.shape());
  if (mask.empty()) return Mask(x.numel(), true);
  if (mask.size() != x.numel())
    throw DimensionError(op + ": mask of length " + std::to_string(mask.size()) +
                         " for tensor " + x.shape().str());
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
    throw DegenerateDistributionError(op + ": every position is masked");
  return mask;
}

}  // namespace

Tensor Graph::softmax(const Tensor& x, const Mask& mask) {
  Mask m = resolve_mask("softmax", x, mask);
  std::size_t ix = node_of(x);
  const std::size_t n = x.numel();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (m[i]) hi = std::max(hi, x.at(i));
  std::vector<double> out(n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (m[i]) z += (out[i] = std::exp(x.at(i) - hi));
  for (std::size_t i = 0; i < n; ++i) out[i] /= z;
  Node extra;
  extra.mask = std::move(m);
  return emit(OpKind::Softmax, {ix}, x.shape(), std::move(out), std::move(extra));
}

Tensor Graph::log_softmax(const Tensor& x, const Mask& mask) {
  Mask m = resolve_mask("log_softmax", x, mask);
  std::size_t ix = node_of(x);
  const std::size_t n = x.numel();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (m[i]) hi = std::max(hi, x.at(i));
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (m[i]) z += std::exp(x.at(i) - hi);
  const double lse = hi + std::log(z);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    if (m[i]) out[i] = x.at(i) - lse;
  Node extra;
  extra.mask = std::move(m);
  return emit(OpKind::LogSoftmax, {ix}, x.shape(), std::move(out), std::move(extra));
}

Tensor Graph::softmax_rows(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.rank() != 2 || s[1] == 0) dim_error("softmax_rows", s);
  std::size_t ix = node_of(x);
  const std::size_t m = s[0], n = s[1];
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double hi = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - hi));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return emit(OpKind::SoftmaxRows, {ix}, s, std::move(out));
}

Tensor Graph::sum(const Tensor& a) {
  std::size_t ia = node_of(a);
  double total = 0.0;
  for (double v : a.data()) total += v;
  return emit(OpKind::Sum, {ia}, Shape{}, {total});
}

Tensor Graph::mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean: empty tensor");
  std::size_t ia = node_of(a);
  double total = 0.0;
  for (double v : a.data()) total += v;
  return emit(OpKind::Mean, {ia}, Shape{}, {total / static_cast<double>(a.numel())});
}

Tensor Graph::pick(const Tensor& a, std::size_t i) {
  if (i >= a.numel()) dim_error("pick " + std::to_string(i), a.shape());
  std::size_t ia = node_of(a);
  Node extra;
  extra.index = {i};
  return emit(OpKind::Pick, {ia}, Shape{}, {a.at(i)}, std::move(extra));
}

Tensor Graph::normalize(const Tensor& a) {
  if (a.shape().rank() != 1) dim_error("normalize", a.shape());
  double total = 0.0;
  for (double v : a.data()) total += v;
  if (!(total > 0.0)) throw DegenerateDistributionError("normalize: non-positive total");
  std::size_t ia = node_of(a);
  std::vector<double> out(a.values());
  for (double& v : out) v /= total;
  Node extra;
  extra.p0 = total;
  return emit(OpKind::Normalize, {ia}, a.shape(), std::move(out), std::move(extra));
}

Tensor Graph::unary(const Tensor& a, std::function<double(double)> f,
                    std::function<double(double)> df) {
  std::size_t ia = node_of(a);
  std::vector<double> out(a.values());
  for (double& v : out) v = f(v);
  Node extra;
  extra.df = std::move(df);
  return emit(OpKind::Unary, {ia}, a.shape(), std::move(out), std::move(extra));
}

Tensor Graph::gru_sequence(const Tensor& gates_x, const Tensor& w_hidden, const Tensor& b_hidden,
                           bool reverse) {
  const Shape& sx = gates_x.shape();
  const Shape& su = w_hidden.shape();
  if (su.rank() != 2 || su[1] != 3 * su[0] || su[0] == 0) dim_error("gru_sequence", su);
  const std::size_t h = su[0];
  if (sx.rank() != 2 || sx[1] != 3 * h || sx[0] == 0) dim_error("gru_sequence", sx, su);
  if (!(b_hidden.shape() == Shape{3 * h})) dim_error("gru_sequence", b_hidden.shape(), su);
  std::size_t ix = node_of(gates_x), iu = node_of(w_hidden), ib = node_of(b_hidden);
  const std::size_t T = sx[0];
  const double* gx_all = gates_x.data().data();
  const double* U = w_hidden.data().data();
  const double* bh = b_hidden.data().data();

  std::vector<double> out(T * h);
  // per step: z, r, n, gh_n
  std::vector<double> cache(T * 4 * h);
  std::vector<double> state(h, 0.0), gh(3 * h);
  for (std::size_t s = 0; s < T; ++s) {
    const std::size_t t = reverse ? T - 1 - s : s;
    for (std::size_t j = 0; j < 3 * h; ++j) gh[j] = bh[j];
    for (std::size_t i = 0; i < h; ++i) {
      const double hv = state[i];
      if (hv == 0.0) continue;
      const double* urow = U + i * 3 * h;
      for (std::size_t j = 0; j < 3 * h; ++j) gh[j] += hv * urow[j];
    }
    const double* gx = gx_all + t * 3 * h;
    double* c = cache.data() + t * 4 * h;
    for (std::size_t j = 0; j < h; ++j) {
      const double z = 1.0 / (1.0 + std::exp(-(gx[j] + gh[j])));
      const double r = 1.0 / (1.0 + std::exp(-(gx[h + j] + gh[h + j])));
      const double n = std::tanh(gx[2 * h + j] + r * gh[2 * h + j]);
      c[j] = z;
      c[h + j] = r;
      c[2 * h + j] = n;
      c[3 * h + j] = gh[2 * h + j];
      state[j] = n + z * (state[j] - n);
    }
    std::copy(state.begin(), state.end(), out.begin() + t * h);
  }
  Node extra;
  extra.p0 = reverse ? 1.0 : 0.0;
  extra.cache = std::move(cache);
  return emit(OpKind::GruSequence, {ix, iu, ib}, Shape{T, h}, std::move(out), std::move(extra));
}

// ---------------------------------------------------------------------------
// Backward

void Graph::backward(const Tensor& loss) {
  if (backward_done_) throw GraphError("backward called twice on one graph");
  if (!loss.defined() || loss.numel() != 1)
    throw GraphError("backward: loss must be a scalar, got " +
                     (loss.defined() ? loss.shape().str() : std::string("undefined")));
  if (loss.identity()->graph_id != id_) throw GraphError("backward: loss is not from this graph");
  backward_done_ = true;
  const std::size_t root = loss.identity()->node_id;
  if (!loss.requires_grad()) return;
  grad_buffer(*nodes_[root].output.impl_)[0] += 1.0;
  for (std::size_t k = root + 1; k-- > 0;) {
    Node& node = nodes_[k];
    if (node.kind == OpKind::Leaf || !node.output.requires_grad()) continue;
    if (node.output.impl_->grad.empty()) continue;
    backprop(node);
  }
}

void Graph::backprop(Node& node) {
  const std::vector<double>& g = node.output.impl_->grad;
  const std::vector<double>& y = node.output.impl_->data;

  // Gradient sink for input k, or nullptr when that input needs none.
  auto sink = [&](std::size_t k) -> double* {
    TensorImpl& t = *nodes_[node.inputs[k]].output.impl_;
    if (!t.requires_grad) return nullptr;
    return grad_buffer(t).data();
  };

  switch (node.kind) {
    case OpKind::Leaf:
      break;
    case OpKind::MatMul: {
      const Tensor& a = in(node, 0);
      const Tensor& b = in(node, 1);
      const std::size_t m = a.shape()[0], kk = a.shape()[1], n = b.shape()[1];
      if (double* ga = sink(0)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < kk; ++p) {
            double acc = 0.0;
            const double* brow = b.data().data() + p * n;
            const double* grow = g.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * kk + p] += acc;
          }
      }
      if (double* gb = sink(1)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < kk; ++p) {
            const double av = a.at(i * kk + p);
            if (av == 0.0) continue;
            double* brow = gb + p * n;
            const double* grow = g.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
      }
      break;
    }
    case OpKind::Transpose: {
      if (double* ga = sink(0)) {
        const std::size_t m = in(node, 0).shape()[0], n = in(node, 0).shape()[1];
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
      }
      break;
    }
    case OpKind::Add: {
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (double* gb = sink(1)) {
        const std::size_t d = in(node, 1).numel();
        for (std::size_t i = 0; i < g.size(); ++i) gb[node.p0 == 0 ? i : i % d] += g[i];
      }
      break;
    }
    case OpKind::Sub: {
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (double* gb = sink(1))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      break;
    }
    case OpKind::Mul: {
      const Tensor& a = in(node, 0);
      const Tensor& b = in(node, 1);
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.at(i);
      if (double* gb = sink(1))
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.at(i);
      break;
    }
    case OpKind::Affine: {
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += node.p0 * g[i];
      break;
    }
    case OpKind::Tanh: {
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case OpKind::Sigmoid: {
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case OpKind::Log: {
      const Tensor& a = in(node, 0);
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a.at(i);
      break;
    }
    case OpKind::Clamp: {
      const Tensor& a = in(node, 0);
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i)
          if (a.at(i) > node.p0 && a.at(i) < node.p1) ga[i] += g[i];
      break;
    }
    case OpKind::Concat: {
      const std::size_t total = node.output.shape().last();
      const std::size_t rows = node.output.numel() / std::max<std::size_t>(total, 1);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t w = node.index[k];
        if (double* gk = sink(k))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) gk[r * w + j] += g[r * total + offset + j];
        offset += w;
      }
      break;
    }
    case OpKind::GatherRows: {
      if (double* gt = sink(0)) {
        const std::size_t d = node.output.shape()[1];
        for (std::size_t t = 0; t < node.index.size(); ++t)
          for (std::size_t j = 0; j < d; ++j) gt[node.index[t] * d + j] += g[t * d + j];
      }
      break;
    }
    case OpKind::Row: {
      if (double* ga = sink(0)) {
        const std::size_t d = g.size();
        for (std::size_t j = 0; j < d; ++j) ga[node.index[0] * d + j] += g[j];
      }
      break;
    }
    case OpKind::SliceCols: {
      if (double* ga = sink(0)) {
        const std::size_t start = node.index[0], len = node.index[1];
        const std::size_t n = in(node, 0).shape()[1];
        const std::size_t m = in(node, 0).shape()[0];
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < len; ++j) ga[r * n + start + j] += g[r * len + j];
      }
      break;
    }
    case OpKind::StackRows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t count = in(node, k).numel();
        if (double* gk = sink(k))
          for (std::size_t i = 0; i < count; ++i) gk[i] += g[offset + i];
        offset += count;
      }
      break;
    }
    case OpKind::RepeatRows: {
      if (double* gv = sink(0)) {
        const std::size_t d = in(node, 0).numel();
        for (std::size_t i = 0; i < g.size(); ++i) gv[i % d] += g[i];
      }
      break;
    }
    case OpKind::Reshape: {
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      break;
    }
    case OpKind::MaxPoolTime: {
      if (double* gx = sink(0)) {
        const std::size_t d = g.size();
        for (std::size_t j = 0; j < d; ++j) gx[node.index[j] * d + j] += g[j];
      }
      break;
    }
    case OpKind::Softmax: {
      if (double* gx = sink(0)) {
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
        for (std::size_t i = 0; i < g.size(); ++i)
          if (node.mask[i]) gx[i] += y[i] * (g[i] - dot);
      }
      break;
    }
    case OpKind::LogSoftmax: {
      if (double* gx = sink(0)) {
        double gsum = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (node.mask[i]) gsum += g[i];
        for (std::size_t i = 0; i < g.size(); ++i)
          if (node.mask[i]) gx[i] += g[i] - std::exp(y[i]) * gsum;
      }
      break;
    }
    case OpKind::SoftmaxRows: {
      if (double* gx = sink(0)) {
        const std::size_t m = node.output.shape()[0], n = node.output.shape()[1];
        for (std::size_t r = 0; r < m; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
      }
      break;
    }
    case OpKind::Sum: {
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < in(node, 0).numel(); ++i) ga[i] += g[0];
      break;
    }
    case OpKind::Mean: {
      if (double* ga = sink(0)) {
        const std::size_t n = in(node, 0).numel();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[0] / static_cast<double>(n);
      }
      break;
    }
    case OpKind::Pick: {
      if (double* ga = sink(0)) ga[node.index[0]] += g[0];
      break;
    }
    case OpKind::Normalize: {
      if (double* ga = sink(0)) {
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += (g[i] - dot) / node.p0;
      }
      break;
    }
    case OpKind::GruSequence: {
      const Tensor& u = in(node, 1);
      const std::size_t h = u.shape()[0];
      const std::size_t T = node.output.shape()[0];
      const bool reverse = node.p0 != 0.0;
      const double* U = u.data().data();
      double* gx_sink = sink(0);
      double* gu_sink = sink(1);
      double* gb_sink = sink(2);
      std::vector<double> dh(h, 0.0), dgh(3 * h), prev(h);
      for (std::size_t s = T; s-- > 0;) {
        const std::size_t t = reverse ? T - 1 - s : s;
        const double* c = node.cache.data() + t * 4 * h;
        if (s == 0) {
          std::fill(prev.begin(), prev.end(), 0.0);
        } else {
          const std::size_t tp = reverse ? t + 1 : t - 1;
          std::copy(y.begin() + tp * h, y.begin() + (tp + 1) * h, prev.begin());
        }
        for (std::size_t j = 0; j < h; ++j) dh[j] += g[t * h + j];
        for (std::size_t j = 0; j < h; ++j) {
          const double z = c[j], r = c[h + j], n = c[2 * h + j], ghn = c[3 * h + j];
          const double dn = dh[j] * (1.0 - z);
          const double dz = dh[j] * (prev[j] - n);
          const double dan = dn * (1.0 - n * n);
          const double dar = dan * ghn * r * (1.0 - r);
          const double daz = dz * z * (1.0 - z);
          dgh[j] = daz;
          dgh[h + j] = dar;
          dgh[2 * h + j] = dan * r;
          if (gx_sink) {
            double* gxr = gx_sink + t * 3 * h;
            gxr[j] += daz;
            gxr[h + j] += dar;
            gxr[2 * h + j] += dan;
          }
          dh[j] *= z;
        }
        if (gb_sink)
          for (std::size_t j = 0; j < 3 * h; ++j) gb_sink[j] += dgh[j];
        for (std::size_t i = 0; i < h; ++i) {
          const double* urow = U + i * 3 * h;
          double acc = 0.0;
          for (std::size_t j = 0; j < 3 * h; ++j) acc += urow[j] * dgh[j];
          dh[i] += acc;
          if (gu_sink && prev[i] != 0.0) {
            double* grow = gu_sink + i * 3 * h;
            for (std::size_t j = 0; j < 3 * h; ++j) grow[j] += prev[i] * dgh[j];
          }
        }
      }
      break;
    }
    case OpKind::Unary: {
      const Tensor& a = in(node, 0);
      if (double* ga = sink(0))
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * node.df(a.at(i));
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

double evaluate(const std::function<Tensor(Graph&)>& f) {
  Graph g;
  return f(g).item();
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(Graph&)>& f, std::vector<Tensor> inputs,
                           double eps, double tol) {
  GradCheckReport report;

  for (Tensor& t : inputs) t.zero_grad();
  {
    Graph g;
    Tensor loss = f(g);
    if (loss.requires_grad()) g.backward(loss);
  }
  for (const Tensor& t : inputs) {
    std::vector<double> gr = t.grad();
    report.analytic.insert(report.analytic.end(), gr.begin(), gr.end());
  }

  const double base = evaluate(f);
  const double again = evaluate(f);
  if (std::memcmp(&base, &again, sizeof(double)) != 0)
    throw OracleInvalidError("grad_check: function is not deterministic (" + std::to_string(base) +
                             " vs " + std::to_string(again) + ")");

  for (Tensor& t : inputs) {
    std::span<double> data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = evaluate(f);
      data[i] = saved - eps;
      const double down = evaluate(f);
      data[i] = saved;
      report.numeric.push_back((up - down) / (2.0 * eps));
    }
  }

  report.max_error = 0.0;
  for (std::size_t i = 0; i < report.analytic.size(); ++i) {
    const double a = report.analytic[i], n = report.numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), kGradCheckFloor});
    const double err = std::abs(a - n) / denom;
    report.relative_error.push_back(err);
    report.max_error = std::max(report.max_error, err);
  }
  report.pass = report.max_error < tol;
  for (Tensor& t : inputs) t.zero_grad();
  return report;
}

GradCheckReport grad_check(const ScalarFunction& f, const Tensor& x, double eps, double tol) {
  Tensor probe = Tensor::from(x.shape(), x.values(), true);
  return grad_check([&](Graph& g) { return f(g, probe); }, {probe}, eps, tol);
}

}  // namespace chainrec
