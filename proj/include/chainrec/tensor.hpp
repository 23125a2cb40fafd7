#pragma once

// Reverse-mode automatic differentiation over small dense 64-bit tensors.
//
// A Graph is a tape: every operation appends one node whose inputs precede
// it, so the node vector is always in topological order. Graphs are built
// per forward pass and thrown away after backward. Tensors that were not
// produced by a graph (parameters, constants) are leaves; a graph registers
// a leaf node for them on first use and accumulates their gradient into the
// leaf's own grad buffer.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace chainrec {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateDistributionError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class OracleInvalidError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;  // rank 0, one element
  Shape(std::initializer_list<std::size_t> dims);

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t numel() const;
  std::size_t last() const { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }
  std::string str() const;

  bool operator==(const Shape& other) const;

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

class Graph;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches it
  bool requires_grad = false;
  std::uint64_t graph_id = 0;  // 0 for leaves
  std::size_t node_id = 0;
};

// Shared handle; copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double item() const;
  double at(std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffer; zeros when no backward pass has reached this tensor.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Deep copy detached from any graph.
  Tensor clone() const;

  const TensorImpl* identity() const { return impl_.get(); }
  bool is_leaf() const { return impl_->graph_id == 0; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend class Graph;
};

enum class OpKind {
  Leaf,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Affine,
  Tanh,
  Sigmoid,
  Log,
  Clamp,
  Concat,
  GatherRows,
  Row,
  SliceCols,
  StackRows,
  RepeatRows,
  Reshape,
  MaxPoolTime,
  Softmax,
  LogSoftmax,
  SoftmaxRows,
  Sum,
  Mean,
  Pick,
  Normalize,
  GruSequence,
  Unary,
};

const char* op_name(OpKind kind);

// Masks are std::vector<bool>: true means the position is live.
using Mask = std::vector<bool>;

class Graph {
 public:
  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(std::size_t node) const { return nodes_.at(node).kind; }
  const std::vector<std::size_t>& inputs(std::size_t node) const { return nodes_.at(node).inputs; }
  std::uint64_t id() const { return id_; }

  // [m x k] x [k x n]
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);

  // Same shape, or b is a vector matching a's trailing extent (row broadcast).
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  // alpha * a + beta
  Tensor affine(const Tensor& a, double alpha, double beta);
  Tensor tanh(const Tensor& a);
  Tensor sigmoid(const Tensor& a);
  Tensor log(const Tensor& a);
  // Gradient is passed only where lo < a < hi.
  Tensor clamp(const Tensor& a, double lo, double hi);

  // Concatenation along the last axis. Vectors, or matrices with equal rows.
  Tensor concat(const std::vector<Tensor>& parts);
  // rows of table [V x d] selected by ids -> [T x d]
  Tensor gather_rows(const Tensor& table, std::span<const int> ids);
  // row i of a matrix as [1 x d]
  Tensor row(const Tensor& a, std::size_t i);
  Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len);
  // vertical concatenation of matrices with equal column count
  Tensor stack_rows(const std::vector<Tensor>& parts);
  // vector [d] or [1 x d] repeated to [n x d]
  Tensor repeat_rows(const Tensor& v, std::size_t n);
  Tensor reshape(const Tensor& a, Shape shape);

  // [T x d] -> [d]; gradient goes to the argmax, ties to the lowest t.
  Tensor max_pool_over_time(const Tensor& x);

  // Vector softmax; masked positions are exactly 0.
  Tensor softmax(const Tensor& x, const Mask& mask = {});
  // Vector log-softmax; masked positions hold 0 and receive no gradient.
  Tensor log_softmax(const Tensor& x, const Mask& mask = {});
  // Row-wise softmax of a matrix.
  Tensor softmax_rows(const Tensor& x);

  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor pick(const Tensor& a, std::size_t i);
  // a / sum(a) for a vector with positive sum
  Tensor normalize(const Tensor& a);

  // Full GRU recurrence over precomputed input gates.
  //   gates_x [T x 3h] (x W + bx, blocks z | r | n), w_hidden [h x 3h], b_hidden [3h]
  //   z = sigmoid(gx_z + gh_z), r = sigmoid(gx_r + gh_r), n = tanh(gx_n + r * gh_n)
  //   h' = (1 - z) * n + z * h,  with gh = h U + bh and h = 0 before the first step.
  // reverse walks t = T-1 .. 0; row t of the [T x h] result is the state after
  // consuming input t.
  Tensor gru_sequence(const Tensor& gates_x, const Tensor& w_hidden, const Tensor& b_hidden,
                      bool reverse);

  // Elementwise user function with its derivative. Used for test fixtures
  // and ablations without growing the op set.
  Tensor unary(const Tensor& a, std::function<double(double)> f,
               std::function<double(double)> df);

  // Accumulates d(loss)/d(t) into every reachable tensor that requires grad.
  // Leaves accumulate (callers zero them between steps); graph tensors are
  // overwritten. A graph supports a single backward pass.
  void backward(const Tensor& loss);

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor output;
    std::vector<std::size_t> index;  // op-specific integer payload
    Mask mask;
    double p0 = 0.0;
    double p1 = 0.0;
    std::vector<double> cache;
    std::function<double(double)> df;
  };

  std::size_t node_of(const Tensor& t);
  Tensor make_output(Shape shape, std::vector<double> data, bool requires_grad);
  std::size_t push(Node node);
  Tensor emit(OpKind kind, std::vector<std::size_t> inputs, Shape shape, std::vector<double> data);
  Tensor emit(OpKind kind, std::vector<std::size_t> inputs, Shape shape, std::vector<double> data,
              Node extra);
  const Tensor& in(const Node& n, std::size_t k) const { return nodes_[n.inputs[k]].output; }
  void backprop(Node& node);

  std::vector<Node> nodes_;
  std::unordered_map<const TensorImpl*, std::size_t> leaf_nodes_;
  std::uint64_t id_;
  bool backward_done_ = false;
};

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> relative_error;
  double max_error = 0.0;
  bool pass = false;
};

using ScalarFunction = std::function<Tensor(Graph&, const Tensor&)>;

// Relative error uses max(|analytic|, |numeric|, floor) as the denominator so
// that coordinates whose true gradient is ~0 are compared absolutely.
inline constexpr double kGradCheckFloor = 1e-4;

// Compares analytic gradients of a scalar function against central
// differences at every coordinate of x. x itself is not modified.
GradCheckReport grad_check(const ScalarFunction& f, const Tensor& x, double eps = 1e-6,
                           double tol = 1e-5);

// Same check over several leaf tensors that f reads directly (model
// parameters). Each tensor is perturbed in place and restored; coordinates
// are reported in the order of `inputs`, then row-major.
GradCheckReport grad_check(const std::function<Tensor(Graph&)>& f, std::vector<Tensor> inputs,
                           double eps = 1e-6, double tol = 1e-5);

}  // namespace chainrec
