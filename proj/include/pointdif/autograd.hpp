#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

// Minimal reverse-mode differentiation over dense double matrices. A Tape
// records one forward pass; backward() walks it in reverse and accumulates
// gradients into the bound Parameters.
namespace pointdif::ag {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = true;  // subject to decoupled weight decay

  void zero_grad() { grad = Matrix::Zero(value.rows(), value.cols()); }
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Gradients reaching this node are added to p.grad on backward(). Binding
  // the same parameter twice returns the same node.
  Var parameter(Parameter& p);

  // Seeds d(root)/d(root) = seed; root must be 1x1.
  void backward(Var root, double seed = 1.0);

  const Matrix& value(Var v) const { return nodes_[v.id_].value; }
  const Matrix& grad(Var v) const { return nodes_[v.id_].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }

  // Backward closure: receives the tape and the node's output gradient.
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;
  Var record(Matrix value, const std::vector<Var>& inputs, Backward backward);

  // Adds g into v's gradient when v participates in differentiation.
  void accumulate(Var v, const Matrix& g);
  template <typename Expr>
  void accumulate_expr(Var v, const Expr& g) {
    auto& n = nodes_[v.id_];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = g;
    else n.grad += g;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
};

// Elementwise and linear algebra.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);    // row (1 x d) broadcast over rows of a
Var mul_row(Var a, Var row);    // row (1 x d) broadcast multiply
Var broadcast_rows(Var row, Index n);
Var transpose(Var a);

// Affine map x W + b with W (in x out) and b (1 x out).
inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var gelu(Var a);
Var relu(Var a);
Var leaky_relu(Var a, double negative_slope);
Var sigmoid(Var a);

// Shape manipulation.
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var a, Index start, Index count);
Var gather_rows(Var a, const std::vector<Index>& rows);
// Reinterprets a in row-major order as rows x cols.
Var reshape(Var a, Index rows, Index cols);

// Reductions over rows.
Var max_rows(Var a);                 // 1 x d column maxima, ties to first row
Var group_max_rows(Var a, Index group);  // (rows/group) x d
Var mean_rows(Var a);                // 1 x d

Var softmax_rows(Var a);
Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);

// Scalar (1 x 1) results.
Var mse(Var a, const Matrix& target);  // mean squared difference
Var weighted_sum(Var a, const Matrix& weights);  // sum(a .* weights)
Var mean_scalars(const std::vector<Var>& scalars);

}  // namespace pointdif::ag
