#include "pointdif/autograd.hpp"

#include <cmath>
#include <numbers>

#include "pointdif/errors.hpp"

namespace pointdif::ag {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ValidationError(std::string("autograd: ") + what);
}

Tape& tape_of(Var a) {
  require(a.valid(), "use of an unbound Var");
  return *a.tape();
}

Tape& tape_of(const std::vector<Var>& vs) {
  require(!vs.empty(), "empty operand list");
  Tape& t = tape_of(vs.front());
  for (const auto& v : vs) require(v.tape() == &t, "operands on different tapes");
  return t;
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(*this); }
const Matrix& Var::grad() const { return tape_->grad(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.value, {}, {}, &p, true});
  bound_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, const std::vector<Var>& inputs, Backward backward) {
  bool needs = false;
  for (const auto& v : inputs) needs = needs || nodes_[v.id_].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{},
                        nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var v, const Matrix& g) { accumulate_expr(v, g); }

void Tape::backward(Var root, double seed) {
  require(root.tape() == this, "backward root from another tape");
  auto& r = nodes_[root.id_];
  require(r.value.rows() == 1 && r.value.cols() == 1, "backward root must be 1x1");
  if (!r.requires_grad) return;
  r.grad = Matrix::Constant(1, 1, seed);
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    } else if (n.backward) {
      // Closures only touch earlier nodes, so n.grad stays put.
      n.backward(*this, n.grad);
    }
  }
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require(a.cols() == b.rows(), "matmul shape mismatch");
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate_expr(a, g * b.value().transpose());
    if (tp.requires_grad(b)) tp.accumulate_expr(b, a.value().transpose() * g);
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add shape mismatch");
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub shape mismatch");
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate_expr(b, -g);
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul shape mismatch");
  return t.record(a.value().cwiseProduct(b.value()), {a, b},
                  [a, b](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(a)) tp.accumulate_expr(a, g.cwiseProduct(b.value()));
                    if (tp.requires_grad(b)) tp.accumulate_expr(b, g.cwiseProduct(a.value()));
                  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  return t.record(a.value() * s, {a},
                  [a, s](Tape& tp, const Matrix& g) { tp.accumulate_expr(a, g * s); });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of({a, row});
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row shape mismatch");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(v), {a, row}, [a, row](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) tp.accumulate_expr(row, g.colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  Tape& t = tape_of({a, row});
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row shape mismatch");
  Matrix v = a.value().array().rowwise() * row.value().row(0).array();
  return t.record(std::move(v), {a, row}, [a, row](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a))
      tp.accumulate_expr(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
    if (tp.requires_grad(row))
      tp.accumulate_expr(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Var broadcast_rows(Var row, Index n) {
  Tape& t = tape_of(row);
  require(row.rows() == 1, "broadcast_rows expects a row vector");
  Matrix v = row.value().replicate(n, 1);
  return t.record(std::move(v), {row}, [row](Tape& tp, const Matrix& g) {
    tp.accumulate_expr(row, g.colwise().sum());
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().transpose(), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate_expr(a, g.transpose());
  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Matrix v = a.value().unaryExpr(
      [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  return t.record(std::move(v), {a}, [a, inv_sqrt2](Tape& tp, const Matrix& g) {
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    Matrix d = a.value().unaryExpr([=](double x) {
      return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    });
    tp.accumulate_expr(a, g.cwiseProduct(d));
  });
}

Var relu(Var a) { return leaky_relu(a, 0.0); }

Var leaky_relu(Var a, double slope) {
  Tape& t = tape_of(a);
  Matrix v = a.value().unaryExpr([=](double x) { return x > 0.0 ? x : slope * x; });
  return t.record(std::move(v), {a}, [a, slope](Tape& tp, const Matrix& g) {
    Matrix d = a.value().unaryExpr([=](double x) { return x > 0.0 ? 1.0 : slope; });
    tp.accumulate_expr(a, g.cwiseProduct(d));
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().unaryExpr([](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  Matrix slope = y.cwiseProduct((1.0 - y.array()).matrix());
  return t.record(std::move(y), {a}, [a, slope](Tape& tp, const Matrix& g) {
    tp.accumulate_expr(a, g.cwiseProduct(slope));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  Tape& t = tape_of(parts);
  Index rows = parts.front().rows(), cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return t.record(std::move(v), parts, [parts](Tape& tp, const Matrix& g) {
    Index o = 0;
    for (const auto& p : parts) {
      if (tp.requires_grad(p)) tp.accumulate_expr(p, g.middleCols(o, p.cols()));
      o += p.cols();
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  Tape& t = tape_of(parts);
  Index cols = parts.front().cols(), rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return t.record(std::move(v), parts, [parts](Tape& tp, const Matrix& g) {
    Index o = 0;
    for (const auto& p : parts) {
      if (tp.requires_grad(p)) tp.accumulate_expr(p, g.middleRows(o, p.rows()));
      o += p.rows();
    }
  });
}

Var slice_cols(Var a, Index start, Index count) {
  Tape& t = tape_of(a);
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols out of range");
  return t.record(a.value().middleCols(start, count), {a},
                  [a, start, count](Tape& tp, const Matrix& g) {
                    Matrix full = Matrix::Zero(a.rows(), a.cols());
                    full.middleCols(start, count) = g;
                    tp.accumulate(a, full);
                  });
}

Var gather_rows(Var a, const std::vector<Index>& rows) {
  Tape& t = tape_of(a);
  Matrix v(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows index out of range");
    v.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  return t.record(std::move(v), {a}, [a, rows](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) full.row(rows[i]) += g.row(static_cast<Index>(i));
    tp.accumulate(a, full);
  });
}

Var reshape(Var a, Index rows, Index cols) {
  Tape& t = tape_of(a);
  require(rows * cols == a.rows() * a.cols(), "reshape size mismatch");
  const Index in_cols = a.cols();
  Matrix v(rows, cols);
  for (Index k = 0; k < rows * cols; ++k) v(k / cols, k % cols) = a.value()(k / in_cols, k % in_cols);
  return t.record(std::move(v), {a}, [a, cols, in_cols](Tape& tp, const Matrix& g) {
    Matrix back(a.rows(), a.cols());
    for (Index k = 0; k < g.size(); ++k) back(k / in_cols, k % in_cols) = g(k / cols, k % cols);
    tp.accumulate(a, back);
  });
}

Var group_max_rows(Var a, Index group) {
  Tape& t = tape_of(a);
  require(group >= 1 && a.rows() % group == 0, "group_max_rows: rows not divisible by group");
  const Index groups = a.rows() / group, d = a.cols();
  Matrix v(groups, d);
  std::vector<Index> arg(static_cast<std::size_t>(groups * d));
  const Matrix& x = a.value();
  for (Index gi = 0; gi < groups; ++gi)
    for (Index j = 0; j < d; ++j) {
      Index best = gi * group;
      for (Index r = best + 1; r < (gi + 1) * group; ++r)
        if (x(r, j) > x(best, j)) best = r;
      v(gi, j) = x(best, j);
      arg[static_cast<std::size_t>(gi * d + j)] = best;
    }
  return t.record(std::move(v), {a}, [a, arg, groups, d](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    for (Index gi = 0; gi < groups; ++gi)
      for (Index j = 0; j < d; ++j) full(arg[static_cast<std::size_t>(gi * d + j)], j) += g(gi, j);
    tp.accumulate(a, full);
  });
}

Var max_rows(Var a) { return group_max_rows(a, a.rows()); }

Var mean_rows(Var a) {
  Tape& t = tape_of(a);
  require(a.rows() > 0, "mean_rows of empty matrix");
  const double inv = 1.0 / static_cast<double>(a.rows());
  return t.record(a.value().colwise().mean(), {a}, [a, inv](Tape& tp, const Matrix& g) {
    tp.accumulate_expr(a, (g * inv).replicate(a.rows(), 1));
  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  Matrix y = a.value();
  for (Index i = 0; i < y.rows(); ++i) {
    double m = y.row(i).maxCoeff();
    y.row(i) = (y.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  Matrix yc = y;
  return t.record(std::move(y), {a}, [a, yc](Tape& tp, const Matrix& g) {
    Eigen::VectorXd dots = g.cwiseProduct(yc).rowwise().sum();
    Matrix d = yc.cwiseProduct((g.colwise() - dots));
    tp.accumulate(a, d);
  });
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  Tape& t = tape_of({a, gain, bias});
  const Index d = a.cols();
  require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
          "layer_norm parameter shape mismatch");
  const Matrix& x = a.value();
  Eigen::VectorXd mean = x.rowwise().mean();
  Matrix xc = x.colwise() - mean;
  Eigen::VectorXd inv_std =
      ((xc.array().square().rowwise().sum() / static_cast<double>(d)) + eps).rsqrt().matrix();
  Matrix xhat = xc.array().colwise() * inv_std.array();
  Matrix v = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
             bias.value().row(0).array();
  return t.record(std::move(v), {a, gain, bias},
                  [a, gain, bias, xhat, inv_std](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(gain))
                      tp.accumulate_expr(gain, g.cwiseProduct(xhat).colwise().sum());
                    if (tp.requires_grad(bias)) tp.accumulate_expr(bias, g.colwise().sum());
                    if (!tp.requires_grad(a)) return;
                    Matrix dxhat = g.array().rowwise() * gain.value().row(0).array();
                    Eigen::VectorXd m1 = dxhat.rowwise().mean();
                    Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                    Matrix dx = (dxhat.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix();
                    dx = dx.array().colwise() * inv_std.array();
                    tp.accumulate(a, dx);
                  });
}

Var mse(Var a, const Matrix& target) {
  Tape& t = tape_of(a);
  require(a.rows() == target.rows() && a.cols() == target.cols(), "mse shape mismatch");
  Matrix diff = a.value() - target;
  const double n = static_cast<double>(diff.size());
  Matrix v = Matrix::Constant(1, 1, diff.squaredNorm() / n);
  return t.record(std::move(v), {a}, [a, diff, n](Tape& tp, const Matrix& g) {
    tp.accumulate_expr(a, diff * (2.0 * g(0, 0) / n));
  });
}

Var weighted_sum(Var a, const Matrix& weights) {
  Tape& t = tape_of(a);
  require(a.rows() == weights.rows() && a.cols() == weights.cols(), "weighted_sum shape mismatch");
  Matrix v = Matrix::Constant(1, 1, a.value().cwiseProduct(weights).sum());
  return t.record(std::move(v), {a}, [a, weights](Tape& tp, const Matrix& g) {
    tp.accumulate_expr(a, weights * g(0, 0));
  });
}

Var mean_scalars(const std::vector<Var>& scalars) {
  Tape& t = tape_of(scalars);
  double sum = 0.0;
  for (const auto& s : scalars) {
    require(s.rows() == 1 && s.cols() == 1, "mean_scalars expects 1x1 operands");
    sum += s.scalar();
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  return t.record(Matrix::Constant(1, 1, sum * inv), scalars,
                  [scalars, inv](Tape& tp, const Matrix& g) {
                    for (const auto& s : scalars) tp.accumulate(s, g * inv);
                  });
}

}  // namespace pointdif::ag
