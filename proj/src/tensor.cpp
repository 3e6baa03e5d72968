#include "walkgpt/tensor.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "walkgpt/errors.hpp"

namespace walkgpt::ad {
namespace {

thread_local bool g_grad_enabled = true;

void CheckSameShape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatch(std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
  }
}

Var MakeResult(Matrix value, std::initializer_list<Var> inputs,
               std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Var& v : inputs) node->parents.push_back(v.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var(std::move(node));
}

Var MakeResultN(Matrix value, const std::vector<Var>& inputs,
                std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Var& v : inputs) node->parents.push_back(v.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var(std::move(node));
}

inline Node& P(Node& out, size_t i) { return *out.parents[i]; }

Var UnaryElementwise(const Var& a, const std::function<double(double)>& f,
                     const std::function<double(double, double)>& dfdx_given_x_y) {
  Matrix y = a.value().unaryExpr(f);
  Matrix x = a.value();
  Matrix yc = y;
  return MakeResult(std::move(y), {a}, [x = std::move(x), yc = std::move(yc), dfdx_given_x_y](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    Matrix d = x.binaryExpr(yc, [&](double xv, double yv) { return dfdx_given_x_y(xv, yv); });
    pa.AccumulateGrad(out.grad.cwiseProduct(d));
  });
}

}  // namespace

void Node::AccumulateGrad(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var Var::Constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::Leaf(Matrix value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Var Var::Scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Constant(std::move(m));
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw ShapeMismatch("item() on non-scalar");
  return node_->value(0, 0);
}

void Backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw ShapeMismatch("Backward expects a 1x1 root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->AccumulateGrad(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
  }
}

bool GradEnabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var MatMul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeMismatch("MatMul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                        " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix y = a.value() * b.value();
  return MakeResult(std::move(y), {a, b}, [](Node& out) {
    Node& pa = P(out, 0);
    Node& pb = P(out, 1);
    if (pa.requires_grad) pa.AccumulateGrad(out.grad * pb.value.transpose());
    if (pb.requires_grad) pb.AccumulateGrad(pa.value.transpose() * out.grad);
  });
}

Var MatMulNT(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeMismatch("MatMulNT: inner dimensions differ");
  Matrix y = a.value() * b.value().transpose();
  return MakeResult(std::move(y), {a, b}, [](Node& out) {
    Node& pa = P(out, 0);
    Node& pb = P(out, 1);
    if (pa.requires_grad) pa.AccumulateGrad(out.grad * pb.value);
    if (pb.requires_grad) pb.AccumulateGrad(out.grad.transpose() * pa.value);
  });
}

Var Transpose(const Var& a) {
  Matrix y = a.value().transpose();
  return MakeResult(std::move(y), {a}, [](Node& out) {
    Node& pa = P(out, 0);
    if (pa.requires_grad) pa.AccumulateGrad(out.grad.transpose());
  });
}

Var Add(const Var& a, const Var& b) {
  CheckSameShape(a, b, "Add");
  Matrix y = a.value() + b.value();
  return MakeResult(std::move(y), {a, b}, [](Node& out) {
    if (P(out, 0).requires_grad) P(out, 0).AccumulateGrad(out.grad);
    if (P(out, 1).requires_grad) P(out, 1).AccumulateGrad(out.grad);
  });
}

Var Sub(const Var& a, const Var& b) {
  CheckSameShape(a, b, "Sub");
  Matrix y = a.value() - b.value();
  return MakeResult(std::move(y), {a, b}, [](Node& out) {
    if (P(out, 0).requires_grad) P(out, 0).AccumulateGrad(out.grad);
    if (P(out, 1).requires_grad) P(out, 1).AccumulateGrad(-out.grad);
  });
}

Var Mul(const Var& a, const Var& b) {
  CheckSameShape(a, b, "Mul");
  Matrix y = a.value().cwiseProduct(b.value());
  return MakeResult(std::move(y), {a, b}, [](Node& out) {
    Node& pa = P(out, 0);
    Node& pb = P(out, 1);
    if (pa.requires_grad) pa.AccumulateGrad(out.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.AccumulateGrad(out.grad.cwiseProduct(pa.value));
  });
}

Var Scale(const Var& a, double c) {
  Matrix y = a.value() * c;
  return MakeResult(std::move(y), {a}, [c](Node& out) {
    if (P(out, 0).requires_grad) P(out, 0).AccumulateGrad(out.grad * c);
  });
}

Var AddRowBroadcast(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeMismatch("AddRowBroadcast");
  Matrix y = a.value().rowwise() + row.value().row(0);
  return MakeResult(std::move(y), {a, row}, [](Node& out) {
    if (P(out, 0).requires_grad) P(out, 0).AccumulateGrad(out.grad);
    if (P(out, 1).requires_grad) P(out, 1).AccumulateGrad(out.grad.colwise().sum());
  });
}

Var MulColBroadcast(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeMismatch("MulColBroadcast");
  Matrix y = a.value().array().colwise() * col.value().col(0).array();
  return MakeResult(std::move(y), {a, col}, [](Node& out) {
    Node& pa = P(out, 0);
    Node& pc = P(out, 1);
    if (pa.requires_grad) {
      Matrix g = out.grad.array().colwise() * pc.value.col(0).array();
      pa.AccumulateGrad(g);
    }
    if (pc.requires_grad) pc.AccumulateGrad(out.grad.cwiseProduct(pa.value).rowwise().sum());
  });
}

Var MulScalar(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeMismatch("MulScalar expects 1x1 scalar");
  Matrix y = a.value() * s.value()(0, 0);
  return MakeResult(std::move(y), {a, s}, [](Node& out) {
    Node& pa = P(out, 0);
    Node& ps = P(out, 1);
    if (pa.requires_grad) pa.AccumulateGrad(out.grad * ps.value(0, 0));
    if (ps.requires_grad) {
      Matrix g(1, 1);
      g(0, 0) = out.grad.cwiseProduct(pa.value).sum();
      ps.AccumulateGrad(g);
    }
  });
}

Var Sigmoid(const Var& a) {
  return UnaryElementwise(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var Tanh(const Var& a) {
  return UnaryElementwise(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var Gelu(const Var& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return UnaryElementwise(
      a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [=](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Var Exp(const Var& a) {
  return UnaryElementwise(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var Log(const Var& a) {
  return UnaryElementwise(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var Reciprocal(const Var& a) {
  return UnaryElementwise(
      a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Var SoftmaxRows(const Var& a, const Matrix* additive_mask) {
  Matrix z = a.value();
  if (additive_mask) {
    if (additive_mask->rows() != z.rows() || additive_mask->cols() != z.cols()) {
      throw ShapeMismatch("SoftmaxRows mask");
    }
    z += *additive_mask;
  }
  Matrix y(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    double total = 0.0;
    for (Index c = 0; c < z.cols(); ++c) {
      const double e = std::exp(z(r, c) - m);
      y(r, c) = e;
      total += e;
    }
    y.row(r) /= total;
  }
  Matrix yc = y;
  return MakeResult(std::move(y), {a}, [yc = std::move(yc)](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    Matrix gy = out.grad.cwiseProduct(yc);
    Eigen::VectorXd dots = gy.rowwise().sum();
    Matrix g = gy - (yc.array().colwise() * dots.array()).matrix();
    pa.AccumulateGrad(g);
  });
}

Var LogSumExpRows(const Var& a) {
  const Matrix& z = a.value();
  Matrix y(z.rows(), 1);
  Matrix soft(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    double total = 0.0;
    for (Index c = 0; c < z.cols(); ++c) {
      soft(r, c) = std::exp(z(r, c) - m);
      total += soft(r, c);
    }
    soft.row(r) /= total;
    y(r, 0) = m + std::log(total);
  }
  return MakeResult(std::move(y), {a}, [soft = std::move(soft)](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    Matrix g = soft.array().colwise() * out.grad.col(0).array();
    pa.AccumulateGrad(g);
  });
}

Var LayerNormRows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  const Index n = a.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw ShapeMismatch("LayerNormRows parameters");
  }
  const Matrix& x = a.value();
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd rstd(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    rstd(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * rstd(r);
  }
  Matrix y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  y.rowwise() += beta.value().row(0);
  return MakeResult(std::move(y), {a, gamma, beta},
                    [xhat = std::move(xhat), rstd = std::move(rstd), n](Node& out) {
                      Node& px = P(out, 0);
                      Node& pg = P(out, 1);
                      Node& pb = P(out, 2);
                      if (pg.requires_grad) pg.AccumulateGrad(out.grad.cwiseProduct(xhat).colwise().sum());
                      if (pb.requires_grad) pb.AccumulateGrad(out.grad.colwise().sum());
                      if (!px.requires_grad) return;
                      Matrix dxhat = out.grad.array().rowwise() * pg.value.row(0).array();
                      Matrix dx(dxhat.rows(), n);
                      for (Index r = 0; r < dxhat.rows(); ++r) {
                        const double mean_d = dxhat.row(r).mean();
                        const double mean_dx = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(n);
                        dx.row(r) = rstd(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
                      }
                      px.AccumulateGrad(dx);
                    });
}

Var L2NormalizeRows(const Var& a, double eps) {
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  Eigen::VectorXd norms(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    norms(r) = std::max(x.row(r).norm(), eps);
    y.row(r) = x.row(r) / norms(r);
  }
  Matrix yc = y;
  return MakeResult(std::move(y), {a}, [yc = std::move(yc), norms = std::move(norms), eps](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    Matrix g(yc.rows(), yc.cols());
    for (Index r = 0; r < yc.rows(); ++r) {
      if (norms(r) > eps) {
        const double d = out.grad.row(r).dot(yc.row(r));
        g.row(r) = (out.grad.row(r) - d * yc.row(r)) / norms(r);
      } else {
        g.row(r) = out.grad.row(r) / norms(r);
      }
    }
    pa.AccumulateGrad(g);
  });
}

Var RowSum(const Var& a) {
  Matrix y = a.value().rowwise().sum();
  const Index cols = a.cols();
  return MakeResult(std::move(y), {a}, [cols](Node& out) {
    if (!P(out, 0).requires_grad) return;
    Matrix g = out.grad.col(0).replicate(1, cols);
    P(out, 0).AccumulateGrad(g);
  });
}

Var ColSum(const Var& a) {
  Matrix y = a.value().colwise().sum();
  const Index rows = a.rows();
  return MakeResult(std::move(y), {a}, [rows](Node& out) {
    if (!P(out, 0).requires_grad) return;
    Matrix g = out.grad.row(0).replicate(rows, 1);
    P(out, 0).AccumulateGrad(g);
  });
}

Var ColMean(const Var& a) {
  if (a.rows() == 0) throw ShapeMismatch("ColMean of empty matrix");
  return Scale(ColSum(a), 1.0 / static_cast<double>(a.rows()));
}

Var Sum(const Var& a) {
  Matrix y(1, 1);
  y(0, 0) = a.value().sum();
  const Index rows = a.rows();
  const Index cols = a.cols();
  return MakeResult(std::move(y), {a}, [rows, cols](Node& out) {
    if (!P(out, 0).requires_grad) return;
    P(out, 0).AccumulateGrad(Matrix::Constant(rows, cols, out.grad(0, 0)));
  });
}

Var Mean(const Var& a) {
  if (a.value().size() == 0) throw ShapeMismatch("Mean of empty matrix");
  return Scale(Sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var SliceRows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeMismatch("SliceRows out of range");
  Matrix y = a.value().middleRows(start, count);
  const Index rows = a.rows();
  const Index cols = a.cols();
  return MakeResult(std::move(y), {a}, [start, count, rows, cols](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    if (pa.grad.size() == 0) pa.grad = Matrix::Zero(rows, cols);
    pa.grad.middleRows(start, count) += out.grad;
  });
}

Var SliceCols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeMismatch("SliceCols out of range");
  Matrix y = a.value().middleCols(start, count);
  const Index rows = a.rows();
  const Index cols = a.cols();
  return MakeResult(std::move(y), {a}, [start, count, rows, cols](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    if (pa.grad.size() == 0) pa.grad = Matrix::Zero(rows, cols);
    pa.grad.middleCols(start, count) += out.grad;
  });
}

Var ConcatRows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeMismatch("ConcatRows of nothing");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeMismatch("ConcatRows column mismatch");
    rows += p.rows();
  }
  Matrix y(rows, cols);
  std::vector<Index> offsets;
  Index r = 0;
  for (const Var& p : parts) {
    offsets.push_back(r);
    y.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return MakeResultN(std::move(y), inputs, [offsets = std::move(offsets)](Node& out) {
    for (size_t i = 0; i < out.parents.size(); ++i) {
      Node& pi = *out.parents[i];
      if (pi.requires_grad) pi.AccumulateGrad(out.grad.middleRows(offsets[i], pi.value.rows()));
    }
  });
}

Var ConcatCols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeMismatch("ConcatCols of nothing");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeMismatch("ConcatCols row mismatch");
    cols += p.cols();
  }
  Matrix y(rows, cols);
  std::vector<Index> offsets;
  Index c = 0;
  for (const Var& p : parts) {
    offsets.push_back(c);
    y.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return MakeResultN(std::move(y), inputs, [offsets = std::move(offsets)](Node& out) {
    for (size_t i = 0; i < out.parents.size(); ++i) {
      Node& pi = *out.parents[i];
      if (pi.requires_grad) pi.AccumulateGrad(out.grad.middleCols(offsets[i], pi.value.cols()));
    }
  });
}

Var GatherRows(const Var& a, std::span<const int> indices) {
  Matrix y(static_cast<Index>(indices.size()), a.cols());
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= a.rows()) throw ShapeMismatch("GatherRows index out of range");
    y.row(static_cast<Index>(i)) = a.value().row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  const Index rows = a.rows();
  const Index cols = a.cols();
  return MakeResult(std::move(y), {a}, [idx = std::move(idx), rows, cols](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    if (pa.grad.size() == 0) pa.grad = Matrix::Zero(rows, cols);
    for (size_t i = 0; i < idx.size(); ++i) pa.grad.row(idx[i]) += out.grad.row(static_cast<Index>(i));
  });
}

Var Reshape(const Var& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw ShapeMismatch("Reshape size mismatch");
  Matrix y = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const Index orows = a.rows();
  const Index ocols = a.cols();
  return MakeResult(std::move(y), {a}, [orows, ocols](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    Matrix g = Eigen::Map<const Matrix>(out.grad.data(), orows, ocols);
    pa.AccumulateGrad(g);
  });
}

Var AvgPoolGrid(const Var& a, int grid_h, int grid_w, int k) {
  if (k < 1 || grid_h % k != 0 || grid_w % k != 0 || a.rows() != static_cast<Index>(grid_h) * grid_w) {
    throw ShapeMismatch("AvgPoolGrid: grid not divisible by pooling factor");
  }
  const int oh = grid_h / k;
  const int ow = grid_w / k;
  const Index d = a.cols();
  const double inv = 1.0 / static_cast<double>(k * k);
  Matrix y = Matrix::Zero(static_cast<Index>(oh) * ow, d);
  const Matrix& x = a.value();
  for (int r = 0; r < grid_h; ++r) {
    for (int c = 0; c < grid_w; ++c) {
      y.row(static_cast<Index>(r / k) * ow + c / k) += x.row(static_cast<Index>(r) * grid_w + c);
    }
  }
  y *= inv;
  return MakeResult(std::move(y), {a}, [grid_h, grid_w, k, ow, inv](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    Matrix g(static_cast<Index>(grid_h) * grid_w, out.grad.cols());
    for (int r = 0; r < grid_h; ++r) {
      for (int c = 0; c < grid_w; ++c) {
        g.row(static_cast<Index>(r) * grid_w + c) = out.grad.row(static_cast<Index>(r / k) * ow + c / k) * inv;
      }
    }
    pa.AccumulateGrad(g);
  });
}

Var UpsampleGridNearest(const Var& a, int grid_h, int grid_w, int factor) {
  if (factor < 1 || a.rows() != static_cast<Index>(grid_h) * grid_w) {
    throw ShapeMismatch("UpsampleGridNearest: bad grid shape");
  }
  const int oh = grid_h * factor;
  const int ow = grid_w * factor;
  Matrix y(static_cast<Index>(oh) * ow, a.cols());
  const Matrix& x = a.value();
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      y.row(static_cast<Index>(r) * ow + c) = x.row(static_cast<Index>(r / factor) * grid_w + c / factor);
    }
  }
  return MakeResult(std::move(y), {a}, [grid_h, grid_w, factor, oh, ow](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    Matrix g = Matrix::Zero(static_cast<Index>(grid_h) * grid_w, out.grad.cols());
    for (int r = 0; r < oh; ++r) {
      for (int c = 0; c < ow; ++c) {
        g.row(static_cast<Index>(r / factor) * grid_w + c / factor) += out.grad.row(static_cast<Index>(r) * ow + c);
      }
    }
    pa.AccumulateGrad(g);
  });
}

Var NllRows(const Var& logits, std::span<const int> targets) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(targets.size()) != z.rows()) throw ShapeMismatch("NllRows target count");
  Matrix y(z.rows(), 1);
  Matrix soft(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= z.cols()) throw ShapeMismatch("NllRows target out of vocabulary");
    const double m = z.row(r).maxCoeff();
    double total = 0.0;
    for (Index c = 0; c < z.cols(); ++c) {
      soft(r, c) = std::exp(z(r, c) - m);
      total += soft(r, c);
    }
    soft.row(r) /= total;
    y(r, 0) = m + std::log(total) - z(r, t);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return MakeResult(std::move(y), {logits}, [soft = std::move(soft), tg = std::move(tg)](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    Matrix g = soft;
    for (Index r = 0; r < g.rows(); ++r) g(r, tg[static_cast<size_t>(r)]) -= 1.0;
    g = (g.array().colwise() * out.grad.col(0).array()).matrix();
    pa.AccumulateGrad(g);
  });
}

Var BceWithLogits(const Var& logits, const Matrix& targets) {
  const Matrix& x = logits.value();
  if (targets.rows() != x.rows() || targets.cols() != x.cols()) throw ShapeMismatch("BceWithLogits");
  Matrix y(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    y.data()[i] = std::max(v, 0.0) - v * targets.data()[i] + std::log1p(std::exp(-std::abs(v)));
  }
  Matrix t = targets;
  return MakeResult(std::move(y), {logits}, [t = std::move(t)](Node& out) {
    Node& pa = P(out, 0);
    if (!pa.requires_grad) return;
    Matrix s = pa.value.unaryExpr([](double v) {
      if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
      const double e = std::exp(v);
      return e / (1.0 + e);
    });
    pa.AccumulateGrad((s - t).cwiseProduct(out.grad));
  });
}

uint64_t Rng::NextU64() {
  // splitmix64
  uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::Uniform() { return static_cast<double>(NextU64() >> 11) * 0x1.0p-53; }

double Rng::Normal() {
  double u1 = Uniform();
  while (u1 <= 0.0) u1 = Uniform();
  const double u2 = Uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int Rng::UniformInt(int lo, int hi) {
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(NextU64() % span);
}

Matrix UniformMatrix(Index rows, Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.Uniform(-scale, scale);
  return m;
}

Var ParameterStore::Add(const std::string& name, Matrix init) {
  if (Contains(name)) throw InvariantViolation("duplicate parameter " + name);
  Var v = Var::Leaf(std::move(init), true);
  entries_.emplace_back(name, v);
  return v;
}

const Var& ParameterStore::Get(const std::string& name) const {
  for (const auto& [n, v] : entries_) {
    if (n == name) return v;
  }
  throw InvariantViolation("unknown parameter " + name);
}

bool ParameterStore::Contains(const std::string& name) const {
  for (const auto& entry : entries_) {
    if (entry.first == name) return true;
  }
  return false;
}

void ParameterStore::ZeroGrad() {
  for (auto& [name, v] : entries_) v.ZeroGrad();
}

int64_t ParameterStore::NumScalars() const {
  int64_t n = 0;
  for (const auto& [name, v] : entries_) n += v.value().size();
  return n;
}

Linear Linear::Create(ParameterStore& store, const std::string& name, Index in, Index out, Rng& rng,
                      bool with_bias) {
  Linear l;
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = store.Add(name + ".weight", UniformMatrix(in, out, scale, rng));
  if (with_bias) l.bias = store.Add(name + ".bias", Matrix::Zero(1, out));
  return l;
}

Var Linear::operator()(const Var& x) const {
  Var y = MatMul(x, weight);
  if (bias.defined()) y = AddRowBroadcast(y, bias);
  return y;
}

LayerNorm LayerNorm::Create(ParameterStore& store, const std::string& name, Index dim) {
  LayerNorm ln;
  ln.gamma = store.Add(name + ".gamma", Matrix::Ones(1, dim));
  ln.beta = store.Add(name + ".beta", Matrix::Zero(1, dim));
  return ln;
}

}  // namespace walkgpt::ad
