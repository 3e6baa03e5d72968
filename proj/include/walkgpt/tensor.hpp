#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D double matrix; batched computations loop over
// batch elements and build one graph per element.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace walkgpt::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void AccumulateGrad(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var Constant(Matrix value);
  static Var Leaf(Matrix value, bool requires_grad = true);
  static Var Scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Returns zeros of the value's shape when no gradient has been accumulated.
  Matrix grad() const;
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_->requires_grad; }
  void ZeroGrad() { node_->grad.resize(0, 0); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Seeds d(root)/d(root) = 1 and propagates through the recorded graph.
void Backward(const Var& root);

bool GradEnabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Linear algebra.
Var MatMul(const Var& a, const Var& b);
Var MatMulNT(const Var& a, const Var& b);  // a * b^T
Var Transpose(const Var& a);

// Elementwise.
Var Add(const Var& a, const Var& b);
Var Sub(const Var& a, const Var& b);
Var Mul(const Var& a, const Var& b);
Var Scale(const Var& a, double c);
Var AddRowBroadcast(const Var& a, const Var& row);  // row: 1 x cols
Var MulColBroadcast(const Var& a, const Var& col);  // col: rows x 1
Var MulScalar(const Var& a, const Var& s);          // s: 1 x 1
Var Sigmoid(const Var& a);
Var Tanh(const Var& a);
Var Gelu(const Var& a);
Var Exp(const Var& a);
Var Log(const Var& a);
Var Reciprocal(const Var& a);

// Row-wise reductions and normalizations.
// `additive_mask` (optional, same shape) is added before exponentiation;
// use -infinity to exclude entries.
Var SoftmaxRows(const Var& a, const Matrix* additive_mask = nullptr);
Var LogSumExpRows(const Var& a);  // rows x 1
Var LayerNormRows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
Var L2NormalizeRows(const Var& a, double eps = 1e-12);
Var RowSum(const Var& a);    // rows x 1
Var ColSum(const Var& a);    // 1 x cols
Var ColMean(const Var& a);   // 1 x cols
Var Sum(const Var& a);       // 1 x 1
Var Mean(const Var& a);      // 1 x 1

// Structural.
Var SliceRows(const Var& a, Index start, Index count);
Var SliceCols(const Var& a, Index start, Index count);
Var ConcatRows(std::span<const Var> parts);
Var ConcatCols(std::span<const Var> parts);
Var GatherRows(const Var& a, std::span<const int> indices);
Var Reshape(const Var& a, Index rows, Index cols);  // row-major reinterpretation
// Mean-pools non-overlapping k x k cells of a row-major (grid_h*grid_w) x d
// token grid; grid_h and grid_w must be divisible by k.
Var AvgPoolGrid(const Var& a, int grid_h, int grid_w, int k);
// Nearest-neighbour upsampling of a (grid_h*grid_w) x d token grid by an
// integer factor along both axes.
Var UpsampleGridNearest(const Var& a, int grid_h, int grid_w, int factor);

// Losses.
// Per-row negative log-likelihood of `targets` under softmax(logits); rows x 1.
Var NllRows(const Var& logits, std::span<const int> targets);
// Elementwise binary cross-entropy on logits against constant targets.
Var BceWithLogits(const Var& logits, const Matrix& targets);

// Deterministic 64-bit generator used for all parameter initialization and
// synthetic data; independent of the standard library's distributions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ 0x9E3779B97F4A7C15ULL) {}
  uint64_t NextU64();
  double Uniform();  // [0, 1)
  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }
  double Normal();
  int UniformInt(int lo, int hi);  // inclusive bounds

 private:
  uint64_t state_;
};

Matrix UniformMatrix(Index rows, Index cols, double scale, Rng& rng);

// Named, ordered collection of trainable leaves.
class ParameterStore {
 public:
  Var Add(const std::string& name, Matrix init);
  const Var& Get(const std::string& name) const;
  bool Contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Var>>& entries() { return entries_; }
  size_t size() const { return entries_.size(); }
  void ZeroGrad();
  int64_t NumScalars() const;

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out, may be undefined

  static Linear Create(ParameterStore& store, const std::string& name, Index in, Index out,
                       Rng& rng, bool with_bias = true);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm Create(ParameterStore& store, const std::string& name, Index dim);
  Var operator()(const Var& x) const { return LayerNormRows(x, gamma, beta); }
};

}  // namespace walkgpt::ad
