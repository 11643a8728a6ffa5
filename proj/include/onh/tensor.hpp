#pragma once

#include "onh/common.hpp"

#include <Eigen/Core>

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace onh::tensor {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Trainable weight with its gradient and optimizer moments.
struct Parameter {
  std::string name;
  Matrix value, grad, m, v;
  Parameter() = default;
  Parameter(std::string n, Matrix init) : name(std::move(n)), value(std::move(init)) { zero_grad(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

enum class Mode { Train, Infer };

struct BatchNormState {
  Matrix running_mean, running_var;  // 1 x D
  double momentum = 0.9;
  double eps = 1e-5;
  explicit BatchNormState(Index d = 0) : running_mean(Matrix::Zero(1, d)), running_var(Matrix::Ones(1, d)) {}
};

/// Row ranges of a stacked batch: cloud b owns rows [offsets[b], offsets[b+1]).
struct Segments {
  std::vector<Index> offsets{0};
  Index count() const { return Index(offsets.size()) - 1; }
  Index begin(Index b) const { return offsets[std::size_t(b)]; }
  Index end(Index b) const { return offsets[std::size_t(b) + 1]; }
  void push(Index n) { offsets.push_back(offsets.back() + n); }
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

/// Records operations in evaluation order; backward() sweeps them in reverse.
class Tape {
 public:
  Var constant(Matrix value);
  Var param(Parameter& p);

  const Matrix& value(Var v) const { return nodes_[std::size_t(v.id)].value; }
  const Matrix& grad(Var v) const { return nodes_[std::size_t(v.id)].grad; }
  bool needs_grad(Var v) const { return nodes_[std::size_t(v.id)].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds d(loss)/d(parameter) into every Parameter::grad reached from `loss`.
  void backward(Var loss);

  // used by the operations
  Var push(Matrix value, bool needs_grad, std::function<void()> back);
  Matrix& grad_ref(int id);
  bool needs(int id) const { return nodes_[std::size_t(id)].needs_grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void()> back;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var a, double s);
Var add_bias(Var x, Var bias);                   // bias 1 x D broadcast over rows
Var add_row_constant(Var x, const Matrix& row);  // constant 1 x D broadcast over rows
Var relu(Var x);
Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode);
Var dropout(Var x, double p, std::mt19937_64& rng, Mode mode);
Var slice_cols(Var x, Index start, Index count);
Var concat_cols(Var a, Var b);
Var sum(Var x);

struct SegmentMax {
  Var pooled;                 // B x D
  std::vector<Index> argmax;  // B x D, row-major, absolute row indices
};
/// Max over the rows of each segment; ties go to the smallest row.
SegmentMax segment_max(Var x, const Segments& segments);

/// Row r of segment b is multiplied by the k x k matrix stored row-major in t.row(b).
Var segment_transform(Var x, Var t, const Segments& segments, Index k);

/// Mean over rows b of ||I - A_b A_b^T||_F^2, A_b the k x k matrix in t.row(b).
Var orthogonality_penalty(Var t, Index k);

/// Mean softmax cross-entropy of B x C logits against class indices.
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

struct MaxOverSet {
  Matrix pooled;  // 1 x D
  std::vector<Index> argmax;
};
MaxOverSet max_over_set(const Matrix& x);

class Adam {
 public:
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  void step(const std::vector<Parameter*>& params);
  long steps() const { return t_; }

 private:
  long t_ = 0;
};

}  // namespace onh::tensor
