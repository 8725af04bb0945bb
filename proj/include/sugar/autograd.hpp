#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// Every value in a computation is a Var wrapping a node that owns its value,
// an accumulated gradient and a closure that pushes its gradient to its
// parents. Nodes whose parents need no gradient drop their closures, so pure
// inference builds no graph worth speaking of.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sugar::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  double scalar() const { return node_->value(0, 0); }
  const NodePtr& node() const { return node_; }
  bool defined() const { return static_cast<bool>(node_); }

 private:
  NodePtr node_;
};

/// A named trainable tensor. `var()` returns a fresh leaf whose gradient is
/// added into `grad` during backward; a frozen parameter yields a constant.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Matrix v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}

  Var var();
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParameterRefs = std::vector<Parameter*>;

/// While alive, `Parameter::var()` hands out constants, so forward passes
/// build no graph at all.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Matrix value);
Var variable(Matrix value);

/// Seeds d(root)/d(root) = 1 and propagates through the graph.
void backward(const Var& root);

// Elementwise / linear algebra.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

// Row manipulation.
Var slice_rows(const Var& a, Index start, Index count);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(const Var& table, const std::vector<int>& ids);
/// Averages each run of `group` consecutive rows.
Var mean_groups(const Var& a, Index group);
/// Row-wise L2 normalization. Rows with norm below `eps` become e_1.
Var l2_normalize_rows(const Var& a, double eps = 1e-8);

// Transformer pieces.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Scaled dot-product attention with `heads` heads splitting the columns.
/// Rows of q and k/v split into `groups` equal blocks that attend only
/// within their own block (a batch of independent sequences). With
/// `causal`, query row i of a block sees key rows 0..i of that block only.
Var attention(const Var& q, const Var& k, const Var& v, int heads, bool causal, Index groups = 1);

// Losses.
/// Mean next-token style cross entropy. Rows whose target is negative are
/// ignored. Returns 1x1.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& targets);
/// Multiple-instance NCE over a similarity matrix (rows: samples, cols: all
/// texts of the batch). `positive(i, k)` marks the texts of sample i.
Var mil_nce(const Var& similarity, const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& positive,
            double temperature);

// Skeleton-specific.
/// Rows are laid out frame-major with `adjacency.rows()` joints per frame;
/// every frame block is left-multiplied by `adjacency`.
Var graph_aggregate(const Var& x, const Matrix& adjacency);
/// Depthwise temporal convolution with 'same' zero padding. Rows are laid
/// out (sequence, frame, joint); `kernel` is k x F with k odd.
Var temporal_conv(const Var& x, const Var& kernel, Index sequences, Index frames, Index joints);

}  // namespace sugar::ad
