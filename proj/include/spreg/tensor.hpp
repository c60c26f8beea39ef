#pragma once

#include "spreg/rng.hpp"
#include "spreg/types.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace spreg::ad {

using spreg::Matrix;

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the differentiation graph. Values are dense row-major
/// float64 matrices; scalars are 1x1, vectors 1xN or Nx1. The logical rank
/// (0, 1 or 2) is kept for parameter serialization only.
struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  bool grad_allocated = false;
  int logical_rank = 2;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (!grad_allocated) {
      grad = Matrix::Zero(value.rows(), value.cols());
      grad_allocated = true;
    }
  }
};

/// Handle to a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  /// Leaf with no gradient tracking.
  static Tensor constant(Matrix v, int logical_rank = 2);
  static Tensor scalar(double v);
  /// Trainable leaf (requires_grad = true).
  static Tensor parameter(Matrix v, int logical_rank = 2);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& value() { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  int logical_rank() const { return node_->logical_rank; }

  /// Gradient buffer; allocates zeros on first access.
  Matrix& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool grad_allocated() const { return node_->grad_allocated; }
  void zero_grad() const {
    node_->grad.setZero(node_->value.rows(), node_->value.cols());
    node_->grad_allocated = true;
  }

  double item() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// --- graph construction -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

/// Broadcasting variants: the vector operand is added to / multiplied into
/// every row (1 x m) or column (n x 1) of the matrix operand.
Tensor add_rowvec(const Tensor& x, const Tensor& row);
Tensor add_colvec(const Tensor& x, const Tensor& col);
Tensor mul_rowvec(const Tensor& x, const Tensor& row);
Tensor mul_colvec(const Tensor& x, const Tensor& col);

Tensor add_scalar(const Tensor& x, double c);
Tensor scale(const Tensor& x, double s);
/// Elementwise product with a constant matrix (no gradient into the constant).
Tensor mul_const(const Tensor& x, const Matrix& c);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);  // derivative taken as 0 at x = 0
Tensor abs(const Tensor& x);
Tensor recip(const Tensor& x);

Tensor row_softmax(const Tensor& x);
Tensor col_softmax(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor row_sum(const Tensor& x);
Tensor row_min(const Tensor& x);  // ties resolve to the lowest column index
Tensor row_max(const Tensor& x);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
Tensor gather_cells(const Tensor& x,
                    const std::vector<std::pair<int, int>>& cells);

/// X is (n*k) x d; output row g is the columnwise max over rows
/// [g*k, (g+1)*k). Gradient flows to the first maximal row of each group.
Tensor rows_max_pool(const Tensor& x, int group);

/// Pairwise tensors R are stored (n*m) x d with pair (i, j) at row i*m + j.
/// pair_scores(q, r, m)[i, j]  = dot(q_i, r_{i,j})
/// pair_combine(a, r)[i]       = sum_j a_{i,j} * r_{i,j}
Tensor pair_scores(const Tensor& q, const Tensor& r, Index m);
Tensor pair_combine(const Tensor& a, const Tensor& r);

/// Row-wise layer normalization with learnable gain and bias (both 1 x d).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Composite: Euclidean distance matrix, out[i, j] = ||a_i - b_j||.
/// Gradient is 0 at exactly coincident rows (subgradient of sqrt at 0).
Tensor pairwise_distances(const Tensor& a, const Tensor& b);

/// Composite: rows scaled to unit Euclidean length.
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

/// Value-identical leaf with no graph link; gradients stop here.
Tensor detach(const Tensor& x);

/// Populates grad = d(loss)/d(node) for every node reachable from `loss`.
/// Reached gradients are overwritten (set semantics), unreached buffers are
/// untouched, so summing losses must happen in-graph via add().
void backward(const Tensor& loss);

// --- parameters --------------------------------------------------------------

/// Named trainable tensors with deterministic lexicographic iteration.
class ParameterStore {
 public:
  Tensor& create(const std::string& path, Matrix init, int logical_rank = 2);
  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);
  bool contains(const std::string& path) const {
    return params_.count(path) > 0;
  }
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Allocate (zero) gradient buffers for every parameter.
  void allocate_gradients();
  void zero_gradients();

  /// Same values as gradient-free constants: forward passes through the
  /// copy record no graph (cheap inference).
  ParameterStore detached_copy() const;

  /// SPWT serialization: magic "SPWT", u32 count, then per parameter
  /// u16 path length, path, u8 rank, u32 dims, float32 LE payload.
  void save(std::ostream& out) const;
  void load(std::istream& in);
  void save_file(const std::string& path) const;
  void load_file(const std::string& path);

 private:
  std::map<std::string, Tensor> params_;
};

/// Adam with decoupled weight decay over a ParameterStore.
struct AdamState {
  double learning_rate = 1e-4;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> moments;  // m, v
};

/// One update step; requires every parameter's gradient buffer to be
/// allocated (ContractError naming the offending path otherwise). Gradients
/// are zeroed after the update.
void adam_step(ParameterStore& params, AdamState& state);

/// Glorot-uniform fill: +-sqrt(6 / (fan_in + fan_out)).
void init_glorot(Matrix& w, Xoshiro256& rng);

}  // namespace spreg::ad
