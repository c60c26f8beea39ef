#include "spreg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace spreg::ad {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b));
}

NodePtr make_node(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

/// Builds the result node, wiring parents and the closure only when some
/// input actually needs gradients.
Tensor make_op(Matrix value, std::vector<NodePtr> parents,
               std::function<void(Node&)> backward_fn) {
  NodePtr n = make_node(std::move(value));
  bool needs = false;
  for (const auto& p : parents)
    if (p->requires_grad) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(n);
}

}  // namespace

Tensor Tensor::constant(Matrix v, int logical_rank) {
  NodePtr n = make_node(std::move(v));
  n->logical_rank = logical_rank;
  return Tensor(n);
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m), 0);
}

Tensor Tensor::parameter(Matrix v, int logical_rank) {
  NodePtr n = make_node(std::move(v));
  n->requires_grad = true;
  n->logical_rank = logical_rank;
  return Tensor(n);
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1)
    throw ContractError("item: tensor is " + shape_str(node_->value) +
                        ", expected 1x1");
  return node_->value(0, 0);
}

// --- ops ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a.value(), b.value());
  auto an = a.node(), bn = b.node();
  return make_op(a.value() * b.value(), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      an->grad.noalias() += self.grad * bn->value.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      bn->grad.noalias() += an->value.transpose() * self.grad;
    }
  });
}

Tensor transpose(const Tensor& a) {
  auto an = a.node();
  return make_op(a.value().transpose(), {an}, [an](Node& self) {
    an->ensure_grad();
    an->grad += self.grad.transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    shape_error("add", a.value(), b.value());
  auto an = a.node(), bn = b.node();
  return make_op(a.value() + b.value(), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      an->grad += self.grad;
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      bn->grad += self.grad;
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    shape_error("sub", a.value(), b.value());
  auto an = a.node(), bn = b.node();
  return make_op(a.value() - b.value(), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      an->grad += self.grad;
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      bn->grad -= self.grad;
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    shape_error("mul", a.value(), b.value());
  auto an = a.node(), bn = b.node();
  return make_op(a.value().cwiseProduct(b.value()), {an, bn},
                 [an, bn](Node& self) {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     an->grad += self.grad.cwiseProduct(bn->value);
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     bn->grad += self.grad.cwiseProduct(an->value);
                   }
                 });
}

Tensor add_rowvec(const Tensor& x, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != x.cols())
    shape_error("add_rowvec", x.value(), row.value());
  auto xn = x.node(), rn = row.node();
  Matrix v = x.value();
  v.rowwise() += row.value().row(0);
  return make_op(std::move(v), {xn, rn}, [xn, rn](Node& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      xn->grad += self.grad;
    }
    if (rn->requires_grad) {
      rn->ensure_grad();
      rn->grad.row(0) += self.grad.colwise().sum();
    }
  });
}

Tensor add_colvec(const Tensor& x, const Tensor& col) {
  if (col.cols() != 1 || col.rows() != x.rows())
    shape_error("add_colvec", x.value(), col.value());
  auto xn = x.node(), cn = col.node();
  Matrix v = x.value();
  v.colwise() += col.value().col(0);
  return make_op(std::move(v), {xn, cn}, [xn, cn](Node& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      xn->grad += self.grad;
    }
    if (cn->requires_grad) {
      cn->ensure_grad();
      cn->grad.col(0) += self.grad.rowwise().sum();
    }
  });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != x.cols())
    shape_error("mul_rowvec", x.value(), row.value());
  auto xn = x.node(), rn = row.node();
  Matrix v = x.value().array().rowwise() * row.value().row(0).array();
  return make_op(std::move(v), {xn, rn}, [xn, rn](Node& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      xn->grad.array() += self.grad.array().rowwise() * rn->value.row(0).array();
    }
    if (rn->requires_grad) {
      rn->ensure_grad();
      rn->grad.row(0) +=
          self.grad.cwiseProduct(xn->value).colwise().sum();
    }
  });
}

Tensor mul_colvec(const Tensor& x, const Tensor& col) {
  if (col.cols() != 1 || col.rows() != x.rows())
    shape_error("mul_colvec", x.value(), col.value());
  auto xn = x.node(), cn = col.node();
  Matrix v = x.value().array().colwise() * col.value().col(0).array();
  return make_op(std::move(v), {xn, cn}, [xn, cn](Node& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      xn->grad.array() += self.grad.array().colwise() * cn->value.col(0).array();
    }
    if (cn->requires_grad) {
      cn->ensure_grad();
      cn->grad.col(0) += self.grad.cwiseProduct(xn->value).rowwise().sum();
    }
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  auto xn = x.node();
  return make_op(x.value().array() + c, {xn}, [xn](Node& self) {
    xn->ensure_grad();
    xn->grad += self.grad;
  });
}

Tensor scale(const Tensor& x, double s) {
  auto xn = x.node();
  return make_op(x.value() * s, {xn}, [xn, s](Node& self) {
    xn->ensure_grad();
    xn->grad += self.grad * s;
  });
}

Tensor mul_const(const Tensor& x, const Matrix& c) {
  if (x.rows() != c.rows() || x.cols() != c.cols())
    shape_error("mul_const", x.value(), c);
  auto xn = x.node();
  return make_op(x.value().cwiseProduct(c), {xn}, [xn, c](Node& self) {
    xn->ensure_grad();
    xn->grad += self.grad.cwiseProduct(c);
  });
}

Tensor relu(const Tensor& x) {
  auto xn = x.node();
  return make_op(x.value().cwiseMax(0.0), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    xn->grad.array() +=
        self.grad.array() * (xn->value.array() > 0.0).cast<double>();
  });
}

Tensor exp(const Tensor& x) {
  auto xn = x.node();
  Matrix v = x.value().array().exp();
  return make_op(std::move(v), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    xn->grad += self.grad.cwiseProduct(self.value);
  });
}

Tensor log(const Tensor& x) {
  auto xn = x.node();
  Matrix v = x.value().array().log();
  return make_op(std::move(v), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    xn->grad.array() += self.grad.array() / xn->value.array();
  });
}

Tensor sqrt(const Tensor& x) {
  auto xn = x.node();
  Matrix v = x.value().array().max(0.0).sqrt();
  return make_op(std::move(v), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    // Subgradient 0 at the origin keeps coincident-point distances NaN-free.
    xn->grad.array() +=
        (xn->value.array() > 0.0)
            .select(self.grad.array() * 0.5 / self.value.array().max(1e-300),
                    Matrix::Zero(self.value.rows(), self.value.cols()).array());
  });
}

Tensor abs(const Tensor& x) {
  auto xn = x.node();
  return make_op(x.value().cwiseAbs(), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    xn->grad.array() += self.grad.array() * xn->value.array().sign();
  });
}

Tensor recip(const Tensor& x) {
  auto xn = x.node();
  Matrix v = x.value().array().inverse();
  return make_op(std::move(v), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    xn->grad.array() -= self.grad.array() * self.value.array().square();
  });
}

Tensor row_softmax(const Tensor& x) {
  Matrix v(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const auto row = x.value().row(i);
    Eigen::RowVectorXd e = (row.array() - row.maxCoeff()).exp();
    v.row(i) = e / e.sum();
  }
  auto xn = x.node();
  return make_op(std::move(v), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    for (Index i = 0; i < self.value.rows(); ++i) {
      const auto y = self.value.row(i).array();
      const auto dy = self.grad.row(i).array();
      const double dot = (dy * y).sum();
      xn->grad.row(i).array() += (dy - dot) * y;
    }
  });
}

Tensor col_softmax(const Tensor& x) {
  Matrix v(x.rows(), x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const auto col = x.value().col(j);
    Eigen::VectorXd e = (col.array() - col.maxCoeff()).exp();
    v.col(j) = e / e.sum();
  }
  auto xn = x.node();
  return make_op(std::move(v), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    for (Index j = 0; j < self.value.cols(); ++j) {
      const auto y = self.value.col(j).array();
      const auto dy = self.grad.col(j).array();
      const double dot = (dy * y).sum();
      xn->grad.col(j).array() += (dy - dot) * y;
    }
  });
}

Tensor sum(const Tensor& x) {
  Matrix v(1, 1);
  v(0, 0) = x.value().sum();
  auto xn = x.node();
  return make_op(std::move(v), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    xn->grad.array() += self.grad(0, 0);
  });
}

Tensor mean(const Tensor& x) {
  Matrix v(1, 1);
  v(0, 0) = x.value().mean();
  auto xn = x.node();
  const double inv = 1.0 / static_cast<double>(x.size());
  return make_op(std::move(v), {xn}, [xn, inv](Node& self) {
    xn->ensure_grad();
    xn->grad.array() += self.grad(0, 0) * inv;
  });
}

Tensor row_sum(const Tensor& x) {
  Matrix v = x.value().rowwise().sum();
  auto xn = x.node();
  return make_op(std::move(v), {xn}, [xn](Node& self) {
    xn->ensure_grad();
    xn->grad.colwise() += self.grad.col(0);
  });
}

namespace {

Tensor row_extreme(const Tensor& x, bool take_min) {
  const Index n = x.rows(), m = x.cols();
  Matrix v(n, 1);
  auto argpos = std::make_shared<std::vector<Index>>(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    double bv = x.value()(i, 0);
    for (Index j = 1; j < m; ++j) {
      const double c = x.value()(i, j);
      if (take_min ? c < bv : c > bv) {
        bv = c;
        best = j;
      }
    }
    v(i, 0) = bv;
    (*argpos)[static_cast<size_t>(i)] = best;
  }
  auto xn = x.node();
  return make_op(std::move(v), {xn}, [xn, argpos](Node& self) {
    xn->ensure_grad();
    for (Index i = 0; i < self.value.rows(); ++i)
      xn->grad(i, (*argpos)[static_cast<size_t>(i)]) += self.grad(i, 0);
  });
}

}  // namespace

Tensor row_min(const Tensor& x) { return row_extreme(x, true); }
Tensor row_max(const Tensor& x) { return row_extreme(x, false); }

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) shape_error("concat_rows", a.value(), b.value());
  Matrix v(a.rows() + b.rows(), a.cols());
  v.topRows(a.rows()) = a.value();
  v.bottomRows(b.rows()) = b.value();
  auto an = a.node(), bn = b.node();
  const Index na = a.rows();
  return make_op(std::move(v), {an, bn}, [an, bn, na](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      an->grad += self.grad.topRows(na);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      bn->grad += self.grad.bottomRows(self.value.rows() - na);
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  Matrix v(static_cast<Index>(rows.size()), x.cols());
  for (size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= x.rows())
      throw ParameterError("gather_rows: index " + std::to_string(rows[r]) +
                           " out of range for " + std::to_string(x.rows()) +
                           " rows");
    v.row(static_cast<Index>(r)) = x.value().row(rows[r]);
  }
  auto xn = x.node();
  auto idx = std::make_shared<std::vector<int>>(rows);
  return make_op(std::move(v), {xn}, [xn, idx](Node& self) {
    xn->ensure_grad();
    for (size_t r = 0; r < idx->size(); ++r)
      xn->grad.row((*idx)[r]) += self.grad.row(static_cast<Index>(r));
  });
}

Tensor gather_cells(const Tensor& x,
                    const std::vector<std::pair<int, int>>& cells) {
  Matrix v(static_cast<Index>(cells.size()), 1);
  for (size_t r = 0; r < cells.size(); ++r) {
    const auto [i, j] = cells[r];
    if (i < 0 || i >= x.rows() || j < 0 || j >= x.cols())
      throw ParameterError("gather_cells: cell out of range");
    v(static_cast<Index>(r), 0) = x.value()(i, j);
  }
  auto xn = x.node();
  auto idx = std::make_shared<std::vector<std::pair<int, int>>>(cells);
  return make_op(std::move(v), {xn}, [xn, idx](Node& self) {
    xn->ensure_grad();
    for (size_t r = 0; r < idx->size(); ++r)
      xn->grad((*idx)[r].first, (*idx)[r].second) +=
          self.grad(static_cast<Index>(r), 0);
  });
}

Tensor rows_max_pool(const Tensor& x, int group) {
  if (group < 1 || x.rows() % group != 0)
    throw ShapeError("rows_max_pool: " + std::to_string(x.rows()) +
                     " rows not divisible by group " + std::to_string(group));
  const Index n = x.rows() / group, d = x.cols();
  Matrix v(n, d);
  auto argrow = std::make_shared<Matrix>(n, d);  // stores double row indices
  for (Index g = 0; g < n; ++g) {
    for (Index c = 0; c < d; ++c) {
      Index best = g * group;
      double bv = x.value()(best, c);
      for (Index r = 1; r < group; ++r) {
        const double cv = x.value()(g * group + r, c);
        if (cv > bv) {
          bv = cv;
          best = g * group + r;
        }
      }
      v(g, c) = bv;
      (*argrow)(g, c) = static_cast<double>(best);
    }
  }
  auto xn = x.node();
  return make_op(std::move(v), {xn}, [xn, argrow](Node& self) {
    xn->ensure_grad();
    for (Index g = 0; g < self.value.rows(); ++g)
      for (Index c = 0; c < self.value.cols(); ++c)
        xn->grad(static_cast<Index>((*argrow)(g, c)), c) += self.grad(g, c);
  });
}

Tensor pair_scores(const Tensor& q, const Tensor& r, Index m) {
  const Index n = q.rows(), d = q.cols();
  if (r.rows() != n * m || r.cols() != d)
    throw ShapeError("pair_scores: r is " + shape_str(r.value()) +
                     ", expected " + std::to_string(n * m) + "x" +
                     std::to_string(d));
  Matrix v(n, m);
  for (Index i = 0; i < n; ++i)
    v.row(i) = r.value().middleRows(i * m, m) * q.value().row(i).transpose();
  auto qn = q.node(), rn = r.node();
  return make_op(std::move(v), {qn, rn}, [qn, rn, m](Node& self) {
    const Index n2 = self.value.rows();
    if (qn->requires_grad) {
      qn->ensure_grad();
      for (Index i = 0; i < n2; ++i)
        qn->grad.row(i) += self.grad.row(i) * rn->value.middleRows(i * m, m);
    }
    if (rn->requires_grad) {
      rn->ensure_grad();
      for (Index i = 0; i < n2; ++i)
        rn->grad.middleRows(i * m, m).noalias() +=
            self.grad.row(i).transpose() * qn->value.row(i);
    }
  });
}

Tensor pair_combine(const Tensor& a, const Tensor& r) {
  const Index n = a.rows(), m = a.cols();
  if (r.rows() != n * m)
    throw ShapeError("pair_combine: r is " + shape_str(r.value()) +
                     ", expected " + std::to_string(n * m) + " rows");
  const Index d = r.cols();
  Matrix v(n, d);
  for (Index i = 0; i < n; ++i)
    v.row(i) = a.value().row(i) * r.value().middleRows(i * m, m);
  auto an = a.node(), rn = r.node();
  return make_op(std::move(v), {an, rn}, [an, rn, m](Node& self) {
    const Index n2 = self.value.rows();
    if (an->requires_grad) {
      an->ensure_grad();
      for (Index i = 0; i < n2; ++i)
        an->grad.row(i) +=
            (rn->value.middleRows(i * m, m) * self.grad.row(i).transpose())
                .transpose();
    }
    if (rn->requires_grad) {
      rn->ensure_grad();
      for (Index i = 0; i < n2; ++i)
        rn->grad.middleRows(i * m, m).noalias() +=
            an->value.row(i).transpose() * self.grad.row(i);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const Index d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d)
    shape_error("layer_norm(gamma)", x.value(), gamma.value());
  if (beta.rows() != 1 || beta.cols() != d)
    shape_error("layer_norm(beta)", x.value(), beta.value());

  const Index n = x.rows();
  Matrix xhat(n, d), v(n, d);
  Vector inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i).array();
    const double mu = row.mean();
    const double var = (row - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(i) = is;
    xhat.row(i) = ((row - mu) * is).matrix();
    v.row(i) =
        (xhat.row(i).array() * gamma.value().row(0).array()).matrix() +
        beta.value().row(0);
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto xh = std::make_shared<Matrix>(std::move(xhat));
  auto istd = std::make_shared<Vector>(std::move(inv_std));
  return make_op(std::move(v), {xn, gn, bn}, [xn, gn, bn, xh, istd](Node& self) {
    const Index n2 = self.value.rows(), d2 = self.value.cols();
    if (gn->requires_grad) {
      gn->ensure_grad();
      gn->grad.row(0) += self.grad.cwiseProduct(*xh).colwise().sum();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      bn->grad.row(0) += self.grad.colwise().sum();
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (Index i = 0; i < n2; ++i) {
        const auto dy = self.grad.row(i).array();
        const auto g = gn->value.row(0).array();
        const auto h = xh->row(i).array();
        const Eigen::Array<double, 1, Dyn> dxhat = dy * g;
        const double m1 = dxhat.mean();
        const double m2 = (dxhat * h).mean();
        xn->grad.row(i).array() += (*istd)(i) * (dxhat - m1 - h * m2);
      }
    }
    (void)d2;
  });
}

Tensor detach(const Tensor& x) {
  return Tensor::constant(x.value(), x.logical_rank());
}

Tensor pairwise_distances(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) shape_error("pairwise_distances", a.value(), b.value());
  const Tensor a2 = row_sum(mul(a, a));                 // n x 1
  const Tensor b2 = transpose(row_sum(mul(b, b)));      // 1 x m
  const Tensor cross = scale(matmul(a, transpose(b)), -2.0);
  // relu clamps the tiny negatives that cancellation can produce.
  return sqrt(relu(add_rowvec(add_colvec(cross, a2), b2)));
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  const Tensor norms = sqrt(add_scalar(row_sum(mul(x, x)), eps));
  return mul_colvec(x, recip(norms));
}

// --- backward ----------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined tensor");
  if (loss.rows() != 1 || loss.cols() != 1)
    throw ContractError("backward: loss is " + shape_str(loss.value()) +
                        ", expected scalar 1x1");

  // Iterative post-order DFS; graphs can be tens of thousands of nodes deep
  // (Sinkhorn chains), so no recursion.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Set semantics: grads of every reached node are recomputed from scratch.
  for (Node* n : order) {
    n->grad.setZero(n->value.rows(), n->value.cols());
    n->grad_allocated = true;
  }
  loss.node()->grad(0, 0) = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace spreg::ad
