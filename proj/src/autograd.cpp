#include "sugar/autograd.hpp"

#include <cmath>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <limits>
#include <unordered_set>

#include "sugar/errors.hpp"

namespace sugar::ad {

namespace {

using BackwardFn = std::function<void(Node&)>;

Var make(Matrix value, std::vector<NodePtr> parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

}  // namespace

namespace {
thread_local bool g_grad_enabled = true;

#if defined(__GLIBC__)
// Graph values are short-lived multi-megabyte matrices; glibc's default
// mmap threshold turns each into a syscall pair.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var Parameter::var() {
  if (!trainable || !g_grad_enabled) return constant(value);
  auto node = std::make_shared<Node>();
  node->value = value;
  node->requires_grad = true;
  Parameter* self = this;
  node->backward = [self](Node& n) {
    if (self->grad.size() == 0) {
      self->grad = n.grad;
    } else {
      self->grad += n.grad;
    }
  };
  return Var(std::move(node));
}

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var variable(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node* n = stack.back().first;
    std::size_t& next = stack.back().second;
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Matrix::Ones(root.rows(), root.cols()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  return make(a.value() * b.value(), {a.node(), b.node()}, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) pa.accumulate(n.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * n.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: inner dimensions differ");
  return make(a.value() * b.value().transpose(), {a.node(), b.node()}, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) pa.accumulate(n.grad * pb.value);
    if (pb.requires_grad) pb.accumulate(n.grad.transpose() * pa.value);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a.node(), b.node()}, [](Node& n) {
    for (auto& p : n.parents)
      if (p->requires_grad) p->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a.node(), b.node()}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) pa.accumulate(n.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(n.grad.cwiseProduct(pa.value));
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a.node()}, [s](Node& n) { n.parents[0]->accumulate(n.grad * s); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: bias must be 1 x cols");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {a.node(), row.node()}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad.colwise().sum());
  });
}

Var relu(const Var& a) {
  return make(a.value().cwiseMax(0.0), {a.node()}, [](Node& n) {
    auto& p = *n.parents[0];
    p.accumulate((p.value.array() > 0.0).select(n.grad, 0.0).matrix());
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& a) {
  const auto& x = a.value().array();
  Eigen::ArrayXXd t = (kGeluC * (x + kGeluA * x.cube())).tanh();
  Matrix out = (0.5 * x * (1.0 + t)).matrix();
  return make(std::move(out), {a.node()}, [t = std::move(t)](Node& n) {
    auto& p = *n.parents[0];
    const auto& x = p.value.array();
    Eigen::ArrayXXd d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square());
    p.accumulate((n.grad.array() * d).matrix());
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {a.node()}, [](Node& n) {
    auto& p = *n.parents[0];
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw DimensionError("slice_rows: out of range");
  return make(a.value().middleRows(start, count), {a.node()}, [start, count](Node& n) {
    auto& p = *n.parents[0];
    if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    p.grad.middleRows(start, count) += n.grad;
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<NodePtr> parents;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    parents.push_back(p.node());
  }
  return make(std::move(out), std::move(parents), [](Node& n) {
    Index offset = 0;
    for (auto& p : n.parents) {
      const Index r = p->value.rows();
      if (p->requires_grad) p->accumulate(n.grad.middleRows(offset, r));
      offset += r;
    }
  });
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  return make(std::move(out), {table.node()}, [ids](Node& n) {
    auto& p = *n.parents[0];
    if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) p.grad.row(ids[i]) += n.grad.row(static_cast<Index>(i));
  });
}

Var mean_groups(const Var& a, Index group) {
  if (group <= 0 || a.rows() % group != 0) throw DimensionError("mean_groups: rows not divisible by group");
  const Index out_rows = a.rows() / group;
  Matrix out = Matrix::Zero(out_rows, a.cols());
  for (Index r = 0; r < out_rows; ++r) out.row(r) = a.value().middleRows(r * group, group).colwise().mean();
  return make(std::move(out), {a.node()}, [group](Node& n) {
    auto& p = *n.parents[0];
    Matrix g(p.value.rows(), p.value.cols());
    const double inv = 1.0 / static_cast<double>(group);
    for (Index r = 0; r < n.grad.rows(); ++r) g.middleRows(r * group, group).rowwise() = n.grad.row(r) * inv;
    p.accumulate(g);
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  Eigen::VectorXd norms = x.rowwise().norm();
  for (Index r = 0; r < x.rows(); ++r) {
    if (norms(r) < eps) {
      out.row(r).setZero();
      out(r, 0) = 1.0;
    } else {
      out.row(r) = x.row(r) / norms(r);
    }
  }
  Matrix y = out;
  return make(std::move(out), {a.node()}, [y = std::move(y), norms = std::move(norms), eps](Node& n) {
    auto& p = *n.parents[0];
    Matrix g = Matrix::Zero(y.rows(), y.cols());
    for (Index r = 0; r < y.rows(); ++r) {
      if (norms(r) < eps) continue;
      const double proj = y.row(r).dot(n.grad.row(r));
      g.row(r) = (n.grad.row(r) - proj * y.row(r)) / norms(r);
    }
    p.accumulate(g);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index cols = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
    throw DimensionError("layer_norm: gamma/beta must be 1 x cols");
  }
  const Matrix& v = x.value();
  Eigen::VectorXd mu = v.rowwise().mean();
  Matrix centered = v.colwise() - mu;
  Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(cols)) + eps).rsqrt().matrix();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x.node(), gamma.node(), beta.node()},
              [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                auto& px = *n.parents[0];
                auto& pg = *n.parents[1];
                auto& pb = *n.parents[2];
                if (pg.requires_grad) pg.accumulate((n.grad.cwiseProduct(xhat)).colwise().sum());
                if (pb.requires_grad) pb.accumulate(n.grad.colwise().sum());
                if (px.requires_grad) {
                  const double cols = static_cast<double>(xhat.cols());
                  Matrix dxhat = n.grad.array().rowwise() * pg.value.row(0).array();
                  Eigen::VectorXd s1 = dxhat.rowwise().sum();
                  Eigen::VectorXd s2 = dxhat.cwiseProduct(xhat).rowwise().sum();
                  Matrix dx = (cols * dxhat).colwise() - s1;
                  dx.array() -= xhat.array().colwise() * s2.array();
                  dx = dx.array().colwise() * (inv_std.array() / cols);
                  px.accumulate(dx);
                }
              });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, bool causal, Index groups) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw DimensionError("attention: shape mismatch");
  if (heads <= 0 || d % heads != 0) throw DimensionError("attention: model dim not divisible by heads");
  if (groups <= 0 || q.rows() % groups != 0 || k.rows() % groups != 0) {
    throw DimensionError("attention: rows must split evenly into groups");
  }
  const Index n_q = q.rows() / groups;
  const Index n_k = k.rows() / groups;
  if (causal && n_q != n_k) throw DimensionError("attention: causal mask needs square scores");
  const Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[g * heads + h] is the n_q x n_k attention map of group g, head h.
  std::vector<Matrix> probs(static_cast<std::size_t>(groups * heads));
  Matrix out(q.rows(), d);
  for (Index g = 0; g < groups; ++g) {
    for (int h = 0; h < heads; ++h) {
      Matrix s = q.value().block(g * n_q, h * dh, n_q, dh) * k.value().block(g * n_k, h * dh, n_k, dh).transpose() *
                 inv_sqrt;
      for (Index i = 0; i < n_q; ++i) {
        const Index visible = causal ? i + 1 : n_k;
        const double mx = s.row(i).head(visible).maxCoeff();
        double total = 0.0;
        for (Index j = 0; j < visible; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          total += s(i, j);
        }
        for (Index j = 0; j < visible; ++j) s(i, j) /= total;
        for (Index j = visible; j < n_k; ++j) s(i, j) = 0.0;
      }
      out.block(g * n_q, h * dh, n_q, dh).noalias() = s * v.value().block(g * n_k, h * dh, n_k, dh);
      probs[static_cast<std::size_t>(g * heads + h)] = std::move(s);
    }
  }
  return make(std::move(out), {q.node(), k.node(), v.node()},
              [probs = std::move(probs), heads, dh, inv_sqrt, groups, n_q, n_k](Node& n) {
                auto& pq = *n.parents[0];
                auto& pk = *n.parents[1];
                auto& pv = *n.parents[2];
                Matrix dq, dk, dv;
                if (pq.requires_grad) dq = Matrix::Zero(pq.value.rows(), pq.value.cols());
                if (pk.requires_grad) dk = Matrix::Zero(pk.value.rows(), pk.value.cols());
                if (pv.requires_grad) dv = Matrix::Zero(pv.value.rows(), pv.value.cols());
                for (Index g = 0; g < groups; ++g) {
                  for (int h = 0; h < heads; ++h) {
                    const Matrix& p = probs[static_cast<std::size_t>(g * heads + h)];
                    const auto grad = n.grad.block(g * n_q, h * dh, n_q, dh);
                    if (pv.requires_grad) dv.block(g * n_k, h * dh, n_k, dh).noalias() += p.transpose() * grad;
                    if (!pq.requires_grad && !pk.requires_grad) continue;
                    const Matrix dp = grad * pv.value.block(g * n_k, h * dh, n_k, dh).transpose();
                    const Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
                    const Matrix ds = p.cwiseProduct(dp.colwise() - rowdot) * inv_sqrt;
                    if (pq.requires_grad) dq.block(g * n_q, h * dh, n_q, dh).noalias() += ds * pk.value.block(g * n_k, h * dh, n_k, dh);
                    if (pk.requires_grad) dk.block(g * n_k, h * dh, n_k, dh).noalias() += ds.transpose() * pq.value.block(g * n_q, h * dh, n_q, dh);
                  }
                }
                if (pq.requires_grad) pq.accumulate(dq);
                if (pk.requires_grad) pk.accumulate(dk);
                if (pv.requires_grad) pv.accumulate(dv);
              });
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& targets) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(targets.size()) != z.rows()) throw DimensionError("cross_entropy: target count mismatch");
  Matrix probs(z.rows(), z.cols());
  double loss = 0.0;
  int counted = 0;
  for (Index r = 0; r < z.rows(); ++r) {
    const double mx = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - mx).exp();
    const double total = probs.row(r).sum();
    probs.row(r) /= total;
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    if (t >= z.cols()) throw DimensionError("cross_entropy: target out of range");
    loss += (std::log(total) + mx) - z(r, t);
    ++counted;
  }
  Matrix out(1, 1);
  out(0, 0) = counted > 0 ? loss / counted : 0.0;
  return make(std::move(out), {logits.node()}, [probs = std::move(probs), targets, counted](Node& n) {
    auto& p = *n.parents[0];
    Matrix g = Matrix::Zero(probs.rows(), probs.cols());
    if (counted > 0) {
      const double w = n.grad(0, 0) / counted;
      for (Index r = 0; r < probs.rows(); ++r) {
        const int t = targets[static_cast<std::size_t>(r)];
        if (t < 0) continue;
        g.row(r) = probs.row(r) * w;
        g(r, t) -= w;
      }
    }
    p.accumulate(g);
  });
}

Var mil_nce(const Var& similarity, const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& positive,
            double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("mil_nce: temperature must be positive");
  const Matrix& s = similarity.value();
  if (positive.rows() != s.rows() || positive.cols() != s.cols()) throw DimensionError("mil_nce: mask shape");
  const Index batch = s.rows();
  Matrix all_soft(batch, s.cols());
  Matrix pos_soft = Matrix::Zero(batch, s.cols());
  double loss = 0.0;
  for (Index i = 0; i < batch; ++i) {
    Eigen::RowVectorXd z = s.row(i) / temperature;
    const double mx = z.maxCoeff();
    Eigen::RowVectorXd e = (z.array() - mx).exp().matrix();
    const double all = e.sum();
    double pos = 0.0;
    for (Index k = 0; k < s.cols(); ++k)
      if (positive(i, k)) pos += e(k);
    if (pos <= 0.0) throw BatchError("mil_nce: sample has no positive text");
    loss += std::log(all) - std::log(pos);
    all_soft.row(i) = e / all;
    for (Index k = 0; k < s.cols(); ++k)
      if (positive(i, k)) pos_soft(i, k) = e(k) / pos;
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(batch);
  Matrix dsim = (all_soft - pos_soft) / (static_cast<double>(batch) * temperature);
  return make(std::move(out), {similarity.node()},
              [dsim = std::move(dsim)](Node& n) { n.parents[0]->accumulate(dsim * n.grad(0, 0)); });
}

Var graph_aggregate(const Var& x, const Matrix& adjacency) {
  const Index joints = adjacency.rows();
  if (adjacency.cols() != joints || joints == 0 || x.rows() % joints != 0) {
    throw DimensionError("graph_aggregate: rows must be a multiple of the joint count");
  }
  const Index frames = x.rows() / joints;
  Matrix out(x.rows(), x.cols());
  for (Index f = 0; f < frames; ++f) out.middleRows(f * joints, joints).noalias() = adjacency * x.value().middleRows(f * joints, joints);
  return make(std::move(out), {x.node()}, [adjacency, joints, frames](Node& n) {
    auto& p = *n.parents[0];
    Matrix g(p.value.rows(), p.value.cols());
    const Matrix at = adjacency.transpose();
    for (Index f = 0; f < frames; ++f) g.middleRows(f * joints, joints).noalias() = at * n.grad.middleRows(f * joints, joints);
    p.accumulate(g);
  });
}

Var temporal_conv(const Var& x, const Var& kernel, Index sequences, Index frames, Index joints) {
  const Index k = kernel.rows();
  if (k % 2 == 0) throw ConfigError("temporal_conv: kernel size must be odd");
  if (kernel.cols() != x.cols()) throw DimensionError("temporal_conv: kernel width must match channels");
  if (x.rows() != sequences * frames * joints) throw DimensionError("temporal_conv: row layout mismatch");
  const Index pad = k / 2;
  const Matrix& xv = x.value();
  const Matrix& w = kernel.value();
  Matrix out = Matrix::Zero(xv.rows(), xv.cols());
  // For tap j the output frame t reads input frame t + (j - pad); within one
  // sequence the valid output frames form a contiguous range of rows.
  auto for_each_tap = [&](auto&& body) {
    for (Index j = 0; j < k; ++j) {
      const Index offset = j - pad;
      const Index t_begin = std::max<Index>(0, -offset);
      const Index t_end = std::min<Index>(frames, frames - offset);
      if (t_end <= t_begin) continue;
      for (Index s = 0; s < sequences; ++s) {
        const Index out_row = (s * frames + t_begin) * joints;
        const Index in_row = (s * frames + t_begin + offset) * joints;
        body(j, out_row, in_row, (t_end - t_begin) * joints);
      }
    }
  };
  for_each_tap([&](Index j, Index out_row, Index in_row, Index count) {
    out.middleRows(out_row, count).array() += xv.middleRows(in_row, count).array().rowwise() * w.row(j).array();
  });
  return make(std::move(out), {x.node(), kernel.node()}, [sequences, frames, joints, k, pad](Node& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    Matrix dx, dw;
    if (px.requires_grad) dx = Matrix::Zero(px.value.rows(), px.value.cols());
    if (pw.requires_grad) dw = Matrix::Zero(pw.value.rows(), pw.value.cols());
    for (Index j = 0; j < k; ++j) {
      const Index offset = j - pad;
      const Index t_begin = std::max<Index>(0, -offset);
      const Index t_end = std::min<Index>(frames, frames - offset);
      if (t_end <= t_begin) continue;
      for (Index s = 0; s < sequences; ++s) {
        const Index out_row = (s * frames + t_begin) * joints;
        const Index in_row = (s * frames + t_begin + offset) * joints;
        const Index count = (t_end - t_begin) * joints;
        auto g = n.grad.middleRows(out_row, count);
        if (px.requires_grad) dx.middleRows(in_row, count).array() += g.array().rowwise() * pw.value.row(j).array();
        if (pw.requires_grad) dw.row(j) += g.cwiseProduct(px.value.middleRows(in_row, count)).colwise().sum();
      }
    }
    if (px.requires_grad) px.accumulate(dx);
    if (pw.requires_grad) pw.accumulate(dw);
  });
}

}  // namespace sugar::ad
