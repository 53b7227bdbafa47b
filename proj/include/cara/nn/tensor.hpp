#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cara::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// A trainable tensor. Gradients accumulate into `grad` during Tape::backward
// and are consumed by the optimizers.
struct Param {
  Mat value;
  Mat grad;
  std::string name;

  Param() = default;
  Param(Eigen::Index rows, Eigen::Index cols, std::string n)
      : value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)), name(std::move(n)) {}

  void zero_grad() { grad.setZero(); }
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid as long as its tape lives.
struct Var {
  Tape* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
  const Mat& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
};

// Reverse-mode tape. Nodes are appended in forward (topological) order;
// backward replays them in reverse. With grad_enabled=false the tape only
// stores values, which makes it double as a plain evaluator.
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void()> backfn;
    bool needs_grad = false;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var push(Mat value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), Mat(), nullptr, needs_grad && grad_enabled_});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

  bool needs_grad(int i) const { return nodes_[static_cast<std::size_t>(i)].needs_grad; }

  // Gradient buffer of node i, zero-initialized on first touch.
  Mat& grad_of(int i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool has_grad(int i) const { return nodes_[static_cast<std::size_t>(i)].grad.size() != 0; }

  // One leaf node per Param per tape, so repeated uses share a gradient.
  Var leaf(Param& p) {
    auto it = leaf_cache_.find(&p);
    if (it != leaf_cache_.end()) return Var{this, it->second};
    Var v = push(p.value, true);
    leaf_cache_[&p] = v.idx;
    if (grad_enabled_) {
      Param* pp = &p;
      int idx = v.idx;
      node(idx).backfn = [this, pp, idx]() { pp->grad += node(idx).grad; };
    }
    return v;
  }

  Var constant(Mat m) { return push(std::move(m), false); }

  void backward(Var root) {
    if (!grad_enabled_)
      throw std::runtime_error("backward on a no-grad tape");
    if (root.val().size() != 1)
      throw std::runtime_error("backward root must be scalar");
    grad_of(root.idx).setConstant(1.0);
    for (int i = root.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.needs_grad && n.grad.size() != 0 && n.backfn) n.backfn();
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<Param*, int> leaf_cache_;
  bool grad_enabled_;
};

inline const Mat& Var::val() const { return tape->node(idx).value; }

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.valid()) throw std::runtime_error("use of invalid Var");
  return *a.tape;
}

inline void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::runtime_error("Vars from different tapes");
}

}  // namespace detail

// --- elementwise and linear-algebra ops -------------------------------------

inline Var matmul(Var a, Var b) {
  detail::check_same_tape(a, b);
  Tape& t = detail::tape_of(a);
  if (a.cols() != b.rows()) throw std::runtime_error("matmul: shape mismatch");
  Mat v = a.val() * b.val();
  const bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int ia = a.idx, ib = b.idx, k = out.idx;
    t.node(k).backfn = [&t, ia, ib, k]() {
      const Mat& g = t.node(k).grad;
      if (t.needs_grad(ia)) t.grad_of(ia).noalias() += g * t.node(ib).value.transpose();
      if (t.needs_grad(ib)) t.grad_of(ib).noalias() += t.node(ia).value.transpose() * g;
    };
  }
  return out;
}

// aᵀ·b without materializing a transpose node.
inline Var matmul_t1(Var a, Var b) {
  detail::check_same_tape(a, b);
  Tape& t = detail::tape_of(a);
  if (a.rows() != b.rows()) throw std::runtime_error("matmul_t1: shape mismatch");
  Mat v = a.val().transpose() * b.val();
  const bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int ia = a.idx, ib = b.idx, k = out.idx;
    t.node(k).backfn = [&t, ia, ib, k]() {
      const Mat& g = t.node(k).grad;
      if (t.needs_grad(ia)) t.grad_of(ia).noalias() += t.node(ib).value * g.transpose();
      if (t.needs_grad(ib)) t.grad_of(ib).noalias() += t.node(ia).value * g;
    };
  }
  return out;
}

namespace detail {

template <class Fwd, class Bwd>
Var binary_op(Var a, Var b, Fwd fwd, Bwd bwd) {
  check_same_tape(a, b);
  Tape& t = tape_of(a);
  Mat v = fwd(a.val(), b.val());
  const bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int ia = a.idx, ib = b.idx, k = out.idx;
    t.node(k).backfn = [&t, ia, ib, k, bwd]() { bwd(t, ia, ib, k); };
  }
  return out;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::runtime_error("add: shape mismatch");
  return detail::binary_op(
      a, b, [](const Mat& x, const Mat& y) { return Mat(x + y); },
      [](Tape& t, int ia, int ib, int k) {
        const Mat& g = t.node(k).grad;
        if (t.needs_grad(ia)) t.grad_of(ia) += g;
        if (t.needs_grad(ib)) t.grad_of(ib) += g;
      });
}

inline Var sub(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::runtime_error("sub: shape mismatch");
  return detail::binary_op(
      a, b, [](const Mat& x, const Mat& y) { return Mat(x - y); },
      [](Tape& t, int ia, int ib, int k) {
        const Mat& g = t.node(k).grad;
        if (t.needs_grad(ia)) t.grad_of(ia) += g;
        if (t.needs_grad(ib)) t.grad_of(ib) -= g;
      });
}

inline Var cmul(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::runtime_error("cmul: shape mismatch");
  return detail::binary_op(
      a, b, [](const Mat& x, const Mat& y) { return Mat(x.cwiseProduct(y)); },
      [](Tape& t, int ia, int ib, int k) {
        const Mat& g = t.node(k).grad;
        if (t.needs_grad(ia)) t.grad_of(ia) += g.cwiseProduct(t.node(ib).value);
        if (t.needs_grad(ib)) t.grad_of(ib) += g.cwiseProduct(t.node(ia).value);
      });
}

// Broadcast-add a column vector across every column of a.
inline Var add_bias(Var a, Var bias) {
  detail::check_same_tape(a, bias);
  if (bias.cols() != 1 || bias.rows() != a.rows())
    throw std::runtime_error("add_bias: bias must be [rows x 1]");
  Tape& t = detail::tape_of(a);
  Mat v = a.val();
  v.colwise() += Vec(bias.val().col(0));
  const bool ng = t.needs_grad(a.idx) || t.needs_grad(bias.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int ia = a.idx, ib = bias.idx, k = out.idx;
    t.node(k).backfn = [&t, ia, ib, k]() {
      const Mat& g = t.node(k).grad;
      if (t.needs_grad(ia)) t.grad_of(ia) += g;
      if (t.needs_grad(ib)) t.grad_of(ib) += g.rowwise().sum();
    };
  }
  return out;
}

namespace detail {

template <class Fwd, class Bwd>
Var unary_op(Var a, Fwd fwd, Bwd bwd) {
  Tape& t = tape_of(a);
  Mat v = fwd(a.val());
  const bool ng = t.needs_grad(a.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int ia = a.idx, k = out.idx;
    t.node(k).backfn = [&t, ia, k, bwd]() { bwd(t, ia, k); };
  }
  return out;
}

}  // namespace detail

inline Var scale(Var a, double c) {
  return detail::unary_op(
      a, [c](const Mat& x) { return Mat(x * c); },
      [c](Tape& t, int ia, int k) { t.grad_of(ia) += t.node(k).grad * c; });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var add_scalar(Var a, double c) {
  return detail::unary_op(
      a, [c](const Mat& x) { return Mat(x.array() + c); },
      [](Tape& t, int ia, int k) { t.grad_of(ia) += t.node(k).grad; });
}

inline Var vtanh(Var a) {
  return detail::unary_op(
      a, [](const Mat& x) { return Mat(x.array().tanh()); },
      [](Tape& t, int ia, int k) {
        const Mat& y = t.node(k).value;
        t.grad_of(ia).array() += t.node(k).grad.array() * (1.0 - y.array().square());
      });
}

inline Var vsigmoid(Var a) {
  return detail::unary_op(
      a,
      [](const Mat& x) {
        return Mat((1.0 / (1.0 + (-x.array()).exp())).matrix());
      },
      [](Tape& t, int ia, int k) {
        const Mat& y = t.node(k).value;
        t.grad_of(ia).array() += t.node(k).grad.array() * y.array() * (1.0 - y.array());
      });
}

inline Var vrelu(Var a) {
  return detail::unary_op(
      a, [](const Mat& x) { return Mat(x.cwiseMax(0.0)); },
      [](Tape& t, int ia, int k) {
        t.grad_of(ia).array() +=
            t.node(k).grad.array() * (t.node(ia).value.array() > 0.0).cast<double>();
      });
}

inline Var vsqrt(Var a) {
  return detail::unary_op(
      a, [](const Mat& x) { return Mat(x.array().sqrt()); },
      [](Tape& t, int ia, int k) {
        t.grad_of(ia).array() += t.node(k).grad.array() * 0.5 / t.node(k).value.array();
      });
}

inline Var vmax(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::runtime_error("vmax: shape mismatch");
  return detail::binary_op(
      a, b, [](const Mat& x, const Mat& y) { return Mat(x.cwiseMax(y)); },
      [](Tape& t, int ia, int ib, int k) {
        const Mat& g = t.node(k).grad;
        Eigen::ArrayXXd take_a =
            (t.node(ia).value.array() >= t.node(ib).value.array()).cast<double>();
        if (t.needs_grad(ia)) t.grad_of(ia).array() += g.array() * take_a;
        if (t.needs_grad(ib)) t.grad_of(ib).array() += g.array() * (1.0 - take_a);
      });
}

// --- reductions --------------------------------------------------------------

inline Var sum_all(Var a) {
  return detail::unary_op(
      a,
      [](const Mat& x) {
        Mat v(1, 1);
        v(0, 0) = x.sum();
        return v;
      },
      [](Tape& t, int ia, int k) {
        t.grad_of(ia).array() += t.node(k).grad(0, 0);
      });
}

inline Var mean_all(Var a) {
  const double n = static_cast<double>(a.rows() * a.cols());
  return scale(sum_all(a), 1.0 / n);
}

// Column sums: [R x C] -> [1 x C].
inline Var sum_rows(Var a) {
  return detail::unary_op(
      a, [](const Mat& x) { return Mat(x.colwise().sum()); },
      [](Tape& t, int ia, int k) {
        const Mat& g = t.node(k).grad;  // 1 x C
        t.grad_of(ia) += Mat::Ones(t.node(ia).value.rows(), 1) * g;
      });
}

// --- structural ops ----------------------------------------------------------

inline Var concat_rows(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.cols()) throw std::runtime_error("concat_rows: column mismatch");
  Tape& t = detail::tape_of(a);
  Mat v(a.rows() + b.rows(), a.cols());
  v.topRows(a.rows()) = a.val();
  v.bottomRows(b.rows()) = b.val();
  const bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int ia = a.idx, ib = b.idx, k = out.idx;
    const Eigen::Index ra = a.rows(), rb = b.rows();
    t.node(k).backfn = [&t, ia, ib, k, ra, rb]() {
      const Mat& g = t.node(k).grad;
      if (t.needs_grad(ia)) t.grad_of(ia) += g.topRows(ra);
      if (t.needs_grad(ib)) t.grad_of(ib) += g.bottomRows(rb);
    };
  }
  return out;
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_rows: empty");
  Var out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out = concat_rows(out, parts[i]);
  return out;
}

inline Var slice_rows(Var a, Eigen::Index r0, Eigen::Index nrows) {
  Tape& t = detail::tape_of(a);
  if (r0 < 0 || r0 + nrows > a.rows()) throw std::runtime_error("slice_rows: out of range");
  Mat v = a.val().middleRows(r0, nrows);
  const bool ng = t.needs_grad(a.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int ia = a.idx, k = out.idx;
    t.node(k).backfn = [&t, ia, k, r0, nrows]() {
      t.grad_of(ia).middleRows(r0, nrows) += t.node(k).grad;
    };
  }
  return out;
}

inline Var gather_cols(Var a, std::vector<int> cols) {
  Tape& t = detail::tape_of(a);
  Mat v(a.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] < 0 || cols[j] >= a.cols())
      throw std::runtime_error("gather_cols: index out of range");
    v.col(static_cast<Eigen::Index>(j)) = a.val().col(cols[j]);
  }
  const bool ng = t.needs_grad(a.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int ia = a.idx, k = out.idx;
    t.node(k).backfn = [&t, ia, k, cols = std::move(cols)]() {
      const Mat& g = t.node(k).grad;
      Mat& ga = t.grad_of(ia);
      for (std::size_t j = 0; j < cols.size(); ++j)
        ga.col(cols[j]) += g.col(static_cast<Eigen::Index>(j));
    };
  }
  return out;
}

// Embedding lookup straight from a Param table [dim x vocab]; the backward
// pass scatter-adds into the table gradient.
inline Var embed(Tape& t, Param& table, std::vector<int> ids) {
  Mat v(table.value.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] < 0 || ids[j] >= table.value.cols())
      throw std::runtime_error("embed: token id out of range");
    v.col(static_cast<Eigen::Index>(j)) = table.value.col(ids[j]);
  }
  Var out = t.push(std::move(v), true);
  if (t.grad_enabled()) {
    Param* tp = &table;
    int k = out.idx;
    t.node(k).backfn = [&t, tp, k, ids = std::move(ids)]() {
      const Mat& g = t.node(k).grad;
      for (std::size_t j = 0; j < ids.size(); ++j)
        tp->grad.col(ids[j]) += g.col(static_cast<Eigen::Index>(j));
    };
  }
  return out;
}

// Per-column timestep selection: out.col(j) = seq[t_idx[j]].col(j).
inline Var gather_time(const std::vector<Var>& seq, std::vector<int> t_idx) {
  if (seq.empty()) throw std::runtime_error("gather_time: empty sequence");
  Tape& t = detail::tape_of(seq[0]);
  const Eigen::Index rows = seq[0].rows();
  const Eigen::Index cols = seq[0].cols();
  if (static_cast<Eigen::Index>(t_idx.size()) != cols)
    throw std::runtime_error("gather_time: index count must equal batch size");
  Mat v(rows, cols);
  bool ng = false;
  std::vector<int> seq_idx(seq.size());
  for (std::size_t s = 0; s < seq.size(); ++s) {
    seq_idx[s] = seq[s].idx;
    ng = ng || t.needs_grad(seq[s].idx);
  }
  for (Eigen::Index j = 0; j < cols; ++j) {
    int ts = t_idx[static_cast<std::size_t>(j)];
    if (ts < 0 || ts >= static_cast<int>(seq.size()))
      throw std::runtime_error("gather_time: timestep out of range");
    v.col(j) = seq[static_cast<std::size_t>(ts)].val().col(j);
  }
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int k = out.idx;
    t.node(k).backfn = [&t, k, seq_idx = std::move(seq_idx), t_idx = std::move(t_idx)]() {
      const Mat& g = t.node(k).grad;
      for (Eigen::Index j = 0; j < g.cols(); ++j) {
        int node_id = seq_idx[static_cast<std::size_t>(t_idx[static_cast<std::size_t>(j)])];
        if (t.needs_grad(node_id)) t.grad_of(node_id).col(j) += g.col(j);
      }
    };
  }
  return out;
}

// Normalize each column to unit Euclidean norm.
inline Var unit_normalize_cols(Var a) {
  Tape& t = detail::tape_of(a);
  Vec norms = a.val().colwise().norm();
  for (Eigen::Index j = 0; j < norms.size(); ++j)
    if (norms(j) < 1e-12)
      throw std::runtime_error("unit_normalize_cols: zero-norm column");
  Mat v = a.val().array().rowwise() / norms.transpose().array();
  const bool ng = t.needs_grad(a.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int ia = a.idx, k = out.idx;
    t.node(k).backfn = [&t, ia, k, norms = std::move(norms)]() {
      const Mat& g = t.node(k).grad;
      const Mat& y = t.node(k).value;
      Mat& ga = t.grad_of(ia);
      for (Eigen::Index j = 0; j < g.cols(); ++j) {
        double dot = y.col(j).dot(g.col(j));
        ga.col(j) += (g.col(j) - y.col(j) * dot) / norms(j);
      }
    };
  }
  return out;
}

// Fused masked softmax cross-entropy over columns. logits: [V x B],
// targets[j] is the gold row for column j, mask[j]=0 drops the column.
// Returns the summed loss as a 1x1 node; the caller divides by the count.
inline Var softmax_xent_sum(Var logits, std::vector<int> targets,
                            std::vector<unsigned char> mask) {
  Tape& t = detail::tape_of(logits);
  const Eigen::Index V = logits.rows(), B = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != B ||
      static_cast<Eigen::Index>(mask.size()) != B)
    throw std::runtime_error("softmax_xent_sum: target/mask size mismatch");
  Mat probs(V, B);
  double loss = 0.0;
  for (Eigen::Index j = 0; j < B; ++j) {
    Vec col = logits.val().col(j);
    double m = col.maxCoeff();
    Vec e = (col.array() - m).exp();
    double z = e.sum();
    probs.col(j) = e / z;
    if (mask[static_cast<std::size_t>(j)]) {
      int y = targets[static_cast<std::size_t>(j)];
      if (y < 0 || y >= V) throw std::runtime_error("softmax_xent_sum: bad target");
      loss += -(col(y) - m - std::log(z));
    }
  }
  Mat v(1, 1);
  v(0, 0) = loss;
  const bool ng = t.needs_grad(logits.idx);
  Var out = t.push(std::move(v), ng);
  if (ng && t.grad_enabled()) {
    int il = logits.idx, k = out.idx;
    t.node(k).backfn = [&t, il, k, probs = std::move(probs),
                        targets = std::move(targets), mask = std::move(mask)]() {
      const double g = t.node(k).grad(0, 0);
      Mat& gl = t.grad_of(il);
      for (Eigen::Index j = 0; j < gl.cols(); ++j) {
        if (!mask[static_cast<std::size_t>(j)]) continue;
        gl.col(j) += g * probs.col(j);
        gl(targets[static_cast<std::size_t>(j)], j) -= g;
      }
    };
  }
  return out;
}

// --- plain (no-tape) helpers used by evaluation paths ------------------------

inline Mat softmax_cols(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Vec col = logits.col(j);
    double m = col.maxCoeff();
    Vec e = (col.array() - m).exp();
    out.col(j) = e / e.sum();
  }
  return out;
}

inline std::vector<int> argmax_cols(const Mat& m) {
  std::vector<int> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    Eigen::Index r;
    m.col(j).maxCoeff(&r);
    out[static_cast<std::size_t>(j)] = static_cast<int>(r);
  }
  return out;
}

// Per-column negative log-likelihood of the target row.
inline Vec softmax_nll_cols(const Mat& logits, const std::vector<int>& targets) {
  Vec out(logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Vec col = logits.col(j);
    double m = col.maxCoeff();
    double z = (col.array() - m).exp().sum();
    out(j) = -(col(targets[static_cast<std::size_t>(j)]) - m - std::log(z));
  }
  return out;
}

}  // namespace cara::nn
