#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tasft/tensor.hpp"
#include "tasft/util.hpp"

namespace tasft {

using NodeId = std::size_t;

/// Reverse-mode differentiation tape over Tensor2.
///
/// Recording order is topological order; backward() visits nodes exactly once
/// in reverse and accumulates (sums) gradients, so parameters shared between
/// several ops are handled correctly. Leaves created with constant() are
/// stop-gradient: their gradient stays zero and nothing propagates through
/// them. Any non-finite forward value aborts with numeric_error.
class Tape {
 public:
  /// Trainable leaf: receives an accumulated gradient in backward().
  NodeId param(Tensor2 v) { return push_leaf(std::move(v), true); }

  /// Stop-gradient leaf: treated as a constant during differentiation.
  NodeId constant(Tensor2 v) { return push_leaf(std::move(v), false); }

  NodeId matmul(NodeId a, NodeId b) {
    Tensor2 out = ops::matmul(val(a), val(b));
    return push(std::move(out), {a, b}, "matmul", [a, b](Tape& t, const Tensor2& g) {
      if (t.needs(a)) t.acc(a, ops::matmul(g, ops::transpose(t.val(b))));
      if (t.needs(b)) t.acc(b, ops::matmul(ops::transpose(t.val(a)), g));
    });
  }

  NodeId transpose(NodeId a) {
    return push(ops::transpose(val(a)), {a}, "transpose", [a](Tape& t, const Tensor2& g) {
      if (t.needs(a)) t.acc(a, ops::transpose(g));
    });
  }

  NodeId add(NodeId a, NodeId b) {
    return push(ops::add(val(a), val(b)), {a, b}, "add", [a, b](Tape& t, const Tensor2& g) {
      if (t.needs(a)) t.acc(a, g);
      if (t.needs(b)) t.acc(b, g);
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    return push(ops::sub(val(a), val(b)), {a, b}, "sub", [a, b](Tape& t, const Tensor2& g) {
      if (t.needs(a)) t.acc(a, g);
      if (t.needs(b)) t.acc(b, ops::scale(g, -1.0));
    });
  }

  NodeId mul(NodeId a, NodeId b) {
    return push(ops::mul(val(a), val(b)), {a, b}, "mul", [a, b](Tape& t, const Tensor2& g) {
      if (t.needs(a)) t.acc(a, ops::mul(g, t.val(b)));
      if (t.needs(b)) t.acc(b, ops::mul(g, t.val(a)));
    });
  }

  NodeId scale(NodeId a, double c) {
    return push(ops::scale(val(a), c), {a}, "scale", [a, c](Tape& t, const Tensor2& g) {
      if (t.needs(a)) t.acc(a, ops::scale(g, c));
    });
  }

  NodeId add_scalar(NodeId a, double c) {
    return push(ops::add_scalar(val(a), c), {a}, "add_scalar",
                [a](Tape& t, const Tensor2& g) {
                  if (t.needs(a)) t.acc(a, g);
                });
  }

  NodeId add_rowvec(NodeId a, NodeId r) {
    return push(ops::add_rowvec(val(a), val(r)), {a, r}, "add_rowvec",
                [a, r](Tape& t, const Tensor2& g) {
                  if (t.needs(a)) t.acc(a, g);
                  if (t.needs(r)) {
                    Tensor2 gr(1, g.cols);
                    for (std::size_t i = 0; i < g.rows; ++i)
                      for (std::size_t j = 0; j < g.cols; ++j) gr.data[j] += g.at(i, j);
                    t.acc(r, std::move(gr));
                  }
                });
  }

  NodeId exp(NodeId a) {
    NodeId out = push(ops::exp(val(a)), {a}, "exp", nullptr);
    node(out).backprop = [a, out](Tape& t, const Tensor2& g) {
      if (t.needs(a)) t.acc(a, ops::mul(g, t.val(out)));
    };
    return out;
  }

  NodeId log(NodeId a) {
    return push(ops::log(val(a)), {a}, "log", [a](Tape& t, const Tensor2& g) {
      if (!t.needs(a)) return;
      Tensor2 ga = g;
      const Tensor2& x = t.val(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] /= x.data[i];
      t.acc(a, std::move(ga));
    });
  }

  NodeId relu(NodeId a) {
    return push(ops::relu(val(a)), {a}, "relu", [a](Tape& t, const Tensor2& g) {
      if (!t.needs(a)) return;
      Tensor2 ga = g;
      const Tensor2& x = t.val(a);
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (x.data[i] <= 0.0) ga.data[i] = 0.0;
      t.acc(a, std::move(ga));
    });
  }

  NodeId clamp_min(NodeId a, double lo) {
    Tensor2 out = ops::clamp_min(val(a), lo, &clamp_hits_);
    return push(std::move(out), {a}, "clamp_min", [a, lo](Tape& t, const Tensor2& g) {
      if (!t.needs(a)) return;
      Tensor2 ga = g;
      const Tensor2& x = t.val(a);
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (x.data[i] < lo) ga.data[i] = 0.0;
      t.acc(a, std::move(ga));
    });
  }

  NodeId gather_rows(NodeId a, std::vector<int> idx) {
    Tensor2 out = ops::gather_rows(val(a), idx);
    return push(std::move(out), {a}, "gather_rows",
                [a, idx = std::move(idx)](Tape& t, const Tensor2& g) {
                  if (!t.needs(a)) return;
                  Tensor2 ga(t.val(a).rows, t.val(a).cols);
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    const double* src = g.row_ptr(i);
                    double* dst = ga.row_ptr(idx[i]);
                    for (std::size_t j = 0; j < g.cols; ++j) dst[j] += src[j];
                  }
                  t.acc(a, std::move(ga));
                });
  }

  NodeId take_per_row(NodeId a, std::vector<int> idx) {
    Tensor2 out = ops::take_per_row(val(a), idx);
    return push(std::move(out), {a}, "take_per_row",
                [a, idx = std::move(idx)](Tape& t, const Tensor2& g) {
                  if (!t.needs(a)) return;
                  Tensor2 ga(t.val(a).rows, t.val(a).cols);
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    ga.at(i, idx[i]) += g.data[i];
                  t.acc(a, std::move(ga));
                });
  }

  NodeId softmax_rows(NodeId a) {
    NodeId out = push(ops::softmax_rows(val(a)), {a}, "softmax_rows", nullptr);
    node(out).backprop = [a, out](Tape& t, const Tensor2& g) {
      if (!t.needs(a)) return;
      const Tensor2& y = t.val(out);
      Tensor2 ga(y.rows, y.cols);
      for (std::size_t i = 0; i < y.rows; ++i) {
        const double* yr = y.row_ptr(i);
        const double* gr = g.row_ptr(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < y.cols; ++j) dot += gr[j] * yr[j];
        double* out_row = ga.row_ptr(i);
        for (std::size_t j = 0; j < y.cols; ++j) out_row[j] = yr[j] * (gr[j] - dot);
      }
      t.acc(a, std::move(ga));
    };
    return out;
  }

  NodeId layer_norm_rows(NodeId a, double eps = 1e-5) {
    const Tensor2& x = val(a);
    std::vector<double> inv(x.rows);
    const double n = static_cast<double>(x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
      const double* row = x.row_ptr(i);
      double mean = 0.0;
      for (std::size_t j = 0; j < x.cols; ++j) mean += row[j];
      mean /= n;
      double var = 0.0;
      for (std::size_t j = 0; j < x.cols; ++j) {
        const double d = row[j] - mean;
        var += d * d;
      }
      inv[i] = 1.0 / std::sqrt(var / n + eps);
    }
    NodeId out = push(ops::layer_norm_rows(val(a), eps), {a}, "layer_norm_rows", nullptr);
    node(out).backprop = [a, out, inv = std::move(inv)](Tape& t, const Tensor2& g) {
      if (!t.needs(a)) return;
      const Tensor2& y = t.val(out);
      const double n = static_cast<double>(y.cols);
      Tensor2 ga(y.rows, y.cols);
      for (std::size_t i = 0; i < y.rows; ++i) {
        const double* yr = y.row_ptr(i);
        const double* gr = g.row_ptr(i);
        double gmean = 0.0, gymean = 0.0;
        for (std::size_t j = 0; j < y.cols; ++j) {
          gmean += gr[j];
          gymean += gr[j] * yr[j];
        }
        gmean /= n;
        gymean /= n;
        double* out_row = ga.row_ptr(i);
        for (std::size_t j = 0; j < y.cols; ++j)
          out_row[j] = inv[i] * (gr[j] - gmean - yr[j] * gymean);
      }
      t.acc(a, std::move(ga));
    };
    return out;
  }

  NodeId sum(NodeId a) {
    return push(ops::sum_all(val(a)), {a}, "sum", [a](Tape& t, const Tensor2& g) {
      if (!t.needs(a)) return;
      t.acc(a, Tensor2(t.val(a).rows, t.val(a).cols, g.data[0]));
    });
  }

  NodeId mean(NodeId a) {
    return push(ops::mean_all(val(a)), {a}, "mean", [a](Tape& t, const Tensor2& g) {
      if (!t.needs(a)) return;
      const double c = g.data[0] / static_cast<double>(t.val(a).size());
      t.acc(a, Tensor2(t.val(a).rows, t.val(a).cols, c));
    });
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every leaf. loss must be a
  /// 1x1 scalar. May be called repeatedly; gradients are reset each time.
  void backward(NodeId loss) {
    const Tensor2& lv = val(loss);
    if (lv.rows != 1 || lv.cols != 1)
      throw std::invalid_argument("backward: loss node must be 1x1 scalar");
    for (auto& n : nodes_) {
      n.grad.rows = n.value.rows;
      n.grad.cols = n.value.cols;
      n.grad.data.assign(n.value.size(), 0.0);
    }
    nodes_[loss].grad.data[0] = 1.0;
    for (std::size_t i = loss + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backprop && n.requires_grad) n.backprop(*this, n.grad);
    }
    ran_backward_ = true;
  }

  const Tensor2& value(NodeId id) const { return nodes_[id].value; }

  const Tensor2& grad(NodeId id) const {
    if (!ran_backward_) throw std::logic_error("grad: backward() has not run");
    return nodes_[id].grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Number of elements clamped by clamp_min ops so far (logged by callers
  /// when the NLCL clamp boundary is hit).
  std::size_t clamp_hits() const { return clamp_hits_; }

 private:
  struct Node {
    Tensor2 value;
    Tensor2 grad;
    bool requires_grad = false;
    std::function<void(Tape&, const Tensor2&)> backprop;
  };

  std::deque<Node> nodes_;  // deque: node references stay valid as the tape grows
  std::size_t clamp_hits_ = 0;
  bool ran_backward_ = false;

  const Tensor2& val(NodeId id) const { return nodes_[id].value; }
  Node& node(NodeId id) { return nodes_[id]; }
  bool needs(NodeId id) const { return nodes_[id].requires_grad; }

  void acc(NodeId id, Tensor2 g) {
    Tensor2& dst = nodes_[id].grad;
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += g.data[i];
  }

  NodeId push_leaf(Tensor2 v, bool trainable) {
    if (!v.all_finite()) throw numeric_error("tape leaf holds non-finite values");
    Node n;
    n.value = std::move(v);
    n.requires_grad = trainable;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId push(Tensor2 v, std::initializer_list<NodeId> parents, const char* op,
              std::function<void(Tape&, const Tensor2&)> backprop) {
    if (!v.all_finite())
      throw numeric_error(std::string("non-finite forward value in op ") + op);
    Node n;
    n.value = std::move(v);
    for (NodeId p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }
};

}  // namespace tasft
