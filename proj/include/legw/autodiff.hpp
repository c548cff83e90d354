// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "legw/errors.hpp"
#include "legw/tensor.hpp"

namespace legw {

/// Handle to a node of a TapeGraph.
struct NodeId {
  std::int32_t index = -1;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind {
  kInput,
  kConstant,
  kMatMul,
  kAdd,
  kMul,
  kSigmoid,
  kTanh,
  kRelu,
  kSoftmaxCrossEntropy,
  kSliceCols,
  kConcatCols,
  kSum,
  kMean,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
  }
  return "?";
}

/// A recorded computation. Nodes are appended in topological order by
/// construction: every builder call may only reference existing nodes.
/// Shapes are resolved at forward time, so one graph serves any batch size.
///
/// Inputs are named placeholders. An input declared with an expected shape
/// (-1 marks a free dimension) is validated on every forward().
class TapeGraph {
 public:
  struct Node {
    OpKind op;
    std::vector<NodeId> inputs;
    std::string label;
    std::int64_t begin = 0;  // slice_cols
    std::int64_t end = 0;
    std::optional<Shape> expected_shape;  // inputs only
    bool differentiable = true;           // inputs only
  };

  NodeId input(std::string name, std::optional<Shape> expected_shape = std::nullopt,
               bool differentiable = true) {
    if (input_index_.count(name)) throw InvalidArgument("duplicate graph input '" + name + "'");
    Node n = make_node(OpKind::kInput, {}, name);
    n.expected_shape = std::move(expected_shape);
    n.differentiable = differentiable;
    const NodeId id = push(std::move(n));
    input_index_.emplace(nodes_[id.index].label, id);
    return id;
  }

  NodeId constant(Tensor value, std::string label = "constant") {
    const NodeId id = push(make_node(OpKind::kConstant, {}, std::move(label)));
    constants_.emplace(id.index, std::move(value));
    return id;
  }

  NodeId matmul(NodeId a, NodeId b) { return push(make_node(OpKind::kMatMul, {check(a), check(b)}, "matmul")); }
  /// Elementwise sum; `b` may also be a row vector broadcast over the rows of
  /// `a`, or a scalar.
  NodeId add(NodeId a, NodeId b) { return push(make_node(OpKind::kAdd, {check(a), check(b)}, "add")); }
  /// Elementwise (Hadamard) product; `b` may be a scalar.
  NodeId mul(NodeId a, NodeId b) { return push(make_node(OpKind::kMul, {check(a), check(b)}, "mul")); }
  NodeId sigmoid(NodeId a) { return push(make_node(OpKind::kSigmoid, {check(a)}, "sigmoid")); }
  NodeId tanh(NodeId a) { return push(make_node(OpKind::kTanh, {check(a)}, "tanh")); }
  NodeId relu(NodeId a) { return push(make_node(OpKind::kRelu, {check(a)}, "relu")); }
  /// Mean over rows of -log softmax(logits)[label]. `labels` holds one class
  /// index per row of `logits`.
  NodeId softmax_cross_entropy(NodeId logits, NodeId labels) {
    return push(make_node(OpKind::kSoftmaxCrossEntropy, {check(logits), check(labels)}, "softmax_cross_entropy"));
  }
  /// Columns [begin, end) of a matrix.
  NodeId slice_cols(NodeId a, std::int64_t begin, std::int64_t end) {
    if (begin < 0 || end <= begin) throw InvalidArgument("slice_cols: empty or negative range");
    Node n = make_node(OpKind::kSliceCols, {check(a)}, "slice_cols");
    n.begin = begin;
    n.end = end;
    return push(std::move(n));
  }
  NodeId concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw InvalidArgument("concat_cols of nothing");
    for (auto p : parts) check(p);
    return push(make_node(OpKind::kConcatCols, parts, "concat_cols"));
  }
  NodeId sum(NodeId a) { return push(make_node(OpKind::kSum, {check(a)}, "sum")); }
  NodeId mean(NodeId a) { return push(make_node(OpKind::kMean, {check(a)}, "mean")); }

  /// Relabels a node; used for error messages and lookups.
  void set_label(NodeId id, std::string label) { nodes_.at(check(id).index).label = std::move(label); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(check(id).index); }

  std::vector<std::string> input_names() const {
    std::vector<std::string> names;
    for (const auto& [name, _] : input_index_) names.push_back(name);
    return names;
  }
  std::optional<NodeId> find_input(const std::string& name) const {
    const auto it = input_index_.find(name);
    if (it == input_index_.end()) return std::nullopt;
    return it->second;
  }

  bool has_values() const noexcept { return values_.size() == nodes_.size() && !nodes_.empty(); }
  const Tensor& value(NodeId id) const {
    if (!has_values()) throw Error("graph has not been evaluated");
    return values_.at(check(id).index);
  }

  /// Evaluates every node. Intermediate values are retained for backward().
  void evaluate(const NamedTensors& inputs);

  /// Reverse sweep from a scalar `output`; returns the gradient of every
  /// differentiable input. Inputs the output does not depend on get zeros.
  NamedTensors gradients(NodeId output) const;

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    values_.clear();
    return NodeId{static_cast<std::int32_t>(nodes_.size() - 1)};
  }
  NodeId check(NodeId id) const {
    if (id.index < 0 || static_cast<std::size_t>(id.index) >= nodes_.size()) {
      throw InvalidArgument("node id " + std::to_string(id.index) + " is not part of this graph");
    }
    return id;
  }

  static Node make_node(OpKind op, std::vector<NodeId> inputs, std::string label) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.label = std::move(label);
    return n;
  }

  [[noreturn]] void shape_fail(std::size_t i, const std::string& what) const {
    throw ShapeError(static_cast<std::int64_t>(i), std::string(op_name(nodes_[i].op)) + " '" + nodes_[i].label + "'",
                     what);
  }

  Tensor eval_node(std::size_t i) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> input_index_;
  std::map<std::int32_t, Tensor> constants_;
  std::vector<Tensor> values_;
  // Softmax probabilities saved by each cross-entropy node for its backward.
  mutable std::map<std::int32_t, Tensor> softmax_cache_;
};

namespace detail {

inline bool row_broadcast(const Tensor& a, const Tensor& b) {
  return a.rank() == 2 && b.rank() <= 2 && b.rows() == 1 && b.cols() == a.cols();
}

inline double sigmoid(double x) {
  // Split by sign so exp() never overflows.
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor TapeGraph::eval_node(std::size_t i) const {
  const Node& n = nodes_[i];
  auto in = [&](std::size_t k) -> const Tensor& { return values_[n.inputs[k].index]; };
  switch (n.op) {
    case OpKind::kInput:
    case OpKind::kConstant:
      break;  // handled by evaluate()
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() > 2 || b.rank() > 2 || a.cols() != b.rows()) {
        shape_fail(i, "cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
      }
      Tensor out(Shape{a.rows(), b.cols()});
      out.matrix().noalias() = a.matrix() * b.matrix();
      return out;
    }
    case OpKind::kAdd:
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      Tensor out = a;
      auto data = out.data();
      const bool is_add = n.op == OpKind::kAdd;
      if (a.shape() == b.shape()) {
        for (std::int64_t k = 0; k < a.size(); ++k) data[k] = is_add ? data[k] + b[k] : data[k] * b[k];
      } else if (b.size() == 1) {
        const double s = b[0];
        for (double& v : data) v = is_add ? v + s : v * s;
      } else if (is_add && detail::row_broadcast(a, b)) {
        const std::int64_t cols = a.cols();
        for (std::int64_t r = 0; r < a.rows(); ++r) {
          for (std::int64_t c = 0; c < cols; ++c) data[r * cols + c] += b[c];
        }
      } else {
        shape_fail(i, "incompatible operands " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
      }
      return out;
    }
    case OpKind::kSigmoid:
    case OpKind::kTanh:
    case OpKind::kRelu: {
      Tensor out = in(0);
      for (double& v : out.data()) {
        if (n.op == OpKind::kSigmoid) v = detail::sigmoid(v);
        else if (n.op == OpKind::kTanh) v = std::tanh(v);
        else v = v > 0.0 ? v : 0.0;
      }
      return out;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      const Tensor& z = in(0);
      const Tensor& y = in(1);
      const std::int64_t rows = z.rows();
      const std::int64_t cols = z.cols();
      if (z.rank() > 2 || y.size() != rows) {
        shape_fail(i, "logits " + shape_string(z.shape()) + " need one label per row, got " + shape_string(y.shape()));
      }
      Tensor probs(Shape{rows, cols});
      double total = 0.0;
      for (std::int64_t r = 0; r < rows; ++r) {
        const double label_value = y[r];
        const auto label = static_cast<std::int64_t>(label_value);
        if (label_value != static_cast<double>(label) || label < 0 || label >= cols) {
          shape_fail(i, "label " + std::to_string(label_value) + " out of range [0, " + std::to_string(cols) + ")");
        }
        double m = -std::numeric_limits<double>::infinity();
        for (std::int64_t c = 0; c < cols; ++c) m = std::max(m, z.at(r, c));
        double s = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) s += std::exp(z.at(r, c) - m);
        const double lse = m + std::log(s);
        for (std::int64_t c = 0; c < cols; ++c) probs.at(r, c) = std::exp(z.at(r, c) - lse);
        total += lse - z.at(r, label);
      }
      softmax_cache_[static_cast<std::int32_t>(i)] = std::move(probs);
      return Tensor::scalar(total / static_cast<double>(rows));
    }
    case OpKind::kSliceCols: {
      const Tensor& a = in(0);
      if (a.rank() > 2 || n.end > a.cols()) {
        shape_fail(i, "columns [" + std::to_string(n.begin) + "," + std::to_string(n.end) + ") of " +
                          shape_string(a.shape()));
      }
      const std::int64_t width = n.end - n.begin;
      Tensor out(Shape{a.rows(), width});
      out.matrix() = a.matrix().middleCols(n.begin, width);
      return out;
    }
    case OpKind::kConcatCols: {
      const std::int64_t rows = in(0).rows();
      std::int64_t width = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = in(k);
        if (part.rank() > 2 || part.rows() != rows) {
          shape_fail(i, "part " + std::to_string(k) + " has shape " + shape_string(part.shape()) + ", expected " +
                            std::to_string(rows) + " rows");
        }
        width += part.cols();
      }
      Tensor out(Shape{rows, width});
      std::int64_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = in(k);
        out.matrix().middleCols(offset, part.cols()) = part.matrix();
        offset += part.cols();
      }
      return out;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const Tensor& a = in(0);
      double s = 0.0;
      for (double v : a.data()) s += v;
      if (n.op == OpKind::kMean) s /= static_cast<double>(a.size());
      return Tensor::scalar(s);
    }
  }
  shape_fail(i, "unknown op");
}

inline void TapeGraph::evaluate(const NamedTensors& inputs) {
  for (const auto& [name, _] : inputs) {
    if (!input_index_.count(name)) throw InvalidArgument("graph has no input named '" + name + "'");
  }
  values_.clear();
  softmax_cache_.clear();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op == OpKind::kInput) {
      const auto it = inputs.find(n.label);
      if (it == inputs.end()) shape_fail(i, "no value supplied for input");
      if (n.expected_shape) {
        const Shape& want = *n.expected_shape;
        const Shape& got = it->second.shape();
        bool ok = want.size() == got.size();
        for (std::size_t d = 0; ok && d < want.size(); ++d) ok = want[d] < 0 || want[d] == got[d];
        if (!ok) shape_fail(i, "expected shape " + shape_string(want) + ", got " + shape_string(got));
      }
      values_.push_back(it->second);
    } else if (n.op == OpKind::kConstant) {
      values_.push_back(constants_.at(static_cast<std::int32_t>(i)));
    } else {
      values_.push_back(eval_node(i));
    }
  }
}

inline NamedTensors TapeGraph::gradients(NodeId output) const {
  check(output);
  if (!has_values()) throw Error("backward before forward");
  if (!values_[output.index].is_scalar()) {
    throw InvalidArgument("backward needs a scalar output, node " + std::to_string(output.index) + " has shape " +
                          shape_string(values_[output.index].shape()));
  }
  // Nodes with no differentiable input upstream receive no gradient.
  std::vector<char> needs(nodes_.size(), 0);
  for (std::size_t i = 0; i <= static_cast<std::size_t>(output.index); ++i) {
    const Node& n = nodes_[i];
    if (n.op == OpKind::kInput) {
      needs[i] = n.differentiable;
    } else {
      for (const NodeId& in : n.inputs) needs[i] = needs[i] || needs[in.index];
    }
  }
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[output.index] = Tensor(values_[output.index].shape(), 1.0);

  auto accumulate = [&](NodeId target, Tensor g) {
    auto& slot = grads[target.index];
    if (!slot) {
      slot = std::move(g);
      return;
    }
    auto dst = slot->data();
    auto src = g.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  };
  auto wants = [&](const Node& n, std::size_t k) { return needs[n.inputs[k].index] != 0; };
  // Reduces a full-shape gradient to the shape of a broadcast operand.
  auto reduce_to = [&](const Tensor& g, const Tensor& operand) -> Tensor {
    if (g.shape() == operand.shape()) return g;
    Tensor out(operand.shape());
    if (operand.size() == 1) {
      double s = 0.0;
      for (double v : g.data()) s += v;
      out[0] = s;
    } else {
      out.matrix() = g.matrix().colwise().sum();
    }
    return out;
  };

  for (std::int64_t i = output.index; i >= 0; --i) {
    if (!grads[i] || !needs[i]) continue;
    const Node& n = nodes_[i];
    if (n.op == OpKind::kInput || n.op == OpKind::kConstant) continue;
    Tensor g = std::move(*grads[i]);
    grads[i].reset();
    auto in = [&](std::size_t k) -> const Tensor& { return values_[n.inputs[k].index]; };
    switch (n.op) {
      case OpKind::kInput:
      case OpKind::kConstant:
        break;
      case OpKind::kMatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (wants(n, 0)) {
          Tensor da(a.shape());
          da.matrix().noalias() = g.matrix() * b.matrix().transpose();
          accumulate(n.inputs[0], std::move(da));
        }
        if (wants(n, 1)) {
          Tensor db(b.shape());
          db.matrix().noalias() = a.matrix().transpose() * g.matrix();
          accumulate(n.inputs[1], std::move(db));
        }
        break;
      }
      case OpKind::kAdd: {
        if (wants(n, 1)) accumulate(n.inputs[1], reduce_to(g, in(1)));
        if (wants(n, 0)) accumulate(n.inputs[0], std::move(g));
        break;
      }
      case OpKind::kMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (wants(n, 1)) {
          Tensor db_full = g;
          for (std::int64_t k = 0; k < g.size(); ++k) db_full[k] *= a[k];
          accumulate(n.inputs[1], reduce_to(db_full, b));
        }
        if (wants(n, 0)) {
          Tensor da = g;
          if (b.size() == 1) {
            for (std::int64_t k = 0; k < g.size(); ++k) da[k] *= b[0];
          } else {
            for (std::int64_t k = 0; k < g.size(); ++k) da[k] *= b[k];
          }
          accumulate(n.inputs[0], std::move(da));
        }
        break;
      }
      case OpKind::kSigmoid:
      case OpKind::kTanh:
      case OpKind::kRelu: {
        const Tensor& y = values_[i];
        Tensor dx = g;
        if (n.op == OpKind::kSigmoid) {
          for (std::int64_t k = 0; k < g.size(); ++k) dx[k] *= y[k] * (1.0 - y[k]);
        } else if (n.op == OpKind::kTanh) {
          for (std::int64_t k = 0; k < g.size(); ++k) dx[k] *= 1.0 - y[k] * y[k];
        } else {
          const Tensor& x = in(0);
          for (std::int64_t k = 0; k < g.size(); ++k) dx[k] = x[k] > 0.0 ? dx[k] : 0.0;
        }
        accumulate(n.inputs[0], std::move(dx));
        break;
      }
      case OpKind::kSoftmaxCrossEntropy: {
        const Tensor& y = in(1);
        Tensor dz = softmax_cache_.at(static_cast<std::int32_t>(i));
        const double scale = g[0] / static_cast<double>(dz.rows());
        for (std::int64_t r = 0; r < dz.rows(); ++r) {
          dz.at(r, static_cast<std::int64_t>(y[r])) -= 1.0;
        }
        for (double& v : dz.data()) v *= scale;
        if (dz.shape() != in(0).shape()) dz = Tensor(in(0).shape(), std::vector<double>(dz.data().begin(), dz.data().end()));
        accumulate(n.inputs[0], std::move(dz));
        // Labels are not differentiable.
        break;
      }
      case OpKind::kSliceCols: {
        const Tensor& a = in(0);
        Tensor da(a.shape());
        da.matrix().middleCols(n.begin, n.end - n.begin) = g.matrix();
        accumulate(n.inputs[0], std::move(da));
        break;
      }
      case OpKind::kConcatCols: {
        std::int64_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& part = in(k);
          if (wants(n, k)) {
            Tensor dp(part.shape());
            dp.matrix() = g.matrix().middleCols(offset, part.cols());
            accumulate(n.inputs[k], std::move(dp));
          }
          offset += part.cols();
        }
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        const Tensor& a = in(0);
        const double v = n.op == OpKind::kSum ? g[0] : g[0] / static_cast<double>(a.size());
        accumulate(n.inputs[0], Tensor(a.shape(), v));
        break;
      }
    }
  }

  NamedTensors out;
  for (const auto& [name, id] : input_index_) {
    const Node& n = nodes_[id.index];
    if (!n.differentiable) continue;
    if (grads[id.index]) {
      out.emplace(name, *grads[id.index]);
    } else {
      out.emplace(name, Tensor::zeros_like(values_[id.index]));
    }
  }
  return out;
}

/// Evaluates the graph on `inputs` and returns the value of `output`.
inline Tensor forward(TapeGraph& graph, const NamedTensors& inputs, NodeId output) {
  graph.evaluate(inputs);
  return graph.value(output);
}

/// Gradients of the scalar `output` with respect to every differentiable
/// input, from the values of the most recent forward().
inline NamedTensors backward(const TapeGraph& graph, NodeId output) { return graph.gradients(output); }

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-6;
  /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  /// The floor keeps entries whose true gradient is at rounding-noise level
  /// from dominating the report.
  double denominator_floor = 1e-5;
  /// Names to check; empty means every differentiable input.
  std::vector<std::string> names;
};

struct GradCheckEntry {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::int64_t worst_index = -1;
  std::int64_t checked = 0;
};

struct GradCheckReport {
  std::map<std::string, GradCheckEntry> per_input;
  double tolerance = 0.0;

  double max_relative_error() const {
    double m = 0.0;
    for (const auto& [_, e] : per_input) m = std::max(m, e.max_relative_error);
    return m;
  }
  bool passed() const { return max_relative_error() < tolerance; }
};

/// Compares backward() against central finite differences for every entry
/// of the selected inputs.
inline GradCheckReport grad_check(TapeGraph& graph, NamedTensors inputs, NodeId output,
                                  const GradCheckOptions& options = {}) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  graph.evaluate(inputs);
  const NamedTensors analytic = graph.gradients(output);

  std::vector<std::string> names = options.names;
  if (names.empty()) {
    for (const auto& [name, _] : analytic) names.push_back(name);
  }
  for (const auto& name : names) {
    const auto git = analytic.find(name);
    if (git == analytic.end()) throw InvalidArgument("grad_check: no differentiable input '" + name + "'");
    GradCheckEntry entry;
    Tensor& x = inputs.at(name);
    for (std::int64_t k = 0; k < x.size(); ++k) {
      const double saved = x[k];
      x[k] = saved + options.step;
      const double up = forward(graph, inputs, output).item();
      x[k] = saved - options.step;
      const double down = forward(graph, inputs, output).item();
      x[k] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = git->second[k];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      const double rel = abs_err / denom;
      if (rel > entry.max_relative_error || entry.worst_index < 0) {
        entry.max_relative_error = std::max(entry.max_relative_error, rel);
        if (rel >= entry.max_relative_error) entry.worst_index = k;
      }
      entry.max_absolute_error = std::max(entry.max_absolute_error, abs_err);
      ++entry.checked;
    }
    report.per_input.emplace(name, entry);
  }
  graph.evaluate(inputs);
  return report;
}

}  // namespace legw
