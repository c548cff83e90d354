// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "legw/autodiff.hpp"
#include "legw/data.hpp"
#include "legw/errors.hpp"
#include "legw/random.hpp"
#include "legw/tensor.hpp"

namespace legw {

enum class ModelKind { kMlp, kLstmClassifier, kLstmLm };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kMlp: return "mlp";
    case ModelKind::kLstmClassifier: return "lstm-classifier";
    case ModelKind::kLstmLm: return "lstm-lm";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "mlp") return ModelKind::kMlp;
  if (s == "lstm-classifier") return ModelKind::kLstmClassifier;
  if (s == "lstm-lm") return ModelKind::kLstmLm;
  throw InvalidArgument("unknown model kind '" + s + "'");
}

/// Architecture description.
///
///   mlp:             layer_sizes = {input, hidden...}; ReLU hidden layers,
///                    linear output of `classes` logits.
///   lstm-classifier: layer_sizes = {input_dim, transform_dim, hidden};
///                    each sample is `sequence_length` steps of input_dim
///                    values, linearly transformed, fed to one LSTM layer;
///                    the final hidden state goes through a dense layer.
///   lstm-lm:         layer_sizes = {embedding, hidden per layer...};
///                    `classes` is the vocabulary size; predicts the token
///                    that follows a window of `sequence_length` tokens.
struct ModelSpec {
  ModelKind kind = ModelKind::kMlp;
  std::vector<std::int64_t> layer_sizes;
  std::int64_t sequence_length = 0;
  std::int64_t classes = 0;

  static ModelSpec mlp(std::vector<std::int64_t> sizes, std::int64_t classes) {
    return ModelSpec{ModelKind::kMlp, std::move(sizes), 0, classes};
  }
  static ModelSpec lstm_classifier(std::int64_t input_dim, std::int64_t transform_dim, std::int64_t hidden,
                                   std::int64_t steps, std::int64_t classes) {
    return ModelSpec{ModelKind::kLstmClassifier, {input_dim, transform_dim, hidden}, steps, classes};
  }
  static ModelSpec lstm_lm(std::int64_t vocab, std::int64_t embedding, std::int64_t hidden, std::int64_t layers,
                           std::int64_t steps) {
    std::vector<std::int64_t> sizes{embedding};
    for (std::int64_t l = 0; l < layers; ++l) sizes.push_back(hidden);
    return ModelSpec{ModelKind::kLstmLm, std::move(sizes), steps, vocab};
  }

  /// Width of one input row as stored in a Dataset.
  std::int64_t input_width() const {
    switch (kind) {
      case ModelKind::kMlp: return layer_sizes.at(0);
      case ModelKind::kLstmClassifier: return layer_sizes.at(0) * sequence_length;
      case ModelKind::kLstmLm: return sequence_length;
    }
    return 0;
  }

  void validate() const {
    auto fail = [&](const std::string& why) { throw InvalidArgument(std::string(to_string(kind)) + ": " + why); };
    if (classes < 2) fail("need at least 2 classes");
    for (auto s : layer_sizes) {
      if (s <= 0) fail("layer sizes must be positive");
    }
    switch (kind) {
      case ModelKind::kMlp:
        if (layer_sizes.empty()) fail("needs an input size");
        break;
      case ModelKind::kLstmClassifier:
        if (layer_sizes.size() != 3) fail("layer sizes are {input, transform, hidden}");
        if (sequence_length <= 0) fail("sequence length must be positive");
        break;
      case ModelKind::kLstmLm:
        if (layer_sizes.size() < 2) fail("layer sizes are {embedding, hidden...}");
        if (sequence_length <= 0) fail("sequence length must be positive");
        break;
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

using ParameterSet = NamedTensors;

struct ParameterShape {
  std::string name;
  Shape shape;
  std::int64_t fan_in = 0;  // 0 marks a bias
  std::int64_t hidden = 0;  // LSTM biases: hidden width, for the forget block
};

/// Every parameter of `spec`, in initialization order.
inline std::vector<ParameterShape> parameter_shapes(const ModelSpec& spec) {
  spec.validate();
  std::vector<ParameterShape> out;
  auto dense = [&](const std::string& name, std::int64_t in, std::int64_t outw) {
    out.push_back({name + "/kernel", {in, outw}, in, 0});
    out.push_back({name + "/bias", {outw}, 0, 0});
  };
  auto lstm = [&](const std::string& name, std::int64_t in, std::int64_t h) {
    out.push_back({name + "/kernel", {in + h, 4 * h}, in + h, 0});
    out.push_back({name + "/bias", {4 * h}, 0, h});
  };
  const auto& s = spec.layer_sizes;
  switch (spec.kind) {
    case ModelKind::kMlp:
      for (std::size_t l = 0; l + 1 < s.size(); ++l) dense("dense" + std::to_string(l), s[l], s[l + 1]);
      dense("dense" + std::to_string(s.size() - 1), s.back(), spec.classes);
      break;
    case ModelKind::kLstmClassifier:
      dense("transform", s[0], s[1]);
      lstm("lstm", s[1], s[2]);
      dense("output", s[2], spec.classes);
      break;
    case ModelKind::kLstmLm:
      // Lookup table; its fan_in is the embedding width (see build()).
      out.push_back({"embedding", {spec.classes, s[0]}, s[0], 0});
      for (std::size_t l = 1; l < s.size(); ++l) lstm("lstm" + std::to_string(l - 1), s[l - 1], s[l]);
      dense("softmax", s.back(), spec.classes);
      break;
  }
  return out;
}

inline std::int64_t parameter_count(const ModelSpec& spec) {
  std::int64_t n = 0;
  for (const auto& p : parameter_shapes(spec)) n += shape_size(p.shape);
  return n;
}

/// Seeded initialization: kernels uniform in +-1/sqrt(fan_in), biases zero
/// except LSTM forget-gate blocks, which start at 1.
inline ParameterSet build(const ModelSpec& spec, std::uint64_t seed) {
  ParameterSet params;
  Rng rng(seed);
  for (const auto& p : parameter_shapes(spec)) {
    Tensor t(p.shape);
    if (p.fan_in > 0) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
    } else if (p.hidden > 0) {
      for (std::int64_t k = 2 * p.hidden; k < 3 * p.hidden; ++k) t[k] = 1.0;
    }
    params.emplace(p.name, std::move(t));
  }
  return params;
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

struct LstmState {
  NodeId h;
  NodeId c;
};

/// One LSTM step on graph nodes. Kernel columns hold four blocks of width
/// `hidden` in the order [input, candidate, forget, output]:
///   [i | g | f | o] = [x, h_prev] * kernel + bias
///   c = sigmoid(f) * c_prev + sigmoid(i) * tanh(g)
///   h = sigmoid(o) * tanh(c)
inline LstmState lstm_cell(TapeGraph& g, NodeId x, NodeId h_prev, NodeId c_prev, NodeId kernel, NodeId bias,
                           std::int64_t hidden) {
  const NodeId z = g.add(g.matmul(g.concat_cols({x, h_prev}), kernel), bias);
  const NodeId in_gate = g.sigmoid(g.slice_cols(z, 0, hidden));
  const NodeId candidate = g.tanh(g.slice_cols(z, hidden, 2 * hidden));
  const NodeId forget = g.sigmoid(g.slice_cols(z, 2 * hidden, 3 * hidden));
  const NodeId out_gate = g.sigmoid(g.slice_cols(z, 3 * hidden, 4 * hidden));
  const NodeId c = g.add(g.mul(forget, c_prev), g.mul(in_gate, candidate));
  const NodeId h = g.mul(out_gate, g.tanh(c));
  return {h, c};
}

struct LstmStep {
  Tensor h;
  Tensor c;
};

/// Eager LSTM step on concrete tensors (rows are batch entries).
inline LstmStep lstm_cell(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev, const Tensor& kernel,
                          const Tensor& bias) {
  const std::int64_t hidden = h_prev.cols();
  if (kernel.rank() != 2 || kernel.cols() != 4 * hidden) {
    throw InvalidArgument("lstm_cell: kernel " + shape_string(kernel.shape()) + " needs 4*hidden = " +
                          std::to_string(4 * hidden) + " columns");
  }
  if (kernel.rows() != x.cols() + hidden) {
    throw InvalidArgument("lstm_cell: kernel has " + std::to_string(kernel.rows()) + " rows but input+hidden is " +
                          std::to_string(x.cols() + hidden));
  }
  if (bias.size() != 4 * hidden) throw InvalidArgument("lstm_cell: bias must have 4*hidden entries");
  if (x.rows() != h_prev.rows() || c_prev.shape() != h_prev.shape()) {
    throw InvalidArgument("lstm_cell: x, h_prev and c_prev disagree on batch shape");
  }
  TapeGraph g;
  const NodeId xi = g.input("x");
  const NodeId hi = g.input("h");
  const NodeId ci = g.input("c");
  const NodeId ki = g.input("kernel");
  const NodeId bi = g.input("bias");
  const LstmState s = lstm_cell(g, xi, hi, ci, ki, bi, hidden);
  g.evaluate({{"x", x}, {"h", h_prev}, {"c", c_prev}, {"kernel", kernel}, {"bias", bias}});
  return {g.value(s.h), g.value(s.c)};
}

// ---------------------------------------------------------------------------
// Model graphs
// ---------------------------------------------------------------------------

inline constexpr const char* kInputsName = "inputs";
inline constexpr const char* kLabelsName = "labels";

inline std::string token_input_name(std::int64_t t) { return "tokens/" + std::to_string(t); }

/// Graph for one architecture. Parameters are differentiable inputs named as
/// in parameter_shapes(); data enters through non-differentiable inputs.
struct ModelGraph {
  TapeGraph graph;
  NodeId logits;
  NodeId loss;  // mean cross-entropy over the batch
};

inline ModelGraph build_graph(const ModelSpec& spec) {
  spec.validate();
  ModelGraph m;
  TapeGraph& g = m.graph;
  std::map<std::string, NodeId> p;
  for (const auto& ps : parameter_shapes(spec)) p.emplace(ps.name, g.input(ps.name, ps.shape));
  const NodeId labels = g.input(kLabelsName, std::nullopt, false);
  const auto& s = spec.layer_sizes;
  auto dense = [&](const std::string& name, NodeId x) {
    return g.add(g.matmul(x, p.at(name + "/kernel")), p.at(name + "/bias"));
  };
  // The initial LSTM state is a zero data input so its rows follow the batch.
  switch (spec.kind) {
    case ModelKind::kMlp: {
      NodeId x = g.input(kInputsName, Shape{-1, s[0]}, false);
      for (std::size_t l = 0; l + 1 < s.size(); ++l) x = g.relu(dense("dense" + std::to_string(l), x));
      m.logits = dense("dense" + std::to_string(s.size() - 1), x);
      break;
    }
    case ModelKind::kLstmClassifier: {
      const NodeId x = g.input(kInputsName, Shape{-1, s[0] * spec.sequence_length}, false);
      const NodeId zeros = g.input("state/zeros", Shape{-1, s[2]}, false);
      LstmState st{zeros, zeros};
      for (std::int64_t t = 0; t < spec.sequence_length; ++t) {
        const NodeId step = g.slice_cols(x, t * s[0], (t + 1) * s[0]);
        const NodeId projected = dense("transform", step);
        st = lstm_cell(g, projected, st.h, st.c, p.at("lstm/kernel"), p.at("lstm/bias"), s[2]);
      }
      m.logits = dense("output", st.h);
      break;
    }
    case ModelKind::kLstmLm: {
      std::vector<LstmState> states;
      std::vector<NodeId> zeros;
      for (std::size_t l = 1; l < s.size(); ++l) {
        zeros.push_back(g.input("state/zeros" + std::to_string(l - 1), Shape{-1, s[l]}, false));
        states.push_back({zeros.back(), zeros.back()});
      }
      for (std::int64_t t = 0; t < spec.sequence_length; ++t) {
        NodeId x = g.matmul(g.input(token_input_name(t), Shape{-1, spec.classes}, false), p.at("embedding"));
        for (std::size_t l = 1; l < s.size(); ++l) {
          const std::string name = "lstm" + std::to_string(l - 1);
          states[l - 1] = lstm_cell(g, x, states[l - 1].h, states[l - 1].c, p.at(name + "/kernel"),
                                    p.at(name + "/bias"), s[l]);
          x = states[l - 1].h;
        }
      }
      m.logits = dense("softmax", states.back().h);
      break;
    }
  }
  m.loss = g.softmax_cross_entropy(m.logits, labels);
  g.set_label(m.loss, "loss");
  return m;
}

/// Graph inputs (parameters plus data) for one batch.
inline NamedTensors make_feed(const ModelSpec& spec, const ParameterSet& params, const Batch& batch) {
  if (batch.size() == 0) throw InvalidArgument("empty batch");
  if (batch.inputs.rows() != batch.size() || batch.inputs.cols() != spec.input_width()) {
    throw InvalidArgument("batch inputs " + shape_string(batch.inputs.shape()) + " do not fit a " +
                          to_string(spec.kind) + " expecting rows of width " + std::to_string(spec.input_width()));
  }
  NamedTensors feed = params;
  Tensor labels(Shape{batch.size()});
  for (std::int64_t r = 0; r < batch.size(); ++r) {
    const auto y = batch.labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= spec.classes) {
      throw InvalidArgument("label " + std::to_string(y) + " out of range [0, " + std::to_string(spec.classes) + ")");
    }
    labels[r] = static_cast<double>(y);
  }
  feed.emplace(kLabelsName, std::move(labels));
  const auto& s = spec.layer_sizes;
  switch (spec.kind) {
    case ModelKind::kMlp:
      feed.emplace(kInputsName, batch.inputs);
      break;
    case ModelKind::kLstmClassifier:
      feed.emplace(kInputsName, batch.inputs);
      feed.emplace("state/zeros", Tensor(Shape{batch.size(), s[2]}));
      break;
    case ModelKind::kLstmLm:
      for (std::size_t l = 1; l < s.size(); ++l) {
        feed.emplace("state/zeros" + std::to_string(l - 1), Tensor(Shape{batch.size(), s[l]}));
      }
      for (std::int64_t t = 0; t < spec.sequence_length; ++t) {
        Tensor onehot(Shape{batch.size(), spec.classes});
        for (std::int64_t r = 0; r < batch.size(); ++r) {
          const double id = batch.inputs.at(r, t);
          const auto tok = static_cast<std::int64_t>(id);
          if (tok < 0 || tok >= spec.classes || static_cast<double>(tok) != id) {
            throw InvalidArgument("token id " + std::to_string(id) + " outside vocabulary");
          }
          onehot.at(r, tok) = 1.0;
        }
        feed.emplace(token_input_name(t), std::move(onehot));
      }
      break;
  }
  return feed;
}

/// A model bound to its graph; the graph is built once and re-evaluated
/// for every batch.
class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)), graph_(build_graph(spec_)) {}

  const ModelSpec& spec() const noexcept { return spec_; }
  TapeGraph& graph() noexcept { return graph_.graph; }
  NodeId loss_node() const noexcept { return graph_.loss; }
  NodeId logits_node() const noexcept { return graph_.logits; }

  /// Mean cross-entropy of `batch`; leaves the graph ready for gradient().
  double loss(const ParameterSet& params, const Batch& batch) {
    graph_.graph.evaluate(make_feed(spec_, params, batch));
    return graph_.graph.value(graph_.loss).item();
  }

  /// Gradient of the mean batch loss with respect to every parameter.
  NamedTensors gradient(const ParameterSet& params, const Batch& batch) {
    loss(params, batch);
    return backward(graph_.graph, graph_.loss);
  }

  /// Loss and gradient in one pass.
  std::pair<double, NamedTensors> loss_and_gradient(const ParameterSet& params, const Batch& batch) {
    const double l = loss(params, batch);
    return {l, backward(graph_.graph, graph_.loss)};
  }

  /// Logits of the most recent loss() evaluation.
  const Tensor& last_logits() const { return graph_.graph.value(graph_.logits); }

 private:
  ModelSpec spec_;
  ModelGraph graph_;
};

struct LossEvaluation {
  double value = 0.0;
  ModelGraph graph;  // evaluated; backward(graph.graph, graph.loss) works
};

/// Mean per-sample cross-entropy of `batch` under `params`.
inline LossEvaluation loss(const ModelSpec& spec, const ParameterSet& params, const Batch& batch) {
  LossEvaluation out{0.0, build_graph(spec)};
  out.graph.graph.evaluate(make_feed(spec, params, batch));
  out.value = out.graph.graph.value(out.graph.loss).item();
  return out;
}

struct Evaluation {
  double mean_loss = 0.0;
  double accuracy = 0.0;
  double perplexity = 0.0;
};

/// Held-out evaluation in chunks of `chunk` rows.
inline Evaluation evaluate(Model& model, const ParameterSet& params, const Dataset& ds, std::int64_t chunk = 500) {
  if (ds.size() == 0) throw InvalidArgument("cannot evaluate on an empty dataset");
  double total_loss = 0.0;
  std::int64_t correct = 0;
  std::vector<std::int64_t> idx;
  for (std::int64_t start = 0; start < ds.size(); start += chunk) {
    const std::int64_t end = std::min(ds.size(), start + chunk);
    idx.resize(static_cast<std::size_t>(end - start));
    for (std::int64_t i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
    const Batch b = gather(ds, idx);
    total_loss += model.loss(params, b) * static_cast<double>(b.size());
    const Tensor& logits = model.last_logits();
    for (std::int64_t r = 0; r < b.size(); ++r) {
      Eigen::Index best = 0;
      logits.matrix().row(r).maxCoeff(&best);
      if (best == b.labels[static_cast<std::size_t>(r)]) ++correct;
    }
  }
  Evaluation e;
  e.mean_loss = total_loss / static_cast<double>(ds.size());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  e.perplexity = std::exp(e.mean_loss);
  return e;
}

}  // namespace legw
