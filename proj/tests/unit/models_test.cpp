// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "legw/data.hpp"
#include "legw/models.hpp"
#include "legw/optim.hpp"

using namespace legw;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Batch random_batch(const ModelSpec& spec, std::int64_t b, std::uint64_t seed) {
  Rng rng(seed);
  Batch batch{Tensor(Shape{b, spec.input_width()}), {}};
  for (double& v : batch.inputs.data()) {
    v = spec.kind == ModelKind::kLstmLm ? static_cast<double>(rng.below(spec.classes)) : rng.uniform(0, 1);
  }
  for (std::int64_t i = 0; i < b; ++i) batch.labels.push_back(static_cast<std::int64_t>(rng.below(spec.classes)));
  return batch;
}

Batch rows(const Batch& b, const std::vector<std::int64_t>& idx) {
  Dataset ds{b.inputs, b.labels, 1 << 20, {}};
  return gather(ds, idx);
}

}  // namespace

TEST(Build, PaperKernelShapes) {
  const ParameterSet mnist = build(ModelSpec::lstm_classifier(28, 128, 128, 28, 10), 0);
  EXPECT_EQ(mnist.at("lstm/kernel").shape(), (Shape{256, 512}));
  const ParameterSet ptb = build(ModelSpec::lstm_lm(50, 200, 200, 2, 3), 0);
  EXPECT_EQ(ptb.at("lstm0/kernel").shape(), (Shape{400, 800}));
  EXPECT_EQ(ptb.at("lstm1/kernel").shape(), (Shape{400, 800}));
}

TEST(Build, MlpParameterCount) {
  EXPECT_EQ(parameter_count(ModelSpec::mlp({784, 32}, 10)), 25450);
  EXPECT_EQ(total_size(build(ModelSpec::mlp({784, 32}, 10), 3)), 25450);
}

TEST(Build, DeterministicFromSeed) {
  const ModelSpec spec = ModelSpec::lstm_classifier(4, 5, 6, 3, 3);
  EXPECT_EQ(build(spec, 42), build(spec, 42));
  EXPECT_NE(build(spec, 42), build(spec, 43));
}

TEST(Build, InitializationRangesAndForgetBias) {
  const ModelSpec spec = ModelSpec::lstm_classifier(28, 128, 128, 28, 10);
  const ParameterSet p = build(spec, 1);
  const double bound = 1.0 / std::sqrt(256.0);
  for (double v : p.at("lstm/kernel").data()) ASSERT_LE(std::abs(v), bound);
  const Tensor& bias = p.at("lstm/bias");
  for (std::int64_t k = 0; k < 512; ++k) EXPECT_EQ(bias[k], (k >= 256 && k < 384) ? 1.0 : 0.0);
}

TEST(Build, InvalidSpecsAreRejected) {
  EXPECT_THROW(build(ModelSpec::mlp({784, 0}, 10), 0), InvalidArgument);
  EXPECT_THROW(build(ModelSpec::mlp({784}, 1), 0), InvalidArgument);
  EXPECT_THROW(build(ModelSpec::lstm_classifier(28, 128, 128, 0, 10), 0), InvalidArgument);
  ModelSpec bad = ModelSpec::lstm_classifier(28, 128, 128, 28, 10);
  bad.layer_sizes.pop_back();
  EXPECT_THROW(build(bad, 0), InvalidArgument);
}

TEST(Loss, UntrainedIsNearLogClasses) {
  for (const ModelSpec& spec : {ModelSpec::mlp({784, 32}, 10), ModelSpec::lstm_classifier(28, 32, 32, 28, 10)}) {
    const ParameterSet p = build(spec, 5);
    const LossEvaluation l = loss(spec, p, random_batch(spec, 64, 9));
    EXPECT_NEAR(l.value, std::log(10.0), 0.2) << to_string(spec.kind);
  }
}

TEST(Loss, DuplicatedSampleMatchesSingle) {
  const ModelSpec spec = ModelSpec::lstm_classifier(3, 4, 5, 4, 3);
  const ParameterSet p = build(spec, 2);
  const Batch b = random_batch(spec, 1, 3);
  const double single = loss(spec, p, b).value;
  EXPECT_NEAR(loss(spec, p, rows(b, {0, 0, 0, 0, 0})).value, single, 1e-15);
}

TEST(Loss, PermutationInvariant) {
  const ModelSpec spec = ModelSpec::mlp({6, 8}, 4);
  const ParameterSet p = build(spec, 2);
  const Batch b = random_batch(spec, 5, 3);
  EXPECT_NEAR(loss(spec, p, rows(b, {4, 2, 0, 3, 1})).value, loss(spec, p, b).value, 1e-15);
}

TEST(Loss, DuplicatedBatchKeepsGradient) {
  const ModelSpec spec = ModelSpec::lstm_lm(7, 4, 5, 2, 3);
  const ParameterSet p = build(spec, 2);
  const Batch b = random_batch(spec, 3, 3);
  const auto g1 = mini_batch_gradient(spec, p, b);
  const auto g2 = mini_batch_gradient(spec, p, rows(b, {0, 1, 2, 0, 1, 2}));
  for (const auto& [name, g] : g1) {
    for (std::int64_t k = 0; k < g.size(); ++k) EXPECT_NEAR(g[k], g2.at(name)[k], 1e-15) << name;
  }
}

TEST(Loss, LabelOutOfRangeIsAnError) {
  const ModelSpec spec = ModelSpec::mlp({4}, 3);
  Batch b = random_batch(spec, 2, 1);
  b.labels[1] = 3;
  EXPECT_THROW(loss(spec, build(spec, 0), b), InvalidArgument);
  b.labels[1] = -1;
  EXPECT_THROW(loss(spec, build(spec, 0), b), InvalidArgument);
}

TEST(Loss, AddingAConstantChangesNoGradient) {
  const ModelSpec spec = ModelSpec::mlp({5, 4}, 3);
  const ParameterSet p = build(spec, 1);
  const Batch b = random_batch(spec, 4, 2);
  ModelGraph m = build_graph(spec);
  const NodeId shifted = m.graph.add(m.loss, m.graph.constant(Tensor::scalar(17.5)));
  m.graph.evaluate(make_feed(spec, p, b));
  EXPECT_EQ(backward(m.graph, shifted), backward(m.graph, m.loss));
}

TEST(LstmCell, ZeroKernelGivesZeroState) {
  Rng rng(1);
  Tensor x(Shape{2, 3});
  for (double& v : x.data()) v = rng.uniform(-5, 5);
  const LstmStep s = lstm_cell(x, Tensor(Shape{2, 4}), Tensor(Shape{2, 4}), Tensor(Shape{7, 16}), Tensor(Shape{16}));
  EXPECT_EQ(s.h, Tensor(Shape{2, 4}));
  EXPECT_EQ(s.c, Tensor(Shape{2, 4}));
}

TEST(LstmCell, SaturatedForgetGateKeepsCell) {
  const std::int64_t h = 3;
  Tensor bias(Shape{4 * h});
  for (std::int64_t k = 2 * h; k < 3 * h; ++k) bias[k] = 100.0;
  const Tensor c_prev = Tensor::matrix(1, 3, {0.4, -1.3, 2.2});
  const LstmStep s = lstm_cell(Tensor::matrix(1, 2, {0.7, -0.1}), Tensor(Shape{1, h}), c_prev, Tensor(Shape{5, 4 * h}), bias);
  // Input gate is sigmoid(0) but the candidate is tanh(0) = 0.
  for (std::int64_t k = 0; k < h; ++k) EXPECT_NEAR(s.c[k], c_prev[k], 1e-12);
}

TEST(LstmCell, HandComputedHiddenTwo) {
  // x has one feature, hidden 2: kernel rows [x, h0, h1], columns
  // [i0 i1 | g0 g1 | f0 f1 | o0 o1].
  const Tensor kernel = Tensor::matrix(3, 8, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8,  //
                                              0.2, 0.1, -0.1, 0.3, 0.2, -0.4, 0.5, 0.1,   //
                                              -0.3, 0.2, 0.2, -0.1, 0.1, 0.3, -0.2, 0.4});
  const Tensor bias = Tensor::vector({0.05, -0.05, 0.1, 0.0, 1.0, 1.0, -0.1, 0.2});
  const double x = 0.9, h0 = 0.3, h1 = -0.6, c0 = 0.5, c1 = -0.2;
  auto z = [&](int col) { return x * kernel.at(0, col) + h0 * kernel.at(1, col) + h1 * kernel.at(2, col) + bias[col]; };
  const LstmStep s = lstm_cell(Tensor::matrix(1, 1, {x}), Tensor::matrix(1, 2, {h0, h1}), Tensor::matrix(1, 2, {c0, c1}),
                               kernel, bias);
  const double cp[2] = {c0, c1};
  for (int j = 0; j < 2; ++j) {
    const double i = sigmoid(z(j)), g = std::tanh(z(2 + j)), f = sigmoid(z(4 + j)), o = sigmoid(z(6 + j));
    const double c = f * cp[j] + i * g;
    EXPECT_NEAR(s.c[j], c, 1e-15);
    EXPECT_NEAR(s.h[j], o * std::tanh(c), 1e-15);
  }
}

TEST(LstmCell, DimensionMismatchIsAnError) {
  EXPECT_THROW(lstm_cell(Tensor(Shape{1, 2}), Tensor(Shape{1, 3}), Tensor(Shape{1, 3}), Tensor(Shape{4, 12}), Tensor(Shape{12})),
               InvalidArgument);
  EXPECT_THROW(lstm_cell(Tensor(Shape{1, 2}), Tensor(Shape{1, 3}), Tensor(Shape{1, 3}), Tensor(Shape{5, 11}), Tensor(Shape{12})),
               InvalidArgument);
  EXPECT_THROW(lstm_cell(Tensor(Shape{1, 2}), Tensor(Shape{1, 3}), Tensor(Shape{1, 3}), Tensor(Shape{5, 12}), Tensor(Shape{11})),
               InvalidArgument);
  EXPECT_THROW(lstm_cell(Tensor(Shape{2, 2}), Tensor(Shape{1, 3}), Tensor(Shape{1, 3}), Tensor(Shape{5, 12}), Tensor(Shape{12})),
               InvalidArgument);
}

TEST(GradCheck, EveryModelKind) {
  for (const ModelSpec& spec : {ModelSpec::mlp({6, 8, 5}, 4), ModelSpec::lstm_classifier(3, 4, 6, 3, 4),
                                 ModelSpec::lstm_lm(6, 4, 5, 2, 3)}) {
    const ParameterSet p = build(spec, 11);
    Model m(spec);
    const auto report = grad_check(m.graph(), make_feed(spec, p, random_batch(spec, 3, 4)), m.loss_node());
    EXPECT_LT(report.max_relative_error(), 1e-4) << to_string(spec.kind);
  }
}

TEST(Evaluate, AccuracyAndChunking) {
  const ModelSpec spec = ModelSpec::mlp({5, 6}, 3);
  const ParameterSet p = build(spec, 1);
  const Dataset ds = make_teacher_classification(23, 5, 3, 4);
  Model m(spec);
  const Evaluation a = evaluate(m, p, ds, 500);
  const Evaluation b = evaluate(m, p, ds, 4);
  EXPECT_NEAR(a.mean_loss, b.mean_loss, 1e-14);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_NEAR(a.mean_loss, loss(spec, p, whole(ds)).value, 1e-14);
  EXPECT_DOUBLE_EQ(a.perplexity, std::exp(a.mean_loss));
}

TEST(LanguageModel, MemorizesRepeatingCorpus) {
  std::string text;
  for (int i = 0; i < 40; ++i) text += "the cat sat on a mat ";
  const TokenizedCorpus corpus = tokenize_corpus(text, 100, 3);
  const ModelSpec spec = ModelSpec::lstm_lm(corpus.dataset.classes, 8, 16, 2, 3);
  ParameterSet p = build(spec, 3);
  OptimizerState s = init_optimizer(OptimizerKind::kAdam, {}, p);
  Model m(spec);
  const Batch all = whole(corpus.dataset);
  for (int t = 0; t < 300; ++t) {
    auto r = step(s, p, m.gradient(p, all), 0.02);
    p = std::move(r.params);
    s = std::move(r.state);
  }
  const Evaluation e = evaluate(m, p, corpus.dataset);
  EXPECT_LT(e.perplexity, 1.05);
  EXPECT_EQ(e.accuracy, 1.0);
}
