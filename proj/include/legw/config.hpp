// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "legw/errors.hpp"
#include "legw/models.hpp"
#include "legw/optim.hpp"
#include "legw/probe.hpp"
#include "legw/rational.hpp"
#include "legw/schedule.hpp"

namespace legw {

/// Where the training and held-out samples come from.
///
///   mnist   IDX image/label files (plain or gzip)
///   blobs   linearly separable two-class points (make_separable_blobs)
///   teacher labels from a random linear teacher (make_teacher_classification)
///   text    whitespace-tokenized corpus file, next-token pairs
///   markov  synthetic Markov-chain corpus (make_markov_corpus)
struct DataConfig {
  std::string source = "mnist";
  std::string train_images = "data/mnist10k/train-images-idx3-ubyte.gz";
  std::string train_labels = "data/mnist10k/train-labels-idx1-ubyte.gz";
  std::string test_images = "data/mnist10k/t10k-images-idx3-ubyte.gz";
  std::string test_labels = "data/mnist10k/t10k-labels-idx1-ubyte.gz";
  std::string text_path;
  std::int64_t train_size = 0;  // 0 keeps every training sample
  std::int64_t test_size = 0;   // 0 keeps every held-out sample
  std::uint64_t subset_seed = 2018;
  // Synthetic generators.
  std::int64_t synthetic_train = 1000;
  std::int64_t synthetic_test = 500;
  std::int64_t synthetic_dim = 10;
  std::int64_t synthetic_classes = 2;
  double synthetic_margin = 0.1;
  // Corpora.
  std::int64_t vocab_limit = 2000;
  std::int64_t corpus_tokens = 50000;
  std::int64_t corpus_vocab = 2000;
  std::int64_t corpus_fanout = 4;
  double test_fraction = 0.1;  // tail of the token stream held out

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

inline ScheduleSpec default_schedule() {
  ScheduleSpec s;
  s.batch_size = 32;
  s.base_lr = LearningRate(0.1);
  s.total_epochs = Rational(10);
  s.dataset_size = 0;
  return s;
}

struct ExperimentConfig {
  ModelSpec model = ModelSpec::lstm_classifier(28, 128, 128, 28, 10);
  DataConfig data;
  OptimizerKind optimizer = OptimizerKind::kMomentum;
  OptimizerHyper hyper;
  /// dataset_size 0 means "size of the loaded training set"; plan-only
  /// sweeps need it set explicitly.
  ScheduleSpec schedule = default_schedule();
  ScalingRule rule = ScalingRule::kSqrt;
  std::vector<Rational> sweep_factors{Rational(1)};
  bool probe_enabled = false;
  ProbeConfig probe;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs/default";
  /// Real timings in the metrics `ms` column. Off by default so metrics.csv
  /// is a pure function of config and seed.
  bool wall_clock_ms = false;
  /// Stop when the training loss exceeds this (0 disables); non-finite
  /// losses always stop the run.
  double divergence_loss = 0.0;
  /// Where relative data paths are resolved from; not serialized.
  std::filesystem::path base_dir;

  std::uint64_t seed_value() const {
    if (!seed) throw InvalidArgument("config has no seed");
    return *seed;
  }

  friend bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return a.model == b.model && a.data == b.data && a.optimizer == b.optimizer && a.hyper == b.hyper &&
           a.schedule == b.schedule && a.rule == b.rule && a.sweep_factors == b.sweep_factors &&
           a.probe_enabled == b.probe_enabled && a.probe == b.probe && a.seed == b.seed && a.out_dir == b.out_dir &&
           a.wall_clock_ms == b.wall_clock_ms && a.divergence_loss == b.divergence_loss;
  }
};

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      const auto part = trim(s.substr(start, i - start));
      if (!part.empty()) out.emplace_back(part);
      start = i + 1;
    }
  }
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw InvalidArgument(key + ": expected true or false, got '" + v + "'");
}

inline std::int64_t parse_int64(const std::string& key, const std::string& v) {
  const Rational r = Rational::parse(v);
  if (!r.is_integer()) throw InvalidArgument(key + ": expected an integer, got '" + v + "'");
  return r.num();
}

}  // namespace detail

/// Applies one `key = value` setting. Unknown keys are errors.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_int64;
  auto num = [&] { return parse_double(value); };
  auto integer = [&] { return parse_int64(key, value); };
  auto count = [&] {
    const auto v = integer();
    if (v < 0) throw InvalidArgument(key + " must be non-negative");
    return v;
  };
  try {
    if (key == "model.kind") c.model.kind = parse_model_kind(value);
    else if (key == "model.layers") {
      c.model.layer_sizes.clear();
      for (const auto& s : detail::split(value, ',')) c.model.layer_sizes.push_back(parse_int64(key, s));
    } else if (key == "model.sequence_length") c.model.sequence_length = integer();
    else if (key == "model.classes") c.model.classes = integer();
    else if (key == "data.source") c.data.source = value;
    else if (key == "data.train_images") c.data.train_images = value;
    else if (key == "data.train_labels") c.data.train_labels = value;
    else if (key == "data.test_images") c.data.test_images = value;
    else if (key == "data.test_labels") c.data.test_labels = value;
    else if (key == "data.text_path") c.data.text_path = value;
    else if (key == "data.train_size") c.data.train_size = count();
    else if (key == "data.test_size") c.data.test_size = count();
    else if (key == "data.subset_seed") c.data.subset_seed = static_cast<std::uint64_t>(count());
    else if (key == "data.synthetic_train") c.data.synthetic_train = count();
    else if (key == "data.synthetic_test") c.data.synthetic_test = count();
    else if (key == "data.synthetic_dim") c.data.synthetic_dim = count();
    else if (key == "data.synthetic_classes") c.data.synthetic_classes = count();
    else if (key == "data.synthetic_margin") c.data.synthetic_margin = num();
    else if (key == "data.vocab_limit") c.data.vocab_limit = count();
    else if (key == "data.corpus_tokens") c.data.corpus_tokens = count();
    else if (key == "data.corpus_vocab") c.data.corpus_vocab = count();
    else if (key == "data.corpus_fanout") c.data.corpus_fanout = count();
    else if (key == "data.test_fraction") c.data.test_fraction = num();
    else if (key == "optimizer.kind") c.optimizer = parse_optimizer_kind(value);
    else if (key == "optimizer.momentum") c.hyper.momentum = num();
    else if (key == "optimizer.beta1") c.hyper.beta1 = num();
    else if (key == "optimizer.beta2") c.hyper.beta2 = num();
    else if (key == "optimizer.epsilon") c.hyper.epsilon = num();
    else if (key == "optimizer.rmsprop_decay") c.hyper.rmsprop_decay = num();
    else if (key == "optimizer.adadelta_rho") c.hyper.adadelta_rho = num();
    else if (key == "optimizer.weight_decay") c.hyper.weight_decay = num();
    else if (key == "optimizer.trust_coefficient") c.hyper.trust_coefficient = num();
    else if (key == "optimizer.clip_norm") c.hyper.clip_norm = num();
    else if (key == "schedule.batch_size") c.schedule.batch_size = integer();
    else if (key == "schedule.dataset_size") c.schedule.dataset_size = count();
    else if (key == "schedule.lr") c.schedule.base_lr = LearningRate::parse(value);
    else if (key == "schedule.warmup_epochs") c.schedule.warmup_epochs = Rational::parse(value);
    else if (key == "schedule.total_epochs") c.schedule.total_epochs = Rational::parse(value);
    else if (key == "schedule.decay") c.schedule.decay.kind = parse_decay_kind(value);
    else if (key == "schedule.boundaries") {
      c.schedule.decay.boundaries_epochs.clear();
      for (const auto& s : detail::split(value, ',')) c.schedule.decay.boundaries_epochs.push_back(Rational::parse(s));
    } else if (key == "schedule.factor") c.schedule.decay.factor = num();
    else if (key == "schedule.power") c.schedule.decay.power = num();
    else if (key == "schedule.decay_rate") c.schedule.decay.decay_rate = num();
    else if (key == "schedule.start_epoch") c.schedule.decay.start_epoch = count();
    else if (key == "schedule.rule") c.rule = parse_scaling_rule(value);
    else if (key == "sweep.factors") {
      c.sweep_factors.clear();
      for (const auto& s : detail::split(value, ',')) c.sweep_factors.push_back(Rational::parse(s));
    } else if (key == "probe.enabled") c.probe_enabled = detail::parse_bool(key, value);
    else if (key == "probe.epsilon") c.probe.epsilon = num();
    else if (key == "probe.batch_size") c.probe.probe_batch_size = integer();
    else if (key == "probe.every") c.probe.probe_every = integer();
    else if (key == "probe.seed") c.probe.seed = static_cast<std::uint64_t>(count());
    else if (key == "probe.window") c.probe.window = integer();
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(count());
    else if (key == "out_dir") c.out_dir = value;
    else if (key == "output.wall_clock_ms") c.wall_clock_ms = detail::parse_bool(key, value);
    else if (key == "train.divergence_loss") c.divergence_loss = num();
    else throw InvalidArgument("unknown config key '" + key + "'");
  } catch (const InvalidArgument& e) {
    const std::string what = e.what();
    if (what.rfind(key, 0) == 0 || what.rfind("unknown config key", 0) == 0) throw;
    throw InvalidArgument(key + ": " + what);
  }
}

/// Parses `key = value` lines; '#' starts a comment, blank lines are skipped.
inline ExperimentConfig parse_config(std::string_view text, ExperimentConfig c = {}) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw InvalidArgument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string value(detail::trim(line.substr(eq + 1)));
    try {
      apply_setting(c, key, value);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("config line " + std::to_string(line_no) + ": " + e.what());
    }
    if (end == text.size()) break;
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  ExperimentConfig c = parse_config(ss.str());
  c.base_dir = path.parent_path();
  return c;
}

/// Every key with its current value, in the format parse_config reads.
inline std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream os;
  auto put = [&](const char* key, const std::string& value) { os << key << " = " << value << '\n'; };
  auto i64 = [](std::int64_t v) { return std::to_string(v); };
  auto rat = [](const Rational& r) { return r.to_string(); };
  put("model.kind", to_string(c.model.kind));
  put("model.layers", detail::join(c.model.layer_sizes, i64));
  put("model.sequence_length", i64(c.model.sequence_length));
  put("model.classes", i64(c.model.classes));
  put("data.source", c.data.source);
  put("data.train_images", c.data.train_images);
  put("data.train_labels", c.data.train_labels);
  put("data.test_images", c.data.test_images);
  put("data.test_labels", c.data.test_labels);
  put("data.text_path", c.data.text_path);
  put("data.train_size", i64(c.data.train_size));
  put("data.test_size", i64(c.data.test_size));
  put("data.subset_seed", std::to_string(c.data.subset_seed));
  put("data.synthetic_train", i64(c.data.synthetic_train));
  put("data.synthetic_test", i64(c.data.synthetic_test));
  put("data.synthetic_dim", i64(c.data.synthetic_dim));
  put("data.synthetic_classes", i64(c.data.synthetic_classes));
  put("data.synthetic_margin", format_double(c.data.synthetic_margin));
  put("data.vocab_limit", i64(c.data.vocab_limit));
  put("data.corpus_tokens", i64(c.data.corpus_tokens));
  put("data.corpus_vocab", i64(c.data.corpus_vocab));
  put("data.corpus_fanout", i64(c.data.corpus_fanout));
  put("data.test_fraction", format_double(c.data.test_fraction));
  put("optimizer.kind", to_string(c.optimizer));
  put("optimizer.momentum", format_double(c.hyper.momentum));
  put("optimizer.beta1", format_double(c.hyper.beta1));
  put("optimizer.beta2", format_double(c.hyper.beta2));
  put("optimizer.epsilon", format_double(c.hyper.epsilon));
  put("optimizer.rmsprop_decay", format_double(c.hyper.rmsprop_decay));
  put("optimizer.adadelta_rho", format_double(c.hyper.adadelta_rho));
  put("optimizer.weight_decay", format_double(c.hyper.weight_decay));
  put("optimizer.trust_coefficient", format_double(c.hyper.trust_coefficient));
  put("optimizer.clip_norm", format_double(c.hyper.clip_norm));
  put("schedule.batch_size", i64(c.schedule.batch_size));
  put("schedule.dataset_size", i64(c.schedule.dataset_size));
  put("schedule.lr", c.schedule.base_lr.to_string());
  put("schedule.warmup_epochs", rat(c.schedule.warmup_epochs));
  put("schedule.total_epochs", rat(c.schedule.total_epochs));
  put("schedule.decay", to_string(c.schedule.decay.kind));
  put("schedule.boundaries", detail::join(c.schedule.decay.boundaries_epochs, rat));
  put("schedule.factor", format_double(c.schedule.decay.factor));
  put("schedule.power", format_double(c.schedule.decay.power));
  put("schedule.decay_rate", format_double(c.schedule.decay.decay_rate));
  put("schedule.start_epoch", i64(c.schedule.decay.start_epoch));
  put("schedule.rule", to_string(c.rule));
  put("sweep.factors", detail::join(c.sweep_factors, rat));
  put("probe.enabled", c.probe_enabled ? "true" : "false");
  put("probe.epsilon", format_double(c.probe.epsilon));
  put("probe.batch_size", i64(c.probe.probe_batch_size));
  put("probe.every", i64(c.probe.probe_every));
  put("probe.seed", std::to_string(c.probe.seed));
  put("probe.window", i64(c.probe.window));
  if (c.seed) put("seed", std::to_string(*c.seed));
  put("out_dir", c.out_dir);
  put("output.wall_clock_ms", c.wall_clock_ms ? "true" : "false");
  put("train.divergence_loss", format_double(c.divergence_loss));
  return os.str();
}

}  // namespace legw
