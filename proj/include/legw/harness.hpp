// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "legw/config.hpp"
#include "legw/data.hpp"
#include "legw/models.hpp"
#include "legw/optim.hpp"
#include "legw/probe.hpp"
#include "legw/schedule.hpp"

namespace legw {

struct LoadedData {
  Dataset train;
  Dataset test;
  std::string description;
};

namespace detail {

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) throw InvalidArgument("empty data path");
  const std::filesystem::path path(p);
  if (path.is_absolute() || base.empty()) return path.string();
  return (base / path).string();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Leading rows of `ds` into one set, the rest into another.
inline std::pair<Dataset, Dataset> split_rows(const Dataset& ds, std::int64_t first) {
  if (first <= 0 || first >= ds.size()) throw InvalidArgument("split point outside the dataset");
  std::vector<std::int64_t> a(static_cast<std::size_t>(first));
  std::vector<std::int64_t> b(static_cast<std::size_t>(ds.size() - first));
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    if (i < first) a[static_cast<std::size_t>(i)] = i;
    else b[static_cast<std::size_t>(i - first)] = i;
  }
  Batch ba = gather(ds, a);
  Batch bb = gather(ds, b);
  return {Dataset{std::move(ba.inputs), std::move(ba.labels), ds.classes, ds.feature_shape},
          Dataset{std::move(bb.inputs), std::move(bb.labels), ds.classes, ds.feature_shape}};
}

inline LoadedData corpus_data(const std::string& text, const DataConfig& d, std::int64_t steps) {
  if (!(d.test_fraction > 0 && d.test_fraction < 1)) throw InvalidArgument("data.test_fraction must be in (0, 1)");
  TokenizedCorpus corpus = tokenize_corpus(text, d.vocab_limit, steps);
  const auto pairs = corpus.dataset.size();
  const auto train = static_cast<std::int64_t>(std::floor(static_cast<double>(pairs) * (1.0 - d.test_fraction)));
  // Pairs straddling the split share tokens; drop `steps` of them so no
  // held-out target was seen as a training input.
  auto [tr, rest] = split_rows(corpus.dataset, train);
  if (rest.size() <= steps + 1) throw InvalidArgument("held-out part of the corpus is too short");
  auto [gap, te] = split_rows(rest, steps);
  (void)gap;
  return {std::move(tr), std::move(te),
          "corpus of " + std::to_string(corpus.token_ids.size()) + " tokens, vocabulary " +
              std::to_string(corpus.vocabulary.size())};
}

}  // namespace detail

/// Loads (or generates) the train and held-out splits named by the config.
inline LoadedData load_data(const ExperimentConfig& c) {
  const DataConfig& d = c.data;
  LoadedData out;
  if (d.source == "mnist") {
    out.train = load_mnist_idx(detail::resolve(c.base_dir, d.train_images), detail::resolve(c.base_dir, d.train_labels));
    out.test = load_mnist_idx(detail::resolve(c.base_dir, d.test_images), detail::resolve(c.base_dir, d.test_labels));
    out.description = "IDX images";
  } else if (d.source == "blobs" || d.source == "teacher") {
    const std::int64_t n = d.synthetic_train + d.synthetic_test;
    if (d.synthetic_train <= 0 || d.synthetic_test <= 0) throw InvalidArgument("synthetic splits must be non-empty");
    const Dataset all = d.source == "blobs"
                            ? make_separable_blobs(n, d.synthetic_dim, d.subset_seed, d.synthetic_margin)
                            : make_teacher_classification(n, d.synthetic_dim, d.synthetic_classes, d.subset_seed);
    std::tie(out.train, out.test) = detail::split_rows(all, d.synthetic_train);
    out.description = d.source + " synthetic data";
  } else if (d.source == "text" || d.source == "markov") {
    if (c.model.kind != ModelKind::kLstmLm) throw InvalidArgument("corpus data needs model.kind = lstm-lm");
    const std::string text = d.source == "text" ? detail::read_text_file(detail::resolve(c.base_dir, d.text_path))
                                                : make_markov_corpus(d.corpus_tokens, d.corpus_vocab,
                                                                     d.corpus_fanout, d.subset_seed);
    out = detail::corpus_data(text, d, c.model.sequence_length);
  } else {
    throw InvalidArgument("unknown data.source '" + d.source + "'");
  }
  if (d.train_size > 0 && d.train_size < out.train.size()) out.train = subset(out.train, d.train_size, d.subset_seed);
  if (d.test_size > 0 && d.test_size < out.test.size()) out.test = subset(out.test, d.test_size, d.subset_seed + 1);
  out.train.validate();
  out.test.validate();
  return out;
}

/// Model spec with `classes` taken from the data when the config left it 0.
inline ModelSpec resolved_model(const ExperimentConfig& c, const LoadedData& data) {
  ModelSpec m = c.model;
  if (m.classes == 0) m.classes = data.train.classes;
  if (m.classes != data.train.classes) {
    throw InvalidArgument("model has " + std::to_string(m.classes) + " classes, data has " +
                          std::to_string(data.train.classes));
  }
  if (m.input_width() != data.train.features()) {
    throw InvalidArgument("model expects " + std::to_string(m.input_width()) + " input features, data has " +
                          std::to_string(data.train.features()));
  }
  m.validate();
  return m;
}

/// Schedule with dataset_size filled from the training split.
inline ScheduleSpec resolved_schedule(const ExperimentConfig& c, std::int64_t train_size) {
  ScheduleSpec s = c.schedule;
  if (s.dataset_size == 0) s.dataset_size = train_size;
  if (s.dataset_size != train_size) {
    throw InvalidArgument("schedule.dataset_size is " + std::to_string(s.dataset_size) + " but the training set has " +
                          std::to_string(train_size) + " samples");
  }
  s.validate();
  return s;
}

/// One metrics.csv row. `metric` is set on rows that end an epoch.
struct RunRecord {
  std::int64_t iteration = 0;
  double epoch = 0.0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> metric;
  double ms = 0.0;
};

struct RunSummary {
  std::string metric_name;  // "accuracy" or "perplexity"
  bool higher_is_better = true;
  double final_metric = std::numeric_limits<double>::quiet_NaN();
  double final_test_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
  std::int64_t divergence_iteration = -1;
  std::string divergence_reason;
  std::int64_t iterations_run = 0;
  std::int64_t total_iterations = 0;
  ScheduleSpec schedule;
  std::optional<PeakStatistics> probe_peak;
  std::int64_t probe_points = 0;
  std::string out_dir;
};

struct RunResult {
  RunSummary summary;
  std::vector<RunRecord> records;
  std::optional<ProbeTrace> trace;
};

inline constexpr const char* kMetricsHeader = "iteration,epoch,lr,loss,metric,ms";

inline void write_metrics_row(std::ostream& os, const RunRecord& r) {
  os << r.iteration << ',' << format_double(r.epoch) << ',' << format_double(r.lr) << ',' << format_double(r.loss)
     << ',' << (r.metric ? format_double(*r.metric) : std::string()) << ',' << format_double(r.ms) << '\n';
}

inline void write_metrics_csv(std::ostream& os, const std::vector<RunRecord>& records) {
  os << kMetricsHeader << '\n';
  for (const auto& r : records) write_metrics_row(os, r);
}

/// JSON form of a summary. Non-finite numbers become null.
inline nlohmann::ordered_json summary_json(const RunSummary& s) {
  auto num = [](double v) -> nlohmann::ordered_json {
    if (!std::isfinite(v)) return nullptr;
    return v;
  };
  nlohmann::ordered_json j;
  j["metric_name"] = s.metric_name;
  j["final_metric"] = num(s.final_metric);
  j["final_test_loss"] = num(s.final_test_loss);
  j["final_train_loss"] = num(s.final_train_loss);
  j["diverged"] = s.diverged;
  if (s.diverged) {
    j["divergence_iteration"] = s.divergence_iteration;
    j["divergence_reason"] = s.divergence_reason;
  }
  j["iterations_run"] = s.iterations_run;
  j["total_iterations"] = s.total_iterations;
  j["batch_size"] = s.schedule.batch_size;
  j["dataset_size"] = s.schedule.dataset_size;
  j["lr"] = s.schedule.base_lr.to_string();
  j["lr_value"] = s.schedule.base_lr.value();
  j["warmup_epochs"] = s.schedule.warmup_epochs.to_string();
  j["warmup_iterations"] = s.schedule.warmup_iteration_count();
  j["total_epochs"] = s.schedule.total_epochs.to_string();
  j["decay"] = to_string(s.schedule.decay.kind);
  if (s.probe_peak) {
    j["probe_points"] = s.probe_points;
    j["probe_peak_iteration"] = s.probe_peak->peak_iteration;
    j["probe_peak_value"] = num(s.probe_peak->peak_value);
    j["probe_peak_fraction"] = num(s.probe_peak->peak_fraction);
  }
  return j;
}

/// Mini-batch training driven by lr_at, with a held-out evaluation at each
/// epoch end. Also a ProbeableLoop: the probe batch is a fixed seeded draw
/// from the held-out split, run through a separate model instance so
/// probing never touches training state.
class Trainer : public ProbeableLoop {
 public:
  Trainer(const ExperimentConfig& config, const LoadedData& data)
      : config_(config),
        data_(&data),
        spec_(resolved_model(config, data)),
        schedule_(resolved_schedule(config, data.train.size())),
        model_(spec_),
        eval_model_(spec_),
        probe_model_(spec_),
        params_(build(spec_, config.seed_value())),
        optimizer_(init_optimizer(config.optimizer, config.hyper, params_)),
        batches_(data.train, schedule_.batch_size, config.seed_value(), false, true),
        total_(schedule_.total_iterations()),
        start_(std::chrono::steady_clock::now()) {
    if (config.probe_enabled) {
      config.probe.validate();
      const std::int64_t n = std::min(config.probe.probe_batch_size, data.test.size());
      Rng rng(config.probe.seed, 0x70726f6265ULL);
      auto perm = rng.permutation(data.test.size());
      perm.resize(static_cast<std::size_t>(n));
      probe_batch_ = gather(data.test, perm);
    }
  }

  // ProbeableLoop
  bool finished() const override { return iteration_ >= total_ || diverged_; }
  std::int64_t iteration() const override { return iteration_; }
  std::int64_t total_iterations() const override { return total_; }
  std::int64_t batch_size() const override { return schedule_.batch_size; }
  std::string model_id() const override { return to_string(spec_.kind); }
  const ParameterSet& parameters() const override { return params_; }
  NamedTensors probe_gradient(const ParameterSet& at) override {
    if (!probe_batch_) throw Error("probing is not enabled for this run");
    return probe_model_.gradient(at, *probe_batch_);
  }

  /// One optimizer step; evaluates when the step closes an epoch.
  void advance() override {
    if (finished()) throw Error("advance() on a finished run");
    const std::optional<Batch> batch = batches_.next_batch();
    const double lr = lr_at(schedule_, iteration_);
    RunRecord rec;
    rec.iteration = iteration_;
    rec.epoch = schedule_.epoch_at(iteration_);
    rec.lr = lr;
    auto [loss, grads] = model_.loss_and_gradient(params_, *batch);
    rec.loss = loss;
    last_train_loss_ = loss;
    std::string why;
    if (!std::isfinite(loss)) why = "loss is " + format_double(loss);
    else if (config_.divergence_loss > 0 && loss > config_.divergence_loss) why = "loss " + format_double(loss) + " above limit";
    else {
      for (const auto& [name, g] : grads) {
        if (!g.all_finite()) {
          why = "gradient of " + name + " is not finite";
          break;
        }
      }
    }
    if (!why.empty()) {
      diverged_ = true;
      divergence_iteration_ = iteration_;
      divergence_reason_ = why;
      rec.ms = elapsed_ms();
      emit(rec);
      ++iteration_;
      return;
    }
    StepResult next = step(optimizer_, params_, grads, lr);
    params_ = std::move(next.params);
    optimizer_ = std::move(next.state);
    ++iteration_;
    if (batches_.epoch_finished() || iteration_ == total_) {
      last_eval_ = evaluate(eval_model_, params_, data_->test);
      rec.metric = metric_of(*last_eval_);
    }
    rec.ms = elapsed_ms();
    emit(rec);
  }

  /// Called with each record as soon as it is complete.
  void set_record_sink(std::function<void(const RunRecord&)> sink) { sink_ = std::move(sink); }

  const std::vector<RunRecord>& records() const noexcept { return records_; }
  const ScheduleSpec& schedule() const noexcept { return schedule_; }
  const ModelSpec& model_spec() const noexcept { return spec_; }

  RunSummary summary() const {
    RunSummary s;
    s.metric_name = is_lm() ? "perplexity" : "accuracy";
    s.higher_is_better = !is_lm();
    if (last_eval_) {
      s.final_metric = metric_of(*last_eval_);
      s.final_test_loss = last_eval_->mean_loss;
    }
    s.final_train_loss = last_train_loss_;
    s.diverged = diverged_;
    s.divergence_iteration = divergence_iteration_;
    s.divergence_reason = divergence_reason_;
    s.iterations_run = static_cast<std::int64_t>(records_.size());
    s.total_iterations = total_;
    s.schedule = schedule_;
    return s;
  }

 private:
  void emit(const RunRecord& rec) {
    records_.push_back(rec);
    if (sink_) sink_(rec);
  }
  bool is_lm() const { return spec_.kind == ModelKind::kLstmLm; }
  double metric_of(const Evaluation& e) const { return is_lm() ? e.perplexity : e.accuracy; }
  double elapsed_ms() const {
    if (!config_.wall_clock_ms) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

  ExperimentConfig config_;
  const LoadedData* data_;
  ModelSpec spec_;
  ScheduleSpec schedule_;
  Model model_;
  Model eval_model_;
  Model probe_model_;
  ParameterSet params_;
  OptimizerState optimizer_;
  BatchIterator batches_;
  std::int64_t total_;
  std::int64_t iteration_ = 0;
  std::optional<Batch> probe_batch_;
  std::vector<RunRecord> records_;
  std::optional<Evaluation> last_eval_;
  double last_train_loss_ = std::numeric_limits<double>::quiet_NaN();
  bool diverged_ = false;
  std::int64_t divergence_iteration_ = -1;
  std::string divergence_reason_;
  std::chrono::steady_clock::time_point start_;
  std::function<void(const RunRecord&)> sink_;
};

/// Writes schedule.csv, summary.json and (when probing) probe.csv into
/// `dir`. metrics.csv is streamed by run() while training.
inline void write_run_outputs(const std::filesystem::path& dir, const RunResult& r) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw Error("cannot write '" + (dir / name).string() + "'");
    return f;
  };
  {
    auto f = open("schedule.csv");
    write_schedule_csv(f, r.summary.schedule);
  }
  if (r.trace) {
    auto f = open("probe.csv");
    write_probe_csv(f, *r.trace);
  }
  {
    auto f = open("summary.json");
    f << summary_json(r.summary).dump(2) << '\n';
  }
}

/// Runs one experiment on already-loaded data. Writes outputs when
/// `config.out_dir` is non-empty.
inline RunResult run(const ExperimentConfig& config, const LoadedData& data) {
  Trainer trainer(config, data);
  RunResult out;
  std::ofstream metrics;
  if (!config.out_dir.empty()) {
    std::filesystem::create_directories(config.out_dir);
    const auto path = std::filesystem::path(config.out_dir) / "metrics.csv";
    metrics.open(path, std::ios::binary);
    if (!metrics) throw Error("cannot write '" + path.string() + "'");
    metrics << kMetricsHeader << '\n';
    trainer.set_record_sink([&metrics](const RunRecord& r) {
      write_metrics_row(metrics, r);
      if (r.metric) metrics.flush();
    });
  }
  if (config.probe_enabled) {
    out.trace = trace_run(trainer, config.probe);
  } else {
    while (!trainer.finished()) trainer.advance();
  }
  out.summary = trainer.summary();
  out.records = trainer.records();
  if (out.trace && !out.trace->points.empty()) {
    out.summary.probe_peak = peak_statistics(*out.trace, config.probe.window);
    out.summary.probe_points = static_cast<std::int64_t>(out.trace->points.size());
  }
  out.summary.out_dir = config.out_dir;
  if (!config.out_dir.empty()) {
    metrics.close();
    if (!metrics) throw Error("failed writing metrics.csv under '" + config.out_dir + "'");
    write_run_outputs(config.out_dir, out);
  }
  return out;
}

inline RunResult run(const ExperimentConfig& config) { return run(config, load_data(config)); }

struct SweepEntry {
  Rational factor;
  ScheduleSpec schedule;
  std::optional<RunSummary> summary;  // empty in plan-only mode
};

/// Directory name for one sweep member.
inline std::string sweep_run_dir(const ScheduleSpec& s) { return "B" + std::to_string(s.batch_size); }

/// batch_size, exact and decimal LR and warmup, and the final metric.
inline void write_sweep_csv(std::ostream& os, const std::vector<SweepEntry>& entries) {
  os << "factor,batch_size,lr,lr_value,warmup_epochs,warmup_epochs_value,warmup_iterations,total_iterations,"
        "final_metric,diverged\n";
  for (const auto& e : entries) {
    const ScheduleSpec& s = e.schedule;
    os << e.factor.to_string() << ',' << s.batch_size << ',' << s.base_lr.to_string() << ','
       << format_double(s.base_lr.value()) << ',' << s.warmup_epochs.to_string() << ','
       << format_double(s.warmup_epochs.to_double()) << ',' << s.warmup_iteration_count() << ','
       << s.total_iterations() << ',';
    if (e.summary) {
      os << (std::isfinite(e.summary->final_metric) ? format_double(e.summary->final_metric) : std::string()) << ','
         << (e.summary->diverged ? "true" : "false");
    } else {
      os << ',';
    }
    os << '\n';
  }
}

/// legw_scale of the base schedule for each sweep factor, everything else
/// held fixed. Runs go to out_dir/B<batch>; a diverged run is recorded and
/// the sweep moves on. With `plan_only` nothing is trained and the schedule
/// needs an explicit dataset_size.
inline std::vector<SweepEntry> run_sweep(const ExperimentConfig& config, bool plan_only = false) {
  if (config.sweep_factors.empty()) throw InvalidArgument("sweep.factors is empty");
  std::optional<LoadedData> data;
  ScheduleSpec base = config.schedule;
  if (!plan_only) {
    data = load_data(config);
    base = resolved_schedule(config, data->train.size());
  } else if (base.dataset_size == 0) {
    throw InvalidArgument("a plan-only sweep needs schedule.dataset_size");
  }
  std::vector<SweepEntry> entries;
  for (const auto& k : config.sweep_factors) {
    SweepEntry e{k, legw_scale(base, k, config.rule), std::nullopt};
    e.schedule.validate();
    if (!plan_only) {
      ExperimentConfig member = config;
      member.schedule = e.schedule;
      member.out_dir =
          config.out_dir.empty() ? std::string() : (std::filesystem::path(config.out_dir) / sweep_run_dir(e.schedule)).string();
      e.summary = run(member, *data).summary;
    }
    entries.push_back(std::move(e));
  }
  if (!config.out_dir.empty()) {
    std::filesystem::create_directories(config.out_dir);
    std::ofstream f(std::filesystem::path(config.out_dir) / "sweep.csv", std::ios::binary);
    if (!f) throw Error("cannot write sweep.csv under '" + config.out_dir + "'");
    write_sweep_csv(f, entries);
  }
  return entries;
}

struct TuneResult {
  std::size_t best_index = 0;
  LearningRate best_lr;
  ExperimentConfig best_config;
  std::vector<RunSummary> summaries;  // in grid order
};

/// Runs every grid LR with the same seed and keeps the best final metric
/// (highest accuracy, lowest perplexity). Ties go to the smaller LR.
/// Diverged runs never win; if all diverge this throws.
template <class Runner>
TuneResult tune_grid(const ExperimentConfig& config, const std::vector<LearningRate>& grid, Runner&& runner) {
  if (grid.empty()) throw InvalidArgument("learning-rate grid is empty");
  TuneResult out;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    ExperimentConfig c = config;
    c.schedule.base_lr = grid[i];
    out.summaries.push_back(runner(c, i));
  }
  std::vector<std::size_t> order(grid.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return grid[a].value() < grid[b].value(); });
  std::optional<std::size_t> best;
  for (std::size_t i : order) {
    const RunSummary& s = out.summaries[i];
    if (s.diverged || !std::isfinite(s.final_metric)) continue;
    if (!best) {
      best = i;
      continue;
    }
    const double incumbent = out.summaries[*best].final_metric;
    if (s.higher_is_better ? s.final_metric > incumbent : s.final_metric < incumbent) best = i;
  }
  if (!best) throw Error("every run in the learning-rate grid diverged");
  out.best_index = *best;
  out.best_lr = grid[*best];
  out.best_config = config;
  out.best_config.schedule.base_lr = grid[*best];
  return out;
}

/// tune_grid with real runs on one loaded dataset, each writing to
/// out_dir/lr<index>.
inline TuneResult tune_grid(const ExperimentConfig& config, const std::vector<LearningRate>& grid) {
  const LoadedData data = load_data(config);
  return tune_grid(config, grid, [&](ExperimentConfig c, std::size_t i) {
    if (!c.out_dir.empty()) c.out_dir = (std::filesystem::path(c.out_dir) / ("lr" + std::to_string(i))).string();
    return run(c, data).summary;
  });
}

}  // namespace legw
