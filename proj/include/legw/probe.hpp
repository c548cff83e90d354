// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "legw/errors.hpp"
#include "legw/models.hpp"
#include "legw/schedule.hpp"
#include "legw/tensor.hpp"

namespace legw {

/// Gradient of some fixed loss at the given parameters.
using GradientFn = std::function<NamedTensors(const ParameterSet&)>;

struct ProbeConfig {
  double epsilon = 1e-4;
  std::int64_t probe_batch_size = 256;
  std::int64_t probe_every = 1;
  std::uint64_t seed = 0;
  std::int64_t window = 5;  // moving-average width for peak_statistics

  void validate() const {
    if (!(epsilon > 0 && epsilon <= 1e-2)) throw InvalidArgument("probe epsilon must be in (0, 1e-2]");
    if (probe_every < 1) throw InvalidArgument("probe_every must be at least 1");
    if (probe_batch_size < 1) throw InvalidArgument("probe batch size must be positive");
    if (window < 1) throw InvalidArgument("probe window must be at least 1");
  }

  friend bool operator==(const ProbeConfig&, const ProbeConfig&) = default;
};

namespace detail {

inline void require_finite(const NamedTensors& t, const char* what) {
  for (const auto& [name, v] : t) {
    if (!v.all_finite()) throw NonFiniteError(name, std::string(what) + " contains NaN or Inf");
  }
}

}  // namespace detail

/// Finite-difference step actually used at `w`: epsilon * max(1, |w|/sqrt(dim)).
inline double perturbation_step(const ParameterSet& w, double epsilon) {
  const auto dim = static_cast<double>(total_size(w));
  return epsilon * std::max(1.0, norm(w) / std::sqrt(dim));
}

/// Hessian-vector product by forward difference,
///   Hv ~ (grad(w + h v) - grad(w)) / h,   h = perturbation_step(w, epsilon).
/// `v` must have unit norm. `grad_at_w` may carry a precomputed grad(w).
inline NamedTensors hessian_vector(const GradientFn& grad, const ParameterSet& w, const NamedTensors& v,
                                   double epsilon, const NamedTensors* grad_at_w = nullptr) {
  if (!(epsilon > 0)) throw InvalidArgument("epsilon must be positive");
  const double vn = norm(v);
  if (std::abs(vn - 1.0) > 1e-9) throw InvalidArgument("direction must have unit norm, got " + format_double(vn));
  const double h = perturbation_step(w, epsilon);
  NamedTensors g0 = grad_at_w ? *grad_at_w : grad(w);
  detail::require_finite(g0, "gradient");
  NamedTensors g1 = grad(axpy(w, h, v));
  detail::require_finite(g1, "perturbed gradient");
  NamedTensors hv = axpy(g1, -1.0, g0);
  for (auto& [_, t] : hv) {
    for (double& x : t.data()) x /= h;
  }
  return hv;
}

/// L(w, g) = |g^T H g| / |g|^2 with H the Hessian at w, evaluated along the
/// unit direction g/|g|.
inline double lipschitz_estimate(const GradientFn& grad, const ParameterSet& w, const NamedTensors& g,
                                 double epsilon, const NamedTensors* grad_at_w = nullptr) {
  const double gn = norm(g);
  if (!(gn > 0)) throw InvalidArgument("lipschitz_estimate: zero gradient has no direction");
  if (!std::isfinite(gn)) throw NonFiniteError("gradient", "norm is not finite");
  const NamedTensors v = scaled(g, 1.0 / gn);
  const NamedTensors hv = hessian_vector(grad, w, v, epsilon, grad_at_w);
  return std::abs(dot(v, hv));
}

struct ProbePoint {
  std::int64_t iteration = 0;
  double value = 0.0;
  friend bool operator==(const ProbePoint&, const ProbePoint&) = default;
};

struct ProbeTrace {
  std::vector<ProbePoint> points;
  std::vector<std::int64_t> missing;  // probed iterations with a zero gradient
  std::int64_t batch_size = 0;
  std::int64_t total_iterations = 0;
  std::string model_id;
};

/// A training loop a probe can ride along with. The probe only reads
/// parameters; `probe_gradient` must not touch any state that advance()
/// depends on.
class ProbeableLoop {
 public:
  virtual ~ProbeableLoop() = default;
  virtual bool finished() const = 0;
  virtual std::int64_t iteration() const = 0;
  virtual std::int64_t total_iterations() const = 0;
  virtual std::int64_t batch_size() const = 0;
  virtual std::string model_id() const = 0;
  virtual const ParameterSet& parameters() const = 0;
  /// Gradient of the loss on the fixed probe batch.
  virtual NamedTensors probe_gradient(const ParameterSet& at) = 0;
  virtual void advance() = 0;
};

/// Runs `loop` to completion, probing L(w, g) every `probe_every`
/// iterations with g the probe-batch gradient.
inline ProbeTrace trace_run(ProbeableLoop& loop, const ProbeConfig& config) {
  config.validate();
  ProbeTrace trace;
  trace.batch_size = loop.batch_size();
  trace.model_id = loop.model_id();
  trace.total_iterations = loop.total_iterations();
  const GradientFn grad = [&loop](const ParameterSet& at) { return loop.probe_gradient(at); };
  while (!loop.finished()) {
    const std::int64_t it = loop.iteration();
    if (it % config.probe_every == 0) {
      const ParameterSet& w = loop.parameters();
      const NamedTensors g = grad(w);
      detail::require_finite(g, "probe gradient");
      if (norm(g) > 0) {
        trace.points.push_back({it, lipschitz_estimate(grad, w, g, config.epsilon, &g)});
      } else {
        trace.missing.push_back(it);
      }
    }
    loop.advance();
  }
  return trace;
}

struct PeakStatistics {
  std::int64_t peak_iteration = 0;
  double peak_value = 0.0;  // smoothed
  std::size_t peak_index = 0;
  double peak_fraction = 0.0;  // peak_iteration / total_iterations, when known
};

/// Argmax of the centred moving average (width `window`, truncated at the
/// ends). Ties go to the earliest entry.
inline PeakStatistics peak_statistics(const ProbeTrace& trace, std::int64_t window = 5) {
  if (trace.points.empty()) throw InvalidArgument("peak_statistics of an empty trace");
  if (window < 1) throw InvalidArgument("window must be at least 1");
  const auto n = static_cast<std::int64_t>(trace.points.size());
  const std::int64_t left = (window - 1) / 2;
  const std::int64_t right = window - 1 - left;
  PeakStatistics best;
  bool have = false;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t lo = std::max<std::int64_t>(0, i - left);
    const std::int64_t hi = std::min<std::int64_t>(n - 1, i + right);
    double s = 0.0;
    for (std::int64_t j = lo; j <= hi; ++j) s += trace.points[static_cast<std::size_t>(j)].value;
    const double avg = s / static_cast<double>(hi - lo + 1);
    if (!have || avg > best.peak_value) {
      have = true;
      best.peak_value = avg;
      best.peak_index = static_cast<std::size_t>(i);
      best.peak_iteration = trace.points[static_cast<std::size_t>(i)].iteration;
    }
  }
  if (trace.total_iterations > 0) {
    best.peak_fraction = static_cast<double>(best.peak_iteration) / static_cast<double>(trace.total_iterations);
  }
  return best;
}

/// CSV with header `iteration,L`; zero-gradient iterations have no row.
inline void write_probe_csv(std::ostream& os, const ProbeTrace& trace) {
  os << "iteration,L\n";
  for (const auto& p : trace.points) os << p.iteration << ',' << format_double(p.value) << '\n';
}

}  // namespace legw
