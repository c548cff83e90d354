// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "legw/errors.hpp"
#include "legw/rational.hpp"

namespace legw {

/// Shortest decimal that round-trips to `v`.
inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc{} ? std::string(buf, ptr) : std::string("nan");
}

inline double parse_double(std::string_view s) {
  s = detail::trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw InvalidArgument("cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

enum class ScalingRule { kSqrt, kLinear };

inline const char* to_string(ScalingRule r) { return r == ScalingRule::kSqrt ? "sqrt" : "linear"; }

inline ScalingRule parse_scaling_rule(const std::string& s) {
  if (s == "sqrt") return ScalingRule::kSqrt;
  if (s == "linear") return ScalingRule::kLinear;
  throw InvalidArgument("unknown scaling rule '" + s + "'");
}

/// Learning-rate multiplier for a batch-size factor k: sqrt(k) or k.
inline double lr_multiplier(ScalingRule rule, double k) { return rule == ScalingRule::kSqrt ? std::sqrt(k) : k; }

/// A learning rate kept in factored form so that scaling by powers of two
/// stays exact:
///
///   value = 2^exponent * linear * sqrt(radicand) * coefficient / divisor
///
/// `linear` and `radicand` only ever hold odd parts; powers of two go to
/// `exponent`. Textual form: factors joined by '*', optionally followed by
/// "/divisor", e.g. "2^2.5", "2^-0.5/1e3", "0.05", "2^(3/2)*sqrt(3)".
class LearningRate {
 public:
  LearningRate() = default;
  explicit LearningRate(double coefficient) : coefficient_(coefficient) {}
  LearningRate(double coefficient, Rational exponent, double divisor = 1.0)
      : coefficient_(coefficient), divisor_(divisor), exponent_(exponent) {}

  static LearningRate power_of_two(Rational exponent, double divisor = 1.0) {
    return LearningRate(1.0, exponent, divisor);
  }

  double value() const {
    double v = std::exp2(exponent_.to_double());
    if (linear_ != Rational(1)) v = v * static_cast<double>(linear_.num()) / static_cast<double>(linear_.den());
    if (radicand_ != Rational(1)) v *= std::sqrt(radicand_.to_double());
    return v * coefficient_ / divisor_;
  }

  const Rational& exponent() const noexcept { return exponent_; }
  const Rational& linear() const noexcept { return linear_; }
  const Rational& radicand() const noexcept { return radicand_; }
  double coefficient() const noexcept { return coefficient_; }
  double divisor() const noexcept { return divisor_; }

  /// Multiplies by sqrt(k) or k, exactly.
  LearningRate scaled(const Rational& k, ScalingRule rule) const {
    if (!k.is_positive()) throw InvalidArgument("scaling factor must be positive, got " + k.to_string());
    const int twos = std::countr_zero(static_cast<std::uint64_t>(k.num())) -
                     std::countr_zero(static_cast<std::uint64_t>(k.den()));
    const Rational odd = k / pow2(twos);
    LearningRate out = *this;
    if (rule == ScalingRule::kSqrt) {
      out.exponent_ += Rational(twos, 2);
      out.radicand_ *= odd;
    } else {
      out.exponent_ += Rational(twos);
      out.linear_ *= odd;
    }
    return out;
  }

  std::string to_string() const {
    std::vector<std::string> factors;
    if (coefficient_ != 1.0) factors.push_back(format_double(coefficient_));
    if (!exponent_.is_zero()) {
      factors.push_back(exponent_.is_integer() ? "2^" + exponent_.to_string() : "2^(" + exponent_.to_string() + ")");
    }
    if (linear_ != Rational(1)) factors.push_back("(" + linear_.to_string() + ")");
    if (radicand_ != Rational(1)) factors.push_back("sqrt(" + radicand_.to_string() + ")");
    std::string out;
    for (std::size_t i = 0; i < factors.size(); ++i) out += (i ? "*" : "") + factors[i];
    if (out.empty()) out = "1";
    if (divisor_ != 1.0) out += "/" + format_double(divisor_);
    return out;
  }

  static LearningRate parse(std::string_view text) {
    text = detail::trim(text);
    if (text.empty()) throw InvalidArgument("empty learning rate");
    LearningRate lr;
    // A top-level '/' (outside parentheses) starts the divisor.
    int depth = 0;
    std::size_t slash = std::string_view::npos;
    for (std::size_t i = 0; i < text.size(); ++i) {
      if (text[i] == '(') ++depth;
      if (text[i] == ')') --depth;
      if (text[i] == '/' && depth == 0) {
        slash = i;
        break;
      }
    }
    if (slash != std::string_view::npos) {
      lr.divisor_ = parse_double(text.substr(slash + 1));
      text = text.substr(0, slash);
    }
    std::size_t start = 0;
    depth = 0;
    for (std::size_t i = 0; i <= text.size(); ++i) {
      if (i < text.size() && text[i] == '(') ++depth;
      if (i < text.size() && text[i] == ')') --depth;
      if (i == text.size() || (text[i] == '*' && depth == 0)) {
        lr.apply_factor(detail::trim(text.substr(start, i - start)));
        start = i + 1;
      }
    }
    if (!(lr.value() > 0) || !std::isfinite(lr.value())) {
      throw InvalidArgument("learning rate '" + std::string(text) + "' must be positive and finite");
    }
    return lr;
  }

  friend bool operator==(const LearningRate&, const LearningRate&) = default;

 private:
  static Rational pow2(int e) {
    Rational r(1);
    for (int i = 0; i < std::abs(e); ++i) r *= Rational(2);
    return e >= 0 ? r : r.reciprocal();
  }
  static std::string_view unparen(std::string_view s) {
    s = detail::trim(s);
    if (s.size() >= 2 && s.front() == '(' && s.back() == ')') s = s.substr(1, s.size() - 2);
    return s;
  }
  void apply_factor(std::string_view f) {
    if (f.empty()) throw InvalidArgument("empty factor in learning rate");
    if (f.starts_with("2^")) {
      exponent_ += Rational::parse(unparen(f.substr(2)));
    } else if (f.starts_with("sqrt(")) {
      const Rational r = Rational::parse(unparen(f.substr(4)));
      *this = scaled(r, ScalingRule::kSqrt);
    } else if (f.front() == '(') {
      *this = scaled(Rational::parse(unparen(f)), ScalingRule::kLinear);
    } else {
      coefficient_ *= parse_double(f);
    }
  }

  double coefficient_ = 1.0;
  double divisor_ = 1.0;
  Rational exponent_{0};
  Rational linear_{1};
  Rational radicand_{1};
};

enum class DecayKind { kConstant, kMultiStep, kPoly, kExponential };

inline const char* to_string(DecayKind k) {
  switch (k) {
    case DecayKind::kConstant: return "constant";
    case DecayKind::kMultiStep: return "multi-step";
    case DecayKind::kPoly: return "poly";
    case DecayKind::kExponential: return "exponential";
  }
  return "?";
}

inline DecayKind parse_decay_kind(const std::string& s) {
  for (auto k : {DecayKind::kConstant, DecayKind::kMultiStep, DecayKind::kPoly, DecayKind::kExponential}) {
    if (s == to_string(k)) return k;
  }
  throw InvalidArgument("unknown decay kind '" + s + "'");
}

/// Post-warmup decay curve.
struct DecaySpec {
  DecayKind kind = DecayKind::kConstant;
  std::vector<Rational> boundaries_epochs;  // multi-step
  double factor = 0.1;                      // multi-step
  double power = 2.0;                       // poly
  double decay_rate = 1.0;                  // exponential, applied per whole epoch
  std::int64_t start_epoch = 0;             // exponential: first decayed epoch index

  static DecaySpec constant() { return {}; }
  static DecaySpec multi_step(std::vector<Rational> boundaries, double factor) {
    DecaySpec d;
    d.kind = DecayKind::kMultiStep;
    d.boundaries_epochs = std::move(boundaries);
    d.factor = factor;
    return d;
  }
  static DecaySpec poly(double power) {
    DecaySpec d;
    d.kind = DecayKind::kPoly;
    d.power = power;
    return d;
  }
  static DecaySpec exponential(double rate, std::int64_t start_epoch) {
    DecaySpec d;
    d.kind = DecayKind::kExponential;
    d.decay_rate = rate;
    d.start_epoch = start_epoch;
    return d;
  }

  void validate() const {
    switch (kind) {
      case DecayKind::kConstant: break;
      case DecayKind::kMultiStep:
        if (!(factor > 0 && factor <= 1)) throw InvalidArgument("multi-step factor must be in (0, 1]");
        for (std::size_t i = 0; i < boundaries_epochs.size(); ++i) {
          if (!boundaries_epochs[i].is_positive()) throw InvalidArgument("multi-step boundaries must be positive");
          if (i && !(boundaries_epochs[i - 1] < boundaries_epochs[i])) {
            throw InvalidArgument("multi-step boundaries must be strictly increasing");
          }
        }
        break;
      case DecayKind::kPoly:
        if (!(power > 0)) throw InvalidArgument("poly power must be positive");
        break;
      case DecayKind::kExponential:
        if (!(decay_rate > 0 && decay_rate <= 1)) throw InvalidArgument("exponential decay rate must be in (0, 1]");
        if (start_epoch < 0) throw InvalidArgument("exponential start epoch must be non-negative");
        break;
    }
  }

  friend bool operator==(const DecaySpec&, const DecaySpec&) = default;
};

/// Complete learning-rate schedule for one batch size. Epoch quantities are
/// exact rationals; iteration i sits at epoch i * batch_size / dataset_size.
struct ScheduleSpec {
  std::int64_t batch_size = 1;
  LearningRate base_lr{1.0};
  Rational warmup_epochs{0};
  DecaySpec decay;
  Rational total_epochs{1};
  std::int64_t dataset_size = 1;

  void validate() const {
    if (batch_size <= 0) throw InvalidArgument("batch size must be positive");
    if (dataset_size <= 0) throw InvalidArgument("dataset size must be positive");
    if (!total_epochs.is_positive()) throw InvalidArgument("total epochs must be positive");
    if (warmup_epochs < Rational(0)) throw InvalidArgument("warmup epochs must be non-negative");
    if (warmup_epochs > total_epochs) {
      throw InvalidArgument("warmup (" + warmup_epochs.to_string() + " epochs) exceeds total (" +
                            total_epochs.to_string() + " epochs)");
    }
    const double lr = base_lr.value();
    if (!(lr > 0) || !std::isfinite(lr)) throw InvalidArgument("base learning rate must be positive and finite");
    decay.validate();
  }

  /// ceil(n / B)
  std::int64_t iterations_per_epoch() const { return (dataset_size + batch_size - 1) / batch_size; }
  /// round(epochs * n / B), halves up.
  std::int64_t epochs_to_iterations(const Rational& epochs) const {
    return (epochs * Rational(dataset_size, batch_size)).round_half_up();
  }
  /// I
  std::int64_t total_iterations() const { return epochs_to_iterations(total_epochs); }
  /// W; zero when there is no warmup.
  std::int64_t warmup_iteration_count() const { return epochs_to_iterations(warmup_epochs); }
  double epoch_at(std::int64_t iteration) const {
    return static_cast<double>(iteration) * static_cast<double>(batch_size) / static_cast<double>(dataset_size);
  }

  friend bool operator==(const ScheduleSpec&, const ScheduleSpec&) = default;
};

/// Decay multiplier at `iteration`, ignoring warmup.
inline double decay_factor(const ScheduleSpec& spec, std::int64_t iteration) {
  const DecaySpec& d = spec.decay;
  switch (d.kind) {
    case DecayKind::kConstant: return 1.0;
    case DecayKind::kMultiStep: {
      // boundary b is passed once iteration * B >= b * n
      const Rational samples(iteration * spec.batch_size);
      double f = 1.0;
      for (const auto& b : d.boundaries_epochs) {
        if (samples >= b * Rational(spec.dataset_size)) f *= d.factor;
      }
      return f;
    }
    case DecayKind::kPoly: {
      const double frac = static_cast<double>(iteration) / static_cast<double>(spec.total_iterations());
      return std::pow(1.0 - frac, d.power);
    }
    case DecayKind::kExponential: {
      const std::int64_t whole_epochs = iteration * spec.batch_size / spec.dataset_size;
      const std::int64_t steps = std::max<std::int64_t>(0, whole_epochs - d.start_epoch + 1);
      return std::pow(d.decay_rate, static_cast<double>(steps));
    }
  }
  return 1.0;
}

/// Learning rate of `iteration`: a linear ramp eta * (i + 1) / W during the
/// first W iterations, then eta times the decay factor.
inline double lr_at(const ScheduleSpec& spec, std::int64_t iteration) {
  const std::int64_t total = spec.total_iterations();
  if (iteration < 0 || iteration >= total) {
    throw InvalidArgument("iteration " + std::to_string(iteration) + " outside schedule of " + std::to_string(total) +
                          " iterations");
  }
  const double eta = spec.base_lr.value();
  const std::int64_t warmup = spec.warmup_iteration_count();
  if (iteration < warmup) {
    return eta * (static_cast<double>(iteration + 1) / static_cast<double>(warmup));
  }
  return eta * decay_factor(spec, iteration);
}

/// round(warmup_epochs * n / B); the warmup must be non-empty.
inline std::int64_t warmup_iterations(const ScheduleSpec& spec) {
  if (!spec.warmup_epochs.is_positive()) throw InvalidArgument("schedule has no warmup");
  const std::int64_t w = spec.warmup_iteration_count();
  if (w == 0) {
    throw InvalidArgument("warmup of " + spec.warmup_epochs.to_string() + " epochs rounds to zero iterations at batch " +
                          std::to_string(spec.batch_size));
  }
  return w;
}

/// LEGW: batch size and warmup epochs times k, learning rate times sqrt(k)
/// (or k under the linear rule). Decay and epoch budget are unchanged.
inline ScheduleSpec legw_scale(const ScheduleSpec& base, const Rational& k, ScalingRule rule) {
  if (!k.is_positive()) throw InvalidArgument("scaling factor must be positive, got " + k.to_string());
  const Rational batch = Rational(base.batch_size) * k;
  if (!batch.is_integer() || !batch.is_positive()) {
    throw InvalidArgument("batch size " + std::to_string(base.batch_size) + " times " + k.to_string() +
                          " is not a positive integer");
  }
  ScheduleSpec out = base;
  out.batch_size = batch.num();
  out.base_lr = base.base_lr.scaled(k, rule);
  out.warmup_epochs = base.warmup_epochs * k;
  return out;
}

/// Inverse of legw_scale: batch and warmup epochs divided by k, learning
/// rate divided by sqrt(k) (or k).
inline ScheduleSpec legw_downscale(const ScheduleSpec& large, const Rational& k, ScalingRule rule) {
  if (!k.is_positive()) throw InvalidArgument("scaling factor must be positive, got " + k.to_string());
  const Rational batch = Rational(large.batch_size) / k;
  if (!batch.is_integer()) {
    throw InvalidArgument("batch size " + std::to_string(large.batch_size) + " is not divisible by " + k.to_string());
  }
  ScheduleSpec out = legw_scale(large, k.reciprocal(), rule);
  if (out.warmup_epochs.is_positive() && out.warmup_iteration_count() < 1) {
    throw InvalidArgument("downscaled warmup of " + out.warmup_epochs.to_string() + " epochs is under one iteration");
  }
  return out;
}

/// legw_scale for each factor, in order.
inline std::vector<ScheduleSpec> sweep(const ScheduleSpec& base, const std::vector<Rational>& factors,
                                       ScalingRule rule) {
  std::vector<ScheduleSpec> out;
  out.reserve(factors.size());
  for (const auto& k : factors) out.push_back(legw_scale(base, k, rule));
  return out;
}

/// CSV with header `iteration,lr` and one row per iteration.
inline void write_schedule_csv(std::ostream& os, const ScheduleSpec& spec) {
  spec.validate();
  os << "iteration,lr\n";
  const std::int64_t n = spec.total_iterations();
  for (std::int64_t i = 0; i < n; ++i) os << i << ',' << format_double(lr_at(spec, i)) << '\n';
}

}  // namespace legw
