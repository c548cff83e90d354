// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "legw/errors.hpp"
#include "legw/models.hpp"
#include "legw/tensor.hpp"

namespace legw {

enum class OptimizerKind { kSgd, kMomentum, kNesterov, kAdagrad, kRmsprop, kAdam, kAdadelta, kLars };

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kMomentum: return "momentum";
    case OptimizerKind::kNesterov: return "nesterov";
    case OptimizerKind::kAdagrad: return "adagrad";
    case OptimizerKind::kRmsprop: return "rmsprop";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kAdadelta: return "adadelta";
    case OptimizerKind::kLars: return "lars";
  }
  return "?";
}

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  for (auto k : {OptimizerKind::kSgd, OptimizerKind::kMomentum, OptimizerKind::kNesterov, OptimizerKind::kAdagrad,
                 OptimizerKind::kRmsprop, OptimizerKind::kAdam, OptimizerKind::kAdadelta, OptimizerKind::kLars}) {
    if (s == to_string(k)) return k;
  }
  throw InvalidArgument("unknown optimizer '" + s + "'");
}

struct OptimizerHyper {
  double momentum = 0.9;  // momentum, nesterov, lars
  double beta1 = 0.9;
  double beta2 = 0.999;
  /// Denominator guard. Negative selects the per-kind default: 1e-8 for
  /// adam and rmsprop, 1e-10 for adagrad, 1e-6 for adadelta.
  double epsilon = -1.0;
  double rmsprop_decay = 0.9;
  double adadelta_rho = 0.95;
  double weight_decay = 0.0;  // coupled: g += weight_decay * w
  double trust_coefficient = 0.001;
  double clip_norm = 0.0;  // global-norm gradient clip; 0 disables

  double epsilon_for(OptimizerKind kind) const {
    if (epsilon >= 0.0) return epsilon;
    switch (kind) {
      case OptimizerKind::kAdagrad: return 1e-10;
      case OptimizerKind::kAdadelta: return 1e-6;
      default: return 1e-8;
    }
  }

  friend bool operator==(const OptimizerHyper&, const OptimizerHyper&) = default;
};

/// Solver hyperparameters plus per-parameter slot buffers.
/// `buffers[slot][parameter]` has the parameter's shape.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kSgd;
  OptimizerHyper hyper;
  std::map<std::string, NamedTensors> buffers;
  std::int64_t step = 0;
};

/// Slot names each kind keeps.
inline std::vector<std::string> slots_for(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return {};
    case OptimizerKind::kMomentum:
    case OptimizerKind::kNesterov:
    case OptimizerKind::kLars: return {"velocity"};
    case OptimizerKind::kAdagrad: return {"accumulator"};
    case OptimizerKind::kRmsprop: return {"mean_square"};
    case OptimizerKind::kAdam: return {"m", "v"};
    case OptimizerKind::kAdadelta: return {"grad_sq", "delta_sq"};
  }
  return {};
}

/// Zero buffers for every parameter.
inline OptimizerState init_optimizer(OptimizerKind kind, const OptimizerHyper& hyper, const ParameterSet& params) {
  OptimizerState s{kind, hyper, {}, 0};
  for (const auto& slot : slots_for(kind)) {
    NamedTensors& b = s.buffers[slot];
    for (const auto& [name, t] : params) b.emplace(name, Tensor::zeros_like(t));
  }
  return s;
}

/// LARS local learning-rate multiplier:
///   trust * |w| / (|g| + weight_decay * |w|)
/// Zero when |w| is zero or the denominator vanishes (nothing to scale).
inline double lars_trust_ratio(double weight_norm, double grad_norm, double weight_decay, double trust_coefficient) {
  if (!std::isfinite(weight_norm) || !std::isfinite(grad_norm)) {
    throw NonFiniteError("lars", "norms must be finite");
  }
  if (weight_norm < 0 || grad_norm < 0 || weight_decay < 0) throw InvalidArgument("lars: negative norm or decay");
  if (!(trust_coefficient > 0)) throw InvalidArgument("lars: trust coefficient must be positive");
  if (weight_norm == 0.0) return 0.0;
  const double denom = grad_norm + weight_decay * weight_norm;
  if (denom == 0.0) return 0.0;
  return trust_coefficient * weight_norm / denom;
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(NamedTensors& grads, double max_norm) {
  const double n = norm(grads);
  if (max_norm > 0 && n > max_norm) {
    const double s = max_norm / n;
    for (auto& [_, g] : grads) {
      for (double& v : g.data()) v *= s;
    }
  }
  return n;
}

struct StepResult {
  ParameterSet params;
  OptimizerState state;
};

/// One optimizer update w <- w - lr * rule(g). Pure: inputs are not
/// modified.
inline StepResult step(const OptimizerState& state, const ParameterSet& params, const NamedTensors& grads,
                       double lr) {
  if (!(lr > 0) || !std::isfinite(lr)) throw InvalidArgument("learning rate must be positive and finite");
  for (const auto& [name, w] : params) {
    const auto it = grads.find(name);
    if (it == grads.end()) throw InvalidArgument("no gradient for parameter '" + name + "'");
    if (it->second.shape() != w.shape()) {
      throw InvalidArgument("gradient of '" + name + "' has shape " + shape_string(it->second.shape()) +
                            ", parameter has " + shape_string(w.shape()));
    }
    if (!it->second.all_finite()) throw NonFiniteError(name, "gradient contains NaN or Inf");
  }
  StepResult out{params, state};
  out.state.step = state.step + 1;
  const OptimizerHyper& h = state.hyper;
  const OptimizerKind kind = state.kind;
  const double eps = h.epsilon_for(kind);

  for (const auto& slot : slots_for(kind)) {
    const auto sit = out.state.buffers.find(slot);
    if (sit == out.state.buffers.end()) throw InvalidArgument(std::string(to_string(kind)) + ": missing buffer '" + slot + "'");
    for (const auto& [name, w] : params) {
      const auto bit = sit->second.find(name);
      if (bit == sit->second.end()) {
        throw InvalidArgument(std::string(to_string(kind)) + ": missing '" + slot + "' buffer for '" + name + "'");
      }
      if (bit->second.shape() != w.shape()) throw InvalidArgument("buffer '" + slot + "/" + name + "' has wrong shape");
    }
  }

  NamedTensors effective = grads;
  if (h.clip_norm > 0) clip_global_norm(effective, h.clip_norm);

  const double t = static_cast<double>(out.state.step);
  const double bias1 = 1.0 - std::pow(h.beta1, t);
  const double bias2 = 1.0 - std::pow(h.beta2, t);

  for (auto& [name, w] : out.params) {
    auto wd = w.data();
    auto gd = effective.at(name).data();
    const std::int64_t n = w.size();
    auto buf = [&](const char* slot) { return out.state.buffers.at(slot).at(name).data(); };
    auto grad_at = [&](std::int64_t k) { return gd[k] + h.weight_decay * wd[k]; };
    switch (kind) {
      case OptimizerKind::kSgd:
        for (std::int64_t k = 0; k < n; ++k) wd[k] -= lr * grad_at(k);
        break;
      case OptimizerKind::kMomentum: {
        auto v = buf("velocity");
        for (std::int64_t k = 0; k < n; ++k) {
          v[k] = h.momentum * v[k] + grad_at(k);
          wd[k] -= lr * v[k];
        }
        break;
      }
      case OptimizerKind::kNesterov: {
        auto v = buf("velocity");
        for (std::int64_t k = 0; k < n; ++k) {
          const double g = grad_at(k);
          v[k] = h.momentum * v[k] + g;
          wd[k] -= lr * (g + h.momentum * v[k]);
        }
        break;
      }
      case OptimizerKind::kAdagrad: {
        auto a = buf("accumulator");
        for (std::int64_t k = 0; k < n; ++k) {
          const double g = grad_at(k);
          a[k] += g * g;
          wd[k] -= lr * g / (std::sqrt(a[k]) + eps);
        }
        break;
      }
      case OptimizerKind::kRmsprop: {
        auto s = buf("mean_square");
        for (std::int64_t k = 0; k < n; ++k) {
          const double g = grad_at(k);
          s[k] = h.rmsprop_decay * s[k] + (1.0 - h.rmsprop_decay) * g * g;
          wd[k] -= lr * g / (std::sqrt(s[k]) + eps);
        }
        break;
      }
      case OptimizerKind::kAdam: {
        auto m = buf("m");
        auto v = buf("v");
        for (std::int64_t k = 0; k < n; ++k) {
          const double g = grad_at(k);
          m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g;
          v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
          const double m_hat = m[k] / bias1;
          const double v_hat = v[k] / bias2;
          wd[k] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
        break;
      }
      case OptimizerKind::kAdadelta: {
        auto eg = buf("grad_sq");
        auto ex = buf("delta_sq");
        const double rho = h.adadelta_rho;
        for (std::int64_t k = 0; k < n; ++k) {
          const double g = grad_at(k);
          eg[k] = rho * eg[k] + (1.0 - rho) * g * g;
          const double delta = std::sqrt(ex[k] + eps) / std::sqrt(eg[k] + eps) * g;
          ex[k] = rho * ex[k] + (1.0 - rho) * delta * delta;
          wd[k] -= lr * delta;
        }
        break;
      }
      case OptimizerKind::kLars: {
        // Trust ratio per parameter tensor, from the pre-update weights.
        double wn = 0.0;
        double gn = 0.0;
        for (std::int64_t k = 0; k < n; ++k) {
          wn += wd[k] * wd[k];
          gn += gd[k] * gd[k];
        }
        const double local_lr =
            lr * lars_trust_ratio(std::sqrt(wn), std::sqrt(gn), h.weight_decay, h.trust_coefficient);
        auto v = buf("velocity");
        for (std::int64_t k = 0; k < n; ++k) {
          v[k] = h.momentum * v[k] + local_lr * grad_at(k);
          wd[k] -= v[k];
        }
        break;
      }
    }
  }
  return out;
}

/// Gradient estimator (1/b) * sum of per-sample loss gradients.
inline NamedTensors mini_batch_gradient(const ModelSpec& spec, const ParameterSet& params, const Batch& batch) {
  if (batch.size() == 0) throw InvalidArgument("mini-batch gradient of an empty batch");
  LossEvaluation eval = loss(spec, params, batch);
  return backward(eval.graph.graph, eval.graph.loss);
}

}  // namespace legw
