#pragma once

// AdamW with decoupled weight decay, cosine learning-rate schedule with
// linear warmup, and the EMA teacher update.

#include <cmath>
#include <map>
#include <string>

#include "rae/nn.hpp"

namespace rae {

template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // One update over the gradient map. Parameters are visited in store order
  // so updates are deterministic; moment slots are created on first sight.
  void step(ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads, double lr) {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (const auto& name : params.names()) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      Tensor<T>& p = params.at(name);
      const Tensor<T>& g = it->second;
      if (!p.same_shape(g)) throw ShapeError("adamw: gradient shape mismatch for '" + name + "'");
      if (!m_.contains(name)) {
        m_.add(name, Tensor<T>(p.shape()));
        v_.add(name, Tensor<T>(p.shape()));
      }
      Tensor<T>& m = m_.at(name);
      Tensor<T>& v = v_.at(name);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
        const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
        p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * update -
                              lr * weight_decay_ * static_cast<double>(p[i]));
      }
    }
  }

  long step_count() const { return step_count_; }
  void set_step_count(long n) { step_count_ = n; }
  double weight_decay() const { return weight_decay_; }

  ParamStore<T>& first_moments() { return m_; }
  ParamStore<T>& second_moments() { return v_; }
  const ParamStore<T>& first_moments() const { return m_; }
  const ParamStore<T>& second_moments() const { return v_; }

 private:
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  double weight_decay_ = 0.05;
  long step_count_ = 0;
  ParamStore<T> m_;
  ParamStore<T> v_;
};

struct LrSchedule {
  double base_lr = 1e-3;
  double min_lr = 0.0;
  long warmup_steps = 0;
  long total_steps = 1;

  double at(long step) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const long span = total_steps - warmup_steps;
    if (span <= 1) return base_lr;
    const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(span - 1);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(M_PI * std::min(1.0, t)));
  }
};

// teacher <- m * teacher + (1 - m) * student, elementwise over the teacher's
// parameter set. The teacher is never touched by the optimizer.
template <class T>
void ema_update(ParamStore<T>& teacher, const ParamStore<T>& student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ContractError("ema_update: momentum must be in [0,1]");
  for (const auto& name : teacher.names()) {
    Tensor<T>& t = teacher.at(name);
    const Tensor<T>& s = student.at(name);
    if (!t.same_shape(s)) throw ShapeError("ema_update: teacher/student shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<T>(momentum * static_cast<double>(t[i]) +
                            (1.0 - momentum) * static_cast<double>(s[i]));
  }
}

}  // namespace rae
