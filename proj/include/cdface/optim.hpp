#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "cdface/autodiff.hpp"
#include "cdface/tensor.hpp"

namespace cdface {

/// Adam with decoupled weight decay. The decay term is applied directly to
/// the parameter, outside the adaptive moment update.
template <class T>
class AdamW {
 public:
  struct Options {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(1e-4);
  };

  AdamW(std::vector<ad::Var<T>> params, Options opts)
      : params_(std::move(params)), opts_(opts) {
    slots_.reserve(params_.size());
    for (const auto& p : params_)
      slots_.push_back({zeros_like(p->value), zeros_like(p->value)});
  }

  void step() {
    ++t_;
    const T bc1 = T(1) - static_cast<T>(std::pow(double(opts_.beta1), double(t_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(double(opts_.beta2), double(t_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p->grad.empty()) continue;  // parameter untouched this step
      auto& [m, v] = slots_[i];
      T* pv = p->value.data();
      const T* g = p->grad.data();
      for (std::size_t k = 0; k < p->value.size(); ++k) {
        m.data()[k] = opts_.beta1 * m.data()[k] + (T(1) - opts_.beta1) * g[k];
        v.data()[k] =
            opts_.beta2 * v.data()[k] + (T(1) - opts_.beta2) * g[k] * g[k];
        const T mhat = m.data()[k] / bc1;
        const T vhat = v.data()[k] / bc2;
        pv[k] -= opts_.lr * (mhat / (std::sqrt(vhat) + opts_.eps) +
                             opts_.weight_decay * pv[k]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->clear_grad();
  }

  /// Moment state in parameter order, for checkpoint round-trips.
  struct Snapshot {
    long t = 0;
    std::vector<Tensor<T>> m, v;
  };

  Snapshot snapshot() const {
    Snapshot s;
    s.t = t_;
    for (const auto& slot : slots_) {
      s.m.push_back(slot.m);
      s.v.push_back(slot.v);
    }
    return s;
  }

  void restore(const Snapshot& s) {
    require(s.m.size() == slots_.size() && s.v.size() == slots_.size(),
            "AdamW: snapshot slot count mismatch");
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      require(s.m[i].same_shape(slots_[i].m) && s.v[i].same_shape(slots_[i].v),
              "AdamW: snapshot shape mismatch");
      slots_[i].m = s.m[i];
      slots_[i].v = s.v[i];
    }
    t_ = s.t;
  }

 private:
  struct Slot {
    Tensor<T> m, v;
  };
  std::vector<ad::Var<T>> params_;
  std::vector<Slot> slots_;
  Options opts_;
  long t_ = 0;
};

}  // namespace cdface
