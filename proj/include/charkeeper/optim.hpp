#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "charkeeper/autodiff.hpp"
#include "charkeeper/layers.hpp"

namespace charkeeper {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay Adam. Parameters whose name fails the trainable
// predicate are skipped entirely (no moment update, no decay).
template <class T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, AdamWConfig cfg) : store_(store), cfg_(cfg) {}

  void set_trainable(std::function<bool(const std::string&)> pred) {
    trainable_ = std::move(pred);
  }

  long step_count() const { return step_count_; }

  void step() {
    sync_slots();
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    const auto& items = store_.items();
    for (std::size_t s = 0; s < items.size(); ++s) {
      const auto& [name, var] = items[s];
      if (trainable_ && !trainable_(name)) continue;
      Tensor<T>& g = var->ensure_grad();
      Slot& slot = slots_[s];
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        const double gv = static_cast<double>(g.data[i]);
        if (!std::isfinite(gv))
          throw std::runtime_error("non-finite gradient in parameter " + name);
        double m = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * gv;
        double v = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * gv * gv;
        slot.m[i] = m;
        slot.v[i] = v;
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double p = static_cast<double>(var->value.data[i]);
        p -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p);
        var->value.data[i] = static_cast<T>(p);
      }
    }
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  void sync_slots() {
    const auto& items = store_.items();
    while (slots_.size() < items.size()) {
      const std::size_t n = items[slots_.size()].second->value.numel();
      Slot slot;
      slot.m.assign(n, 0.0);
      slot.v.assign(n, 0.0);
      slots_.push_back(std::move(slot));
    }
  }

  ParamStore<T>& store_;
  AdamWConfig cfg_;
  std::function<bool(const std::string&)> trainable_;
  std::vector<Slot> slots_;
  long step_count_ = 0;
};

// Central finite-difference check of the analytic gradient on a sampled
// parameter subset. `f` must rebuild the graph on every call and return a
// scalar. Returns the maximum relative error seen.
template <class T>
double grad_check(const std::function<VarPtr<T>()>& f, ParamStore<T>& store, double h = 1e-5,
                  int samples_per_param = 4, std::uint64_t seed = 7) {
  store.zero_grad();
  auto root = f();
  if (root->value.numel() != 1) throw std::runtime_error("grad_check: f must return a scalar");
  backward(root);

  Rng rng(seed);
  double worst = 0.0;
  for (const auto& [name, var] : store.items()) {
    const std::size_t n = var->value.numel();
    if (n == 0) continue;
    const int take = std::min<int>(samples_per_param, static_cast<int>(n));
    for (int s = 0; s < take; ++s) {
      const std::size_t i = rng.next_index(n);
      const T saved = var->value.data[i];
      var->value.data[i] = saved + static_cast<T>(h);
      double fp;
      {
        NoGradGuard ng;
        fp = static_cast<double>(f()->value.data[0]);
      }
      var->value.data[i] = saved - static_cast<T>(h);
      double fm;
      {
        NoGradGuard ng;
        fm = static_cast<double>(f()->value.data[0]);
      }
      var->value.data[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = var->grad.data.empty() ? 0.0 : static_cast<double>(var->grad.data[i]);
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-4});
      worst = std::max(worst, std::fabs(fd - an) / denom);
    }
  }
  return worst;
}

}  // namespace charkeeper
