#pragma once

#include <functional>
#include <map>
#include <stdexcept>
#include <string>

#include "uvlm/graph.hpp"
#include "uvlm/rng.hpp"

namespace uvlm {

// Named parameter set. std::map keeps iteration order stable (sorted by
// name), which the deterministic optimizer and checkpoint writer rely on.
struct ParamStore {
  std::map<std::string, nn::Var> params;

  nn::Var add(const std::string& name, Tensor init) {
    if (params.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    auto v = nn::leaf(std::move(init), true);
    params[name] = v;
    return v;
  }

  nn::Var get(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("missing parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params.count(name) > 0; }

  void zero_grad() {
    for (auto& [_, p] : params) {
      if (p->grad.shape == p->value.shape)
        std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }
  }

  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [name, p] : params)
      if (name.rfind(prefix, 0) == 0) p->requires_grad = trainable;
  }

  std::int64_t count(const std::string& prefix = "") const {
    std::int64_t n = 0;
    for (const auto& [name, p] : params)
      if (name.rfind(prefix, 0) == 0) n += p->value.numel();
    return n;
  }
};

// Fan-in-scaled normal init for conv/linear kernels.
inline Tensor init_fan_in(std::vector<int> shape, std::int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double std_ = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data) v = rng.normal(0.0, std_);
  return t;
}

struct OptimizerSpec {
  enum class Kind { sgd, adamw };
  Kind kind = Kind::sgd;
  double base_lr = 0.01;
  double encoder_lr_multiplier = 1.0;  // 0 means frozen
  double weight_decay = 0.0;
  double momentum = 0.9;   // sgd
  double beta1 = 0.9;      // adamw
  double beta2 = 0.999;
  double eps = 1e-8;

  std::string describe() const {
    char buf[160];
    if (kind == Kind::sgd)
      std::snprintf(buf, sizeof buf, "sgd lr=%g momentum=%g wd=%g enc_mult=%g", base_lr, momentum,
                    weight_decay, encoder_lr_multiplier);
    else
      std::snprintf(buf, sizeof buf, "adamw lr=%g betas=%g,%g wd=%g enc_mult=%g", base_lr, beta1,
                    beta2, weight_decay, encoder_lr_multiplier);
    return buf;
  }
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerSpec spec) : spec_(spec) {}

  // lr_mult maps a parameter name to its learning-rate multiplier;
  // multiplier 0 skips the tensor entirely (bit-identical freeze).
  void step(ParamStore& store, const std::function<double(const std::string&)>& lr_mult) {
    ++t_;
    for (auto& [name, p] : store.params) {
      const double mult = lr_mult(name);
      if (mult == 0.0) continue;
      if (p->grad.shape != p->value.shape) continue;  // never touched by backward
      const double lr = spec_.base_lr * mult;
      auto& slot1 = state1_[name];
      if (slot1.shape != p->value.shape) slot1 = Tensor::zeros(p->value.shape);
      if (spec_.kind == OptimizerSpec::Kind::sgd) {
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
          double g = p->grad[i] + spec_.weight_decay * p->value[i];
          slot1[i] = spec_.momentum * slot1[i] + g;
          p->value[i] -= lr * slot1[i];
        }
      } else {
        auto& slot2 = state2_[name];
        if (slot2.shape != p->value.shape) slot2 = Tensor::zeros(p->value.shape);
        const double bc1 = 1.0 - std::pow(spec_.beta1, t_);
        const double bc2 = 1.0 - std::pow(spec_.beta2, t_);
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
          const double g = p->grad[i];
          slot1[i] = spec_.beta1 * slot1[i] + (1.0 - spec_.beta1) * g;
          slot2[i] = spec_.beta2 * slot2[i] + (1.0 - spec_.beta2) * g * g;
          const double mhat = slot1[i] / bc1;
          const double vhat = slot2[i] / bc2;
          p->value[i] -= lr * (mhat / (std::sqrt(vhat) + spec_.eps) +
                               spec_.weight_decay * p->value[i]);
        }
      }
    }
  }

  const OptimizerSpec& spec() const { return spec_; }

 private:
  OptimizerSpec spec_;
  int t_ = 0;
  std::map<std::string, Tensor> state1_, state2_;
};

}  // namespace uvlm
