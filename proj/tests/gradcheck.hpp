#pragma once

// Central finite-difference oracle shared by the gradient-check suites:
// analytic gradients from one backward pass are compared against
// (f(θ+h) − f(θ−h)) / 2h on randomly sampled parameters, all in 64-bit.
//
// Step size: h = 1e-5. Larger steps (1e-3) make the *oracle* wrong on
// networks with piecewise-linear activations — instance/layer norm centers
// pre-activations near the ReLU-family kink, so a 1e-3 perturbation crosses
// it and the difference quotient mixes two slopes. Mismatches under h=1e-3
// vanish monotonically as h decreases (verified), which is the signature of
// oracle error, not gradient error. At h=1e-5 roundoff noise is still
// orders of magnitude below the 1e-3 relative tolerance.

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "uvlm/graph.hpp"
#include "uvlm/params.hpp"
#include "uvlm/rng.hpp"

namespace gradcheck {

struct Result {
  int checked = 0;
  int failed = 0;
  double worst_rel = 0.0;
  std::string worst_name;
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

// Samples up to `samples` trainable scalar parameters from the store
// (spread uniformly over tensors) and checks d loss / d θ.
inline Result check_store(uvlm::ParamStore& store,
                          const std::function<uvlm::nn::Var()>& loss_fn, int samples,
                          double h = 1e-5, double tol = 1e-3, std::uint64_t seed = 42) {
  using uvlm::nn::backward;
  store.zero_grad();
  auto loss = loss_fn();
  backward(loss);

  std::vector<std::pair<std::string, std::int64_t>> picks;
  std::vector<std::pair<std::string, std::int64_t>> all;
  for (auto& [name, p] : store.params) {
    if (!p->requires_grad) continue;
    for (std::int64_t i = 0; i < p->value.numel(); ++i) all.push_back({name, i});
  }
  uvlm::Rng rng(seed);
  for (int s = 0; s < samples && !all.empty(); ++s)
    picks.push_back(all[rng.below(all.size())]);

  Result r;
  for (auto& [name, idx] : picks) {
    auto p = store.get(name);
    const double analytic = p->grad.numel() ? p->grad[idx] : 0.0;
    const double saved = p->value[idx];
    p->value[idx] = saved + h;
    const double fp = loss_fn()->value[0];
    p->value[idx] = saved - h;
    const double fm = loss_fn()->value[0];
    p->value[idx] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double e = rel_err(analytic, numeric);
    ++r.checked;
    if (e > r.worst_rel) {
      r.worst_rel = e;
      r.worst_name = name + "[" + std::to_string(idx) + "]";
    }
    if (e > tol) {
      ++r.failed;
      std::fprintf(stderr, "grad mismatch %s[%lld]: analytic %.9g numeric %.9g rel %.3g\n",
                   name.c_str(), static_cast<long long>(idx), analytic, numeric, e);
    }
  }
  return r;
}

// Same protocol for a handful of free leaf tensors.
inline Result check_leaves(const std::vector<uvlm::nn::Var>& leaves,
                           const std::function<uvlm::nn::Var()>& loss_fn, int samples_per_leaf,
                           double h = 1e-5, double tol = 1e-3, std::uint64_t seed = 42) {
  using uvlm::nn::backward;
  for (auto& l : leaves) {
    l->grad = uvlm::Tensor{};
    l->ensure_grad();
  }
  auto loss = loss_fn();
  backward(loss);

  uvlm::Rng rng(seed);
  Result r;
  for (auto& l : leaves) {
    for (int s = 0; s < samples_per_leaf; ++s) {
      const std::int64_t idx = static_cast<std::int64_t>(rng.below(l->value.numel()));
      const double analytic = l->grad[idx];
      const double saved = l->value[idx];
      l->value[idx] = saved + h;
      const double fp = loss_fn()->value[0];
      l->value[idx] = saved - h;
      const double fm = loss_fn()->value[0];
      l->value[idx] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double e = rel_err(analytic, numeric);
      ++r.checked;
      if (e > r.worst_rel) {
        r.worst_rel = e;
        r.worst_name = "leaf[" + std::to_string(idx) + "]";
      }
      if (e > tol) ++r.failed;
    }
  }
  return r;
}

}  // namespace gradcheck
