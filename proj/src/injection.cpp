#include "uvlm/injection.hpp"

#include <stdexcept>

namespace uvlm::injection {

int stage_for_layer(int layer, int n_stages, int n_layers) {
  if (layer < 1 || layer > n_layers) throw std::invalid_argument("stage_for_layer: bad layer");
  const int s = n_stages - layer + 1;
  return (s >= 1 && s <= n_stages) ? s : kNoStage;
}

AlignedTokens align(const Tensor& feature, int stage, const AlignConfig& cfg) {
  // Reuse the autodiff path on a constant; keeps the two routes identical.
  auto v = align_var(nn::constant(feature), stage, cfg);
  AlignedTokens out;
  out.tokens = v->value;
  out.source_stage = stage;
  const int r = cfg.reference_stage;
  if (stage <= r) {
    out.pad_count = 0;
  } else {
    const int C = feature.dim(0);
    out.pad_count = cfg.token_count() - static_cast<int>(feature.numel() / C);
  }
  return out;
}

nn::Var align_var(const nn::Var& feature, int stage, const AlignConfig& cfg) {
  const int r = cfg.reference_stage;
  const int K = cfg.token_count();
  if (stage == r) {
    return nn::tokens_from_grid(feature);
  }
  if (stage < r) {
    auto pooled = nn::adaptive_avg_pool3d(feature, cfg.ref_grid[0], cfg.ref_grid[1], cfg.ref_grid[2]);
    return nn::tokens_from_grid(pooled);
  }
  auto flat = nn::tokens_from_grid(feature);
  if (flat->value.dim(0) > K)
    throw std::logic_error("align: stage " + std::to_string(stage) + " has " +
                           std::to_string(flat->value.dim(0)) + " positions > K=" +
                           std::to_string(K) + " (halving law broken)");
  return nn::pad_rows(flat, K);
}

HybridMask build_hybrid_mask(int K, int T) {
  if (K < 0 || T < 0) throw std::invalid_argument("build_hybrid_mask: negative size");
  HybridMask m;
  m.K = K;
  m.T = T;
  const int S = K + T;
  m.allow.assign(static_cast<std::size_t>(S) * S, 0);
  for (int a = 0; a < S; ++a)
    for (int b = 0; b < S; ++b)
      if (b < K || b <= a) m.allow[static_cast<std::size_t>(a) * S + b] = 1;
  return m;
}

Tensor mask_additive(const HybridMask& m) {
  const int S = m.size();
  Tensor t({S, S});
  for (int a = 0; a < S; ++a)
    for (int b = 0; b < S; ++b) t[a * S + b] = m.at(a, b) ? 0.0 : -1e30;
  return t;
}

std::string mask_to_text(const HybridMask& m) {
  std::string s;
  const int S = m.size();
  for (int a = 0; a < S; ++a) {
    for (int b = 0; b < S; ++b) s += m.at(a, b) ? '1' : '0';
    s += '\n';
  }
  return s;
}

nn::Var inject(const nn::Var& h_prev, const nn::Var& aligned, const nn::Var& proj_w,
               const nn::Var& proj_b, const nn::Var& ln_gamma, const nn::Var& ln_beta, int K) {
  if (aligned->value.dim(0) != K)
    throw std::invalid_argument("inject: aligned token count != K");
  if (aligned->value.dim(1) != proj_w->value.dim(0))
    throw std::invalid_argument("inject: plan/pyramid channel mismatch (" +
                                std::to_string(aligned->value.dim(1)) + " vs " +
                                std::to_string(proj_w->value.dim(0)) + ")");
  auto delta = nn::layer_norm_rows(nn::linear(aligned, proj_w, proj_b), ln_gamma, ln_beta);
  return nn::add_to_rows(h_prev, delta, 0);
}

}  // namespace uvlm::injection
