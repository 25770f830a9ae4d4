#pragma once

#include <array>
#include <string>
#include <vector>

#include "uvlm/graph.hpp"
#include "uvlm/tensor.hpp"

namespace uvlm::injection {

// Sentinel for layers that receive no injection (layer index past the
// deepest pairable encoder stage).
constexpr int kNoStage = 0;

// Stage paired with language layer j: N - j + 1 when in [1, N], else none.
int stage_for_layer(int layer, int n_stages, int n_layers);

struct AlignedTokens {
  Tensor tokens;  // [K, C_source]
  int source_stage = 0;
  int pad_count = 0;
};

// Reference grid = spatial dims of stage r; K = their product.
struct AlignConfig {
  int reference_stage = 0;            // r, 1-based
  std::array<int, 3> ref_grid{};      // (d, h, w) of stage r
  int token_count() const { return ref_grid[0] * ref_grid[1] * ref_grid[2]; }
};

// Tensor path (no gradients): flatten stage r as-is, adaptive-average-pool
// shallower stages down to the reference grid, zero-pad deeper stages.
// Raster order is z-major, then y, then x — the tensors' native C order.
AlignedTokens align(const Tensor& feature, int stage, const AlignConfig& cfg);

// Autodiff path, same semantics; gradients flow into `feature` (zero pad
// rows and pooling included).
nn::Var align_var(const nn::Var& feature, int stage, const AlignConfig& cfg);

struct HybridMask {
  int K = 0, T = 0;
  std::vector<std::uint8_t> allow;  // (K+T)x(K+T), row-major: may a attend to b

  bool at(int a, int b) const { return allow[static_cast<std::size_t>(a) * (K + T) + b] != 0; }
  int size() const { return K + T; }
};

// allow[a][b] = (b < K) or (b <= a): vision block bidirectional, text rows
// causal with full view of vision.
HybridMask build_hybrid_mask(int K, int T);

// Additive form for softmax: 0 where allowed, -1e30 elsewhere.
Tensor mask_additive(const HybridMask& m);

// Golden-file dump: one text row of 0/1 characters per mask row.
std::string mask_to_text(const HybridMask& m);

// h_prev covers K vision rows then T text rows. Adds
// LayerNorm(aligned @ proj_w + proj_b) to the first K rows only.
nn::Var inject(const nn::Var& h_prev, const nn::Var& aligned, const nn::Var& proj_w,
               const nn::Var& proj_b, const nn::Var& ln_gamma, const nn::Var& ln_beta, int K);

}  // namespace uvlm::injection
