#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "uvlm/tensor.hpp"

namespace uvlm::nn {

// Reverse-mode autodiff over dynamically shaped double tensors.
// Every op allocates a fresh Node; parameters are long-lived leaf nodes
// whose .grad accumulates across backward() calls until zeroed.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;  // empty for leaves

  Tensor& ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor::zeros(value.shape);
    return grad;
  }
};

Var constant(Tensor v);
Var leaf(Tensor v, bool requires_grad = true);

// Runs reverse topological backward from a scalar loss (seed dL/dL = 1).
void backward(const Var& loss);

// ---- elementwise / reductions ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var sum_all(const Var& a);   // -> scalar [1]
Var mean_all(const Var& a);  // -> scalar [1]
Var leaky_relu(const Var& a, double slope);
Var sigmoid(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);  // same element count

// ---- linear algebra on 2-D tensors ----
Var matmul(const Var& a, const Var& b);  // [m,k] x [k,n]
Var transpose2d(const Var& a);
Var linear(const Var& x, const Var& w, const Var& b);  // [r,in] x [in,out] + [out]
Var slice_cols(const Var& x, int c0, int c1);
Var concat_cols(const std::vector<Var>& xs);
Var slice_rows(const Var& x, int r0, int r1);
Var concat_rows(const std::vector<Var>& xs);
// Appends zero rows so the result has `rows` rows (gradient into the
// original rows only).
Var pad_rows(const Var& x, int rows);
// out = x with out[r0 .. r0+delta.rows) += delta, other rows untouched.
Var add_to_rows(const Var& x, const Var& delta, int r0);

// Row-wise softmax with an additive mask (0 where allowed, -inf-like
// elsewhere); mask is a plain tensor, not differentiated.
Var softmax_rows_masked(const Var& scores, const Tensor& additive_mask);
Var softmax_rows(const Var& scores);

// Row-wise layer norm over the last axis of a [R,D] tensor.
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// ---- volumetric ops on [C,D,H,W] tensors ----
Var conv3d(const Var& x, const Var& w, const Var& b, int stride);  // 3x3x3, pad 1
Var conv1x1x1(const Var& x, const Var& w, const Var& b);
Var conv_transpose3d_k2s2(const Var& x, const Var& w);  // kernel 2, stride 2
Var instance_norm3d(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Parameter-free per-channel standardisation (instance norm with unit scale,
// zero shift). Applied wherever encoder features cross a stage boundary, so
// no downstream objective can be satisfied by inflating feature magnitude.
Var standardize3d(const Var& x);
Var concat_channels(const Var& a, const Var& b);
Var adaptive_avg_pool3d(const Var& x, int od, int oh, int ow);
// Mirrors a [C,D,H,W] grid along any subset of its spatial axes.
Var flip3d(const Var& x, bool fd, bool fh, bool fw);
// Flattens [C,D,H,W] to [D*H*W, C] token rows in raster (z-major) order.
Var tokens_from_grid(const Var& x);

// ---- embeddings / losses ----
Var embedding_rows(const Var& table, const std::vector<int>& ids);
// Mean NLL over rows whose target != ignore_id (softmax inside).
Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets, int ignore_id);
// Mean per-voxel softmax cross entropy; logits [C,D,H,W], labels flat D*H*W.
// Per-voxel softmax cross entropy over channel dim. Optional per-class
// weights (normalised by the total weight present) rebalance rare classes.
Var softmax_ce_voxels(const Var& logits, const std::vector<std::uint8_t>& labels,
                      const std::vector<double>& class_weights = {});
// 1 - mean over all classes of smoothed soft Dice on channel softmax.
Var soft_dice_loss(const Var& logits, const std::vector<std::uint8_t>& labels, double eps = 1e-5);
// Mean binary cross entropy with probability clamp to [clamp, 1-clamp].
Var bce_mean(const Var& probs, const std::vector<std::uint8_t>& y, double clamp = 1e-7);
// Per-element weighted BCE, normalised by the total weight; empty weights -> all 1.
Var bce_weighted(const Var& probs, const std::vector<std::uint8_t>& y,
                 const std::vector<double>& weights, double clamp = 1e-7);

}  // namespace uvlm::nn
