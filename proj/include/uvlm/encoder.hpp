#pragma once

#include <string>
#include <vector>

#include "uvlm/graph.hpp"
#include "uvlm/params.hpp"
#include "uvlm/synthvol.hpp"

namespace uvlm::encoder {

struct EncoderConfig {
  int n_stages = 4;
  std::vector<int> channels = {8, 16, 24, 32};
  int in_channels = 1;
  int c_seg = 2;
  int blocks_per_stage = 2;

  void validate() const;
  int divisibility() const { return 1 << (n_stages - 1); }
  std::string echo() const;

  // 6 stages with widths [32,64,128,256,320,320].
  static EncoderConfig full_scale_preset(int c_seg = 2);
  static EncoderConfig desk_preset(int c_seg = 2);
};

nn::Var volume_to_var(const synthvol::Volume& v);

// N-stage residual encoder. Stage 1 keeps full resolution; each later stage
// halves every axis with a stride-2 3x3x3 conv, then applies
// pre-activation residual blocks (instance norm + leaky ReLU).
class Encoder {
 public:
  Encoder(EncoderConfig cfg, std::string prefix = "encoder.");
  const EncoderConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  void init(ParamStore& store, Rng& rng) const;
  // Returns the feature pyramid f_1..f_N; throws on indivisible shape,
  // naming the offending axis.
  std::vector<nn::Var> forward(const ParamStore& store, const nn::Var& x) const;

 private:
  EncoderConfig cfg_;
  std::string prefix_;
};

// U-Net segmentation decoder with skip concatenation per stage.
class SegDecoder {
 public:
  SegDecoder(EncoderConfig cfg, std::string prefix = "segdec.");
  void init(ParamStore& store, Rng& rng) const;
  nn::Var forward(const ParamStore& store, const std::vector<nn::Var>& pyramid) const;
  // 1x1 class logits on the coarsest feature, used for per-cell presence
  // deep supervision during stage-1 training (params segdec.aux.*).
  nn::Var aux_logits(const ParamStore& store, const std::vector<nn::Var>& pyramid) const;

 private:
  EncoderConfig cfg_;
  std::string prefix_;
};

// Multi-hot per-cell class presence when the (d,h,w) label grid is tiled into
// cell^3 blocks; layout [class][cell] matching a {c_seg, d/cell, h/cell,
// w/cell} logit tensor in C order.
std::vector<std::uint8_t> coarse_presence(const std::vector<std::uint8_t>& labels, int d, int h,
                                          int w, int cell, int c_seg);

// Deep-supervision term on the coarsest stage: class-balanced BCE between
// sigmoid cell logits and coarse_presence of the voxel labels. Keeps the
// coarsest feature informative about every class, including ones the skip
// connections would otherwise carry alone.
nn::Var aux_presence_loss(const nn::Var& cell_logits, const std::vector<std::uint8_t>& labels,
                          int d, int h, int w);

// Soft Dice (smoothing eps, mean over all classes incl. background) plus
// mean per-voxel cross entropy.
nn::Var seg_loss(const nn::Var& logits, const std::vector<std::uint8_t>& labels,
                 double dice_eps = 1e-5);

// Per-class smoothed soft Dice values of the channel softmax (diagnostics
// and hand-case tests).
std::vector<double> soft_dice_per_class(const Tensor& logits,
                                        const std::vector<std::uint8_t>& labels,
                                        double eps = 1e-5);

// Hard argmax segmentation from logits.
synthvol::SegMask argmax_mask(const Tensor& logits, int d, int h, int w);

}  // namespace uvlm::encoder
