#pragma once

#include <string>

#include "uvlm/graph.hpp"
#include "uvlm/params.hpp"

namespace uvlm::clshead {

struct ClsHeadConfig {
  int queries = 16;   // M
  int dim = 32;       // D_q
  int c_cls = 3;
  int heads = 4;
  int in_channels = 0;  // channels of f_N

  void validate() const;
  std::string echo() const;
};

// Learnable queries cross-attend to the flattened deepest encoder feature;
// the M x D_q result is flattened and mapped linearly to class logits, then
// sigmoided. No positional encoding is added to the keys, so the output is
// invariant to key-token permutation.
class ClsHead {
 public:
  ClsHead(ClsHeadConfig cfg, std::string prefix = "clshead.");
  const ClsHeadConfig& config() const { return cfg_; }

  void init(ParamStore& store, Rng& rng) const;
  // f_n: [C, d, h, w]; returns probabilities [1, C_cls], all in (0,1).
  nn::Var forward(const ParamStore& store, const nn::Var& f_n) const;
  // Attention weights of the single cross-attention layer, rows = (head,
  // query) pairs, columns = key positions; each row sums to 1.
  Tensor attention_weights(const ParamStore& store, const nn::Var& f_n) const;

 private:
  nn::Var attend(const ParamStore& store, const nn::Var& f_n,
                 std::vector<nn::Var>* probs_out) const;
  ClsHeadConfig cfg_;
  std::string prefix_;
};

// Mean binary cross entropy with clamp (the numeric contract lives in
// nn::bce_mean; this checks lengths and strips the row shape).
nn::Var cls_loss(const nn::Var& probs, const std::vector<std::uint8_t>& y);

}  // namespace uvlm::clshead
