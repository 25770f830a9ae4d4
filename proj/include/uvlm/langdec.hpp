#pragma once

#include <string>
#include <vector>

#include "uvlm/graph.hpp"
#include "uvlm/injection.hpp"
#include "uvlm/params.hpp"
#include "uvlm/vocab.hpp"

namespace uvlm::langdec {

enum class InjectionMode { multi_layer, input_only, none };

std::string to_string(InjectionMode m);
InjectionMode injection_mode_from_string(const std::string& s);

struct DecoderConfig {
  int layers = 4;      // L
  int dim = 64;        // D_lm
  int heads = 4;
  int t_max = 64;
  int vocab_size = 0;  // V
  int visual_tokens = 0;  // K

  void validate() const;
  std::string echo() const;

  // 0.1B class: 8 layers, 512 hidden, 8 heads.
  static DecoderConfig full_scale_preset(int vocab_size = 131072, int t_max = 512, int k = 384);
  static DecoderConfig desk_preset(int vocab_size, int k, int t_max = 64);
};

// Per-sample visual conditioning, already aligned to K tokens.
struct VisualContext {
  InjectionMode mode = InjectionMode::none;
  // multi_layer: entry j-1 holds Align_r(f_{s(j)}) or null when s(j)=NONE.
  std::vector<nn::Var> per_layer;
  // input_only: Align_r(f_N), injected once before layer 1.
  nn::Var input;
};

// Builds the per-layer aligned features from a pyramid following the
// skip-connection pairing (stage N-j+1 -> layer j).
VisualContext build_visual_context(const std::vector<nn::Var>& pyramid,
                                   const injection::AlignConfig& acfg, int n_layers,
                                   InjectionMode mode);

// Registers the per-layer projection + norm parameters ("inject.l<j>.*",
// or "inject.input.*" for input-only mode).
void init_injection_params(ParamStore& store, Rng& rng, const std::vector<int>& channels,
                           int n_layers, int d_lm, InjectionMode mode,
                           const std::string& prefix = "inject.");

// Decoder-only transformer: K learned vision placeholder rows followed by
// text embeddings with learned absolute positions; pre-norm blocks under the
// hybrid attention mask; tied input/output embeddings.
class LangDecoder {
 public:
  LangDecoder(DecoderConfig cfg, std::string prefix = "lm.");
  const DecoderConfig& config() const { return cfg_; }

  void init(ParamStore& store, Rng& rng) const;
  // Returns logits [T, V] at the text positions.
  nn::Var forward(const ParamStore& store, const VisualContext& vis, const Report& tokens) const;
  // Greedy argmax from BOS until EOS or max_len generated tokens; ties break
  // toward the lowest token id.
  Report generate(const ParamStore& store, const VisualContext& vis, int max_len) const;

 private:
  DecoderConfig cfg_;
  std::string prefix_;
};

// Mean NLL over non-PAD next-token targets (teacher forcing).
nn::Var lm_loss(const nn::Var& logits, const Report& tokens);

std::int64_t decoder_param_count(const DecoderConfig& cfg);
std::int64_t injection_param_count(const std::vector<int>& channels, int n_layers, int d_lm,
                                   InjectionMode mode);

}  // namespace uvlm::langdec
