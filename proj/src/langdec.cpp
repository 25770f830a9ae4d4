#include "uvlm/langdec.hpp"

#include <cmath>
#include <stdexcept>

namespace uvlm::langdec {

std::string to_string(InjectionMode m) {
  switch (m) {
    case InjectionMode::multi_layer: return "multi";
    case InjectionMode::input_only: return "input";
    case InjectionMode::none: return "none";
  }
  return "?";
}

InjectionMode injection_mode_from_string(const std::string& s) {
  if (s == "multi" || s == "multi_layer") return InjectionMode::multi_layer;
  if (s == "input" || s == "input_only") return InjectionMode::input_only;
  if (s == "none") return InjectionMode::none;
  throw std::invalid_argument("unknown injection mode: " + s);
}

void DecoderConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("DecoderConfig: L must be >= 1");
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("DecoderConfig: D_lm must be divisible by heads");
  if (vocab_size < 5) throw std::invalid_argument("DecoderConfig: vocabulary too small");
  if (visual_tokens < 0) throw std::invalid_argument("DecoderConfig: negative K");
}

std::string DecoderConfig::echo() const {
  return "decoder{L=" + std::to_string(layers) + ",D=" + std::to_string(dim) +
         ",heads=" + std::to_string(heads) + ",T_max=" + std::to_string(t_max) +
         ",V=" + std::to_string(vocab_size) + ",K=" + std::to_string(visual_tokens) + "}";
}

DecoderConfig DecoderConfig::full_scale_preset(int vocab_size, int t_max, int k) {
  DecoderConfig cfg;
  cfg.layers = 8;
  cfg.dim = 512;
  cfg.heads = 8;
  cfg.t_max = t_max;
  cfg.vocab_size = vocab_size;
  cfg.visual_tokens = k;
  return cfg;
}

DecoderConfig DecoderConfig::desk_preset(int vocab_size, int k, int t_max) {
  DecoderConfig cfg;
  cfg.layers = 4;
  cfg.dim = 64;
  cfg.heads = 4;
  cfg.t_max = t_max;
  cfg.vocab_size = vocab_size;
  cfg.visual_tokens = k;
  return cfg;
}

VisualContext build_visual_context(const std::vector<nn::Var>& pyramid,
                                   const injection::AlignConfig& acfg, int n_layers,
                                   InjectionMode mode) {
  const int n = static_cast<int>(pyramid.size());
  VisualContext vis;
  vis.mode = mode;
  // Features are standardised per channel before alignment so the decoder
  // sees a stable token scale regardless of how earlier stages shaped the
  // encoder; the injection projections otherwise train against whatever
  // magnitude stage 1/2 left behind.
  if (mode == InjectionMode::multi_layer) {
    vis.per_layer.resize(static_cast<std::size_t>(n_layers));
    for (int j = 1; j <= n_layers; ++j) {
      const int s = injection::stage_for_layer(j, n, n_layers);
      if (s != injection::kNoStage)
        vis.per_layer[static_cast<std::size_t>(j - 1)] = injection::align_var(
            nn::standardize3d(pyramid[static_cast<std::size_t>(s - 1)]), s, acfg);
    }
  } else if (mode == InjectionMode::input_only) {
    vis.input = injection::align_var(nn::standardize3d(pyramid.back()), n, acfg);
  }
  return vis;
}

void init_injection_params(ParamStore& store, Rng& rng, const std::vector<int>& channels,
                           int n_layers, int d_lm, InjectionMode mode,
                           const std::string& prefix) {
  auto add_proj = [&](const std::string& name, int c_in) {
    store.add(name + ".w", init_fan_in({c_in, d_lm}, c_in, rng));
    store.add(name + ".b", Tensor::zeros({d_lm}));
    store.add(name + ".ln.g", Tensor::full({d_lm}, 1.0));
    store.add(name + ".ln.b", Tensor::zeros({d_lm}));
  };
  const int n = static_cast<int>(channels.size());
  if (mode == InjectionMode::multi_layer) {
    for (int j = 1; j <= n_layers; ++j) {
      const int s = injection::stage_for_layer(j, n, n_layers);
      if (s != injection::kNoStage)
        add_proj(prefix + "l" + std::to_string(j), channels[static_cast<std::size_t>(s - 1)]);
    }
  } else if (mode == InjectionMode::input_only) {
    add_proj(prefix + "input", channels.back());
  }
}

LangDecoder::LangDecoder(DecoderConfig cfg, std::string prefix)
    : cfg_(cfg), prefix_(std::move(prefix)) {
  cfg_.validate();
}

void LangDecoder::init(ParamStore& store, Rng& rng) const {
  const int D = cfg_.dim;
  store.add(prefix_ + "emb", init_fan_in({cfg_.vocab_size, D}, D, rng));
  store.add(prefix_ + "pos", init_fan_in({cfg_.t_max, D}, D, rng));
  store.add(prefix_ + "vplace", init_fan_in({1, D}, D, rng));
  for (int j = 1; j <= cfg_.layers; ++j) {
    const std::string l = prefix_ + "l" + std::to_string(j) + ".";
    store.add(l + "ln1.g", Tensor::full({D}, 1.0));
    store.add(l + "ln1.b", Tensor::zeros({D}));
    for (const char* w : {"wq", "wk", "wv", "wo"})
      store.add(l + w, init_fan_in({D, D}, D, rng));
    for (const char* b : {"bq", "bk", "bv", "bo"}) store.add(l + b, Tensor::zeros({D}));
    store.add(l + "ln2.g", Tensor::full({D}, 1.0));
    store.add(l + "ln2.b", Tensor::zeros({D}));
    store.add(l + "mlp.w1", init_fan_in({D, 4 * D}, D, rng));
    store.add(l + "mlp.b1", Tensor::zeros({4 * D}));
    store.add(l + "mlp.w2", init_fan_in({4 * D, D}, static_cast<std::int64_t>(4) * D, rng));
    store.add(l + "mlp.b2", Tensor::zeros({D}));
  }
  store.add(prefix_ + "lnf.g", Tensor::full({D}, 1.0));
  store.add(prefix_ + "lnf.b", Tensor::zeros({D}));
}

namespace {

nn::Var self_attention(const ParamStore& store, const std::string& l, const nn::Var& x,
                       const Tensor& mask, int heads) {
  const int D = x->value.dim(1), dh = D / heads;
  auto q = nn::linear(x, store.get(l + "wq"), store.get(l + "bq"));
  auto k = nn::linear(x, store.get(l + "wk"), store.get(l + "bk"));
  auto v = nn::linear(x, store.get(l + "wv"), store.get(l + "bv"));
  std::vector<nn::Var> outs;
  for (int h = 0; h < heads; ++h) {
    auto qh = nn::slice_cols(q, h * dh, (h + 1) * dh);
    auto kh = nn::slice_cols(k, h * dh, (h + 1) * dh);
    auto vh = nn::slice_cols(v, h * dh, (h + 1) * dh);
    auto scores = nn::scale(nn::matmul(qh, nn::transpose2d(kh)), 1.0 / std::sqrt(double(dh)));
    auto p = nn::softmax_rows_masked(scores, mask);
    outs.push_back(nn::matmul(p, vh));
  }
  return nn::linear(nn::concat_cols(outs), store.get(l + "wo"), store.get(l + "bo"));
}

}  // namespace

nn::Var LangDecoder::forward(const ParamStore& store, const VisualContext& vis,
                             const Report& tokens) const {
  const int K = cfg_.visual_tokens;
  const int T = static_cast<int>(tokens.size());
  if (T > cfg_.t_max)
    throw std::invalid_argument("forward: sequence length " + std::to_string(T) +
                                " exceeds T_max=" + std::to_string(cfg_.t_max));
  auto emb = store.get(prefix_ + "emb");
  // Vision rows start from one shared learned placeholder embedding;
  // injection supplies their content.
  auto vis_rows = nn::embedding_rows(store.get(prefix_ + "vplace"),
                                     std::vector<int>(static_cast<std::size_t>(K), 0));
  auto text_rows = nn::add(nn::embedding_rows(emb, tokens),
                           nn::slice_rows(store.get(prefix_ + "pos"), 0, T));
  auto x = nn::concat_rows({vis_rows, text_rows});
  const Tensor mask = injection::mask_additive(injection::build_hybrid_mask(K, T));

  if (vis.mode == InjectionMode::input_only && vis.input) {
    x = injection::inject(x, vis.input, store.get("inject.input.w"), store.get("inject.input.b"),
                          store.get("inject.input.ln.g"), store.get("inject.input.ln.b"), K);
  }
  for (int j = 1; j <= cfg_.layers; ++j) {
    const std::string l = prefix_ + "l" + std::to_string(j) + ".";
    if (vis.mode == InjectionMode::multi_layer &&
        vis.per_layer[static_cast<std::size_t>(j - 1)]) {
      const std::string ip = "inject.l" + std::to_string(j);
      x = injection::inject(x, vis.per_layer[static_cast<std::size_t>(j - 1)],
                            store.get(ip + ".w"), store.get(ip + ".b"), store.get(ip + ".ln.g"),
                            store.get(ip + ".ln.b"), K);
    }
    auto a = self_attention(store, l,
                            nn::layer_norm_rows(x, store.get(l + "ln1.g"), store.get(l + "ln1.b")),
                            mask, cfg_.heads);
    x = nn::add(x, a);
    auto h = nn::layer_norm_rows(x, store.get(l + "ln2.g"), store.get(l + "ln2.b"));
    h = nn::linear(h, store.get(l + "mlp.w1"), store.get(l + "mlp.b1"));
    h = nn::leaky_relu(h, 0.0);
    h = nn::linear(h, store.get(l + "mlp.w2"), store.get(l + "mlp.b2"));
    x = nn::add(x, h);
  }
  auto hf = nn::layer_norm_rows(x, store.get(prefix_ + "lnf.g"), store.get(prefix_ + "lnf.b"));
  auto text = nn::slice_rows(hf, K, K + T);
  return nn::matmul(text, nn::transpose2d(emb));  // tied output projection
}

Report LangDecoder::generate(const ParamStore& store, const VisualContext& vis,
                             int max_len) const {
  if (max_len > cfg_.t_max) throw std::invalid_argument("generate: max_len exceeds T_max");
  Report tokens{Vocab::kBos};
  for (int step = 0; step < max_len; ++step) {
    auto logits = forward(store, vis, tokens);
    const int T = static_cast<int>(tokens.size());
    const int V = cfg_.vocab_size;
    const double* row = logits->value.data.data() + static_cast<std::int64_t>(T - 1) * V;
    int best = 0;
    for (int j = 1; j < V; ++j)
      if (row[j] > row[best]) best = j;  // strict: ties keep the lowest id
    tokens.push_back(best);
    if (best == Vocab::kEos) break;
  }
  return tokens;
}

nn::Var lm_loss(const nn::Var& logits, const Report& tokens) {
  const int T = static_cast<int>(tokens.size());
  if (logits->value.dim(0) != T) throw std::invalid_argument("lm_loss: length mismatch");
  std::vector<int> targets(static_cast<std::size_t>(T), Vocab::kPad);
  for (int t = 0; t + 1 < T; ++t) targets[static_cast<std::size_t>(t)] = tokens[static_cast<std::size_t>(t + 1)];
  return nn::cross_entropy_rows(logits, targets, Vocab::kPad);
}

std::int64_t decoder_param_count(const DecoderConfig& cfg) {
  const std::int64_t D = cfg.dim;
  std::int64_t per_layer = 2 * D                      // ln1
                           + 4 * (D * D + D)          // attention
                           + 2 * D                    // ln2
                           + D * 4 * D + 4 * D        // mlp in
                           + 4 * D * D + D;           // mlp out
  return static_cast<std::int64_t>(cfg.vocab_size) * D   // tied embeddings
         + static_cast<std::int64_t>(cfg.t_max) * D      // text positions
         + D                                            // vision placeholder
         + cfg.layers * per_layer + 2 * D;              // final norm
}

std::int64_t injection_param_count(const std::vector<int>& channels, int n_layers, int d_lm,
                                   InjectionMode mode) {
  const int n = static_cast<int>(channels.size());
  std::int64_t total = 0;
  auto proj = [d_lm](int c) { return static_cast<std::int64_t>(c) * d_lm + 3 * d_lm; };
  if (mode == InjectionMode::multi_layer) {
    for (int j = 1; j <= n_layers; ++j) {
      const int s = injection::stage_for_layer(j, n, n_layers);
      if (s != injection::kNoStage) total += proj(channels[static_cast<std::size_t>(s - 1)]);
    }
  } else if (mode == InjectionMode::input_only) {
    total += proj(channels.back());
  }
  return total;
}

}  // namespace uvlm::langdec
