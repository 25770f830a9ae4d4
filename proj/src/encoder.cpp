#include "uvlm/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace uvlm::encoder {

namespace {

constexpr double kSlope = 0.01;  // leaky ReLU

std::string key(const std::string& prefix, const std::string& rest) { return prefix + rest; }

void init_conv(ParamStore& store, Rng& rng, const std::string& name, int co, int ci, int k) {
  const std::int64_t fan_in = static_cast<std::int64_t>(ci) * k * k * k;
  store.add(name + ".w", init_fan_in({co, ci, k, k, k}, fan_in, rng));
  store.add(name + ".b", Tensor::zeros({co}));
}

void init_norm(ParamStore& store, const std::string& name, int c) {
  store.add(name + ".g", Tensor::full({c}, 1.0));
  store.add(name + ".b", Tensor::zeros({c}));
}

nn::Var conv(const ParamStore& s, const std::string& name, const nn::Var& x, int stride) {
  return nn::conv3d(x, s.get(name + ".w"), s.get(name + ".b"), stride);
}

nn::Var norm_act(const ParamStore& s, const std::string& name, const nn::Var& x) {
  return nn::leaky_relu(nn::instance_norm3d(x, s.get(name + ".g"), s.get(name + ".b")), kSlope);
}

// Pre-activation residual block: x + conv(act(norm(conv(act(norm(x)))))).
nn::Var res_block(const ParamStore& s, const std::string& name, const nn::Var& x) {
  auto t = conv(s, name + ".c1", norm_act(s, name + ".n1", x), 1);
  t = conv(s, name + ".c2", norm_act(s, name + ".n2", t), 1);
  return nn::add(x, t);
}

void init_res_block(ParamStore& store, Rng& rng, const std::string& name, int c) {
  init_norm(store, name + ".n1", c);
  init_conv(store, rng, name + ".c1", c, c, 3);
  init_norm(store, name + ".n2", c);
  init_conv(store, rng, name + ".c2", c, c, 3);
}

}  // namespace

void EncoderConfig::validate() const {
  if (n_stages < 2) throw std::invalid_argument("EncoderConfig: N must be >= 2");
  if (static_cast<int>(channels.size()) != n_stages)
    throw std::invalid_argument("EncoderConfig: channels list length != N");
  for (int c : channels)
    if (c <= 0) throw std::invalid_argument("EncoderConfig: channel width must be > 0");
  if (blocks_per_stage < 0) throw std::invalid_argument("EncoderConfig: negative block count");
}

std::string EncoderConfig::echo() const {
  std::string s = "encoder{N=" + std::to_string(n_stages) + ",channels=[";
  for (std::size_t i = 0; i < channels.size(); ++i)
    s += (i ? "," : "") + std::to_string(channels[i]);
  s += "],c_seg=" + std::to_string(c_seg) + ",blocks=" + std::to_string(blocks_per_stage) + "}";
  return s;
}

EncoderConfig EncoderConfig::full_scale_preset(int c_seg) {
  EncoderConfig cfg;
  cfg.n_stages = 6;
  cfg.channels = {32, 64, 128, 256, 320, 320};
  cfg.c_seg = c_seg;
  cfg.blocks_per_stage = 2;
  return cfg;
}

EncoderConfig EncoderConfig::desk_preset(int c_seg) {
  EncoderConfig cfg;
  cfg.n_stages = 4;
  cfg.channels = {4, 8, 16, 32};
  cfg.c_seg = c_seg;
  cfg.blocks_per_stage = 1;
  return cfg;
}

nn::Var volume_to_var(const synthvol::Volume& v) {
  Tensor t({1, v.d, v.h, v.w});
  for (std::int64_t i = 0; i < v.numel(); ++i) t[i] = v.data[static_cast<std::size_t>(i)];
  return nn::constant(std::move(t));
}

Encoder::Encoder(EncoderConfig cfg, std::string prefix) : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  cfg_.validate();
}

void Encoder::init(ParamStore& store, Rng& rng) const {
  for (int i = 1; i <= cfg_.n_stages; ++i) {
    const int ci = i == 1 ? cfg_.in_channels : cfg_.channels[static_cast<std::size_t>(i - 2)];
    const int co = cfg_.channels[static_cast<std::size_t>(i - 1)];
    const std::string s = key(prefix_, "s" + std::to_string(i));
    init_conv(store, rng, s + ".in", co, ci, 3);
    for (int b = 0; b < cfg_.blocks_per_stage; ++b)
      init_res_block(store, rng, s + ".blk" + std::to_string(b), co);
  }
}

std::vector<nn::Var> Encoder::forward(const ParamStore& store, const nn::Var& x) const {
  const int div = cfg_.divisibility();
  static const char* axis_names[3] = {"D", "H", "W"};
  for (int a = 0; a < 3; ++a)
    if (x->value.dim(a + 1) % div != 0)
      throw std::invalid_argument(std::string("encode: axis ") + axis_names[a] + "=" +
                                  std::to_string(x->value.dim(a + 1)) +
                                  " not divisible by 2^(N-1)=" + std::to_string(div));
  std::vector<nn::Var> pyramid;
  nn::Var h = x;
  for (int i = 1; i <= cfg_.n_stages; ++i) {
    const std::string s = key(prefix_, "s" + std::to_string(i));
    h = conv(store, s + ".in", h, i == 1 ? 1 : 2);
    for (int b = 0; b < cfg_.blocks_per_stage; ++b)
      h = res_block(store, s + ".blk" + std::to_string(b), h);
    pyramid.push_back(h);
  }
  return pyramid;
}

SegDecoder::SegDecoder(EncoderConfig cfg, std::string prefix)
    : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  cfg_.validate();
}

void SegDecoder::init(ParamStore& store, Rng& rng) const {
  for (int i = cfg_.n_stages; i >= 2; --i) {
    const int ci = cfg_.channels[static_cast<std::size_t>(i - 1)];
    const int co = cfg_.channels[static_cast<std::size_t>(i - 2)];
    const std::string s = key(prefix_, "u" + std::to_string(i));
    store.add(s + ".up.w", init_fan_in({ci, co, 2, 2, 2}, static_cast<std::int64_t>(ci) * 8, rng));
    init_conv(store, rng, s + ".c1", co, 2 * co, 3);
    init_norm(store, s + ".n1", co);
    init_conv(store, rng, s + ".c2", co, co, 3);
    init_norm(store, s + ".n2", co);
  }
  const int c1 = cfg_.channels[0];
  // Zero-init the logit layer: predictions start exactly uniform, so neither
  // the cross-entropy nor the dice term sees saturated softmax gradients.
  store.add(key(prefix_, "out.w"), Tensor::zeros({cfg_.c_seg, c1, 1, 1, 1}));
  store.add(key(prefix_, "out.b"), Tensor::zeros({cfg_.c_seg}));
  // Aux presence head on the coarsest feature; zero-init -> sigmoid 0.5.
  store.add(key(prefix_, "aux.w"), Tensor::zeros({cfg_.c_seg, cfg_.channels.back()}));
  store.add(key(prefix_, "aux.b"), Tensor::zeros({cfg_.c_seg}));
}

nn::Var SegDecoder::forward(const ParamStore& store, const std::vector<nn::Var>& pyramid) const {
  nn::Var h = pyramid.back();
  for (int i = cfg_.n_stages; i >= 2; --i) {
    const std::string s = key(prefix_, "u" + std::to_string(i));
    auto up = nn::conv_transpose3d_k2s2(h, store.get(s + ".up.w"));
    auto cat = nn::concat_channels(up, pyramid[static_cast<std::size_t>(i - 2)]);
    h = norm_act(store, s + ".n1", conv(store, s + ".c1", cat, 1));
    h = norm_act(store, s + ".n2", conv(store, s + ".c2", h, 1));
  }
  // 1x1x1 projection to per-voxel class scores at input resolution.
  auto wflat = nn::reshape(store.get(key(prefix_, "out.w")), {cfg_.c_seg, cfg_.channels[0]});
  return nn::conv1x1x1(h, wflat, store.get(key(prefix_, "out.b")));
}

nn::Var SegDecoder::aux_logits(const ParamStore& store, const std::vector<nn::Var>& pyramid) const {
  return nn::conv1x1x1(nn::standardize3d(pyramid.back()), store.get(key(prefix_, "aux.w")),
                       store.get(key(prefix_, "aux.b")));
}

std::vector<std::uint8_t> coarse_presence(const std::vector<std::uint8_t>& labels, int d, int h,
                                          int w, int cell, int c_seg) {
  if (cell < 1 || d % cell || h % cell || w % cell)
    throw std::invalid_argument("coarse_presence: grid not divisible by cell");
  const int gd = d / cell, gh = h / cell, gw = w / cell;
  const std::size_t cells = static_cast<std::size_t>(gd) * gh * gw;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(c_seg) * cells, 0);
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int l = labels[(static_cast<std::size_t>(z) * h + y) * w + x];
        if (l >= c_seg) throw std::invalid_argument("coarse_presence: label out of range");
        const std::size_t cidx =
            (static_cast<std::size_t>(z / cell) * gh + y / cell) * gw + x / cell;
        out[static_cast<std::size_t>(l) * cells + cidx] = 1;
      }
  return out;
}

nn::Var aux_presence_loss(const nn::Var& cell_logits, const std::vector<std::uint8_t>& labels,
                          int d, int h, int w) {
  const int c_seg = cell_logits->value.dim(0);
  const int gd = cell_logits->value.dim(1);
  if (gd < 1 || d % gd) throw std::invalid_argument("aux_presence_loss: bad cell grid");
  const int cell = d / gd;
  auto presence = coarse_presence(labels, d, h, w, cell, c_seg);
  const std::size_t cells = presence.size() / static_cast<std::size_t>(c_seg);
  // Balance each class's positive and negative cells so rare classes are not
  // drowned out (the point of the aux head).
  std::vector<double> weights(presence.size(), 0.0);
  for (int c = 0; c < c_seg; ++c) {
    double pos = 0.0;
    for (std::size_t i = 0; i < cells; ++i) pos += presence[static_cast<std::size_t>(c) * cells + i];
    const double neg = static_cast<double>(cells) - pos;
    for (std::size_t i = 0; i < cells; ++i) {
      const std::size_t k = static_cast<std::size_t>(c) * cells + i;
      weights[k] = presence[k] ? 1.0 / std::max(pos, 1.0) : 1.0 / std::max(neg, 1.0);
    }
  }
  return nn::bce_weighted(nn::sigmoid(cell_logits), presence, weights);
}

nn::Var seg_loss(const nn::Var& logits, const std::vector<std::uint8_t>& labels, double dice_eps) {
  // Class-balanced cross entropy: weight each class by inverse frequency in
  // the patch so the CE term is the macro average of per-class mean CE.
  // Unweighted CE lets the model ignore small structures (lesions are ~0.1%
  // of voxels) at negligible cost.
  const int C = logits->value.dim(0);
  std::vector<double> counts(static_cast<std::size_t>(C), 0.0);
  for (std::uint8_t l : labels) counts[l] += 1.0;
  std::vector<double> weights(static_cast<std::size_t>(C), 0.0);
  for (int c = 0; c < C; ++c)
    if (counts[static_cast<std::size_t>(c)] > 0.0)
      weights[static_cast<std::size_t>(c)] =
          static_cast<double>(labels.size()) / counts[static_cast<std::size_t>(c)];
  return nn::add(nn::soft_dice_loss(logits, labels, dice_eps),
                 nn::softmax_ce_voxels(logits, labels, weights));
}

std::vector<double> soft_dice_per_class(const Tensor& logits,
                                        const std::vector<std::uint8_t>& labels, double eps) {
  const int C = logits.dim(0);
  const std::int64_t S = logits.numel() / C;
  std::vector<double> overlap(static_cast<std::size_t>(C), 0.0),
      pred(static_cast<std::size_t>(C), 0.0), gt(static_cast<std::size_t>(C), 0.0);
  for (std::int64_t v = 0; v < S; ++v) {
    double mx = -1e300;
    for (int c = 0; c < C; ++c) mx = std::max(mx, logits[c * S + v]);
    double z = 0.0;
    std::vector<double> e(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
      e[static_cast<std::size_t>(c)] = std::exp(logits[c * S + v] - mx);
      z += e[static_cast<std::size_t>(c)];
    }
    const int l = labels[static_cast<std::size_t>(v)];
    gt[static_cast<std::size_t>(l)] += 1.0;
    for (int c = 0; c < C; ++c) {
      const double p = e[static_cast<std::size_t>(c)] / z;
      pred[static_cast<std::size_t>(c)] += p;
      if (c == l) overlap[static_cast<std::size_t>(c)] += p;
    }
  }
  std::vector<double> dice(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c)
    dice[static_cast<std::size_t>(c)] =
        (2.0 * overlap[static_cast<std::size_t>(c)] + eps) /
        (pred[static_cast<std::size_t>(c)] + gt[static_cast<std::size_t>(c)] + eps);
  return dice;
}

synthvol::SegMask argmax_mask(const Tensor& logits, int d, int h, int w) {
  const int C = logits.dim(0);
  const std::int64_t S = static_cast<std::int64_t>(d) * h * w;
  synthvol::SegMask m{d, h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(S))};
  for (std::int64_t v = 0; v < S; ++v) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (logits[c * S + v] > logits[best * S + v]) best = c;
    m.labels[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return m;
}

}  // namespace uvlm::encoder
