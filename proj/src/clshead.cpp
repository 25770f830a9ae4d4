#include "uvlm/clshead.hpp"

#include <cmath>
#include <stdexcept>

namespace uvlm::clshead {

void ClsHeadConfig::validate() const {
  if (queries < 1) throw std::invalid_argument("ClsHeadConfig: M must be >= 1");
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("ClsHeadConfig: D_q must be divisible by heads");
  if (c_cls < 1 || in_channels < 1) throw std::invalid_argument("ClsHeadConfig: bad widths");
}

std::string ClsHeadConfig::echo() const {
  return "clshead{M=" + std::to_string(queries) + ",D_q=" + std::to_string(dim) +
         ",heads=" + std::to_string(heads) + ",C_cls=" + std::to_string(c_cls) +
         ",in=" + std::to_string(in_channels) + "}";
}

ClsHead::ClsHead(ClsHeadConfig cfg, std::string prefix)
    : cfg_(cfg), prefix_(std::move(prefix)) {
  cfg_.validate();
}

void ClsHead::init(ParamStore& store, Rng& rng) const {
  const int M = cfg_.queries, D = cfg_.dim, C = cfg_.in_channels;
  store.add(prefix_ + "q", init_fan_in({M, D}, D, rng));
  store.add(prefix_ + "wk", init_fan_in({C, D}, C, rng));
  store.add(prefix_ + "bk", Tensor::zeros({D}));
  store.add(prefix_ + "wv", init_fan_in({C, D}, C, rng));
  store.add(prefix_ + "bv", Tensor::zeros({D}));
  store.add(prefix_ + "wo", init_fan_in({D, D}, D, rng));
  store.add(prefix_ + "bo", Tensor::zeros({D}));
  store.add(prefix_ + "out.w", init_fan_in({M * D, cfg_.c_cls}, static_cast<std::int64_t>(M) * D, rng));
  store.add(prefix_ + "out.b", Tensor::zeros({cfg_.c_cls}));
}

nn::Var ClsHead::attend(const ParamStore& store, const nn::Var& f_n,
                        std::vector<nn::Var>* probs_out) const {
  if (f_n->value.dim(0) != cfg_.in_channels)
    throw std::invalid_argument("classify: feature has " + std::to_string(f_n->value.dim(0)) +
                                " channels, head expects " + std::to_string(cfg_.in_channels));
  const int D = cfg_.dim, H = cfg_.heads, dh = D / H;
  auto x = nn::tokens_from_grid(f_n);  // [P, C]
  auto q = store.get(prefix_ + "q");
  auto k = nn::linear(x, store.get(prefix_ + "wk"), store.get(prefix_ + "bk"));
  auto v = nn::linear(x, store.get(prefix_ + "wv"), store.get(prefix_ + "bv"));
  std::vector<nn::Var> heads;
  for (int h = 0; h < H; ++h) {
    auto qh = nn::slice_cols(q, h * dh, (h + 1) * dh);
    auto kh = nn::slice_cols(k, h * dh, (h + 1) * dh);
    auto vh = nn::slice_cols(v, h * dh, (h + 1) * dh);
    auto scores = nn::scale(nn::matmul(qh, nn::transpose2d(kh)), 1.0 / std::sqrt(double(dh)));
    auto p = nn::softmax_rows(scores);
    if (probs_out) probs_out->push_back(p);
    heads.push_back(nn::matmul(p, vh));
  }
  auto o = nn::concat_cols(heads);  // [M, D]
  return nn::linear(o, store.get(prefix_ + "wo"), store.get(prefix_ + "bo"));
}

nn::Var ClsHead::forward(const ParamStore& store, const nn::Var& f_n) const {
  auto o = attend(store, f_n, nullptr);
  auto flat = nn::reshape(o, {1, cfg_.queries * cfg_.dim});
  auto logits = nn::linear(flat, store.get(prefix_ + "out.w"), store.get(prefix_ + "out.b"));
  return nn::sigmoid(logits);
}

Tensor ClsHead::attention_weights(const ParamStore& store, const nn::Var& f_n) const {
  std::vector<nn::Var> probs;
  attend(store, f_n, &probs);
  const int M = cfg_.queries;
  const int P = probs[0]->value.dim(1);
  Tensor out({static_cast<int>(probs.size()) * M, P});
  std::int64_t off = 0;
  for (const auto& p : probs) {
    std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + off);
    off += p->value.numel();
  }
  return out;
}

nn::Var cls_loss(const nn::Var& probs, const std::vector<std::uint8_t>& y) {
  if (probs->value.numel() != static_cast<std::int64_t>(y.size()))
    throw std::invalid_argument("cls_loss: length mismatch");
  return nn::bce_mean(probs, y);
}

}  // namespace uvlm::clshead
