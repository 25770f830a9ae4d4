#include "uvlm/evalkit.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace uvlm::evalkit {

namespace {

std::vector<int> content_tokens(const Report& r) {
  std::vector<int> out;
  for (int t : r)
    if (t != Vocab::kBos && t != Vocab::kEos && t != Vocab::kPad) out.push_back(t);
  return out;
}

std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& toks, int n) {
  std::map<std::vector<int>, int> counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i)
    ++counts[std::vector<int>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                              toks.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  return counts;
}

}  // namespace

double bleu(const std::vector<Report>& hyps, const std::vector<Report>& refs, int n) {
  if (hyps.empty() || hyps.size() != refs.size())
    throw std::invalid_argument("bleu: corpus empty or length mismatch");
  if (n < 1 || n > 4) throw std::invalid_argument("bleu: n must be in 1..4");
  long long matched = 0, total = 0, hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = content_tokens(hyps[i]);
    const auto r = content_tokens(refs[i]);
    hyp_len += static_cast<long long>(h.size());
    ref_len += static_cast<long long>(r.size());
    auto hc = ngram_counts(h, n);
    auto rc = ngram_counts(r, n);
    for (const auto& [gram, count] : hc) {
      total += count;
      auto it = rc.find(gram);
      if (it != rc.end()) matched += std::min(count, it->second);
    }
  }
  if (total == 0 || matched == 0 || hyp_len == 0) return 0.0;
  const double precision = static_cast<double>(matched) / static_cast<double>(total);
  const double bp = hyp_len < ref_len
                        ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
                        : 1.0;
  return precision * bp;
}

double bleu_mean(const std::vector<Report>& hyps, const std::vector<Report>& refs) {
  double s = 0.0;
  for (int n = 1; n <= 4; ++n) s += bleu(hyps, refs, n);
  return s / 4.0;
}

Prf macro_prf(const std::vector<synthvol::MultiLabel>& preds,
              const std::vector<synthvol::MultiLabel>& gts) {
  if (preds.size() != gts.size() || preds.empty())
    throw std::invalid_argument("macro_prf: corpus empty or length mismatch");
  const std::size_t c = gts[0].size();
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i].size() != c || gts[i].size() != c)
      throw std::invalid_argument("macro_prf: class count mismatch");
  Prf out;
  for (std::size_t k = 0; k < c; ++k) {
    long long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i][k] != 0, g = gts[i][k] != 0;
      if (p && g) ++tp;
      else if (p && !g) ++fp;
      else if (!p && g) ++fn;
    }
    const double prec = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double rec = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    const double f1 = (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    out.precision += prec;
    out.recall += rec;
    out.f1 += f1;
  }
  out.precision /= static_cast<double>(c);
  out.recall /= static_cast<double>(c);
  out.f1 /= static_cast<double>(c);
  return out;
}

double dice_score(const synthvol::SegMask& pred, const synthvol::SegMask& gt, int cls) {
  if (pred.d != gt.d || pred.h != gt.h || pred.w != gt.w)
    throw std::invalid_argument("dice_score: shape mismatch");
  long long a = 0, b = 0, inter = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool pa = pred.labels[i] == cls, pb = gt.labels[i] == cls;
    a += pa;
    b += pb;
    inter += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

std::string ReportMetrics::csv_header() {
  return "run_name,f1,precision,recall,b1,b2,b3,b4,b_mean";
}

std::string ReportMetrics::csv_row(const std::string& run_name) const {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", run_name.c_str(),
                f1, precision, recall, b1, b2, b3, b4, b_mean);
  return buf;
}

ReportMetrics evaluate_reports(const std::vector<Report>& generated,
                               const std::vector<Report>& reference,
                               const std::vector<synthvol::MultiLabel>& gt_labels,
                               const Vocab& vocab, int num_classes) {
  std::vector<synthvol::MultiLabel> preds;
  preds.reserve(generated.size());
  for (const auto& g : generated)
    preds.push_back(synthvol::extract_labels(g, vocab, num_classes));
  const Prf prf = macro_prf(preds, gt_labels);
  ReportMetrics m;
  m.f1 = prf.f1;
  m.precision = prf.precision;
  m.recall = prf.recall;
  m.b1 = bleu(generated, reference, 1);
  m.b2 = bleu(generated, reference, 2);
  m.b3 = bleu(generated, reference, 3);
  m.b4 = bleu(generated, reference, 4);
  m.b_mean = (m.b1 + m.b2 + m.b3 + m.b4) / 4.0;
  return m;
}

}  // namespace uvlm::evalkit
