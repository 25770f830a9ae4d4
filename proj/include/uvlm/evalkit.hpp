#pragma once

#include <string>
#include <vector>

#include "uvlm/synthvol.hpp"
#include "uvlm/vocab.hpp"

namespace uvlm::evalkit {

// Corpus-level BLEU-n: clipped modified n-gram precision over the corpus
// times brevity penalty exp(1 - ref_len/hyp_len) when the hypothesis corpus
// is shorter. BOS/EOS/PAD are excluded from n-grams. Zero matched n-grams
// give 0 (no smoothing).
double bleu(const std::vector<Report>& hyps, const std::vector<Report>& refs, int n);

// Arithmetic mean of BLEU-1..BLEU-4.
double bleu_mean(const std::vector<Report>& hyps, const std::vector<Report>& refs);

// Reference values from full-scale training runs, recorded as documentation
// constants only (desk runs do not reproduce them).
constexpr double kReferenceBleuMeanFullScale = 0.349;
constexpr double kReferenceF1FullScale = 0.414;

struct Prf {
  double f1 = 0.0, precision = 0.0, recall = 0.0;
};

// Macro-averaged P/R/F1 from per-class TP/FP/FN. A class with zero
// positives and zero predictions contributes 0 to every average.
Prf macro_prf(const std::vector<synthvol::MultiLabel>& preds,
              const std::vector<synthvol::MultiLabel>& gts);

// Hard Dice on one class; both-empty convention = 1.0.
double dice_score(const synthvol::SegMask& pred, const synthvol::SegMask& gt, int cls);

struct ReportMetrics {
  double f1 = 0.0, precision = 0.0, recall = 0.0;
  double b1 = 0.0, b2 = 0.0, b3 = 0.0, b4 = 0.0, b_mean = 0.0;

  std::string csv_row(const std::string& run_name) const;
  static std::string csv_header();
};

// Extracts labels from each generated report, scores them against ground
// truth, and adds corpus BLEU against the reference reports.
ReportMetrics evaluate_reports(const std::vector<Report>& generated,
                               const std::vector<Report>& reference,
                               const std::vector<synthvol::MultiLabel>& gt_labels,
                               const Vocab& vocab, int num_classes);

}  // namespace uvlm::evalkit
