#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "uvlm/checkpoint.hpp"
#include "uvlm/clshead.hpp"
#include "uvlm/dataset_io.hpp"
#include "uvlm/encoder.hpp"
#include "uvlm/evalkit.hpp"
#include "uvlm/langdec.hpp"

namespace uvlm::pipeline {

enum class StageKind { seg, cls, rep };

std::string to_string(StageKind s);

// Segmentation target flavour: coarse organs only, coarse + lesions, or
// fine-grained organs + lesions. Must match the dataset the stage trains on.
enum class SegGranularity { C, C_L, F_L };

std::string to_string(SegGranularity g);
SegGranularity seg_granularity_from_string(const std::string& s);  // "C", "C+L", "F+L"

// The dataset flavour a spec corresponds to.
SegGranularity granularity_of(const synthvol::CaseSpec& spec);

// One model family: shared encoder plus the three stage heads.
struct ModelPreset {
  encoder::EncoderConfig enc;
  clshead::ClsHeadConfig cls;
  langdec::DecoderConfig dec;
  int reference_stage = 0;  // r; 0 means N
  std::array<int, 3> volume_shape{};

  int resolved_reference_stage() const {
    return reference_stage == 0 ? enc.n_stages : reference_stage;
  }
  injection::AlignConfig align_config() const;
  std::string echo() const;
};

// Desk-scale preset for a given dataset spec (64x64x32 class volumes).
ModelPreset desk_preset(const synthvol::CaseSpec& spec, int reference_stage = 0);

// Reference full-scale optimizers (recorded verbatim in run logs).
OptimizerSpec reference_seg_optimizer();                    // SGD lr 0.01
OptimizerSpec reference_adamw_optimizer(double enc_mult);   // AdamW base lr 2e-5
// Desk optimizers: same families, learning rates sized for the tiny models.
OptimizerSpec desk_seg_optimizer();
OptimizerSpec desk_adamw_optimizer(double enc_mult);

struct StagePlan {
  StageKind stage = StageKind::seg;
  SegGranularity seg_granularity = SegGranularity::C_L;  // seg stage only
  bool freeze_encoder = false;
  langdec::InjectionMode injection_mode = langdec::InjectionMode::multi_layer;
  OptimizerSpec optimizer;
  int steps = 2000;
  int batch_size = 2;
  std::uint64_t seed = 1;
  std::array<int, 3> seg_patch{0, 0, 0};  // 0 -> half the volume per axis
  bool fixed_batch = false;  // sample the first batch once, then reuse it every step

  void validate() const;  // multiplier 0 <=> freeze_encoder
  std::string echo() const;
};

StagePlan desk_plan(StageKind stage, std::uint64_t seed, int steps = 2000);

struct RunResult {
  Checkpoint checkpoint;
  std::vector<double> losses;
  std::string optimizer_desc;
};

// Trains one stage; init_from (if given) seeds the shared encoder tensors
// bit-exactly while stage heads start fresh. Deterministic per (plan, data).
RunResult run_stage(const StagePlan& plan, const synthvol::Dataset& data,
                    const ModelPreset& preset, const Checkpoint* init_from = nullptr);

// Copies every encoder.* tensor from the checkpoint into the store; throws
// listing each mismatched or missing tensor.
void transfer_encoder(const Checkpoint& from, ParamStore& into);

// Rebuilds the rep-stage model from a checkpoint and greedily generates one
// report per case.
std::vector<Report> generate_reports(const Checkpoint& ckpt, const synthvol::Dataset& data,
                                     const ModelPreset& preset,
                                     langdec::InjectionMode injection_mode);

// Rebuilds the rep-stage model from a checkpoint and scores generated
// reports on the test set.
evalkit::ReportMetrics evaluate_rep(const Checkpoint& ckpt, const synthvol::Dataset& test,
                                    const ModelPreset& preset,
                                    langdec::InjectionMode injection_mode);

// Stage-2 classification metrics (threshold 0.5) on the test set.
evalkit::Prf evaluate_cls(const Checkpoint& ckpt, const synthvol::Dataset& test,
                          const ModelPreset& preset);

// Mean foreground Dice of argmax segmentation over the test set.
double evaluate_seg_dice(const Checkpoint& ckpt, const synthvol::Dataset& test,
                         const ModelPreset& preset);

struct AblationRow {
  std::string label;
  std::vector<StageKind> curriculum;  // ending in rep
  bool skip_connections = false;      // true -> multi-layer injection
  bool freeze = true;
  int reference_stage = 0;            // VT preset
};

struct AblationResult {
  std::string label;
  double f1 = 0.0;
  double b_mean = 0.0;
};

struct AblationBudget {
  int seg_steps = 1200;
  int cls_steps = 800;
  int rep_steps = 2000;
};

// Executes every row end-to-end with the same data and seed; duplicate row
// labels are rejected.
std::vector<AblationResult> run_ablation(const std::vector<AblationRow>& rows,
                                         const synthvol::Dataset& train,
                                         const synthvol::Dataset& test,
                                         const ModelPreset& preset, std::uint64_t seed,
                                         const AblationBudget& budget = {});

}  // namespace uvlm::pipeline
