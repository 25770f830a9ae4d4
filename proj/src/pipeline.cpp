#include "uvlm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace uvlm::pipeline {

std::string to_string(StageKind s) {
  switch (s) {
    case StageKind::seg: return "seg";
    case StageKind::cls: return "cls";
    case StageKind::rep: return "rep";
  }
  return "?";
}

std::string to_string(SegGranularity g) {
  switch (g) {
    case SegGranularity::C: return "C";
    case SegGranularity::C_L: return "C+L";
    case SegGranularity::F_L: return "F+L";
  }
  return "?";
}

SegGranularity seg_granularity_from_string(const std::string& s) {
  if (s == "C") return SegGranularity::C;
  if (s == "C+L") return SegGranularity::C_L;
  if (s == "F+L") return SegGranularity::F_L;
  throw std::invalid_argument("unknown granularity '" + s + "' (expected C, C+L or F+L)");
}

SegGranularity granularity_of(const synthvol::CaseSpec& spec) {
  if (!spec.lesions_enabled) return SegGranularity::C;
  return spec.granularity == synthvol::Granularity::fine ? SegGranularity::F_L
                                                         : SegGranularity::C_L;
}

injection::AlignConfig ModelPreset::align_config() const {
  const int r = resolved_reference_stage();
  injection::AlignConfig acfg;
  acfg.reference_stage = r;
  const int shift = r - 1;
  for (int a = 0; a < 3; ++a)
    acfg.ref_grid[static_cast<std::size_t>(a)] = volume_shape[static_cast<std::size_t>(a)] >> shift;
  return acfg;
}

std::string ModelPreset::echo() const {
  return enc.echo() + " " + cls.echo() + " " + dec.echo() +
         " r=" + std::to_string(resolved_reference_stage());
}

ModelPreset desk_preset(const synthvol::CaseSpec& spec, int reference_stage) {
  ModelPreset p;
  p.enc = encoder::EncoderConfig::desk_preset(spec.seg_classes());
  p.volume_shape = {spec.d, spec.h, spec.w};
  p.cls.queries = 16;
  p.cls.dim = 32;
  p.cls.heads = 4;
  p.cls.c_cls = spec.num_classes();
  p.cls.in_channels = p.enc.channels.back();
  p.reference_stage = reference_stage;
  const Vocab vocab(spec.num_classes());
  injection::AlignConfig acfg;
  acfg.reference_stage = reference_stage == 0 ? p.enc.n_stages : reference_stage;
  const int shift = acfg.reference_stage - 1;
  acfg.ref_grid = {spec.d >> shift, spec.h >> shift, spec.w >> shift};
  p.dec = langdec::DecoderConfig::desk_preset(vocab.size(), acfg.token_count());
  return p;
}

OptimizerSpec reference_seg_optimizer() {
  OptimizerSpec s;
  s.kind = OptimizerSpec::Kind::sgd;
  s.base_lr = 0.01;
  s.momentum = 0.9;
  return s;
}

OptimizerSpec reference_adamw_optimizer(double enc_mult) {
  OptimizerSpec s;
  s.kind = OptimizerSpec::Kind::adamw;
  s.base_lr = 2e-5;
  s.encoder_lr_multiplier = enc_mult;
  return s;
}

OptimizerSpec desk_seg_optimizer() {
  OptimizerSpec s;
  s.kind = OptimizerSpec::Kind::sgd;
  // Sized for the desk model with cosine decay, the zero-initialised logit
  // layer, and inverse-frequency CE weights; much smaller rates stall in the
  // all-background dice plateau, much larger ones destabilise organ classes.
  s.base_lr = 0.05;
  s.momentum = 0.9;
  return s;
}

OptimizerSpec desk_adamw_optimizer(double enc_mult) {
  OptimizerSpec s;
  s.kind = OptimizerSpec::Kind::adamw;
  s.base_lr = 2e-3;
  s.encoder_lr_multiplier = enc_mult;
  return s;
}

void StagePlan::validate() const {
  const bool mult_zero = optimizer.encoder_lr_multiplier == 0.0;
  if (mult_zero != freeze_encoder)
    throw std::invalid_argument("StagePlan: encoder multiplier 0 <=> freeze_encoder");
  if (steps < 0 || batch_size < 1) throw std::invalid_argument("StagePlan: bad budget");
}

std::string StagePlan::echo() const {
  return "stage=" + to_string(stage) +
         (stage == StageKind::seg ? " granularity=" + to_string(seg_granularity) : "") +
         " freeze=" + std::string(freeze_encoder ? "1" : "0") +
         " injection=" + langdec::to_string(injection_mode) + " opt{" + optimizer.describe() +
         "} steps=" + std::to_string(steps) + " batch=" + std::to_string(batch_size) +
         " seed=" + std::to_string(seed) + (fixed_batch ? " fixed_batch=1" : "");
}

StagePlan desk_plan(StageKind stage, std::uint64_t seed, int steps) {
  StagePlan p;
  p.stage = stage;
  p.seed = seed;
  p.steps = steps;
  if (stage == StageKind::seg) {
    p.optimizer = desk_seg_optimizer();
  } else if (stage == StageKind::cls) {
    p.optimizer = desk_adamw_optimizer(0.1);
  } else {
    // Stage-3 default: frozen encoder, multi-layer injection (best reported configuration).
    p.optimizer = desk_adamw_optimizer(0.0);
    // The report stage tolerates a hotter rate than the classification stage
    // and needs it: the language loss spreads its gradient over every token
    // of the template, so the visual read-out circuit emerges in roughly
    // half the steps at twice the rate.
    p.optimizer.base_lr = 4e-3;
    p.freeze_encoder = true;
    p.injection_mode = langdec::InjectionMode::multi_layer;
  }
  return p;
}

void transfer_encoder(const Checkpoint& from, ParamStore& into) {
  std::string problems;
  for (const auto& [name, p] : into.params) {
    if (name.rfind("encoder.", 0) != 0) continue;
    const Tensor* src = from.find(name);
    if (!src) {
      problems += " missing:" + name;
      continue;
    }
    if (src->shape != p->value.shape) {
      problems += " shape:" + name + "(" + src->shape_str() + " vs " + p->value.shape_str() + ")";
      continue;
    }
    p->value = *src;
  }
  if (!problems.empty())
    throw std::runtime_error("transfer_encoder: incompatible checkpoint:" + problems);
}

namespace {

struct StageModel {
  ParamStore store;
  encoder::Encoder enc;
  std::optional<encoder::SegDecoder> segdec;
  std::optional<clshead::ClsHead> cls;
  std::optional<langdec::LangDecoder> dec;
};

StageModel build_model(StageKind stage, const ModelPreset& preset,
                       langdec::InjectionMode injection_mode, const synthvol::Dataset& data,
                       std::uint64_t seed) {
  StageModel m{ParamStore{}, encoder::Encoder(preset.enc), {}, {}, {}};
  Rng rng = Rng(seed).stream(0x1217);
  m.enc.init(m.store, rng);
  if (stage == StageKind::seg) {
    auto cfg = preset.enc;
    cfg.c_seg = data.spec.seg_classes();
    m.segdec.emplace(cfg);
    m.segdec->init(m.store, rng);
  } else if (stage == StageKind::cls) {
    auto cfg = preset.cls;
    cfg.c_cls = data.spec.num_classes();
    m.cls.emplace(cfg);
    m.cls->init(m.store, rng);
  } else {
    m.dec.emplace(preset.dec);
    m.dec->init(m.store, rng);
    langdec::init_injection_params(m.store, rng, preset.enc.channels, preset.dec.layers,
                                   preset.dec.dim, injection_mode);
  }
  return m;
}

std::vector<Tensor> pyramid_values(const StageModel& m, const synthvol::Volume& v) {
  auto pyramid = m.enc.forward(m.store, encoder::volume_to_var(v));
  std::vector<Tensor> out;
  out.reserve(pyramid.size());
  for (auto& f : pyramid) out.push_back(f->value);
  return out;
}


// In-place mirror of a raw (volume, mask) training sample along any subset
// of axes; used by the patch-based stage where the sample is not a Var yet.
template <typename T>
void mirror_grid(std::vector<T>& v, int d, int h, int w, const std::array<bool, 3>& f) {
  if (!f[0] && !f[1] && !f[2]) return;
  std::vector<T> out(v.size());
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int zz = f[0] ? d - 1 - z : z, yy = f[1] ? h - 1 - y : y,
                  xx = f[2] ? w - 1 - x : x;
        out[(static_cast<std::int64_t>(zz) * h + yy) * w + xx] =
            v[(static_cast<std::int64_t>(z) * h + y) * w + x];
      }
  v = std::move(out);
}

langdec::VisualContext context_from_tensors(const std::vector<Tensor>& pyramid,
                                            const injection::AlignConfig& acfg, int n_layers,
                                            langdec::InjectionMode mode) {
  std::vector<nn::Var> vars;
  vars.reserve(pyramid.size());
  for (const auto& t : pyramid) vars.push_back(nn::constant(t));
  return langdec::build_visual_context(vars, acfg, n_layers, mode);
}

}  // namespace

RunResult run_stage(const StagePlan& plan, const synthvol::Dataset& data,
                    const ModelPreset& preset, const Checkpoint* init_from) {
  plan.validate();
  if (data.cases.empty()) throw std::invalid_argument("run_stage: empty dataset");
  if (plan.stage == StageKind::seg && granularity_of(data.spec) != plan.seg_granularity)
    throw std::invalid_argument("run_stage: plan expects " + to_string(plan.seg_granularity) +
                                " data but dataset is " + to_string(granularity_of(data.spec)));

  StageModel model = build_model(plan.stage, preset, plan.injection_mode, data, plan.seed);
  if (init_from) transfer_encoder(*init_from, model.store);
  if (plan.freeze_encoder) model.store.set_trainable("encoder.", false);

  Optimizer opt(plan.optimizer);
  // Cosine decay from the base rate to 10% of it over the run; large early
  // steps escape the all-background plateau of the dice term, small late
  // steps let full-batch updates settle instead of bouncing.
  int current_step = 0;
  auto lr_schedule = [&] {
    const double t = plan.steps > 1 ? static_cast<double>(current_step) / (plan.steps - 1) : 0.0;
    return 0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
  };
  auto lr_mult = [&](const std::string& name) {
    const double base = name.rfind("encoder.", 0) == 0 ? plan.optimizer.encoder_lr_multiplier : 1.0;
    return base * lr_schedule();
  };

  const auto acfg = preset.align_config();
  // Frozen-encoder report stage: feature pyramids are constant, compute once.
  std::vector<std::vector<Tensor>> cached_pyramids;
  if (plan.stage == StageKind::rep && plan.freeze_encoder &&
      plan.injection_mode != langdec::InjectionMode::none) {
    cached_pyramids.reserve(data.cases.size());
    for (const auto& c : data.cases) cached_pyramids.push_back(pyramid_values(model, c.volume));
  }

  // Default patch: a slab spanning the full last axis. Instance norm makes
  // the encoder invariant to per-patch intensity shift/scale, so a patch must
  // cover every structure's band along at least one axis for absolute
  // intensity classes to stay distinguishable.
  std::array<int, 3> patch = plan.seg_patch;
  const auto& v0 = data.cases.front().volume;
  if (patch[0] == 0) patch[0] = std::max(preset.enc.divisibility(), v0.d / 2);
  if (patch[1] == 0) patch[1] = std::max(preset.enc.divisibility(), v0.h / 4);
  if (patch[2] == 0) patch[2] = v0.w;

  // Per-case, per-foreground-class voxel lists for oversampling (seg only,
  // computed lazily the first time a case is drawn).
  std::vector<std::vector<std::vector<std::int64_t>>> fg_voxels(data.cases.size());
  std::vector<char> fg_ready(data.cases.size(), 0);
  auto foreground_of = [&](std::size_t ci) -> const std::vector<std::vector<std::int64_t>>& {
    if (!fg_ready[ci]) {
      const auto& labels = data.cases[ci].mask.labels;
      std::vector<std::vector<std::int64_t>> by_class;
      for (std::int64_t v = 0; v < static_cast<std::int64_t>(labels.size()); ++v) {
        const int l = labels[static_cast<std::size_t>(v)];
        if (l == 0) continue;
        if (l >= static_cast<int>(by_class.size())) by_class.resize(static_cast<std::size_t>(l) + 1);
        by_class[static_cast<std::size_t>(l)].push_back(v);
      }
      fg_voxels[ci] = std::move(by_class);
      fg_ready[ci] = 1;
    }
    return fg_voxels[ci];
  };

  Rng batch_rng = Rng(plan.seed).stream(0xBA7C4);
  // With fixed_batch the batch drawn on step 0 is replayed every step
  // (classic overfit-one-batch protocol).
  std::vector<std::size_t> fixed_cases;
  std::vector<std::pair<synthvol::Volume, synthvol::SegMask>> fixed_patches;
  std::vector<std::array<bool, 3>> fixed_flips;
  RunResult result;
  result.optimizer_desc = plan.optimizer.describe();
  result.losses.reserve(static_cast<std::size_t>(plan.steps));

  for (int step = 0; step < plan.steps; ++step) {
    current_step = step;
    model.store.zero_grad();
    double loss_value = 0.0;
    for (int b = 0; b < plan.batch_size; ++b) {
      const bool replay = plan.fixed_batch && step > 0;
      const std::size_t ci =
          replay ? fixed_cases[static_cast<std::size_t>(b)]
                 : static_cast<std::size_t>(
                       batch_rng.range(0, static_cast<std::int64_t>(data.cases.size())));
      if (plan.fixed_batch && step == 0) fixed_cases.push_back(ci);
      const auto& c = data.cases[ci];
      // Mirror augmentation for the whole-volume stages: label-relevant
      // evidence lives in channel content and survives a mirror, while the
      // positional layout a model could use to memorise individual training
      // cases does not.
      std::array<bool, 3> flips{false, false, false};
      if (replay) {
        flips = fixed_flips[static_cast<std::size_t>(b)];
      } else {
        for (bool& f : flips) f = batch_rng.uniform() < 0.5;
        if (plan.fixed_batch) fixed_flips.push_back(flips);
      }
      auto mirror = [&](const nn::Var& f) { return nn::flip3d(f, flips[0], flips[1], flips[2]); };
      nn::Var loss;
      if (plan.stage == StageKind::seg) {
        // Half the patches are forced to contain a voxel of a uniformly
        // chosen foreground class, so thin organs and small lesions see
        // gradient despite their tiny volume fraction.
        std::pair<synthvol::Volume, synthvol::SegMask> sample;
        if (!replay) {
          const auto& fg = foreground_of(ci);
          std::vector<int> present;
          for (std::size_t k = 0; k < fg.size(); ++k)
            if (!fg[k].empty()) present.push_back(static_cast<int>(k));
          if (!present.empty() && batch_rng.uniform() < 0.5) {
            const auto& voxels =
                fg[static_cast<std::size_t>(present[batch_rng.below(present.size())])];
            const std::int64_t v = voxels[batch_rng.below(voxels.size())];
            const int z = static_cast<int>(v / (c.mask.h * c.mask.w));
            const int y = static_cast<int>(v / c.mask.w % c.mask.h);
            const int x = static_cast<int>(v % c.mask.w);
            sample = synthvol::sample_patch_containing(c.volume, c.mask, patch[0], patch[1],
                                                       patch[2], z, y, x, batch_rng.next());
          } else {
            sample = synthvol::sample_patch(c.volume, c.mask, patch[0], patch[1], patch[2],
                                            batch_rng.next());
          }
          mirror_grid(sample.first.data, sample.first.d, sample.first.h, sample.first.w, flips);
          mirror_grid(sample.second.labels, sample.second.d, sample.second.h, sample.second.w,
                      flips);
          if (plan.fixed_batch) fixed_patches.push_back(sample);
        }
        const auto& [pv, pm] = replay ? fixed_patches[static_cast<std::size_t>(b)] : sample;
        auto pyramid = model.enc.forward(model.store, encoder::volume_to_var(pv));
        auto logits = model.segdec->forward(model.store, pyramid);
        loss = encoder::seg_loss(logits, pm.labels);
        // Deep supervision on the coarsest feature: downstream stages read
        // only f_N, so stage 1 must not hide small classes in the skips.
        loss = nn::add(loss, encoder::aux_presence_loss(
                                 model.segdec->aux_logits(model.store, pyramid), pm.labels,
                                 pv.d, pv.h, pv.w));
      } else if (plan.stage == StageKind::cls) {
        // The mirror goes in front of the encoder here: the encoder is
        // training, and only input-level augmentation stops it from keying
        // label bits on the positional layout of individual training cases.
        auto pyramid = model.enc.forward(model.store, mirror(encoder::volume_to_var(c.volume)));
        auto probs = model.cls->forward(model.store, pyramid.back());
        loss = clshead::cls_loss(probs, c.labels);
      } else {
        langdec::VisualContext ctx;
        if (!cached_pyramids.empty()) {
          std::vector<nn::Var> pyramid;
          pyramid.reserve(cached_pyramids[ci].size());
          for (const auto& t : cached_pyramids[ci]) pyramid.push_back(mirror(nn::constant(t)));
          ctx = langdec::build_visual_context(pyramid, acfg, preset.dec.layers,
                                              plan.injection_mode);
        } else if (plan.injection_mode != langdec::InjectionMode::none) {
          // Encoder in the loop: mirror the input volume itself (see cls).
          auto pyramid = model.enc.forward(model.store, mirror(encoder::volume_to_var(c.volume)));
          ctx = langdec::build_visual_context(pyramid, acfg, preset.dec.layers,
                                              plan.injection_mode);
        } else {
          ctx.mode = langdec::InjectionMode::none;
          ctx.per_layer.resize(static_cast<std::size_t>(preset.dec.layers));
        }
        auto logits = model.dec->forward(model.store, ctx, c.report);
        loss = langdec::lm_loss(logits, c.report);
      }
      loss = nn::scale(loss, 1.0 / plan.batch_size);
      nn::backward(loss);
      loss_value += loss->value[0];
    }
    opt.step(model.store, lr_mult);
    result.losses.push_back(loss_value);
  }

  result.checkpoint.module_name = "uvlm";
  result.checkpoint.stage_tag =
      plan.stage == StageKind::seg ? "stage1" : plan.stage == StageKind::cls ? "stage2" : "stage3";
  result.checkpoint.config_echo = preset.echo() + " | " + plan.echo();
  result.checkpoint.set_from_store(model.store);
  return result;
}

namespace {

StageModel model_from_checkpoint(const Checkpoint& ckpt, StageKind stage,
                                 const ModelPreset& preset, langdec::InjectionMode mode,
                                 const synthvol::Dataset& data) {
  StageModel m = build_model(stage, preset, mode, data, /*seed=*/0);
  ckpt.load_into_store(m.store);
  return m;
}

}  // namespace

std::vector<Report> generate_reports(const Checkpoint& ckpt, const synthvol::Dataset& data,
                                     const ModelPreset& preset,
                                     langdec::InjectionMode injection_mode) {
  StageModel m = model_from_checkpoint(ckpt, StageKind::rep, preset, injection_mode, data);
  const auto acfg = preset.align_config();
  const int max_len = std::min(preset.dec.t_max - 1, 6 * data.spec.num_classes() + 2);
  std::vector<Report> generated;
  for (const auto& c : data.cases) {
    langdec::VisualContext ctx;
    if (injection_mode != langdec::InjectionMode::none) {
      ctx = context_from_tensors(pyramid_values(m, c.volume), acfg, preset.dec.layers,
                                 injection_mode);
    } else {
      ctx.mode = langdec::InjectionMode::none;
      ctx.per_layer.resize(static_cast<std::size_t>(preset.dec.layers));
    }
    generated.push_back(m.dec->generate(m.store, ctx, max_len));
  }
  return generated;
}

evalkit::ReportMetrics evaluate_rep(const Checkpoint& ckpt, const synthvol::Dataset& test,
                                    const ModelPreset& preset,
                                    langdec::InjectionMode injection_mode) {
  const auto generated = generate_reports(ckpt, test, preset, injection_mode);
  const int c_cls = test.spec.num_classes();
  std::vector<Report> reference;
  std::vector<synthvol::MultiLabel> gts;
  for (const auto& c : test.cases) {
    reference.push_back(c.report);
    gts.push_back(c.labels);
  }
  return evalkit::evaluate_reports(generated, reference, gts, Vocab(c_cls), c_cls);
}

evalkit::Prf evaluate_cls(const Checkpoint& ckpt, const synthvol::Dataset& test,
                          const ModelPreset& preset) {
  StageModel m = model_from_checkpoint(ckpt, StageKind::cls, preset,
                                       langdec::InjectionMode::none, test);
  std::vector<synthvol::MultiLabel> preds, gts;
  for (const auto& c : test.cases) {
    auto pyramid = m.enc.forward(m.store, encoder::volume_to_var(c.volume));
    auto probs = m.cls->forward(m.store, pyramid.back());
    synthvol::MultiLabel y(c.labels.size(), 0);
    for (std::size_t k = 0; k < y.size(); ++k)
      y[k] = probs->value[static_cast<std::int64_t>(k)] > 0.5 ? 1 : 0;
    preds.push_back(std::move(y));
    gts.push_back(c.labels);
  }
  return evalkit::macro_prf(preds, gts);
}

double evaluate_seg_dice(const Checkpoint& ckpt, const synthvol::Dataset& test,
                         const ModelPreset& preset) {
  StageModel m = model_from_checkpoint(ckpt, StageKind::seg, preset,
                                       langdec::InjectionMode::none, test);
  double total = 0.0;
  long long count = 0;
  const int c_seg = test.spec.seg_classes();
  for (const auto& c : test.cases) {
    auto pyramid = m.enc.forward(m.store, encoder::volume_to_var(c.volume));
    auto logits = m.segdec->forward(m.store, pyramid);
    auto pred = encoder::argmax_mask(logits->value, c.mask.d, c.mask.h, c.mask.w);
    for (int cls = 1; cls < c_seg; ++cls) {  // foreground classes only
      bool gt_present = false;
      for (auto l : c.mask.labels)
        if (l == cls) {
          gt_present = true;
          break;
        }
      if (!gt_present) continue;
      total += evalkit::dice_score(pred, c.mask, cls);
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 1.0;
}

std::vector<AblationResult> run_ablation(const std::vector<AblationRow>& rows,
                                         const synthvol::Dataset& train,
                                         const synthvol::Dataset& test,
                                         const ModelPreset& preset, std::uint64_t seed,
                                         const AblationBudget& budget) {
  std::set<std::string> labels;
  for (const auto& r : rows)
    if (!labels.insert(r.label).second)
      throw std::invalid_argument("run_ablation: duplicate row label " + r.label);

  std::vector<AblationResult> results;
  for (const auto& row : rows) {
    ModelPreset row_preset = preset;
    if (row.reference_stage != 0) {
      row_preset = preset;
      row_preset.reference_stage = row.reference_stage;
      row_preset.dec.visual_tokens = row_preset.align_config().token_count();
    }
    Checkpoint current;
    bool have_ckpt = false;
    for (StageKind stage : row.curriculum) {
      const int steps = stage == StageKind::seg   ? budget.seg_steps
                        : stage == StageKind::cls ? budget.cls_steps
                                                  : budget.rep_steps;
      StagePlan plan = desk_plan(stage, seed, steps);
      if (stage == StageKind::seg) plan.seg_granularity = granularity_of(train.spec);
      if (stage == StageKind::rep) {
        plan.injection_mode = row.skip_connections ? langdec::InjectionMode::multi_layer
                                                   : langdec::InjectionMode::input_only;
        plan.freeze_encoder = row.freeze;
        plan.optimizer.encoder_lr_multiplier = row.freeze ? 0.0 : 0.1;
      }
      auto res = run_stage(plan, train, row_preset, have_ckpt ? &current : nullptr);
      current = std::move(res.checkpoint);
      have_ckpt = true;
    }
    const auto metrics = evaluate_rep(current, test, row_preset,
                                      row.skip_connections ? langdec::InjectionMode::multi_layer
                                                           : langdec::InjectionMode::input_only);
    results.push_back({row.label, metrics.f1, metrics.b_mean});
  }
  return results;
}

}  // namespace uvlm::pipeline
