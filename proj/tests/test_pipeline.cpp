#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "uvlm/pipeline.hpp"

using namespace uvlm;
using namespace uvlm::pipeline;

namespace {

synthvol::CaseSpec tiny_spec() { return synthvol::make_default_spec(16, 32, 32, 2, 2); }

ModelPreset tiny_preset(const synthvol::CaseSpec& spec) {
  ModelPreset p = desk_preset(spec);
  p.enc.channels = {2, 4, 4, 4};
  p.cls.queries = 2;
  p.cls.dim = 4;
  p.cls.heads = 2;
  p.cls.in_channels = 4;
  p.dec.layers = 4;
  p.dec.dim = 8;
  p.dec.heads = 2;
  p.dec.t_max = 32;
  return p;
}

synthvol::Dataset tiny_data(int count = 4) { return synthvol::generate_dataset(50, tiny_spec(), count); }

std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("optimizer presets record the reference settings") {
  CHECK(reference_seg_optimizer().describe().find("sgd lr=0.01") == 0);
  auto a = reference_adamw_optimizer(0.1);
  CHECK(a.base_lr == 2e-5);
  CHECK(a.encoder_lr_multiplier == 0.1);
  CHECK(reference_adamw_optimizer(0.0).encoder_lr_multiplier == 0.0);
  CHECK(a.kind == OptimizerSpec::Kind::adamw);
}

TEST_CASE("plan validation ties multiplier zero to the freeze flag") {
  StagePlan p = desk_plan(StageKind::rep, 1, 1);
  CHECK(p.freeze_encoder);
  CHECK(p.optimizer.encoder_lr_multiplier == 0.0);
  CHECK(p.injection_mode == langdec::InjectionMode::multi_layer);
  p.freeze_encoder = false;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p.freeze_encoder = true;
  p.optimizer.encoder_lr_multiplier = 0.1;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("granularity round trips through names and specs") {
  CHECK(to_string(SegGranularity::C_L) == "C+L");
  CHECK(seg_granularity_from_string("F+L") == SegGranularity::F_L);
  CHECK_THROWS_AS(seg_granularity_from_string("bogus"), std::invalid_argument);
  auto spec = tiny_spec();
  CHECK(granularity_of(spec) == SegGranularity::C_L);
  spec.lesions_enabled = false;
  CHECK(granularity_of(spec) == SegGranularity::C);
  // A seg plan for the wrong flavour is rejected.
  auto data = tiny_data(2);
  StagePlan plan = desk_plan(StageKind::seg, 1, 1);
  plan.seg_granularity = SegGranularity::C;
  CHECK_THROWS_AS(run_stage(plan, data, tiny_preset(data.spec)), std::invalid_argument);
}

TEST_CASE("identical plan and data give byte-identical checkpoints") {
  namespace fs = std::filesystem;
  auto data = tiny_data(3);
  auto preset = tiny_preset(data.spec);
  StagePlan plan = desk_plan(StageKind::seg, 7, 4);
  auto a = run_stage(plan, data, preset);
  auto b = run_stage(plan, data, preset);
  const auto dir = fs::temp_directory_path() / "uvlm_pipe_test";
  fs::create_directories(dir);
  a.checkpoint.save((dir / "a.ckpt").string());
  b.checkpoint.save((dir / "b.ckpt").string());
  CHECK(file_bytes((dir / "a.ckpt").string()) == file_bytes((dir / "b.ckpt").string()));
  CHECK(a.losses == b.losses);
  // A different seed diverges.
  StagePlan other = plan;
  other.seed = 8;
  auto c = run_stage(other, data, preset);
  CHECK(a.losses != c.losses);
  fs::remove_all(dir);
}

TEST_CASE("fixed_batch replays the first batch and drives its loss down") {
  auto data = tiny_data(3);
  auto preset = tiny_preset(data.spec);
  StagePlan plan = desk_plan(StageKind::seg, 7, 220);
  plan.batch_size = 1;
  plan.fixed_batch = true;
  CHECK(plan.echo().find("fixed_batch=1") != std::string::npos);
  auto a = run_stage(plan, data, preset);
  auto b = run_stage(plan, data, preset);
  CHECK(a.losses == b.losses);
  // Repeating one batch must overfit far faster than it could generalise.
  CHECK(a.losses.back() < 0.5 * a.losses.front());
}

TEST_CASE("checkpoints round trip bit-exactly through the container format") {
  namespace fs = std::filesystem;
  auto data = tiny_data(2);
  auto preset = tiny_preset(data.spec);
  auto r = run_stage(desk_plan(StageKind::seg, 3, 2), data, preset);
  const auto path = (fs::temp_directory_path() / "uvlm_rt.ckpt").string();
  r.checkpoint.save(path);
  auto back = Checkpoint::load(path);
  CHECK(back.stage_tag == "stage1");
  REQUIRE(back.tensors.size() == r.checkpoint.tensors.size());
  for (std::size_t i = 0; i < back.tensors.size(); ++i) {
    CHECK(back.tensors[i].first == r.checkpoint.tensors[i].first);
    CHECK(back.tensors[i].second.shape == r.checkpoint.tensors[i].second.shape);
    CHECK(back.tensors[i].second.data == r.checkpoint.tensors[i].second.data);
  }
  fs::remove(path);
}

TEST_CASE("stage transfer copies the encoder and drops stage heads") {
  auto data = tiny_data(2);
  auto preset = tiny_preset(data.spec);
  auto r1 = run_stage(desk_plan(StageKind::seg, 3, 2), data, preset);
  // Stage-1 checkpoint holds seg decoder tensors.
  CHECK(r1.checkpoint.find("segdec.out.w") != nullptr);

  auto r2 = run_stage(desk_plan(StageKind::cls, 3, 2), data, preset, &r1.checkpoint);
  // Stage-2 checkpoint drops them and keeps the classification head.
  CHECK(r2.checkpoint.find("segdec.out.w") == nullptr);
  bool has_cls = false, has_enc = false;
  for (auto& [name, t] : r2.checkpoint.tensors) {
    has_cls |= name.rfind("clshead.", 0) == 0;
    has_enc |= name.rfind("encoder.", 0) == 0;
  }
  CHECK(has_cls);
  CHECK(has_enc);
}

TEST_CASE("transfer then immediate save keeps encoder tensors byte-identical") {
  auto data = tiny_data(2);
  auto preset = tiny_preset(data.spec);
  auto r1 = run_stage(desk_plan(StageKind::seg, 3, 2), data, preset);
  ParamStore store;
  encoder::Encoder enc(preset.enc);
  Rng rng(99);
  enc.init(store, rng);
  transfer_encoder(r1.checkpoint, store);
  for (auto& [name, t] : r1.checkpoint.tensors) {
    if (name.rfind("encoder.", 0) != 0) continue;
    CHECK(store.get(name)->value.data == t.data);
  }
}

TEST_CASE("transfer into a mismatched channel list names the bad tensor") {
  auto data = tiny_data(2);
  auto preset = tiny_preset(data.spec);
  auto r1 = run_stage(desk_plan(StageKind::seg, 3, 2), data, preset);
  auto wrong = preset.enc;
  wrong.channels = {3, 4, 4, 4};
  ParamStore store;
  encoder::Encoder enc(wrong);
  Rng rng(98);
  enc.init(store, rng);
  CHECK_THROWS_WITH_AS(transfer_encoder(r1.checkpoint, store), doctest::Contains("encoder.s1"),
                       std::runtime_error);
}

TEST_CASE("frozen encoder is bit-identical after stage-3 training") {
  auto data = tiny_data(3);
  auto preset = tiny_preset(data.spec);
  auto r1 = run_stage(desk_plan(StageKind::seg, 5, 2), data, preset);
  auto plan3 = desk_plan(StageKind::rep, 5, 3);
  auto r3 = run_stage(plan3, data, preset, &r1.checkpoint);
  for (auto& [name, t] : r1.checkpoint.tensors) {
    if (name.rfind("encoder.", 0) != 0) continue;
    const Tensor* after = r3.checkpoint.find(name);
    REQUIRE(after != nullptr);
    CHECK(after->data == t.data);
  }
  // Language-model tensors did move.
  bool lm_changed = false;
  auto fresh = run_stage(desk_plan(StageKind::rep, 5, 0), data, preset, &r1.checkpoint);
  for (auto& [name, t] : r3.checkpoint.tensors) {
    if (name.rfind("lm.", 0) != 0) continue;
    const Tensor* before = fresh.checkpoint.find(name);
    if (before && before->data != t.data) lm_changed = true;
  }
  CHECK(lm_changed);
}

TEST_CASE("unfrozen stage-3 with multiplier 0.1 moves encoder tensors") {
  auto data = tiny_data(3);
  auto preset = tiny_preset(data.spec);
  auto r1 = run_stage(desk_plan(StageKind::seg, 5, 2), data, preset);
  StagePlan plan3 = desk_plan(StageKind::rep, 5, 3);
  plan3.freeze_encoder = false;
  plan3.optimizer.encoder_lr_multiplier = 0.1;
  auto r3 = run_stage(plan3, data, preset, &r1.checkpoint);
  bool enc_changed = false;
  for (auto& [name, t] : r1.checkpoint.tensors) {
    if (name.rfind("encoder.", 0) != 0) continue;
    const Tensor* after = r3.checkpoint.find(name);
    if (after && after->data != t.data) enc_changed = true;
  }
  CHECK(enc_changed);
}

TEST_CASE("multiplier 0.1 scales the step exactly for equal gradients") {
  for (auto kind : {OptimizerSpec::Kind::sgd, OptimizerSpec::Kind::adamw}) {
    ParamStore store;
    store.add("encoder.x", Tensor::full({4}, 1.0));
    store.add("head.x", Tensor::full({4}, 1.0));
    // Rig identical gradients.
    for (auto& [name, p] : store.params) {
      p->ensure_grad();
      for (int i = 0; i < 4; ++i) p->grad[i] = 0.5 + i;
    }
    OptimizerSpec spec;
    spec.kind = kind;
    spec.base_lr = 0.01;
    spec.encoder_lr_multiplier = 0.1;
    Optimizer opt(spec);
    opt.step(store, [&](const std::string& n) {
      return n.rfind("encoder.", 0) == 0 ? spec.encoder_lr_multiplier : 1.0;
    });
    for (int i = 0; i < 4; ++i) {
      const double enc_step = 1.0 - store.get("encoder.x")->value[i];
      const double head_step = 1.0 - store.get("head.x")->value[i];
      CHECK(enc_step != 0.0);
      CHECK(enc_step == doctest::Approx(0.1 * head_step).epsilon(1e-12));
    }
  }
}

TEST_CASE("ablation rows run end to end deterministically and reject duplicates") {
  auto train = tiny_data(4);
  auto test = tiny_data(2);
  auto preset = tiny_preset(train.spec);
  std::vector<AblationRow> rows = {
      {"full", {StageKind::seg, StageKind::rep}, true, true, 0},
      {"no-sc", {StageKind::rep}, false, true, 0},
  };
  AblationBudget budget{2, 2, 2};
  auto a = run_ablation(rows, train, test, preset, 3, budget);
  auto b = run_ablation(rows, train, test, preset, 3, budget);
  REQUIRE(a.size() == 2);
  CHECK(a[0].label == "full");
  CHECK(a[0].f1 == b[0].f1);
  CHECK(a[1].b_mean == b[1].b_mean);
  rows.push_back({"full", {StageKind::rep}, true, true, 0});
  CHECK_THROWS_AS(run_ablation(rows, train, test, preset, 3, budget), std::invalid_argument);
}

TEST_CASE("model preset echo carries reference stage and decoder shape") {
  auto spec = tiny_spec();
  auto preset = desk_preset(spec);
  CHECK(preset.resolved_reference_stage() == 4);
  CHECK(preset.align_config().token_count() == (16 / 8) * (32 / 8) * (32 / 8));
  auto r3 = desk_preset(spec, 3);
  CHECK(r3.align_config().token_count() == 4 * 8 * 8);
  CHECK(r3.dec.visual_tokens == 4 * 8 * 8);
}
