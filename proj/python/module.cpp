// Python bindings for the volumetric report-generation core: synthetic case
// generation, injection-mask/alignment mechanics, report metrics, and the
// staged training pipeline.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "uvlm/pipeline.hpp"

namespace py = pybind11;
using namespace uvlm;

namespace {

synthvol::CaseSpec make_spec(int d, int h, int w, int classes, const std::string& granularity) {
  auto g = pipeline::seg_granularity_from_string(granularity);
  auto spec = synthvol::make_default_spec(d, h, w, classes);
  spec.lesions_enabled = g != pipeline::SegGranularity::C;
  spec.granularity = g == pipeline::SegGranularity::F_L ? synthvol::Granularity::fine
                                                        : synthvol::Granularity::coarse;
  spec.validate();
  return spec;
}

py::dict case_to_dict(const synthvol::Case& c, const Vocab& vocab) {
  py::array_t<float> vol({c.volume.d, c.volume.h, c.volume.w});
  std::copy(c.volume.data.begin(), c.volume.data.end(), vol.mutable_data());
  py::array_t<std::uint8_t> mask({c.mask.d, c.mask.h, c.mask.w});
  std::copy(c.mask.labels.begin(), c.mask.labels.end(), mask.mutable_data());
  py::dict out;
  out["volume"] = vol;
  out["mask"] = mask;
  out["labels"] = c.labels;
  out["report_tokens"] = c.report;
  out["report_text"] = vocab.detokenize(c.report);
  return out;
}

}  // namespace

PYBIND11_MODULE(_uvlm, m) {
  m.doc() =
      "Volumetric report generation core: synthetic data, injection "
      "mechanics, metrics, and staged training.";

  // --- synthetic data --------------------------------------------------
  m.def(
      "generate_case",
      [](std::uint64_t seed, int d, int h, int w, int classes, const std::string& granularity) {
        auto spec = make_spec(d, h, w, classes, granularity);
        return case_to_dict(synthvol::generate_case(seed, spec), Vocab(classes));
      },
      py::arg("seed"), py::arg("d") = 32, py::arg("h") = 64, py::arg("w") = 64,
      py::arg("classes") = 3, py::arg("granularity") = "C+L",
      "Deterministic synthetic case: volume, segmentation mask, labels, report.");

  m.def(
      "generate_dataset_dir",
      [](const std::string& out_dir, int cases, std::uint64_t seed, int d, int h, int w,
         int classes, const std::string& granularity) {
        auto spec = make_spec(d, h, w, classes, granularity);
        synthvol::write_dataset(out_dir, synthvol::generate_dataset(seed, spec, cases));
        return spec.hash();
      },
      py::arg("out_dir"), py::arg("cases"), py::arg("seed") = 1, py::arg("d") = 32,
      py::arg("h") = 64, py::arg("w") = 64, py::arg("classes") = 3,
      py::arg("granularity") = "C+L",
      "Write a dataset directory (volume.raw/mask.raw/labels.txt/report.txt per "
      "case plus manifest.json); returns the spec hash.");

  m.def(
      "render_report_text",
      [](const std::vector<std::uint8_t>& labels) { return synthvol::render_report_text(labels); },
      py::arg("labels"), "Template report text for a binary label vector.");

  m.def(
      "extract_labels_text",
      [](const std::string& text, int classes) {
        return synthvol::extract_labels_text(text, classes);
      },
      py::arg("text"), py::arg("classes"),
      "Binary labels parsed back out of report text (negation-aware).");

  // --- vocabulary -------------------------------------------------------
  m.def(
      "tokenize", [](const std::string& text, int classes) { return Vocab(classes).tokenize(text); },
      py::arg("text"), py::arg("classes") = 3);
  m.def(
      "detokenize",
      [](const Report& tokens, int classes) { return Vocab(classes).detokenize(tokens); },
      py::arg("tokens"), py::arg("classes") = 3);

  // --- injection mechanics ----------------------------------------------
  m.def("stage_for_layer", &injection::stage_for_layer, py::arg("layer"), py::arg("n_stages"),
        py::arg("n_layers"),
        "Encoder stage injected at a decoder layer (deepest stage at layer 1); "
        "0 when the layer receives no injection.");

  m.def(
      "build_hybrid_mask",
      [](int k, int t) {
        auto mask = injection::build_hybrid_mask(k, t);
        py::array_t<bool> out({k + t, k + t});
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(mask.allow.size()); ++i)
          out.mutable_data()[i] = mask.allow[i] != 0;
        return out;
      },
      py::arg("k"), py::arg("t"),
      "Attention mask over K visual + T text positions: visual rows are "
      "bidirectional over visual columns, text rows see all visual columns "
      "and text causally.");

  // --- metrics ------------------------------------------------------------
  m.def("bleu", &evalkit::bleu, py::arg("hyps"), py::arg("refs"), py::arg("n"),
        "Corpus BLEU-n over token-id reports (specials excluded, no smoothing).");
  m.def("bleu_mean", &evalkit::bleu_mean, py::arg("hyps"), py::arg("refs"));
  m.def(
      "macro_prf",
      [](const std::vector<synthvol::MultiLabel>& preds,
         const std::vector<synthvol::MultiLabel>& gts) {
        auto r = evalkit::macro_prf(preds, gts);
        return py::make_tuple(r.f1, r.precision, r.recall);
      },
      py::arg("preds"), py::arg("gts"), "Macro-averaged (f1, precision, recall).");

  // --- staged training ------------------------------------------------------
  m.def(
      "train_stage",
      [](int stage, const std::string& data_dir, const std::string& ckpt_out, int steps,
         std::uint64_t seed, const std::string& init_ckpt, const std::string& injection_mode) {
        using pipeline::StageKind;
        if (stage < 1 || stage > 3) throw std::invalid_argument("stage must be 1, 2, or 3");
        const StageKind kind = stage == 1 ? StageKind::seg
                              : stage == 2 ? StageKind::cls
                                           : StageKind::rep;
        auto data = synthvol::read_dataset(data_dir);
        auto preset = pipeline::desk_preset(data.spec);
        auto plan = pipeline::desk_plan(kind, seed, steps);
        plan.seg_granularity = pipeline::granularity_of(data.spec);
        if (!injection_mode.empty())
          plan.injection_mode = langdec::injection_mode_from_string(injection_mode);
        std::optional<Checkpoint> init;
        if (!init_ckpt.empty()) init = Checkpoint::load(init_ckpt);
        auto result = pipeline::run_stage(plan, data, preset, init ? &*init : nullptr);
        result.checkpoint.save(ckpt_out);
        return result.losses;
      },
      py::arg("stage"), py::arg("data_dir"), py::arg("ckpt_out"), py::arg("steps") = 2000,
      py::arg("seed") = 1, py::arg("init_ckpt") = "", py::arg("injection_mode") = "",
      "Train one curriculum stage with the desk presets; returns per-step "
      "losses and writes the checkpoint.");

  m.def(
      "eval_checkpoint",
      [](const std::string& ckpt_path, const std::string& data_dir) {
        auto ckpt = Checkpoint::load(ckpt_path);
        auto data = synthvol::read_dataset(data_dir);
        auto preset = pipeline::desk_preset(data.spec);
        py::dict out;
        out["stage"] = ckpt.stage_tag;
        if (ckpt.stage_tag == "stage1") {
          out["dice"] = pipeline::evaluate_seg_dice(ckpt, data, preset);
        } else if (ckpt.stage_tag == "stage2") {
          auto prf = pipeline::evaluate_cls(ckpt, data, preset);
          out["f1"] = prf.f1;
          out["precision"] = prf.precision;
          out["recall"] = prf.recall;
        } else {
          auto rm = pipeline::evaluate_rep(ckpt, data, preset,
                                           langdec::InjectionMode::multi_layer);
          out["f1"] = rm.f1;
          out["b_mean"] = rm.b_mean;
        }
        return out;
      },
      py::arg("ckpt_path"), py::arg("data_dir"),
      "Stage-appropriate test metrics for a saved checkpoint.");
}
