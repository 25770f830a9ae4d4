// Command-line entry point: dataset generation, staged training, evaluation,
// ablation matrices, and SVG plots for the volumetric report-generation model.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "uvlm/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace uvlm;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::array<int, 3> parse_shape(const std::string& s) {
  // "WxHxD" — e.g. 64x64x32.
  int w = 0, h = 0, d = 0;
  char x1 = 0, x2 = 0;
  std::istringstream in(s);
  if (!(in >> w >> x1 >> h >> x2 >> d) || x1 != 'x' || x2 != 'x' || w <= 0 || h <= 0 || d <= 0)
    throw UsageError("--shape must look like 64x64x32 (WxHxD), got '" + s + "'");
  return {d, h, w};
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

void write_config_echo(const fs::path& out_dir, const std::string& echo) {
  write_text(out_dir / "config.echo", echo + "\n");
}

synthvol::CaseSpec spec_for(const std::array<int, 3>& dhw, const std::string& granularity,
                            int classes) {
  using pipeline::SegGranularity;
  const SegGranularity g = pipeline::seg_granularity_from_string(granularity);
  auto spec = synthvol::make_default_spec(dhw[0], dhw[1], dhw[2], classes);
  spec.lesions_enabled = g != SegGranularity::C;
  spec.granularity = g == SegGranularity::F_L ? synthvol::Granularity::fine
                                              : synthvol::Granularity::coarse;
  return spec;
}

// --- datagen ---------------------------------------------------------------

struct DatagenArgs {
  int cases = 200;
  std::string shape = "64x64x32";
  std::string granularity = "C+L";
  int classes = 3;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_datagen(const DatagenArgs& a) {
  auto spec = spec_for(parse_shape(a.shape), a.granularity, a.classes);
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  auto ds = synthvol::generate_dataset(a.seed, spec, a.cases);
  synthvol::write_dataset(a.out, ds);
  write_config_echo(a.out, "datagen cases=" + std::to_string(a.cases) + " shape=" + a.shape +
                               " granularity=" + a.granularity +
                               " classes=" + std::to_string(a.classes) +
                               " seed=" + std::to_string(a.seed));
  std::cout << "wrote " << a.cases << " cases to " << a.out << "\n";
  std::cout << "spec_hash=" << spec.hash() << "\n";
  return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  int stage = 1;
  std::string init;
  bool freeze = false;
  bool no_freeze = false;
  std::string injection;  // multi | input | none
  std::string vt;         // 384-preset | 3072-preset
  std::string granularity = "C+L";
  int steps = 2000;
  int batch = 2;
  std::uint64_t seed = 1;
  double lr = 0.0;  // 0 = preset default
  std::string data;
  std::string out;
};

langdec::InjectionMode injection_from_cli(const std::string& s) {
  if (s == "multi") return langdec::InjectionMode::multi_layer;
  if (s == "input") return langdec::InjectionMode::input_only;
  if (s == "none") return langdec::InjectionMode::none;
  throw UsageError("--injection must be multi, input, or none; got '" + s + "'");
}

int reference_stage_from_vt(const std::string& vt, int n_stages) {
  if (vt.empty() || vt == "384-preset") return n_stages;      // r = N
  if (vt == "3072-preset") return n_stages - 1;               // r = N-1
  throw UsageError("--vt must be 384-preset or 3072-preset; got '" + vt + "'");
}

void write_metrics_csv(const fs::path& path, const std::vector<double>& losses) {
  std::ostringstream csv;
  csv << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) csv << (i + 1) << "," << losses[i] << "\n";
  write_text(path, csv.str());
}

int cmd_train(const TrainArgs& a) {
  using pipeline::StageKind;
  if (a.stage < 1 || a.stage > 3) throw UsageError("--stage must be 1, 2, or 3");
  const StageKind kind = a.stage == 1 ? StageKind::seg
                        : a.stage == 2 ? StageKind::cls
                                       : StageKind::rep;
  if (a.stage > 1 && a.init.empty())
    throw UsageError("stages 2 and 3 require --init with the previous stage checkpoint");
  if (!a.init.empty() && !fs::exists(a.init)) throw UsageError("--init not found: " + a.init);

  auto data = synthvol::read_dataset(a.data);
  auto preset = pipeline::desk_preset(data.spec);
  preset.reference_stage = reference_stage_from_vt(a.vt, preset.enc.n_stages);
  preset.dec.visual_tokens = preset.align_config().token_count();

  pipeline::StagePlan plan;
  plan.stage = kind;
  plan.seg_granularity = pipeline::granularity_of(data.spec);
  plan.steps = a.steps;
  plan.batch_size = a.batch;
  plan.seed = a.seed;
  // Reference optimizer settings unless overridden by --lr.
  if (kind == StageKind::seg) {
    plan.optimizer = pipeline::reference_seg_optimizer();
  } else if (kind == StageKind::cls) {
    plan.optimizer = pipeline::reference_adamw_optimizer(0.1);
  } else {
    // Stage-3 defaults: frozen encoder, multi-layer injection.
    plan.freeze_encoder = true;
    plan.optimizer = pipeline::reference_adamw_optimizer(0.0);
  }
  if (a.lr > 0.0) plan.optimizer.base_lr = a.lr;
  if (a.freeze || a.no_freeze) {
    plan.freeze_encoder = a.freeze && !a.no_freeze;
    plan.optimizer.encoder_lr_multiplier = plan.freeze_encoder ? 0.0 : 0.1;
  }
  if (!a.injection.empty()) plan.injection_mode = injection_from_cli(a.injection);
  try {
    plan.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  std::optional<Checkpoint> init;
  if (!a.init.empty()) init = Checkpoint::load(a.init);

  std::cout << "optimizer: " << plan.optimizer.describe() << "\n";
  auto result = pipeline::run_stage(plan, data, preset, init ? &*init : nullptr);

  fs::create_directories(a.out);
  write_config_echo(a.out, preset.echo() + "\n" + plan.echo());
  write_metrics_csv(fs::path(a.out) / "metrics.csv", result.losses);
  result.checkpoint.save((fs::path(a.out) / "ckpt_final").string());
  std::cout << "final loss: " << (result.losses.empty() ? 0.0 : result.losses.back()) << "\n";
  std::cout << "wrote " << a.out << "/ckpt_final\n";
  return 0;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string injection = "multi";
};

int cmd_eval(const EvalArgs& a) {
  if (!fs::exists(a.ckpt)) throw UsageError("--ckpt not found: " + a.ckpt);
  auto ckpt = Checkpoint::load(a.ckpt);
  auto data = synthvol::read_dataset(a.data);
  auto preset = pipeline::desk_preset(data.spec);

  std::ostringstream csv;
  if (ckpt.stage_tag == "stage1") {
    const double dice = pipeline::evaluate_seg_dice(ckpt, data, preset);
    csv << "metric,value\nmean_foreground_dice," << dice << "\n";
  } else if (ckpt.stage_tag == "stage2") {
    auto prf = pipeline::evaluate_cls(ckpt, data, preset);
    csv << "metric,value\nmacro_f1," << prf.f1 << "\nmacro_precision," << prf.precision
        << "\nmacro_recall," << prf.recall << "\n";
  } else if (ckpt.stage_tag == "stage3") {
    auto m = pipeline::evaluate_rep(ckpt, data, preset, injection_from_cli(a.injection));
    csv << evalkit::ReportMetrics::csv_header() << "\n" << m.csv_row("eval") << "\n";
  } else {
    throw UsageError("checkpoint has no recognised stage tag: '" + ckpt.stage_tag + "'");
  }
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "metrics.csv", csv.str());
  write_config_echo(a.out, "eval ckpt=" + a.ckpt + " stage=" + ckpt.stage_tag);
  std::cout << csv.str();
  return 0;
}

// --- ablate ----------------------------------------------------------------

struct AblateArgs {
  std::string matrix;
  std::string data;
  std::string test;
  std::string out;
  std::uint64_t seed = 1;
  int seg_steps = 1200;
  int cls_steps = 800;
  int rep_steps = 2000;
};

pipeline::StageKind stage_kind_from_name(const std::string& s) {
  if (s == "seg") return pipeline::StageKind::seg;
  if (s == "cls") return pipeline::StageKind::cls;
  if (s == "rep") return pipeline::StageKind::rep;
  throw UsageError("unknown curriculum stage '" + s + "' (want seg/cls/rep)");
}

int cmd_ablate(const AblateArgs& a) {
  if (!fs::exists(a.matrix)) throw UsageError("--matrix not found: " + a.matrix);
  std::ifstream mf(a.matrix);
  json m;
  try {
    mf >> m;
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad --matrix JSON: ") + e.what());
  }
  std::vector<pipeline::AblationRow> rows;
  for (const auto& jr : m.at("rows")) {
    pipeline::AblationRow r;
    r.label = jr.at("label").get<std::string>();
    for (const auto& st : jr.at("curriculum"))
      r.curriculum.push_back(stage_kind_from_name(st.get<std::string>()));
    r.skip_connections = jr.value("skip_connections", true);
    r.freeze = jr.value("freeze", true);
    r.reference_stage = jr.value("reference_stage", 0);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw UsageError("--matrix has no rows");

  auto train = synthvol::read_dataset(a.data);
  auto test = synthvol::read_dataset(a.test);
  auto preset = pipeline::desk_preset(train.spec);
  pipeline::AblationBudget budget{a.seg_steps, a.cls_steps, a.rep_steps};
  std::vector<pipeline::AblationResult> results;
  try {
    results = pipeline::run_ablation(rows, train, test, preset, a.seed, budget);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  std::ostringstream csv;
  csv << "label,f1,b_mean\n";
  for (const auto& r : results) csv << r.label << "," << r.f1 << "," << r.b_mean << "\n";
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "table.csv", csv.str());
  write_config_echo(a.out, "ablate matrix=" + a.matrix + " seed=" + std::to_string(a.seed) +
                               " budget=" + std::to_string(a.seg_steps) + "/" +
                               std::to_string(a.cls_steps) + "/" + std::to_string(a.rep_steps));
  std::cout << csv.str();
  return 0;
}

// --- plot ------------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<double> values;
};

std::vector<Series> read_csv_columns(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw UsageError("empty csv: " + path.string());
  std::vector<Series> cols;
  {
    std::istringstream hdr(line);
    std::string cell;
    while (std::getline(hdr, cell, ',')) cols.push_back({cell, {}});
  }
  while (std::getline(f, line)) {
    std::istringstream row(line);
    std::string cell;
    std::size_t i = 0;
    while (std::getline(row, cell, ',') && i < cols.size()) {
      try {
        cols[i].values.push_back(std::stod(cell));
      } catch (...) {
        cols[i].values.push_back(0.0);  // non-numeric label column
      }
      ++i;
    }
  }
  return cols;
}

std::string render_svg_line(const std::string& title, const std::vector<double>& ys) {
  const int w = 640, h = 360, ml = 60, mr = 20, mt = 30, mb = 40;
  double lo = ys.empty() ? 0.0 : ys[0], hi = lo;
  for (double y : ys) {
    lo = std::min(lo, y);
    hi = std::max(hi, y);
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n"
    << "<rect width='100%' height='100%' fill='white'/>\n"
    << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-family='sans-serif'>" << title
    << "</text>\n"
    << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
    << "' stroke='black'/>\n"
    << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
    << "' stroke='black'/>\n"
    << "<text x='10' y='" << mt + 5 << "' font-family='sans-serif' font-size='11'>" << hi
    << "</text>\n"
    << "<text x='10' y='" << h - mb << "' font-family='sans-serif' font-size='11'>" << lo
    << "</text>\n<polyline fill='none' stroke='steelblue' stroke-width='1.5' points='";
  const std::size_t n = std::max<std::size_t>(ys.size(), 1);
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const double x = ml + (w - ml - mr) * (n == 1 ? 0.5 : double(i) / double(n - 1));
    const double y = (h - mb) - (h - mt - mb) * ((ys[i] - lo) / (hi - lo));
    s << x << "," << y << " ";
  }
  s << "'/>\n</svg>\n";
  return s.str();
}

struct PlotArgs {
  std::string run;
  std::string out;
};

int cmd_plot(const PlotArgs& a) {
  int written = 0;
  fs::create_directories(a.out);
  for (const char* name : {"metrics.csv", "table.csv"}) {
    const fs::path csv = fs::path(a.run) / name;
    if (!fs::exists(csv)) continue;
    auto cols = read_csv_columns(csv);
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i == 0 && (cols[i].name == "step" || cols[i].name == "label" || cols[i].name == "metric"))
        continue;  // index / label column, not a metric series
      if (cols[i].values.empty()) continue;
      const std::string stem = std::string(name).substr(0, std::string(name).find('.'));
      const fs::path svg = fs::path(a.out) / (stem + "_" + cols[i].name + ".svg");
      write_text(svg, render_svg_line(cols[i].name, cols[i].values));
      std::cout << "wrote " << svg.string() << "\n";
      ++written;
    }
  }
  if (written == 0) throw UsageError("no metrics.csv or table.csv found under " + a.run);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Volumetric report generation: synthetic dataset tools, progressive "
      "seg->cls->report training of a shared 3D encoder with a small causal "
      "text decoder, evaluation, and ablation matrices.\n"
      "Built-in presets: stage-1 SGD lr=0.01 momentum=0.9; stages 2-3 AdamW "
      "lr=2e-5 (encoder multiplier 0.1, or 0 when frozen); visual-token "
      "presets 384-preset (reference grid at the deepest stage) and "
      "3072-preset (one stage shallower)."};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read defaults from an INI/TOML file (flags win)");

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "Generate a deterministic synthetic dataset");
  datagen->add_option("--cases", dg.cases, "Number of cases")->check(CLI::PositiveNumber);
  datagen->add_option("--shape", dg.shape, "Volume shape WxHxD, e.g. 64x64x32");
  datagen->add_option("--granularity", dg.granularity, "C, C+L, or F+L");
  datagen->add_option("--classes", dg.classes, "Lesion class count")->check(CLI::PositiveNumber);
  datagen->add_option("--seed", dg.seed, "Base seed");
  datagen->add_option("--out", dg.out, "Output directory")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train one curriculum stage");
  train->add_option("--stage", tr.stage, "1=segmentation, 2=classification, 3=report")->required();
  train->add_option("--init", tr.init, "Checkpoint to seed the shared encoder from");
  train->add_flag("--freeze", tr.freeze, "Freeze the encoder (stage-3 default)");
  train->add_flag("--no-freeze", tr.no_freeze, "Train the encoder at multiplier 0.1");
  train->add_option("--injection", tr.injection, "multi (default for stage 3), input, none");
  train->add_option("--vt", tr.vt, "Visual-token preset: 384-preset or 3072-preset");
  train->add_option("--steps", tr.steps, "Optimizer steps");
  train->add_option("--batch", tr.batch, "Batch size");
  train->add_option("--seed", tr.seed, "Run seed");
  train->add_option("--lr", tr.lr, "Override the preset learning rate");
  train->add_option("--data", tr.data, "Dataset directory")->required();
  train->add_option("--out", tr.out, "Run directory")->required();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  eval->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  eval->add_option("--data", ev.data, "Dataset directory")->required();
  eval->add_option("--out", ev.out, "Output directory")->required();
  eval->add_option("--injection", ev.injection, "Injection mode for stage-3 checkpoints");

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "Run a curriculum/injection ablation matrix");
  ablate->add_option("--matrix", ab.matrix, "JSON matrix file")->required();
  ablate->add_option("--data", ab.data, "Training dataset directory")->required();
  ablate->add_option("--test", ab.test, "Test dataset directory")->required();
  ablate->add_option("--out", ab.out, "Output directory")->required();
  ablate->add_option("--seed", ab.seed, "Seed applied to every row");
  ablate->add_option("--seg-steps", ab.seg_steps, "Stage-1 budget per row");
  ablate->add_option("--cls-steps", ab.cls_steps, "Stage-2 budget per row");
  ablate->add_option("--rep-steps", ab.rep_steps, "Stage-3 budget per row");

  PlotArgs pl;
  auto* plot = app.add_subcommand("plot", "Render SVG charts from a finished run directory");
  plot->add_option("--run", pl.run, "Run directory with metrics.csv / table.csv")->required();
  plot->add_option("--out", pl.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // CLI11's own exit codes vary; map all usage problems to 2, --help to 0.
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*datagen) return cmd_datagen(dg);
    if (*train) return cmd_train(tr);
    if (*eval) return cmd_eval(ev);
    if (*ablate) return cmd_ablate(ab);
    if (*plot) return cmd_plot(pl);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
