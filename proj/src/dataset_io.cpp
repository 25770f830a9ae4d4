#include "uvlm/dataset_io.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace uvlm::synthvol {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

Dataset generate_dataset(std::uint64_t base_seed, const CaseSpec& spec, int count) {
  Dataset ds;
  ds.spec = spec;
  ds.base_seed = base_seed;
  ds.cases.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) ds.cases.push_back(generate_case(base_seed + static_cast<std::uint64_t>(i), spec));
  return ds;
}

namespace {

json spec_to_json(const CaseSpec& s) {
  json j;
  j["shape"] = {s.d, s.h, s.w};
  j["granularity"] = s.granularity == Granularity::fine ? "fine" : "coarse";
  j["lesions_enabled"] = s.lesions_enabled;
  j["noise_sigma"] = s.noise_sigma;
  j["background_level"] = s.background_level;
  j["divisibility"] = s.divisibility;
  j["organs"] = json::array();
  for (const auto& o : s.organs) {
    json jo;
    jo["region_lo"] = o.region_lo;
    jo["region_hi"] = o.region_hi;
    jo["semi_lo"] = o.semi_lo;
    jo["semi_hi"] = o.semi_hi;
    jo["intensity"] = {o.intensity_lo, o.intensity_hi};
    jo["shape"] = o.shape == OrganShape::box ? "box" : "ellipsoid";
    j["organs"].push_back(jo);
  }
  j["lesions"] = json::array();
  for (const auto& l : s.lesions) {
    json jl;
    jl["host_organ"] = l.host_organ;
    jl["radius"] = {l.radius_lo, l.radius_hi};
    jl["intensity"] = {l.intensity_lo, l.intensity_hi};
    jl["class_index"] = l.class_index;
    jl["probability"] = l.probability;
    j["lesions"].push_back(jl);
  }
  return j;
}

CaseSpec spec_from_json(const json& j) {
  CaseSpec s;
  s.d = j.at("shape")[0];
  s.h = j.at("shape")[1];
  s.w = j.at("shape")[2];
  s.granularity = j.at("granularity") == "fine" ? Granularity::fine : Granularity::coarse;
  s.lesions_enabled = j.at("lesions_enabled");
  s.noise_sigma = j.at("noise_sigma");
  s.background_level = j.at("background_level");
  s.divisibility = j.at("divisibility");
  for (const auto& jo : j.at("organs")) {
    OrganSpec o;
    for (int a = 0; a < 3; ++a) {
      o.region_lo[static_cast<std::size_t>(a)] = jo.at("region_lo")[static_cast<std::size_t>(a)];
      o.region_hi[static_cast<std::size_t>(a)] = jo.at("region_hi")[static_cast<std::size_t>(a)];
      o.semi_lo[static_cast<std::size_t>(a)] = jo.at("semi_lo")[static_cast<std::size_t>(a)];
      o.semi_hi[static_cast<std::size_t>(a)] = jo.at("semi_hi")[static_cast<std::size_t>(a)];
    }
    o.intensity_lo = jo.at("intensity")[0];
    o.intensity_hi = jo.at("intensity")[1];
    o.shape = jo.at("shape") == "box" ? OrganShape::box : OrganShape::ellipsoid;
    s.organs.push_back(o);
  }
  for (const auto& jl : j.at("lesions")) {
    LesionSpec l;
    l.host_organ = jl.at("host_organ");
    l.radius_lo = jl.at("radius")[0];
    l.radius_hi = jl.at("radius")[1];
    l.intensity_lo = jl.at("intensity")[0];
    l.intensity_hi = jl.at("intensity")[1];
    l.class_index = jl.at("class_index");
    l.probability = jl.at("probability");
    s.lesions.push_back(l);
  }
  return s;
}

void write_raw(const fs::path& p, const void* data, std::size_t bytes) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

void read_raw(const fs::path& p, void* data, std::size_t bytes) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
  if (!is) throw std::runtime_error("truncated file " + p.string());
}

}  // namespace

void write_dataset(const std::string& dir, const Dataset& ds) {
  fs::create_directories(dir);
  const Vocab vocab(ds.spec.num_classes());
  json manifest;
  manifest["format"] = "uvlm-dataset-v1";
  manifest["seed"] = ds.base_seed;
  manifest["count"] = ds.cases.size();
  manifest["shape"] = {ds.spec.d, ds.spec.h, ds.spec.w};
  manifest["spec_hash"] = ds.spec.hash();
  manifest["spec"] = spec_to_json(ds.spec);
  for (std::size_t i = 0; i < ds.cases.size(); ++i) {
    const auto& c = ds.cases[i];
    const fs::path cdir = fs::path(dir) / ("case_" + std::to_string(i));
    fs::create_directories(cdir);
    write_raw(cdir / "volume.raw", c.volume.data.data(), c.volume.data.size() * sizeof(float));
    write_raw(cdir / "mask.raw", c.mask.labels.data(), c.mask.labels.size());
    std::ofstream lt(cdir / "labels.txt");
    for (auto y : c.labels) lt << int(y) << "\n";
    std::ofstream rt(cdir / "report.txt");
    rt << vocab.detokenize(c.report) << "\n";
  }
  std::ofstream ms(fs::path(dir) / "manifest.json");
  ms << manifest.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
  std::ifstream ms(fs::path(dir) / "manifest.json");
  if (!ms) throw std::runtime_error("missing manifest.json in " + dir);
  json manifest = json::parse(ms);
  if (manifest.at("format") != "uvlm-dataset-v1")
    throw std::runtime_error("unsupported dataset format in " + dir);
  Dataset ds;
  ds.base_seed = manifest.at("seed");
  ds.spec = spec_from_json(manifest.at("spec"));
  const std::size_t count = manifest.at("count");
  const Vocab vocab(ds.spec.num_classes());
  const int D = ds.spec.d, H = ds.spec.h, W = ds.spec.w;
  const std::size_t voxels = static_cast<std::size_t>(D) * H * W;
  for (std::size_t i = 0; i < count; ++i) {
    const fs::path cdir = fs::path(dir) / ("case_" + std::to_string(i));
    Case c;
    c.volume = Volume{D, H, W, std::vector<float>(voxels)};
    c.mask = SegMask{D, H, W, std::vector<std::uint8_t>(voxels)};
    read_raw(cdir / "volume.raw", c.volume.data.data(), voxels * sizeof(float));
    read_raw(cdir / "mask.raw", c.mask.labels.data(), voxels);
    std::ifstream lt(cdir / "labels.txt");
    int v;
    while (lt >> v) c.labels.push_back(static_cast<std::uint8_t>(v));
    std::ifstream rt(cdir / "report.txt");
    std::string text((std::istreambuf_iterator<char>(rt)), std::istreambuf_iterator<char>());
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
    c.report = vocab.tokenize(text);
    ds.cases.push_back(std::move(c));
  }
  return ds;
}

}  // namespace uvlm::synthvol
