#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "uvlm/dataset_io.hpp"
#include "uvlm/synthvol.hpp"

using namespace uvlm;
using namespace uvlm::synthvol;

namespace {

CaseSpec small_spec(Granularity g = Granularity::coarse, bool lesions = true,
                    double prob = 0.5) {
  return make_default_spec(16, 32, 32, 3, 3, g, lesions, prob);
}

}  // namespace

TEST_CASE("identical seed and spec give byte-identical cases") {
  auto spec = small_spec();
  auto a = generate_case(7, spec);
  auto b = generate_case(7, spec);
  CHECK(a.volume.data == b.volume.data);
  CHECK(a.mask.labels == b.mask.labels);
  CHECK(a.labels == b.labels);
  CHECK(a.report == b.report);
  auto c = generate_case(8, spec);
  CHECK(a.volume.data != c.volume.data);
}

TEST_CASE("zero lesion probability forces the all-negative report") {
  auto spec = small_spec(Granularity::coarse, true, 0.0);
  auto c = generate_case(7, spec);
  CHECK(std::count(c.labels.begin(), c.labels.end(), 1) == 0);
  const std::string text = render_report_text(c.labels);
  CHECK(text.find("present") == std::string::npos);
  for (int k = 0; k < 3; ++k)
    CHECK(text.find("no lesion-" + std::to_string(k) + " is seen .") != std::string::npos);
}

TEST_CASE("forced lesion appears in both mask and labels") {
  auto spec = make_default_spec(16, 32, 32, 1, 2, Granularity::coarse, true, 1.0);
  auto c = generate_case(3, spec);
  REQUIRE(c.labels.size() == 1);
  CHECK(c.labels[0] == 1);
  std::set<int> values(c.mask.labels.begin(), c.mask.labels.end());
  CHECK(values.count(0) == 1);
  const int lesion = spec.lesion_label(0);
  CHECK(values.count(lesion) == 1);
  long long lesion_voxels = std::count(c.mask.labels.begin(), c.mask.labels.end(),
                                       static_cast<std::uint8_t>(lesion));
  CHECK(lesion_voxels > 0);
}

TEST_CASE("volume values stay in [0,1] and mask labels below the class count") {
  auto spec = small_spec(Granularity::fine);
  for (std::uint64_t seed : {1ull, 9ull, 55ull}) {
    auto c = generate_case(seed, spec);
    for (float v : c.volume.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    for (auto l : c.mask.labels) CHECK(l < spec.seg_classes());
  }
}

TEST_CASE("multi-label entries exactly mirror lesion labels in the mask") {
  auto spec = small_spec();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto c = generate_case(seed, spec);
    for (int k = 0; k < spec.num_classes(); ++k) {
      const std::uint8_t label = static_cast<std::uint8_t>(spec.lesion_label(k));
      const bool in_mask =
          std::find(c.mask.labels.begin(), c.mask.labels.end(), label) != c.mask.labels.end();
      CHECK(static_cast<bool>(c.labels[static_cast<std::size_t>(k)]) == in_mask);
    }
  }
}

TEST_CASE("report/label round trip is exact for every label vector") {
  for (int c_cls : {1, 3, 5, 12}) {
    for (unsigned code = 0; code < (1u << c_cls); ++code) {
      MultiLabel y(static_cast<std::size_t>(c_cls));
      for (int k = 0; k < c_cls; ++k) y[static_cast<std::size_t>(k)] = (code >> k) & 1u;
      CHECK(extract_labels_text(render_report_text(y), c_cls) == y);
    }
  }
}

TEST_CASE("report template and extraction hand cases") {
  CHECK(render_report_text({0, 0, 0}) ==
        "no lesion-0 is seen . no lesion-1 is seen . no lesion-2 is seen .");
  CHECK(render_report_text({1, 0}) == "lesion-0 is present . no lesion-1 is seen .");
  CHECK(extract_labels_text("", 3) == MultiLabel{0, 0, 0});
  CHECK(extract_labels_text("lesion-0 is present . lesion-0 is present .", 2) ==
        MultiLabel{1, 0});
  // A negation wins over a stray positive mention of the same class.
  CHECK(extract_labels_text("no lesion-1 is seen . lesion-1 is present .", 2) ==
        MultiLabel{0, 0});
}

TEST_CASE("token-level extraction agrees with the text path") {
  Vocab vocab(3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto c = generate_case(seed, small_spec());
    CHECK(extract_labels(c.report, vocab, 3) == c.labels);
    CHECK(vocab.tokenize(render_report_text(c.labels)) == c.report);
  }
}

TEST_CASE("fine sub-labels merge back to the coarse mask exactly") {
  auto coarse_spec = small_spec(Granularity::coarse);
  auto fine_spec = small_spec(Granularity::fine);
  REQUIRE(fine_spec.num_organ_labels() == 2 * coarse_spec.num_organ_labels());
  for (std::uint64_t seed : {2ull, 11ull, 31ull}) {
    auto c = generate_case(seed, coarse_spec);
    auto f = generate_case(seed, fine_spec);
    CHECK(c.volume.data == f.volume.data);  // geometry ignores granularity
    REQUIRE(c.mask.labels.size() == f.mask.labels.size());
    for (std::size_t i = 0; i < f.mask.labels.size(); ++i)
      CHECK(static_cast<int>(c.mask.labels[i]) == fine_spec.coarse_parent(f.mask.labels[i]));
  }
}

TEST_CASE("patch sampling equals direct slicing at the drawn offset") {
  auto spec = small_spec();
  auto c = generate_case(1, spec);

  // Identity crop.
  auto [fv, fm] = sample_patch(c.volume, c.mask, 16, 32, 32, 5);
  CHECK(fv.data == c.volume.data);
  CHECK(fm.labels == c.mask.labels);

  // Proper crop: every voxel must appear somewhere in the source at a
  // single consistent offset.
  auto [pv, pm] = sample_patch(c.volume, c.mask, 8, 16, 16, 5);
  REQUIRE(pv.d == 8);
  bool found = false;
  for (int oz = 0; oz <= 8 && !found; ++oz)
    for (int oy = 0; oy <= 16 && !found; ++oy)
      for (int ox = 0; ox <= 16 && !found; ++ox) {
        bool match = true;
        for (int z = 0; z < 8 && match; ++z)
          for (int y = 0; y < 16 && match; ++y)
            for (int x = 0; x < 16 && match; ++x)
              match = pv.at(z, y, x) == c.volume.at(oz + z, oy + y, ox + x) &&
                      pm.at(z, y, x) == c.mask.at(oz + z, oy + y, ox + x);
        found = match;
      }
  CHECK(found);
  // Same seed, same crop.
  auto [pv2, pm2] = sample_patch(c.volume, c.mask, 8, 16, 16, 5);
  CHECK(pv2.data == pv.data);
  CHECK(pm2.labels == pm.labels);
}

TEST_CASE("spec validation rejects inconsistent class indices") {
  auto spec = small_spec();
  spec.lesions[1].class_index = 5;  // gap in [0, C_cls)
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("dataset export and re-import round trips") {
  namespace fs = std::filesystem;
  auto spec = small_spec();
  auto ds = generate_dataset(100, spec, 4);
  REQUIRE(ds.cases.size() == 4);
  const auto dir = fs::temp_directory_path() / "uvlm_ds_test";
  fs::remove_all(dir);
  write_dataset(dir.string(), ds);
  auto back = read_dataset(dir.string());
  REQUIRE(back.cases.size() == 4);
  CHECK(back.spec.hash() == spec.hash());
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.cases[i].volume.data == ds.cases[i].volume.data);
    CHECK(back.cases[i].mask.labels == ds.cases[i].mask.labels);
    CHECK(back.cases[i].labels == ds.cases[i].labels);
    CHECK(back.cases[i].report == ds.cases[i].report);
  }
  // Writing again produces identical bytes (idempotent export).
  std::error_code ec;
  const auto manifest = dir / "manifest.json";
  const auto size1 = fs::file_size(manifest, ec);
  write_dataset(dir.string(), ds);
  CHECK(fs::file_size(manifest, ec) == size1);
  fs::remove_all(dir);
}
