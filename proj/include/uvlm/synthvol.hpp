#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "uvlm/rng.hpp"
#include "uvlm/vocab.hpp"

namespace uvlm::synthvol {

struct Volume {
  int d = 0, h = 0, w = 0;
  std::vector<float> data;  // [0,1], C-order (D,H,W)

  std::int64_t numel() const { return static_cast<std::int64_t>(d) * h * w; }
  float at(int z, int y, int x) const {
    return data[(static_cast<std::int64_t>(z) * h + y) * w + x];
  }
};

struct SegMask {
  int d = 0, h = 0, w = 0;
  std::vector<std::uint8_t> labels;  // values < c_seg, 0 = background

  std::int64_t numel() const { return static_cast<std::int64_t>(d) * h * w; }
  std::uint8_t at(int z, int y, int x) const {
    return labels[(static_cast<std::int64_t>(z) * h + y) * w + x];
  }
};

using MultiLabel = std::vector<std::uint8_t>;  // binary, length c_cls

enum class OrganShape { ellipsoid, box };

struct OrganSpec {
  // Placement region for the organ centre, normalized [0,1] per axis.
  std::array<double, 3> region_lo{}, region_hi{};
  // Semi-axis range, normalized fraction of the grid extent per axis.
  std::array<double, 3> semi_lo{}, semi_hi{};
  double intensity_lo = 0.4, intensity_hi = 0.6;
  OrganShape shape = OrganShape::ellipsoid;
};

struct LesionSpec {
  int host_organ = 0;
  double radius_lo = 2.5, radius_hi = 4.5;  // voxels
  double intensity_lo = 0.8, intensity_hi = 1.0;
  int class_index = 0;
  double probability = 0.5;
};

enum class Granularity { coarse, fine };

struct CaseSpec {
  int d = 0, h = 0, w = 0;
  std::vector<OrganSpec> organs;
  std::vector<LesionSpec> lesions;
  Granularity granularity = Granularity::coarse;
  bool lesions_enabled = true;
  double noise_sigma = 0.05;
  double background_level = 0.05;
  int divisibility = 8;  // 2^(N-1) of the target encoder

  int num_classes() const;        // C_cls (validated dense in [0, C_cls))
  int num_organ_labels() const;   // organ labels under the current granularity
  int seg_classes() const;        // C_seg including background (and lesions if enabled)
  // Label layout: 0 background; organs next; lesion class k maps to
  // num_organ_labels()+1+k when lesions are enabled.
  int organ_label(int organ, int half) const;  // half in {0,1}, ignored when coarse
  int lesion_label(int class_index) const;
  // Maps a label under `fine` granularity to its coarse parent label.
  int coarse_parent(int fine_label) const;

  void validate() const;          // throws std::invalid_argument
  std::uint64_t hash() const;     // deterministic spec hash for manifests
};

// Standard desk spec: `organ_count` separated ellipsoids, one lesion class
// per class hosted on organ (k % organ_count).
CaseSpec make_default_spec(int d, int h, int w, int num_classes = 3, int organ_count = 3,
                           Granularity g = Granularity::coarse, bool lesions = true,
                           double lesion_probability = 0.5);

struct Case {
  Volume volume;
  SegMask mask;
  MultiLabel labels;
  Report report;
};

// Deterministic: identical (seed, spec) gives bit-identical outputs. Organ
// and lesion geometry draws never consult the granularity flag, so coarse
// and fine runs of the same seed share geometry exactly.
Case generate_case(std::uint64_t seed, const CaseSpec& spec);

std::string render_report_text(const MultiLabel& y);
Report render_report(const MultiLabel& y, const Vocab& vocab);

// y[k]=1 iff the token pattern "lesion-k is present" occurs and
// "no lesion-k" does not. Unknown/absent classes default to 0.
MultiLabel extract_labels_text(const std::string& text, int num_classes);
MultiLabel extract_labels(const Report& r, const Vocab& vocab, int num_classes);

// Random crop with the same offset applied to volume and mask.
std::pair<Volume, SegMask> sample_patch(const Volume& v, const SegMask& m, int pd, int ph, int pw,
                                        std::uint64_t seed);

// Random crop constrained to contain the given voxel (uniform over all such
// window offsets). Used for foreground oversampling of small structures.
std::pair<Volume, SegMask> sample_patch_containing(const Volume& v, const SegMask& m, int pd,
                                                   int ph, int pw, int z, int y, int x,
                                                   std::uint64_t seed);

}  // namespace uvlm::synthvol
