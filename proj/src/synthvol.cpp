#include "uvlm/synthvol.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace uvlm::synthvol {

namespace {

constexpr double kFitMargin = 0.5;  // voxels between a lesion surface and its host surface

std::uint64_t fold(std::uint64_t h, std::uint64_t v) { return Rng::mix64(h ^ (v + Rng::kGamma)); }
std::uint64_t fold(std::uint64_t h, double v) { return fold(h, std::bit_cast<std::uint64_t>(v)); }

struct PlacedOrgan {
  std::array<double, 3> center;  // voxel coords, axis order (z, y, x)
  std::array<double, 3> semi;
  double intensity;
  OrganShape shape;
  int longest_axis;
};

}  // namespace

int CaseSpec::num_classes() const {
  int mx = -1;
  for (const auto& l : lesions) mx = std::max(mx, l.class_index);
  return mx + 1;
}

int CaseSpec::num_organ_labels() const {
  return static_cast<int>(organs.size()) * (granularity == Granularity::fine ? 2 : 1);
}

int CaseSpec::seg_classes() const {
  return 1 + num_organ_labels() + (lesions_enabled ? num_classes() : 0);
}

int CaseSpec::organ_label(int organ, int half) const {
  if (granularity == Granularity::fine) return 1 + 2 * organ + half;
  return 1 + organ;
}

int CaseSpec::lesion_label(int class_index) const {
  return 1 + num_organ_labels() + class_index;
}

int CaseSpec::coarse_parent(int fine_label) const {
  if (fine_label == 0) return 0;
  const int organs_n = static_cast<int>(organs.size());
  if (fine_label <= 2 * organs_n) return 1 + (fine_label - 1) / 2;
  return 1 + organs_n + (fine_label - 1 - 2 * organs_n);  // lesion labels
}

void CaseSpec::validate() const {
  if (d <= 0 || h <= 0 || w <= 0) throw std::invalid_argument("CaseSpec: empty grid");
  for (auto [name, dim] : {std::pair{"D", d}, {"H", h}, {"W", w}})
    if (dim % divisibility != 0)
      throw std::invalid_argument(std::string("CaseSpec: axis ") + name + "=" +
                                  std::to_string(dim) + " not divisible by " +
                                  std::to_string(divisibility));
  if (organs.empty()) throw std::invalid_argument("CaseSpec: no organs");
  std::set<int> classes;
  for (const auto& l : lesions) {
    if (l.host_organ < 0 || l.host_organ >= static_cast<int>(organs.size()))
      throw std::invalid_argument("CaseSpec: lesion host organ out of range");
    classes.insert(l.class_index);
  }
  const int c = num_classes();
  if (static_cast<int>(classes.size()) != c)
    throw std::invalid_argument("CaseSpec: lesion class indices must be dense in [0, C_cls)");
  for (int k = 0; k < c; ++k)
    if (!classes.count(k))
      throw std::invalid_argument("CaseSpec: lesion class indices must be dense in [0, C_cls)");
  if (seg_classes() > 255) throw std::invalid_argument("CaseSpec: too many segmentation labels");
}

std::uint64_t CaseSpec::hash() const {
  std::uint64_t h_ = 0x9c0de5eedull;
  h_ = fold(h_, static_cast<std::uint64_t>(d));
  h_ = fold(h_, static_cast<std::uint64_t>(h));
  h_ = fold(h_, static_cast<std::uint64_t>(w));
  h_ = fold(h_, static_cast<std::uint64_t>(granularity == Granularity::fine ? 1 : 0));
  h_ = fold(h_, static_cast<std::uint64_t>(lesions_enabled ? 1 : 0));
  h_ = fold(h_, noise_sigma);
  h_ = fold(h_, background_level);
  h_ = fold(h_, static_cast<std::uint64_t>(divisibility));
  for (const auto& o : organs) {
    for (int a = 0; a < 3; ++a) {
      h_ = fold(h_, o.region_lo[static_cast<std::size_t>(a)]);
      h_ = fold(h_, o.region_hi[static_cast<std::size_t>(a)]);
      h_ = fold(h_, o.semi_lo[static_cast<std::size_t>(a)]);
      h_ = fold(h_, o.semi_hi[static_cast<std::size_t>(a)]);
    }
    h_ = fold(h_, o.intensity_lo);
    h_ = fold(h_, o.intensity_hi);
    h_ = fold(h_, static_cast<std::uint64_t>(o.shape == OrganShape::box ? 1 : 0));
  }
  for (const auto& l : lesions) {
    h_ = fold(h_, static_cast<std::uint64_t>(l.host_organ));
    h_ = fold(h_, l.radius_lo);
    h_ = fold(h_, l.radius_hi);
    h_ = fold(h_, l.intensity_lo);
    h_ = fold(h_, l.intensity_hi);
    h_ = fold(h_, static_cast<std::uint64_t>(l.class_index));
    h_ = fold(h_, l.probability);
  }
  return h_;
}

CaseSpec make_default_spec(int d, int h, int w, int num_classes, int organ_count,
                           Granularity g, bool lesions, double lesion_probability) {
  CaseSpec spec;
  spec.d = d;
  spec.h = h;
  spec.w = w;
  spec.granularity = g;
  spec.lesions_enabled = lesions;
  // Distinct shape per organ class (plate / ellipsoid / rod). The encoder's
  // instance norm discards most absolute-intensity information per patch, so
  // class identity must be carried by a norm-invariant cue: geometry.
  constexpr std::array<std::array<double, 6>, 3> kShapes = {{
      {0.26, 0.15, 0.070, 0.32, 0.20, 0.090},  // plate: thin along w
      {0.20, 0.12, 0.070, 0.30, 0.18, 0.100},  // ellipsoid
      {0.13, 0.08, 0.100, 0.16, 0.11, 0.130},  // rod: long along w
  }};
  for (int o = 0; o < organ_count; ++o) {
    OrganSpec os;
    const double cx = (o + 0.5) / organ_count;
    os.region_lo = {0.40, 0.40, cx - 0.03};
    os.region_hi = {0.60, 0.60, cx + 0.03};
    const auto& sh = kShapes[static_cast<std::size_t>(o % 3)];
    os.semi_lo = {sh[0], sh[1], sh[2]};
    os.semi_hi = {sh[3], sh[4], sh[5]};
    // Distinct intensity band per organ class. Organs of the same shape are
    // otherwise only distinguishable by absolute position, which a
    // translation-invariant conv encoder cannot resolve reliably.
    const double center =
        organ_count > 1 ? 0.30 + 0.30 * o / (organ_count - 1) : 0.45;
    os.intensity_lo = center - 0.05;
    os.intensity_hi = center + 0.05;
    spec.organs.push_back(os);
  }
  // Fit the lesion radius range to the smallest possible organ semi-axis so
  // every drawn lesion can sit strictly inside its host, even on small grids.
  const std::array<double, 3> dims = {static_cast<double>(d), static_cast<double>(h),
                                      static_cast<double>(w)};
  double min_semi = 1e30;
  for (const auto& os : spec.organs)
    for (int a = 0; a < 3; ++a)
      min_semi = std::min(min_semi, os.semi_lo[static_cast<std::size_t>(a)] *
                                        dims[static_cast<std::size_t>(a)]);
  const double radius_hi = std::max(1.0, std::min(3.0, min_semi - 0.8));
  const double radius_lo = std::max(1.0, radius_hi - 1.0);
  for (int k = 0; k < num_classes; ++k) {
    LesionSpec ls;
    ls.host_organ = k % organ_count;
    ls.class_index = k;
    ls.radius_lo = radius_lo;
    ls.radius_hi = radius_hi;
    // Brighter than every organ band (max 0.65) by >2 noise sigmas so
    // presence is learnable from a few hundred cases, but small enough
    // that good encoder features matter.
    ls.intensity_lo = 0.78;
    ls.intensity_hi = 0.88;
    ls.probability = lesion_probability;
    spec.lesions.push_back(ls);
  }
  return spec;
}

Case generate_case(std::uint64_t seed, const CaseSpec& spec) {
  spec.validate();
  Rng root(seed);
  Rng geo = root.stream(1);     // organ geometry; never consults granularity
  Rng lesion_rng = root.stream(2);
  Rng noise = root.stream(3);

  const int D = spec.d, H = spec.h, W = spec.w;
  const std::array<double, 3> dims = {static_cast<double>(D), static_cast<double>(H),
                                      static_cast<double>(W)};
  Case out;
  out.volume = Volume{D, H, W, std::vector<float>(static_cast<std::size_t>(D) * H * W)};
  out.mask = SegMask{D, H, W, std::vector<std::uint8_t>(static_cast<std::size_t>(D) * H * W, 0)};

  std::vector<double> intensity(static_cast<std::size_t>(D) * H * W, spec.background_level);
  auto idx = [&](int z, int y, int x) { return (static_cast<std::int64_t>(z) * H + y) * W + x; };

  // Organs, painted in catalogue order (later organs overwrite earlier ones).
  std::vector<PlacedOrgan> placed;
  for (std::size_t o = 0; o < spec.organs.size(); ++o) {
    const auto& os = spec.organs[o];
    PlacedOrgan p;
    for (int a = 0; a < 3; ++a)
      p.center[static_cast<std::size_t>(a)] =
          geo.uniform(os.region_lo[static_cast<std::size_t>(a)],
                      os.region_hi[static_cast<std::size_t>(a)]) *
          dims[static_cast<std::size_t>(a)];
    for (int a = 0; a < 3; ++a)
      p.semi[static_cast<std::size_t>(a)] =
          geo.uniform(os.semi_lo[static_cast<std::size_t>(a)],
                      os.semi_hi[static_cast<std::size_t>(a)]) *
          dims[static_cast<std::size_t>(a)];
    p.intensity = geo.uniform(os.intensity_lo, os.intensity_hi);
    p.shape = os.shape;
    p.longest_axis = 0;
    for (int a = 1; a < 3; ++a)
      if (p.semi[static_cast<std::size_t>(a)] > p.semi[static_cast<std::size_t>(p.longest_axis)])
        p.longest_axis = a;
    placed.push_back(p);

    const int z0 = std::max(0, static_cast<int>(std::floor(p.center[0] - p.semi[0])));
    const int z1 = std::min(D - 1, static_cast<int>(std::ceil(p.center[0] + p.semi[0])));
    const int y0 = std::max(0, static_cast<int>(std::floor(p.center[1] - p.semi[1])));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(p.center[1] + p.semi[1])));
    const int x0 = std::max(0, static_cast<int>(std::floor(p.center[2] - p.semi[2])));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(p.center[2] + p.semi[2])));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double dz = (z + 0.5 - p.center[0]) / p.semi[0];
          const double dy = (y + 0.5 - p.center[1]) / p.semi[1];
          const double dx = (x + 0.5 - p.center[2]) / p.semi[2];
          bool inside = p.shape == OrganShape::box
                            ? (std::abs(dz) <= 1.0 && std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0)
                            : (dz * dz + dy * dy + dx * dx <= 1.0);
          if (!inside) continue;
          const double coord = (p.longest_axis == 0 ? z + 0.5 : p.longest_axis == 1 ? y + 0.5
                                                                                    : x + 0.5);
          const int half =
              coord < p.center[static_cast<std::size_t>(p.longest_axis)] ? 0 : 1;
          out.mask.labels[static_cast<std::size_t>(idx(z, y, x))] =
              static_cast<std::uint8_t>(spec.organ_label(static_cast<int>(o), half));
          intensity[static_cast<std::size_t>(idx(z, y, x))] = p.intensity;
        }
  }

  // Lesions: strictly inside their host organ, stamped after all organs.
  out.labels.assign(static_cast<std::size_t>(spec.num_classes()), 0);
  if (spec.lesions_enabled) {
    for (const auto& ls : spec.lesions) {
      const double take = lesion_rng.uniform();
      if (take >= ls.probability) continue;
      const double r = lesion_rng.uniform(ls.radius_lo, ls.radius_hi);
      const double inten = lesion_rng.uniform(ls.intensity_lo, ls.intensity_hi);
      const auto& host = placed[static_cast<std::size_t>(ls.host_organ)];
      double min_semi = std::min({host.semi[0], host.semi[1], host.semi[2]});
      if (min_semi <= r + kFitMargin)
        throw std::runtime_error("generate_case: lesion class " + std::to_string(ls.class_index) +
                                 " (radius " + std::to_string(r) +
                                 ") cannot fit inside host organ " + std::to_string(ls.host_organ));
      // Uniform point in the unit ball by rejection, then scaled per axis to
      // the host shrunk by r + margin; keeps the whole sphere inside.
      double qz, qy, qx;
      do {
        qz = lesion_rng.uniform(-1.0, 1.0);
        qy = lesion_rng.uniform(-1.0, 1.0);
        qx = lesion_rng.uniform(-1.0, 1.0);
      } while (qz * qz + qy * qy + qx * qx > 1.0);
      const std::array<double, 3> lc = {
          host.center[0] + qz * (host.semi[0] - r - kFitMargin),
          host.center[1] + qy * (host.semi[1] - r - kFitMargin),
          host.center[2] + qx * (host.semi[2] - r - kFitMargin)};
      const std::uint8_t label = static_cast<std::uint8_t>(spec.lesion_label(ls.class_index));
      int stamped = 0;
      const int z0 = std::max(0, static_cast<int>(std::floor(lc[0] - r)));
      const int z1 = std::min(D - 1, static_cast<int>(std::ceil(lc[0] + r)));
      const int y0 = std::max(0, static_cast<int>(std::floor(lc[1] - r)));
      const int y1 = std::min(H - 1, static_cast<int>(std::ceil(lc[1] + r)));
      const int x0 = std::max(0, static_cast<int>(std::floor(lc[2] - r)));
      const int x1 = std::min(W - 1, static_cast<int>(std::ceil(lc[2] + r)));
      for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x) {
            const double dz = z + 0.5 - lc[0], dy = y + 0.5 - lc[1], dx = x + 0.5 - lc[2];
            if (dz * dz + dy * dy + dx * dx > r * r) continue;
            out.mask.labels[static_cast<std::size_t>(idx(z, y, x))] = label;
            intensity[static_cast<std::size_t>(idx(z, y, x))] = inten;
            ++stamped;
          }
      if (stamped == 0)
        throw std::runtime_error("generate_case: lesion class " + std::to_string(ls.class_index) +
                                 " produced no voxels");
      out.labels[static_cast<std::size_t>(ls.class_index)] = 1;
    }
  }

  // Seed-driven additive noise, then clamp into [0,1].
  for (std::size_t i = 0; i < intensity.size(); ++i) {
    double v = intensity[i] + noise.normal(0.0, spec.noise_sigma);
    out.volume.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }

  Vocab vocab(spec.num_classes());
  out.report = render_report(out.labels, vocab);
  return out;
}

std::string render_report_text(const MultiLabel& y) {
  std::string s;
  for (std::size_t k = 0; k < y.size(); ++k) {
    if (!s.empty()) s += " ";
    const std::string cls = "lesion-" + std::to_string(k);
    s += y[k] ? cls + " is present ." : "no " + cls + " is seen .";
  }
  return s;
}

Report render_report(const MultiLabel& y, const Vocab& vocab) {
  return vocab.tokenize(render_report_text(y));
}

MultiLabel extract_labels_text(const std::string& text, int num_classes) {
  std::vector<std::string> words;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) words.push_back(w);
  auto has_seq = [&](const std::vector<std::string>& pat) {
    if (pat.size() > words.size()) return false;
    for (std::size_t i = 0; i + pat.size() <= words.size(); ++i) {
      bool ok = true;
      for (std::size_t j = 0; j < pat.size(); ++j)
        if (words[i + j] != pat[j]) {
          ok = false;
          break;
        }
      if (ok) return true;
    }
    return false;
  };
  MultiLabel y(static_cast<std::size_t>(num_classes), 0);
  for (int k = 0; k < num_classes; ++k) {
    const std::string cls = "lesion-" + std::to_string(k);
    const bool positive = has_seq({cls, "is", "present"});
    const bool negated = has_seq({"no", cls});
    y[static_cast<std::size_t>(k)] = (positive && !negated) ? 1 : 0;
  }
  return y;
}

MultiLabel extract_labels(const Report& r, const Vocab& vocab, int num_classes) {
  return extract_labels_text(vocab.detokenize(r), num_classes);
}

namespace {
std::pair<Volume, SegMask> crop(const Volume& v, const SegMask& m, int pd, int ph, int pw, int oz,
                                int oy, int ox) {
  Volume pv{pd, ph, pw, std::vector<float>(static_cast<std::size_t>(pd) * ph * pw)};
  SegMask pm{pd, ph, pw, std::vector<std::uint8_t>(static_cast<std::size_t>(pd) * ph * pw)};
  for (int z = 0; z < pd; ++z)
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x) {
        const std::size_t dst = static_cast<std::size_t>((static_cast<std::int64_t>(z) * ph + y) * pw + x);
        pv.data[dst] = v.at(oz + z, oy + y, ox + x);
        pm.labels[dst] = m.at(oz + z, oy + y, ox + x);
      }
  return {std::move(pv), std::move(pm)};
}
}  // namespace

std::pair<Volume, SegMask> sample_patch(const Volume& v, const SegMask& m, int pd, int ph, int pw,
                                        std::uint64_t seed) {
  if (pd > v.d || ph > v.h || pw > v.w)
    throw std::invalid_argument("sample_patch: patch larger than volume");
  Rng rng(seed);
  const int oz = static_cast<int>(rng.range(0, v.d - pd + 1));
  const int oy = static_cast<int>(rng.range(0, v.h - ph + 1));
  const int ox = static_cast<int>(rng.range(0, v.w - pw + 1));
  return crop(v, m, pd, ph, pw, oz, oy, ox);
}

std::pair<Volume, SegMask> sample_patch_containing(const Volume& v, const SegMask& m, int pd,
                                                   int ph, int pw, int z, int y, int x,
                                                   std::uint64_t seed) {
  if (pd > v.d || ph > v.h || pw > v.w)
    throw std::invalid_argument("sample_patch: patch larger than volume");
  if (z < 0 || z >= v.d || y < 0 || y >= v.h || x < 0 || x >= v.w)
    throw std::invalid_argument("sample_patch: target voxel out of range");
  Rng rng(seed);
  // Uniform over all window offsets whose patch contains (z, y, x).
  auto pick = [&](int t, int p, int n) {
    const int lo = std::max(0, t - p + 1), hi = std::min(t, n - p);
    return lo + static_cast<int>(rng.range(0, hi - lo + 1));
  };
  return crop(v, m, pd, ph, pw, pick(z, pd, v.d), pick(y, ph, v.h), pick(x, pw, v.w));
}

}  // namespace uvlm::synthvol
