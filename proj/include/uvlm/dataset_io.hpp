#pragma once

#include <string>
#include <vector>

#include "uvlm/synthvol.hpp"

namespace uvlm::synthvol {

struct Dataset {
  CaseSpec spec;
  std::uint64_t base_seed = 0;
  std::vector<Case> cases;
};

// Deterministic dataset: case i is generate_case(base_seed + i, spec).
Dataset generate_dataset(std::uint64_t base_seed, const CaseSpec& spec, int count);

// Directory layout: case_<id>/volume.raw (LE float32, C order D,H,W),
// mask.raw (uint8), labels.txt (one 0/1 per line), report.txt (UTF-8),
// plus manifest.json with shapes, spec hash and seed.
void write_dataset(const std::string& dir, const Dataset& ds);
Dataset read_dataset(const std::string& dir);

}  // namespace uvlm::synthvol
