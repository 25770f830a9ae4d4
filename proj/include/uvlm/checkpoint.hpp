#pragma once

#include <string>
#include <vector>

#include "uvlm/params.hpp"
#include "uvlm/tensor.hpp"

namespace uvlm {

// Repo-wide checkpoint container: a text header (format version, module
// name, stage provenance tag, config echo, tensor directory) terminated by
// a "---" line, followed by raw little-endian float64 payloads in directory
// order. Round trips are bit-exact.
struct Checkpoint {
  std::string module_name;
  std::string stage_tag;  // stage1 / stage2 / stage3 / none
  std::string config_echo;
  std::vector<std::pair<std::string, Tensor>> tensors;  // sorted by name on save

  void set_from_store(const ParamStore& store);
  void load_into_store(ParamStore& store) const;  // shapes must match exactly

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  const Tensor* find(const std::string& name) const;
};

}  // namespace uvlm
