#include "uvlm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace uvlm {

namespace {

// Payloads are written little-endian; on a big-endian host bytes would need
// swapping, which this build does not target.
static_assert(sizeof(double) == 8);

void write_doubles(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::istream& is, std::vector<double>& v) {
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) throw std::runtime_error("checkpoint: truncated tensor payload");
}

}  // namespace

void Checkpoint::set_from_store(const ParamStore& store) {
  tensors.clear();
  for (const auto& [name, p] : store.params) tensors.emplace_back(name, p->value);
}

void Checkpoint::load_into_store(ParamStore& store) const {
  for (const auto& [name, t] : tensors) {
    auto p = store.get(name);
    if (p->value.shape != t.shape)
      throw std::runtime_error("checkpoint: shape mismatch for tensor " + name + " (" +
                               p->value.shape_str() + " vs " + t.shape_str() + ")");
    p->value = t;
  }
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os << "UVLM-CKPT v1\n";
  os << "module " << module_name << "\n";
  os << "stage " << stage_tag << "\n";
  os << "config " << config_echo << "\n";
  os << "tensors " << tensors.size() << "\n";
  for (const auto& [name, t] : tensors) {
    os << name << " f64 " << t.ndim();
    for (int d : t.shape) os << " " << d;
    os << "\n";
  }
  os << "---\n";
  for (const auto& [name, t] : tensors) write_doubles(os, t.data);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  Checkpoint ck;
  std::string line;
  std::getline(is, line);
  if (line != "UVLM-CKPT v1") throw std::runtime_error("checkpoint: bad magic in " + path);
  std::getline(is, line);
  if (line.rfind("module ", 0) != 0) throw std::runtime_error("checkpoint: missing module line");
  ck.module_name = line.substr(7);
  std::getline(is, line);
  if (line.rfind("stage ", 0) != 0) throw std::runtime_error("checkpoint: missing stage line");
  ck.stage_tag = line.substr(6);
  std::getline(is, line);
  if (line.rfind("config ", 0) != 0) throw std::runtime_error("checkpoint: missing config line");
  ck.config_echo = line.substr(7);
  std::getline(is, line);
  if (line.rfind("tensors ", 0) != 0) throw std::runtime_error("checkpoint: missing tensor count");
  const std::size_t count = std::stoul(line.substr(8));
  for (std::size_t i = 0; i < count; ++i) {
    std::getline(is, line);
    std::istringstream ls(line);
    std::string name, dtype;
    int ndim = 0;
    ls >> name >> dtype >> ndim;
    if (dtype != "f64") throw std::runtime_error("checkpoint: unsupported dtype " + dtype);
    std::vector<int> shape(static_cast<std::size_t>(ndim));
    for (int& d : shape) ls >> d;
    if (!ls) throw std::runtime_error("checkpoint: bad tensor header: " + line);
    ck.tensors.emplace_back(name, Tensor(shape));
  }
  std::getline(is, line);
  if (line != "---") throw std::runtime_error("checkpoint: missing header terminator");
  for (auto& [name, t] : ck.tensors) read_doubles(is, t.data);
  return ck;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

}  // namespace uvlm
