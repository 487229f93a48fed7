#include "tpsalign/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tpsalign/common.hpp"

namespace tpsalign {

namespace {
constexpr const char* kMagic = "tpsalign-ntt 1";
}

void NamedTensors::put(const std::string& name, Tensor t) {
  for (auto& [n, existing] : items) {
    if (n == name) {
      existing = std::move(t);
      return;
    }
  }
  items.emplace_back(name, std::move(t));
}

const Tensor* NamedTensors::find(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return &t;
  return nullptr;
}

const Tensor& NamedTensors::at(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw ConfigError("checkpoint is missing tensor: " + name);
  return *t;
}

double NamedTensors::scalar(const std::string& name) const {
  const Tensor& t = at(name);
  if (t.numel() != 1)
    throw ConfigError("checkpoint tensor is not a scalar: " + name);
  return t[0];
}

void NamedTensors::put_scalar(const std::string& name, double v) {
  put(name, Tensor::from_values({1}, {v}));
}

void save_named_tensors(const std::string& path, const NamedTensors& table) {
  std::vector<const std::pair<std::string, Tensor>*> order;
  order.reserve(table.items.size());
  for (const auto& item : table.items) order.push_back(&item);
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->first < b->first; });

  std::ostringstream out;
  out << kMagic << "\n" << order.size() << "\n";
  char buf[40];
  for (const auto* item : order) {
    const auto& [name, t] = *item;
    if (name.find_first_of(" \t\n") != std::string::npos)
      throw ConfigError("tensor name contains whitespace: " + name);
    out << "tensor " << name << " f64 " << t.rank();
    for (int64_t d = 0; d < t.rank(); ++d) out << " " << t.shape(d);
    out << "\n";
    for (int64_t i = 0; i < t.numel(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", t[i]);
      out << buf << "\n";
    }
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  f << out.str();
  if (!f) throw IoError("short checkpoint write: " + path);
}

NamedTensors load_named_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(f, line) || line != kMagic)
    throw ConfigError("not a tpsalign checkpoint: " + path);
  if (!std::getline(f, line)) throw ConfigError("truncated checkpoint: " + path);
  const int64_t count = std::strtoll(line.c_str(), nullptr, 10);
  if (count < 0) throw ConfigError("bad tensor count in " + path);

  NamedTensors table;
  for (int64_t i = 0; i < count; ++i) {
    if (!std::getline(f, line))
      throw ConfigError("truncated checkpoint header: " + path);
    std::stringstream hs(line);
    std::string tag, name, dtype;
    int64_t rank = -1;
    hs >> tag >> name >> dtype >> rank;
    if (tag != "tensor" || dtype != "f64" || rank < 0 || rank > 8)
      throw ConfigError("malformed tensor header in " + path + ": " + line);
    std::vector<int64_t> shape(static_cast<size_t>(rank));
    int64_t numel = 1;
    for (auto& e : shape) {
      if (!(hs >> e) || e < 0)
        throw ConfigError("malformed extents in " + path + ": " + line);
      numel *= e;
    }
    Tensor t(rank == 0 ? std::vector<int64_t>{1} : shape);
    if (rank == 0) numel = 1;
    for (int64_t k = 0; k < numel; ++k) {
      if (!std::getline(f, line))
        throw ConfigError("truncated tensor values in " + path);
      char* end = nullptr;
      t[k] = std::strtod(line.c_str(), &end);
      if (end == line.c_str())
        throw ConfigError("bad value line in " + path + ": " + line);
    }
    table.items.emplace_back(name, std::move(t));
  }
  return table;
}

}  // namespace tpsalign
