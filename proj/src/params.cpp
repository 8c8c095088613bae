#include "xt/params.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "xt/errors.hpp"
#include "xt/tensor_io.hpp"

namespace xt {

namespace {
std::string shape_token(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

std::string file_token(std::string name) {
  std::replace(name.begin(), name.end(), '/', '.');
  return name + ".xtt";
}
}  // namespace

Tensor ParamStore::add(const std::string& name, Tensor t) {
  require(!contains(name), "ParamStore: duplicate parameter " + name);
  t.set_requires_grad(true);
  items_.push_back({name, t});
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return p.tensor;
  throw ContractViolation("ParamStore: unknown parameter " + name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(items_.begin(), items_.end(), [&](const auto& p) { return p.name == name; });
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

void ParamStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest in " + dir.string());
  for (const auto& p : items_) {
    const auto file = file_token(p.name);
    save_tensor(dir / file, p.tensor);
    manifest << p.name << '\t' << shape_token(p.tensor.shape()) << '\t' << file << '\n';
  }
}

void ParamStore::load(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot read manifest in " + dir.string());
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape, file;
    if (!std::getline(ls, name, '\t') || !std::getline(ls, shape, '\t') ||
        !std::getline(ls, file)) {
      throw IoError("manifest: malformed line: " + line);
    }
    auto it = std::find_if(items_.begin(), items_.end(), [&](const auto& p) { return p.name == name; });
    if (it == items_.end()) throw ContractViolation("checkpoint: unknown parameter " + name);
    if (shape != shape_token(it->tensor.shape()))
      throw ContractViolation("checkpoint: shape mismatch for " + name);
    const Tensor t = load_tensor(dir / file);
    require(t.shape() == it->tensor.shape(), "checkpoint: file shape mismatch for " + name);
    auto dst = it->tensor.mutable_data();
    std::copy(t.data().begin(), t.data().end(), dst.begin());
  }
}

}  // namespace xt
