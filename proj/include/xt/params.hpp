#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xt/tensor.hpp"

namespace xt {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

/// Ordered collection of trainable tensors, addressable by name.
class ParamStore {
 public:
  // Registers t under `name` with requires_grad set; names must be unique.
  Tensor add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<NamedParam>& items() { return items_; }
  const std::vector<NamedParam>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;

  // Checkpoint directory: one tensor file per parameter plus `manifest.txt`
  // with lines `name<TAB>shape<TAB>file` (shape as AxBxC, "scalar" for rank 0).
  void save(const std::filesystem::path& dir) const;
  // Loads values into the already-registered parameters; every manifest
  // entry must match an existing parameter name and shape.
  void load(const std::filesystem::path& dir);

 private:
  std::vector<NamedParam> items_;
};

}  // namespace xt
