#pragma once

#include <map>
#include <string>
#include <vector>

#include "sigma/tensor.hpp"

namespace sigma {

// Named parameter tensors with a per-entry trainable flag. Iteration order is
// the sorted name order, which keeps every downstream loop deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init, bool trainable);

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool is_trainable(const std::string& name) const;
  void set_trainable(const std::string& name, bool trainable);

  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;
  std::size_t count() const { return entries_.size(); }

  // Number of scalar entries across trainable tensors.
  std::size_t trainable_scalar_count() const;

 private:
  struct Entry {
    Tensor value;
    bool trainable = false;
  };
  std::map<std::string, Entry> entries_;
};

}  // namespace sigma
