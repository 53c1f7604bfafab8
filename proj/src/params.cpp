#include "sigma/params.hpp"

#include "sigma/errors.hpp"

namespace sigma {

Tensor& ParamStore::add(const std::string& name, Tensor init, bool trainable) {
  auto [it, inserted] = entries_.emplace(name, Entry{std::move(init), trainable});
  if (!inserted) throw ConfigError("duplicate parameter name: " + name);
  return it->second.value;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second.value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second.value;
}

bool ParamStore::is_trainable(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second.trainable;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  it->second.trainable = trainable;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, entry] : entries_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, entry] : entries_) {
    if (entry.trainable) out.push_back(name);
  }
  return out;
}

std::size_t ParamStore::trainable_scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, entry] : entries_) {
    if (entry.trainable) n += entry.value.size();
  }
  return n;
}

}  // namespace sigma
