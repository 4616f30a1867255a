#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "otflow/errors.hpp"
#include "otflow/tensor.hpp"

namespace otflow {

// Named flat collection of parameter tensors with a gradient slot per entry.
// Iteration order is insertion order and stays stable across runs as long as
// construction happens in the same sequence, which the model builders
// guarantee.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    std::vector<double> grad;
  };

  int add(const std::string& name, Tensor init) {
    if (index_.count(name)) {
      throw ValidationError("duplicate parameter name: " + name);
    }
    if (!all_finite(init.v)) {
      throw NumericError("non-finite initial value for parameter " + name);
    }
    Entry e;
    e.name = name;
    e.grad.assign(init.size(), 0.0);
    e.value = std::move(init);
    index_.emplace(e.name, static_cast<int>(entries_.size()));
    entries_.push_back(std::move(e));
    return static_cast<int>(entries_.size()) - 1;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Entry& at(int id) { return entries_.at(static_cast<std::size_t>(id)); }
  const Entry& at(int id) const {
    return entries_.at(static_cast<std::size_t>(id));
  }

  int count() const { return static_cast<int>(entries_.size()); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_) e.grad.assign(e.value.size(), 0.0);
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace otflow
