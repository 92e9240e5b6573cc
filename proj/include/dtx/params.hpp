#pragma once
// Named, ordered collection of trainable leaf tensors.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dtx/tensor.hpp"

namespace dtx {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class ParamStore {
 public:
  // Registers a new trainable leaf. Duplicate names are a ContractError.
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;
  std::size_t parameter_count(std::string_view prefix) const;

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor> with_prefix(std::string_view prefix) const;

  void zero_grad();

 private:
  std::vector<NamedTensor> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// FNV-1a over names, shapes and raw value bytes of every entry whose name
// starts with `prefix`.
std::uint64_t digest(const ParamStore& store, std::string_view prefix = {});

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 14695981039346656037ULL);

}  // namespace dtx
