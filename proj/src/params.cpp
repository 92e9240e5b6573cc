#include "dtx/params.hpp"

namespace dtx {

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (contains(name)) throw ContractError("parameter registered twice: " + name);
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, t});
  return t;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter: " + name);
  return entries_[it->second].tensor;
}

std::size_t ParamStore::parameter_count() const { return parameter_count({}); }

std::size_t ParamStore::parameter_count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.name.starts_with(prefix)) n += e.tensor.numel();
  return n;
}

std::vector<NamedTensor> ParamStore::with_prefix(std::string_view prefix) const {
  std::vector<NamedTensor> out;
  for (const auto& e : entries_)
    if (e.name.starts_with(prefix)) out.push_back(e);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t digest(const ParamStore& store, std::string_view prefix) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& e : store.entries()) {
    if (!e.name.starts_with(prefix)) continue;
    h = fnv1a(e.name.data(), e.name.size(), h);
    for (std::size_t d : e.tensor.shape()) {
      const auto d64 = static_cast<std::uint64_t>(d);
      h = fnv1a(&d64, sizeof d64, h);
    }
    h = fnv1a(e.tensor.data().data(), e.tensor.numel() * sizeof(double), h);
  }
  return h;
}

}  // namespace dtx
