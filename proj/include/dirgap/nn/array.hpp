#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dirgap/errors.hpp"

namespace dirgap::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <class T>
void ensure_finite(std::span<const T> values, const char* where) {
  for (const T& v : values)
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite value produced by ") + where);
}

// Vectorized reductions split work by pointer alignment, so tensor storage is
// pinned to 64 bytes to keep float results independent of where it lands.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct DenseArray {
  Shape shape;
  Buffer<T> values;

  DenseArray() = default;
  explicit DenseArray(Shape s, T fill = T{0}) : shape(std::move(s)), values(numel(shape), fill) {
    for (auto d : shape)
      if (d == 0) throw ConfigError("zero-sized dimension in " + shape_string(shape));
  }

  std::size_t size() const { return values.size(); }
  T* data() { return values.data(); }
  const T* data() const { return values.data(); }
  T& operator[](std::size_t i) { return values[i]; }
  const T& operator[](std::size_t i) const { return values[i]; }

  // Row-major 2-D access.
  T& at(std::size_t r, std::size_t c) { return values[r * shape.back() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return values[r * shape.back() + c]; }

  bool all_finite() const {
    for (const T& v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const DenseArray&, const DenseArray&) = default;
};

/// Named model parameters together with their gradients.
///
/// Entries iterate in name order, which fixes the order of every reduction
/// over the store (gradient norms, optimizer sweeps, checkpoints).
template <class T>
class ParameterStore {
 public:
  struct Entry {
    DenseArray<T> value;
    DenseArray<T> grad;
    bool trainable = true;
    bool decay = true;  // weight decay applies; false for biases and norm gains
  };

  Entry& add(const std::string& name, Shape shape, bool decay = true) {
    if (entries_.contains(name)) throw ConfigError("duplicate parameter " + name);
    Entry e{DenseArray<T>(shape), DenseArray<T>(shape), true, decay};
    return entries_.emplace(name, std::move(e)).first->second;
  }

  bool contains(const std::string& name) const { return entries_.contains(name); }

  Entry& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("no parameter named " + name);
    return it->second;
  }
  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("no parameter named " + name);
    return it->second;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& [name, e] : entries_) std::fill(e.grad.values.begin(), e.grad.values.end(), T{0});
  }

  void freeze_all() {
    for (auto& [name, e] : entries_) e.trainable = false;
  }

  std::size_t count_total() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.size();
    return n;
  }

  std::size_t count_trainable() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_)
      if (e.trainable) n += e.value.size();
    return n;
  }

  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, e] : entries_) {
      auto& o = out.add(name, e.value.shape, e.decay);
      o.trainable = e.trainable;
      for (std::size_t i = 0; i < e.value.size(); ++i)
        o.value[i] = static_cast<U>(e.value[i]);
    }
    return out;
  }

 private:
  std::map<std::string, Entry> entries_;
};

}  // namespace dirgap::nn
