#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "owm/errors.hpp"

namespace owm::numerics {

using Shape = std::vector<int>;

/// Allocator with a fixed 64-byte alignment. Eigen's vectorized reductions
/// peel a data-dependent number of leading elements to reach an aligned
/// address, so buffers whose alignment varied between allocations would sum
/// in different orders and break bitwise reproducibility.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  // Sized construction leaves elements default-initialized: kernels write
  // every output element, and zero-filling first costs a full extra pass.
  // Pass an explicit fill value where zeros are needed.
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

inline int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw StructuralError(std::string(op) + ": axis " + std::to_string(axis) +
                          " out of range for rank " + std::to_string(rank));
  }
  return a;
}

struct unchecked_t {};
inline constexpr unchecked_t unchecked{};

/// Dense row-major array. Construction from caller data validates extents and
/// finiteness; `unchecked` construction is reserved for kernels whose inputs
/// were already validated.
template <class T>
class Array {
 public:
  using value_type = T;

  Array() = default;

  explicit Array(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_extents();
    data_.assign(element_count(shape_), fill);
  }

  Array(Shape shape, const std::vector<T>& data) : Array(std::move(shape), Buffer<T>(data.begin(), data.end())) {}
  Array(Shape shape, std::initializer_list<T> data) : Array(std::move(shape), Buffer<T>(data)) {}

  Array(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (data_.size() != element_count(shape_)) {
      throw StructuralError("Array: " + std::to_string(data_.size()) +
                            " elements do not fill shape " + shape_string(shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(static_cast<double>(data_[i]))) {
        throw NumericalError("Array: non-finite element at flat index " + std::to_string(i));
      }
    }
  }

  Array(unchecked_t, Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {}
  Array(unchecked_t, Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {}

  static Array scalar(T v) { return Array(unchecked, Shape{1}, Buffer<T>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_[normalize_axis(axis, rank(), "dim")]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const T> data() const { return data_; }
  std::span<T> mutable_data() { return data_; }
  const Buffer<T>& vec() const { return data_; }
  Buffer<T>& vec() { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  Array reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
      throw StructuralError("reshape: cannot view " + shape_string(shape_) + " as " +
                            shape_string(shape));
    }
    return Array(unchecked, std::move(shape), data_);
  }

  template <class U>
  Array<U> cast() const {
    Buffer<U> out(data_.begin(), data_.end());
    return Array<U>(unchecked, shape_, std::move(out));
  }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  friend bool operator==(const Array& a, const Array& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_extents() const {
    for (int e : shape_) {
      if (e <= 0) throw StructuralError("Array: non-positive extent in " + shape_string(shape_));
    }
  }

  Shape shape_;
  Buffer<T> data_;
};

}  // namespace owm::numerics
