#pragma once

#include <cstddef>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tstcnn {

/// Shape mismatch or invalid axis/extent.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration value (model, dataset, run).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-byte aligned allocation for tensor storage.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Ordered extents. Layout convention for volumes is (C, T, H, W) with an
/// optional leading batch extent.
using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Throws DimensionError if any extent is zero or the shape is empty.
void validate_shape(const Shape& shape);

/**
 * Dense value array with an optional gradient slot.
 *
 * Tensor is a shared handle: copies alias the same storage. Use clone() for
 * a deep copy. Once a tensor has been consumed by a recorded operation its
 * values must not change until the tape is cleared; only the gradient slot
 * is written during backward.
 */
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, value, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data().size(); }

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  /// Read-only gradient; throws ContractError when no gradient is present.
  std::span<const T> grad() const;
  /// Gradient slot, allocated as zeros on first access. The slot belongs to
  /// the shared storage, so these are usable through const handles.
  std::span<T> mutable_grad() const;
  /// Drops the gradient slot.
  void clear_grad() const;
  /// Adds `delta` element-wise into the gradient slot.
  void accumulate_grad(std::span<const T> delta) const;

  /// Deep copy of values (no gradient, requires_grad preserved).
  Tensor clone() const;
  /// Same-storage identity.
  bool same(const Tensor& other) const { return impl_ == other.impl_; }
  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
  };
  const Impl& impl() const;
  Impl& impl();
  Impl& shared() const;

  std::shared_ptr<Impl> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Element-wise converted copy (used to lift float parameters to double for
/// gradient checks).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  auto src = x.data();
  std::vector<To> out(src.begin(), src.end());
  return Tensor<To>(x.shape(), std::move(out), x.requires_grad());
}

}  // namespace tstcnn
