#pragma once

#include <cstddef>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gtcnn {

/// Allocator with a fixed 64-byte alignment. Vectorized kernels pick their
/// peeling from the buffer address, so a fixed alignment keeps results
/// bit-identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Extent of a rank-4 tensor laid out as (batch, channels, rows, cols).
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const;
};

/// Thrown when operands disagree on extents; the message names the dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major rank-4 array with an optional same-shape gradient buffer.
///
/// The gradient buffer is allocated lazily by the tape during backward and
/// only for tensors marked with requires_grad().
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  explicit Tensor4(Shape shape, T fill = T(0));
  Tensor4(Shape shape, std::vector<T> values);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  AlignedVector<T>& storage() { return data_; }
  const AlignedVector<T>& storage() const { return data_; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }
  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return !grad_.empty(); }
  /// Allocates a zero gradient if none exists yet.
  std::span<T> grad();
  std::span<const T> grad() const { return grad_; }
  void zero_grad();
  void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }

  /// True when every element is finite.
  bool all_finite() const;

 private:
  Shape shape_{};
  AlignedVector<T> data_;
  AlignedVector<T> grad_;
  bool requires_grad_ = false;
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor4<T>>;

template <typename T>
TensorPtr<T> make_tensor(Shape shape, T fill = T(0)) {
  return std::make_shared<Tensor4<T>>(shape, fill);
}

template <typename T>
TensorPtr<T> make_tensor(Shape shape, std::vector<T> values) {
  return std::make_shared<Tensor4<T>>(shape, std::move(values));
}

/// Copies values (not gradients) into a tensor of another scalar type.
template <typename To, typename From>
Tensor4<To> cast(const Tensor4<From>& src) {
  std::vector<To> out(src.size());
  auto in = src.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(in[i]);
  return Tensor4<To>(src.shape(), std::move(out));
}

extern template class Tensor4<float>;
extern template class Tensor4<double>;

}  // namespace gtcnn
