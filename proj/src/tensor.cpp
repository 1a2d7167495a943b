#include "gtcnn/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace gtcnn {

std::string Shape::str() const {
  return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
         std::to_string(w) + ")";
}

template <typename T>
Tensor4<T>::Tensor4(Shape shape, T fill) : shape_(shape), data_(shape.size(), fill) {}

template <typename T>
Tensor4<T>::Tensor4(Shape shape, std::vector<T> values)
    : shape_(shape), data_(values.begin(), values.end()) {
  if (data_.size() != shape_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_.str());
  }
}

template <typename T>
std::span<T> Tensor4<T>::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), T(0));
  return grad_;
}

template <typename T>
void Tensor4<T>::zero_grad() {
  std::fill(grad_.begin(), grad_.end(), T(0));
}

template <typename T>
bool Tensor4<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor4<float>;
template class Tensor4<double>;

}  // namespace gtcnn
