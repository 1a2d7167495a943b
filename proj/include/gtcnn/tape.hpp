#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "gtcnn/tensor.hpp"

namespace gtcnn {

/// Ordered record of differentiable ops executed during a forward pass.
///
/// Each entry owns the op's output and a closure holding whatever inputs the
/// backward rule needs. backward() zeroes the gradients of every recorded
/// output, seeds the loss with 1 and replays the closures in reverse order,
/// so leaf tensors (parameters, inputs) accumulate: calling backward twice on
/// the same tape doubles their gradients. clear() releases all saved
/// activations.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(TensorPtr<T> output, BackwardFn fn);

  /// Throws std::logic_error on an empty tape, std::invalid_argument when
  /// the loss is not a single element or was not produced on this tape.
  void backward(const TensorPtr<T>& loss);

  void clear() { entries_.clear(); }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    TensorPtr<T> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace gtcnn
