#include "gtcnn/tape.hpp"

#include <algorithm>
#include <stdexcept>

namespace gtcnn {

template <typename T>
void Tape<T>::record(TensorPtr<T> output, BackwardFn fn) {
  output->set_requires_grad(true);
  entries_.push_back({std::move(output), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const TensorPtr<T>& loss) {
  if (entries_.empty()) throw std::logic_error("backward called on an empty tape");
  if (!loss || loss->size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                (loss ? loss->shape().str() : std::string("null")));
  }
  const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                   [&](const Entry& e) { return e.output == loss; });
  if (!on_tape) throw std::invalid_argument("loss was not produced by an op on this tape");

  for (auto& e : entries_) {
    e.output->grad();
    e.output->zero_grad();
  }
  loss->grad()[0] = T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace gtcnn
