#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "gtcnn/tape.hpp"
#include "gtcnn/tensor.hpp"

namespace gtcnn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  /// Coordinates compared against the taped gradient.
  std::size_t checked = 0;
  /// Coordinates whose +/- step changed a relu mask or a pooling argmax; the
  /// central difference straddles a kink there and is not comparable.
  std::size_t skipped_kinks = 0;
  /// Taped and finite-difference values at the worst coordinate.
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Builds a scalar loss from the given leaves. A null tape means "forward
/// only"; the function must then record nothing.
template <typename T>
using LossFn = std::function<TensorPtr<T>(Tape<T>*)>;

/// Central finite differences (f(x+d) - f(x-d)) / 2d against the taped
/// gradient, for every coordinate of every leaf in `leaves`. The relative
/// error per coordinate is |a - b| / max(|a|, |b|, 1e-8).
///
/// Throws std::invalid_argument when the loss is not a single element.
template <typename T>
GradCheckReport grad_check(const LossFn<T>& loss_fn, const std::vector<TensorPtr<T>>& leaves,
                           T step);

extern template GradCheckReport grad_check(const LossFn<float>&,
                                           const std::vector<TensorPtr<float>>&, float);
extern template GradCheckReport grad_check(const LossFn<double>&,
                                           const std::vector<TensorPtr<double>>&, double);

}  // namespace gtcnn
