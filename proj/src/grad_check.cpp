#include "gtcnn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gtcnn/ops.hpp"

namespace gtcnn {
namespace {

template <typename T>
double evaluate(const LossFn<T>& loss_fn, std::uint64_t* fingerprint) {
  KinkMonitor monitor;
  auto loss = loss_fn(nullptr);
  if (!loss || loss->size() != 1) throw std::invalid_argument("grad_check: loss is not a scalar");
  *fingerprint = monitor.fingerprint();
  return static_cast<double>(loss->data()[0]);
}

}  // namespace

template <typename T>
GradCheckReport grad_check(const LossFn<T>& loss_fn, const std::vector<TensorPtr<T>>& leaves,
                           T step) {
  if (!(step > T(0))) throw std::invalid_argument("grad_check: step must be positive");
  for (const auto& leaf : leaves) {
    leaf->set_requires_grad(true);
    leaf->grad();
    leaf->zero_grad();
  }

  std::uint64_t base_print = 0;
  {
    KinkMonitor monitor;
    Tape<T> tape;
    auto loss = loss_fn(&tape);
    if (!loss || loss->size() != 1) throw std::invalid_argument("grad_check: loss is not a scalar");
    base_print = monitor.fingerprint();
    tape.backward(loss);
  }

  GradCheckReport report;
  for (const auto& leaf : leaves) {
    auto values = leaf->data();
    const std::vector<T> analytic(leaf->grad().begin(), leaf->grad().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      std::uint64_t plus_print = 0, minus_print = 0;
      values[i] = saved + step;
      const double f_plus = evaluate(loss_fn, &plus_print);
      values[i] = saved - step;
      const double f_minus = evaluate(loss_fn, &minus_print);
      values[i] = saved;
      if (plus_print != base_print || minus_print != base_print) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(step));
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      ++report.checked;
    }
  }
  return report;
}

template GradCheckReport grad_check(const LossFn<float>&, const std::vector<TensorPtr<float>>&,
                                    float);
template GradCheckReport grad_check(const LossFn<double>&, const std::vector<TensorPtr<double>>&,
                                    double);

}  // namespace gtcnn
