#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "gtcnn/tape.hpp"
#include "gtcnn/tensor.hpp"

// Differentiable tensor operations.
//
// Every op takes an optional tape as its first argument. With a null tape the
// op runs forward only and records nothing (inference). With a tape the op
// records a backward closure; gradients flow into inputs whose
// requires_grad() flag is set, and into outputs of other recorded ops.

namespace gtcnn {

enum class Mode { Train, Eval };

/// Running statistics for one batch-norm layer, stored as (1, c, 1, 1).
template <typename T>
struct BatchNormState {
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.9;

  TensorPtr<T> running_mean;
  TensorPtr<T> running_var;
  bool initialized = false;

  BatchNormState() : BatchNormState(0) {}
  explicit BatchNormState(std::size_t channels);
};

template <typename T>
struct PoolResult {
  TensorPtr<T> output;
  /// Flat input index of the maximum chosen for each output element.
  std::vector<std::uint32_t> argmax;
};

/// Stride-1 cross-correlation with zero padding (k - 1) / 2.
/// weight is (c_out, c_in, k, k) with k in {1, 3}; bias is (1, c_out, 1, 1)
/// or null.
template <typename T>
TensorPtr<T> conv2d(Tape<T>* tape, const TensorPtr<T>& input, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias);

/// Train mode normalizes with biased batch statistics over (n, h, w) and
/// folds them into the running averages; eval mode reads the running stats.
template <typename T>
TensorPtr<T> batchnorm2d(Tape<T>* tape, const TensorPtr<T>& input, const TensorPtr<T>& gamma,
                         const TensorPtr<T>& beta, BatchNormState<T>& state, Mode mode);

/// Eval-mode batch norm that leaves the state untouched.
template <typename T>
TensorPtr<T> batchnorm2d_eval(Tape<T>* tape, const TensorPtr<T>& input,
                              const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                              const BatchNormState<T>& state);

template <typename T>
TensorPtr<T> relu(Tape<T>* tape, const TensorPtr<T>& input);

template <typename T>
TensorPtr<T> sigmoid(Tape<T>* tape, const TensorPtr<T>& input);

/// Softmax across the channel axis at every (n, h, w) location.
template <typename T>
TensorPtr<T> softmax_channels(Tape<T>* tape, const TensorPtr<T>& input);

/// 2x2 max pooling, stride 2. Ties go to the first maximum in row-major
/// window order. Odd h or w is rejected.
template <typename T>
PoolResult<T> maxpool2x2(Tape<T>* tape, const TensorPtr<T>& input);

template <typename T>
TensorPtr<T> upsample_nearest2x(Tape<T>* tape, const TensorPtr<T>& input);

/// Channels of a followed by channels of b.
template <typename T>
TensorPtr<T> concat_channels(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> slice_channels(Tape<T>* tape, const TensorPtr<T>& input, std::size_t begin,
                            std::size_t count);

template <typename T>
TensorPtr<T> add(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> sub(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

/// Elementwise (Hadamard) product.
template <typename T>
TensorPtr<T> mul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> add_scalar(Tape<T>* tape, const TensorPtr<T>& input, T value);

/// Extends the bottom and right borders by mirror reflection (edge pixel not
/// repeated) up to (h, w). Handles pads larger than the source by folding.
template <typename T>
TensorPtr<T> reflect_pad(Tape<T>* tape, const TensorPtr<T>& input, std::size_t h, std::size_t w);

/// Keeps the top-left (h, w) window.
template <typename T>
TensorPtr<T> crop(Tape<T>* tape, const TensorPtr<T>& input, std::size_t h, std::size_t w);

/// Sum of all elements as a (1, 1, 1, 1) tensor.
template <typename T>
TensorPtr<T> sum(Tape<T>* tape, const TensorPtr<T>& input);

/// Mean of squared differences as a (1, 1, 1, 1) tensor.
template <typename T>
TensorPtr<T> mse_loss(Tape<T>* tape, const TensorPtr<T>& prediction, const TensorPtr<T>& target);

/// Records an activation-pattern fingerprint from relu and maxpool while
/// alive on the current thread. grad_check uses it to detect perturbations
/// that cross a kink.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  std::uint64_t fingerprint() const { return hash_; }
  void reset() { hash_ = kSeed; }

  static KinkMonitor* current();
  void mix(std::uint64_t value);

 private:
  static constexpr std::uint64_t kSeed = 1469598103934665603ULL;
  std::uint64_t hash_ = kSeed;
  KinkMonitor* previous_ = nullptr;
};

}  // namespace gtcnn
