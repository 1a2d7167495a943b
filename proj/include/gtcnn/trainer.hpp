#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <vector>

#include "gtcnn/model.hpp"
#include "gtcnn/tensor.hpp"

namespace gtcnn {

struct TrainConfig {
  double sigma = 25.0;  ///< noise std in 8-bit units
  std::size_t patch = 48;
  std::size_t stride = 48;
  std::size_t batch = 16;
  std::size_t steps = 1000;
  double lr0 = 1e-3;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Held-out evaluation period in steps; 0 evaluates only after the last step.
  std::size_t eval_every = 0;
  /// Checkpoint period in steps; 0 disables checkpoints.
  std::size_t checkpoint_every = 0;
  /// Weights path for checkpoints; the run log goes to "<path>.csv".
  std::filesystem::path checkpoint_path;

  /// Throws std::invalid_argument; `stages` bounds the minimum patch size.
  void validate(std::size_t stages) const;
};

struct RunLog {
  struct Step {
    std::size_t step = 0;  ///< 1-based
    double loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
  };
  struct Eval {
    std::size_t step = 0;
    double psnr_noisy = 0.0;
    double psnr_denoised = 0.0;
  };
  std::vector<Step> steps;
  std::vector<Eval> evals;

  /// "step,loss,lr" rows, one per completed step.
  void write_csv(const std::filesystem::path& path) const;
};

/// Raised when the loss stops being finite.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// x = y + n with n ~ N(0, (sigma / 255)^2) i.i.d.; not clamped.
template <typename T>
Tensor4<T> add_awgn(const Tensor4<T>& clean, double sigma, std::mt19937_64& rng);

/// Non-overlapping (or strided) square patches of a (1, c, h, w) image in
/// row-major grid order. Trailing pixels that do not fill a patch are dropped.
std::vector<Tensor4<float>> sample_patches(const Tensor4<float>& image, std::size_t patch,
                                           std::size_t stride);

/// 0.5 * lr0 * (1 + cos(pi * t / total)).
double cosine_lr(std::size_t t, std::size_t total, double lr0);

/// Peak signal-to-noise ratio for signals in [0, 1]; +infinity when equal.
double psnr(const Tensor4<float>& a, const Tensor4<float>& b);

Tensor4<float> clamp01(const Tensor4<float>& x);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update driven by each parameter's gradient
/// buffer. Lazily shapes `state` on first use.
template <typename T>
void adam_step(const std::vector<TensorPtr<T>>& params, AdamState<T>& state, double lr,
               const AdamHyper& hyper = {});

struct DenoiseScore {
  double psnr_noisy = 0.0;
  double psnr_denoised = 0.0;
};

/// Adds seeded noise to each clean image, denoises in eval mode and scores
/// both against the clean image after clamping to [0, 1].
std::vector<DenoiseScore> evaluate_denoising(const GtcnnModel<float>& model,
                                             const std::vector<Tensor4<float>>& clean,
                                             double sigma, std::uint64_t seed);

/// Supervised training on clean images (each (1, c, h, w)). Patches are
/// cut once, visited in a seeded shuffled order, noised per step and fitted
/// with MSE on the restored image. Returns one log entry per step.
RunLog train(GtcnnModel<float>& model, const std::vector<Tensor4<float>>& corpus,
             const TrainConfig& config, const std::vector<Tensor4<float>>* heldout = nullptr);

}  // namespace gtcnn
