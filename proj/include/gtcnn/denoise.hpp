#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "gtcnn/model.hpp"
#include "gtcnn/pnm.hpp"

namespace gtcnn {

/// A request argument failed validation; field() names it.
class ValidationError : public std::invalid_argument {
 public:
  ValidationError(std::string field, const std::string& message)
      : std::invalid_argument(message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Stage modulated when the caller does not pick one: skip 2, or the
/// deepest recorded skip for shallower texture layers.
std::size_t default_modulation_stage(const GtcnnConfig& config);

/// Single-image denoising request shared by the CLI and the HTTP service.
struct DenoiseJob {
  PnmImage image;
  /// When set, the image is treated as clean and noise of this std is added
  /// first (demo mode); otherwise it is taken as already noisy.
  std::optional<double> sigma;
  double lambda = 0.0;
  std::optional<std::size_t> stage;
  std::size_t layer = 0;
  std::uint64_t seed = 0;
};

struct DenoiseOutcome {
  PnmImage denoised;
  std::optional<PnmImage> noisy;  ///< demo mode only
  std::optional<double> psnr_noisy;
  std::optional<double> psnr_denoised;
};

/// Eval-mode modulated forward, clamped to [0, 1]. Rejects lambda outside
/// [-0.5, 0.5] and out-of-range stage or layer with ValidationError.
DenoiseOutcome run_denoise(const GtcnnModel<float>& model, const DenoiseJob& job);

}  // namespace gtcnn
