#include "gtcnn/denoise.hpp"

#include <cmath>
#include <random>

#include "gtcnn/trainer.hpp"

namespace gtcnn {

std::size_t default_modulation_stage(const GtcnnConfig& config) {
  if (config.stages == 0) return 0;
  return std::min<std::size_t>(2, config.stages - 1u);
}

DenoiseOutcome run_denoise(const GtcnnModel<float>& model, const DenoiseJob& job) {
  const GtcnnConfig& cfg = model.config();
  if (!std::isfinite(job.lambda) || std::abs(job.lambda) > kMaxLambda) {
    throw ValidationError("lambda", "lambda must lie in [-0.5, 0.5]");
  }
  if (job.sigma && !(*job.sigma >= 0.0 && std::isfinite(*job.sigma))) {
    throw ValidationError("sigma", "sigma must be a finite value >= 0");
  }
  if (job.layer >= cfg.depth) {
    throw ValidationError("layer", "layer must be < " + std::to_string(cfg.depth));
  }
  if (job.image.channels != cfg.c_in) {
    throw ValidationError("image", "image has " + std::to_string(job.image.channels) +
                                       " channels, model expects " + std::to_string(cfg.c_in));
  }
  std::optional<Modulation> mod;
  if (cfg.stages > 0) {
    const std::size_t stage = job.stage.value_or(default_modulation_stage(cfg));
    if (stage >= cfg.stages) {
      throw ValidationError("stage", "stage must be < " + std::to_string(cfg.stages));
    }
    mod = Modulation{job.lambda, stage, job.layer};
  } else if (job.stage || job.lambda != 0.0) {
    throw ValidationError("stage", "model has no skip connections to modulate");
  }

  DenoiseOutcome outcome;
  const Tensor4<float> input = job.image.to_tensor();
  auto x = std::make_shared<Tensor4<float>>(input);
  if (job.sigma) {
    std::mt19937_64 rng(job.seed);
    *x = add_awgn(input, *job.sigma, rng);
    outcome.noisy = PnmImage::from_tensor(*x);
  }
  const auto denoised = clamp01(*model.infer(x, mod).denoised);
  outcome.denoised = PnmImage::from_tensor(denoised);
  if (job.sigma) {
    outcome.psnr_noisy = psnr(clamp01(*x), input);
    outcome.psnr_denoised = psnr(denoised, input);
  }
  return outcome;
}

}  // namespace gtcnn
