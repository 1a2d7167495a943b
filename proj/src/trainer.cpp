#include "gtcnn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "gtcnn/ops.hpp"
#include "gtcnn/tape.hpp"
#include "gtcnn/weights_io.hpp"

namespace gtcnn {

void TrainConfig::validate(std::size_t stages) const {
  if (!(sigma >= 0.0)) throw std::invalid_argument("sigma must be >= 0");
  if (patch < (std::size_t{1} << stages)) {
    throw std::invalid_argument("patch must be at least 2^stages = " +
                                std::to_string(std::size_t{1} << stages));
  }
  if (stride < 1) throw std::invalid_argument("stride must be >= 1");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (!(lr0 > 0.0)) throw std::invalid_argument("lr0 must be > 0");
}

void RunLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "step,loss,lr\n";
  out.precision(9);
  for (const auto& s : steps) out << s.step << ',' << s.loss << ',' << s.lr << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

template <typename T>
Tensor4<T> add_awgn(const Tensor4<T>& clean, double sigma, std::mt19937_64& rng) {
  Tensor4<T> noisy = clean;
  noisy.drop_grad();
  noisy.set_requires_grad(false);
  if (sigma == 0.0) return noisy;
  std::normal_distribution<double> dist(0.0, sigma / 255.0);
  for (T& v : noisy.data()) v = static_cast<T>(v + dist(rng));
  return noisy;
}

template Tensor4<float> add_awgn(const Tensor4<float>&, double, std::mt19937_64&);
template Tensor4<double> add_awgn(const Tensor4<double>&, double, std::mt19937_64&);

std::vector<Tensor4<float>> sample_patches(const Tensor4<float>& image, std::size_t patch,
                                           std::size_t stride) {
  const Shape s = image.shape();
  if (s.n != 1) throw ShapeError("sample_patches: expected a single image, got n = " +
                                 std::to_string(s.n));
  if (patch == 0 || stride == 0) throw std::invalid_argument("sample_patches: zero patch or stride");
  if (s.h < patch || s.w < patch) {
    throw std::invalid_argument("sample_patches: image " + std::to_string(s.h) + "x" +
                                std::to_string(s.w) + " is smaller than patch " +
                                std::to_string(patch));
  }
  std::vector<Tensor4<float>> out;
  for (std::size_t y = 0; y + patch <= s.h; y += stride) {
    for (std::size_t x = 0; x + patch <= s.w; x += stride) {
      Tensor4<float> p({1, s.c, patch, patch});
      for (std::size_t c = 0; c < s.c; ++c) {
        for (std::size_t r = 0; r < patch; ++r) {
          for (std::size_t q = 0; q < patch; ++q) p.at(0, c, r, q) = image.at(0, c, y + r, x + q);
        }
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

double cosine_lr(std::size_t t, std::size_t total, double lr0) {
  if (total == 0) throw std::invalid_argument("cosine_lr: total steps must be > 0");
  if (t > total) throw std::out_of_range("cosine_lr: step beyond schedule");
  const double lr = 0.5 * lr0 *
                    (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) /
                                    static_cast<double>(total)));
  return std::max(lr, 0.0);
}

double psnr(const Tensor4<float>& a, const Tensor4<float>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("psnr: shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  }
  double acc = 0.0;
  auto pa = a.data();
  auto pb = b.data();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
    acc += d * d;
  }
  const double mse = pa.empty() ? 0.0 : acc / static_cast<double>(pa.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

Tensor4<float> clamp01(const Tensor4<float>& x) {
  Tensor4<float> out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = std::clamp(in[i], 0.0f, 1.0f);
  return out;
}

template <typename T>
void adam_step(const std::vector<TensorPtr<T>>& params, AdamState<T>& state, double lr,
               const AdamHyper& hyper) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->size(), 0.0);
      state.v[i].assign(params[i]->size(), 0.0);
    }
    state.t = 0;
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.has_grad()) continue;
    auto theta = p.data();
    auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g[j];
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] = static_cast<T>(theta[j] - lr * m_hat / (std::sqrt(v_hat) + hyper.eps));
    }
  }
}

template void adam_step(const std::vector<TensorPtr<float>>&, AdamState<float>&, double,
                        const AdamHyper&);
template void adam_step(const std::vector<TensorPtr<double>>&, AdamState<double>&, double,
                        const AdamHyper&);

std::vector<DenoiseScore> evaluate_denoising(const GtcnnModel<float>& model,
                                             const std::vector<Tensor4<float>>& clean,
                                             double sigma, std::uint64_t seed) {
  std::vector<DenoiseScore> scores;
  scores.reserve(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    std::mt19937_64 rng(seed + i);
    auto noisy = std::make_shared<Tensor4<float>>(add_awgn(clean[i], sigma, rng));
    auto out = model.infer(noisy);
    scores.push_back({psnr(clamp01(*noisy), clean[i]), psnr(clamp01(*out.denoised), clean[i])});
  }
  return scores;
}

namespace {

Tensor4<float> stack(const std::vector<Tensor4<float>>& patches,
                     const std::vector<std::size_t>& order, std::size_t begin,
                     std::size_t count) {
  const Shape ps = patches.front().shape();
  Tensor4<float> out({count, ps.c, ps.h, ps.w});
  const std::size_t per = ps.c * ps.h * ps.w;
  for (std::size_t b = 0; b < count; ++b) {
    const auto& src = patches[order[(begin + b) % order.size()]].data();
    std::copy(src.begin(), src.end(), out.data().begin() + b * per);
  }
  return out;
}

DenoiseScore mean_score(const std::vector<DenoiseScore>& scores) {
  DenoiseScore m;
  for (const auto& s : scores) {
    m.psnr_noisy += s.psnr_noisy;
    m.psnr_denoised += s.psnr_denoised;
  }
  m.psnr_noisy /= static_cast<double>(scores.size());
  m.psnr_denoised /= static_cast<double>(scores.size());
  return m;
}

}  // namespace

RunLog train(GtcnnModel<float>& model, const std::vector<Tensor4<float>>& corpus,
             const TrainConfig& config, const std::vector<Tensor4<float>>* heldout) {
  config.validate(model.config().stages);
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");

  std::vector<Tensor4<float>> patches;
  for (const auto& image : corpus) {
    if (image.shape().c != model.config().c_in) {
      throw ShapeError("train: image has " + std::to_string(image.shape().c) +
                       " channels, model expects " + std::to_string(model.config().c_in));
    }
    auto cut = sample_patches(image, config.patch, config.stride);
    for (auto& p : cut) patches.push_back(std::move(p));
  }

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(patches.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  const auto params = model.parameters();
  AdamState<float> adam;
  const AdamHyper hyper{config.beta1, config.beta2, config.eps};
  RunLog log;
  log.steps.reserve(config.steps);
  const auto start = std::chrono::steady_clock::now();

  auto evaluate = [&](std::size_t step) {
    if (!heldout || heldout->empty()) return;
    const auto m = mean_score(evaluate_denoising(model, *heldout, config.sigma, config.seed + 1));
    log.evals.push_back({step, m.psnr_noisy, m.psnr_denoised});
  };

  Tape<float> tape;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const std::size_t count = std::min(config.batch, patches.size());
    if (cursor + count > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    auto clean = std::make_shared<Tensor4<float>>(stack(patches, order, cursor, count));
    cursor += count;
    auto noisy = std::make_shared<Tensor4<float>>(add_awgn(*clean, config.sigma, rng));

    const double lr = cosine_lr(step - 1, config.steps, config.lr0);
    for (const auto& p : params) p->zero_grad();
    auto out = model.forward(&tape, noisy, Mode::Train);
    auto loss = mse_loss(&tape, out.denoised, clean);
    const double loss_value = loss->data()[0];
    if (!std::isfinite(loss_value)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << " (lr " << lr << ")";
      throw TrainingError(msg.str());
    }
    tape.backward(loss);
    tape.clear();
    adam_step(params, adam, lr, hyper);

    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - start)
                          .count();
    log.steps.push_back({step, loss_value, lr, ms});

    if (config.eval_every > 0 && step % config.eval_every == 0 && step != config.steps) {
      evaluate(step);
    }
    if (config.checkpoint_every > 0 && !config.checkpoint_path.empty() &&
        (step % config.checkpoint_every == 0 || step == config.steps)) {
      save_weights(model, config.checkpoint_path);
      log.write_csv(config.checkpoint_path.string() + ".csv");
    }
  }
  evaluate(config.steps);
  return log;
}

}  // namespace gtcnn
