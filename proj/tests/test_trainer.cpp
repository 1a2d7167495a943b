#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>

#include "gtcnn/trainer.hpp"
#include "gtcnn/weights_io.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace gtcnn;
namespace fs = std::filesystem;

namespace {

GtcnnConfig tiny() { return {1, 4, 1, 1, GateKind::ChannelSoftmax, false}; }

TrainConfig quick(std::size_t steps) {
  TrainConfig tc;
  tc.patch = 16;
  tc.stride = 16;
  tc.batch = 4;
  tc.steps = steps;
  tc.seed = 3;
  return tc;
}

}  // namespace

TEST_SUITE("noise") {
  TEST_CASE("zero sigma is the identity") {
    std::mt19937_64 rng(1);
    auto y = oracle::random_tensor<float>({1, 1, 8, 8}, rng, 0.0, 1.0);
    CHECK(add_awgn(*y, 0.0, rng).storage() == y->storage());
  }

  TEST_CASE("sample moments match sigma / 255 and values are not clamped") {
    Tensor4<double> y({1, 1, 256, 256}, 0.5);
    std::mt19937_64 rng(2);
    const auto x = add_awgn(y, 50.0, rng);
    double mean = 0.0, sq = 0.0, lo = 1.0, hi = 0.0;
    for (double v : x.data()) {
      mean += v - 0.5;
      sq += (v - 0.5) * (v - 0.5);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double n = static_cast<double>(x.size());
    mean /= n;
    const double sd = std::sqrt(sq / n - mean * mean);
    CHECK(std::abs(mean) < 3e-3);
    CHECK(std::abs(sd - 50.0 / 255.0) < 3e-3);
    CHECK(lo < 0.0);
    CHECK(hi > 1.0);
  }

  TEST_CASE("seeded noise is reproducible") {
    Tensor4<float> y({1, 1, 16, 16}, 0.5f);
    std::mt19937_64 a(9), b(9), c(10);
    CHECK(add_awgn(y, 25.0, a).storage() == add_awgn(y, 25.0, b).storage());
    CHECK(add_awgn(y, 25.0, a).storage() != add_awgn(y, 25.0, c).storage());
  }
}

TEST_SUITE("patches") {
  TEST_CASE("grid count and content") {
    std::mt19937_64 rng(3);
    auto img = oracle::random_tensor<float>({1, 1, 50, 37}, rng);
    const auto p = sample_patches(*img, 16, 16);
    CHECK(p.size() == 3 * 2);
    CHECK(p[1].at(0, 0, 0, 0) == img->at(0, 0, 0, 16));
    CHECK(p[2].at(0, 0, 5, 7) == img->at(0, 0, 16 + 5, 7));
    const auto strided = sample_patches(*img, 16, 8);
    CHECK(strided.size() == 5 * 3);
  }

  TEST_CASE("images smaller than a patch are rejected") {
    CHECK_THROWS_AS(sample_patches(Tensor4<float>({1, 1, 8, 40}), 16, 16), std::invalid_argument);
  }
}

TEST_SUITE("schedule and metrics") {
  TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(0, 100, 1e-3) == doctest::Approx(1e-3));
    CHECK(cosine_lr(50, 100, 1e-3) == doctest::Approx(5e-4));
    CHECK(cosine_lr(100, 100, 1e-3) == doctest::Approx(0.0));
    CHECK(cosine_lr(25, 100, 1.0) ==
          doctest::Approx(0.5 * (1.0 + std::cos(std::numbers::pi / 4.0))));
    CHECK_THROWS(cosine_lr(0, 0, 1e-3));
  }

  TEST_CASE("cosine schedule is non-increasing and non-negative") {
    for (std::size_t total : {1u, 7u, 1000u}) {
      double prev = std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t <= total; ++t) {
        const double lr = cosine_lr(t, total, 0.01);
        CHECK(lr <= prev);
        CHECK(lr >= 0.0);
        prev = lr;
      }
    }
  }

  TEST_CASE("psnr") {
    Tensor4<float> a({1, 1, 2, 2}, 0.5f);
    CHECK(std::isinf(psnr(a, a)));
    Tensor4<float> b({1, 1, 2, 2}, 0.6f);
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));
    CHECK_THROWS_AS(psnr(a, Tensor4<float>({1, 1, 2, 3})), ShapeError);
  }

  TEST_CASE("clamp01") {
    Tensor4<float> a({1, 1, 1, 3}, std::vector<float>{-1.0f, 0.25f, 7.0f});
    const auto c = clamp01(a);
    CHECK(std::ranges::equal(c.data(), std::vector<float>{0.0f, 0.25f, 1.0f}));
  }
}

TEST_SUITE("adam") {
  TEST_CASE("matches a scalar reference over several steps") {
    auto p = make_tensor<double>({1, 1, 1, 2}, std::vector<double>{1.0, -2.0});
    p->set_requires_grad(true);
    AdamState<double> state;
    const double grads[3][2] = {{0.5, -1.0}, {0.1, 2.0}, {-0.3, 0.0}};
    double ref[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 3; ++t) {
      p->grad()[0] = grads[t - 1][0];
      p->grad()[1] = grads[t - 1][1];
      adam_step<double>({p}, state, 0.01);
      for (int j = 0; j < 2; ++j) {
        const double g = grads[t - 1][j];
        m[j] = 0.9 * m[j] + 0.1 * g;
        v[j] = 0.999 * v[j] + 0.001 * g * g;
        const double mh = m[j] / (1 - std::pow(0.9, t));
        const double vh = v[j] / (1 - std::pow(0.999, t));
        ref[j] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      }
      CHECK(p->data()[0] == doctest::Approx(ref[0]).epsilon(1e-12));
      CHECK(p->data()[1] == doctest::Approx(ref[1]).epsilon(1e-12));
    }
    CHECK(state.t == 3);
  }

  TEST_CASE("first step moves each coordinate by about lr against the gradient sign") {
    auto p = make_tensor<float>({1, 1, 1, 3}, 0.0f);
    p->grad()[0] = 3.0f;
    p->grad()[1] = -1e-3f;
    p->grad()[2] = 0.0f;
    AdamState<float> state;
    adam_step<float>({p}, state, 0.1);
    CHECK(p->data()[0] == doctest::Approx(-0.1));
    CHECK(p->data()[1] == doctest::Approx(0.1).epsilon(1e-4));
    CHECK(p->data()[2] == 0.0f);
  }
}

TEST_SUITE("training loop") {
  TEST_CASE("loss falls and the log has one entry per step") {
    GtcnnModel<float> m(tiny(), 4);
    const auto data = synthetic::corpus(2, 32, 32, 1);
    auto tc = quick(60);
    tc.lr0 = 3e-3;
    const auto log = train(m, data, tc);
    REQUIRE(log.steps.size() == 60);
    for (std::size_t i = 0; i < log.steps.size(); ++i) CHECK(log.steps[i].step == i + 1);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
      head += log.steps[i].loss;
      tail += log.steps[50 + i].loss;
    }
    CHECK(tail < head);
    CHECK(log.steps.front().lr == doctest::Approx(3e-3));
    CHECK(m.statistics_initialized());
  }

  TEST_CASE("same seed gives identical weights") {
    const auto data = synthetic::corpus(2, 32, 32, 2);
    GtcnnModel<float> a(tiny(), 5), b(tiny(), 5);
    train(a, data, quick(8));
    // Shift the heap so the second run sees different buffer addresses.
    std::vector<std::unique_ptr<char[]>> ballast;
    for (std::size_t i = 1; i < 64; ++i) ballast.emplace_back(new char[i * 24 + 8]);
    train(b, data, quick(8));
    CHECK(serialize_weights(a) == serialize_weights(b));
  }

  TEST_CASE("checkpoints and held-out evaluation") {
    const auto dir = fs::temp_directory_path() / ("gtcnn_train_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const auto data = synthetic::corpus(2, 32, 32, 3);
    const auto heldout = synthetic::corpus(1, 24, 24, 99);
    GtcnnModel<float> m(tiny(), 6);
    auto tc = quick(6);
    tc.checkpoint_every = 4;
    tc.checkpoint_path = dir / "ckpt.gtcw";
    tc.eval_every = 3;
    const auto log = train(m, data, tc, &heldout);
    CHECK(fs::exists(tc.checkpoint_path));
    CHECK(load_weights(tc.checkpoint_path).config() == tiny());
    std::ifstream csv(dir / "ckpt.gtcw.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "step,loss,lr");
    std::size_t rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 6);
    REQUIRE(log.evals.size() == 2);
    CHECK(log.evals[0].step == 3);
    CHECK(log.evals[1].step == 6);
    CHECK(std::isfinite(log.evals[1].psnr_denoised));
    fs::remove_all(dir);
  }

  TEST_CASE("non-finite loss aborts with the step and learning rate") {
    auto data = synthetic::corpus(1, 16, 16, 4);
    data[0].at(0, 0, 3, 3) = std::numeric_limits<float>::quiet_NaN();
    GtcnnModel<float> m(tiny(), 7);
    try {
      train(m, data, quick(3));
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("step 1") != std::string::npos);
      CHECK(std::string(e.what()).find("lr") != std::string::npos);
    }
  }

  TEST_CASE("configuration errors") {
    GtcnnModel<float> m({1, 4, 1, 3, GateKind::ChannelSoftmax, false}, 8);
    const auto data = synthetic::corpus(1, 32, 32, 5);
    auto tc = quick(1);
    tc.patch = 4;
    CHECK_THROWS_AS(train(m, data, tc), std::invalid_argument);
    CHECK_THROWS_AS(train(m, {}, quick(1)), std::invalid_argument);
    auto neg = quick(1);
    neg.sigma = -1.0;
    CHECK_THROWS_AS(train(m, data, neg), std::invalid_argument);
  }

  TEST_CASE("evaluation uses seeded noise per image") {
    GtcnnModel<float> m(tiny(), 9);
    m.mark_statistics_initialized();
    const std::vector<Tensor4<float>> data(2, Tensor4<float>({1, 1, 32, 32}, 0.5f));
    const auto a = evaluate_denoising(m, data, 25.0, 11);
    const auto b = evaluate_denoising(m, data, 25.0, 11);
    REQUIRE(a.size() == 2);
    CHECK(a[0].psnr_noisy == b[0].psnr_noisy);
    CHECK(a[1].psnr_denoised == b[1].psnr_denoised);
    CHECK(a[0].psnr_noisy == doctest::Approx(20.17).epsilon(0.03));
    CHECK(a[0].psnr_noisy != a[1].psnr_noisy);
  }
}
