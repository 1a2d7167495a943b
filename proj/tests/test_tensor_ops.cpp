#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "gtcnn/ops.hpp"
#include "support/oracles.hpp"

using namespace gtcnn;

namespace {

template <typename T>
double max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return m;
}

TensorPtr<float> vec(std::vector<float> v) {
  const std::size_t c = v.size();
  auto t = make_tensor<float>({1, c, 1, 1}, std::move(v));
  return t;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction validates data length") {
    CHECK_THROWS_AS(Tensor4<float>({1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
    Tensor4<float> t({2, 3, 4, 5});
    CHECK(t.size() == 120);
    CHECK_FALSE(t.has_grad());
    t.grad();
    CHECK(t.grad().size() == 120);
  }
}

TEST_SUITE("conv2d") {
  TEST_CASE("zero input gives zero output") {
    std::mt19937_64 rng(1);
    auto x = make_tensor<float>({1, 1, 3, 3});
    auto w = oracle::random_tensor<float>({2, 1, 3, 3}, rng);
    auto b = vec({0.0f, 0.0f});
    auto y = conv2d<float>(nullptr, x, w, b);
    CHECK(y->shape() == Shape{1, 2, 3, 3});
    for (float v : y->data()) CHECK(v == 0.0f);
  }

  TEST_CASE("identity kernel reproduces the input including borders") {
    std::mt19937_64 rng(2);
    auto x = oracle::random_tensor<float>({2, 1, 5, 4}, rng);
    auto w = make_tensor<float>({1, 1, 3, 3});
    w->at(0, 0, 1, 1) = 1.0f;
    auto y = conv2d<float>(nullptr, x, w, nullptr);
    CHECK(max_abs_diff(*x, *y) == 0.0);
  }

  TEST_CASE("matches the naive six-loop oracle") {
    std::mt19937_64 rng(3);
    auto x = oracle::random_tensor<float>({1, 2, 4, 4}, rng);
    auto w = oracle::random_tensor<float>({3, 2, 3, 3}, rng);
    std::vector<float> bias{0.1f, -0.2f, 0.3f};
    auto y = conv2d<float>(nullptr, x, w, vec(bias));
    CHECK(max_abs_diff(*y, oracle::conv2d(*x, *w, &bias)) <= 1e-5);

    auto w1 = oracle::random_tensor<float>({3, 2, 1, 1}, rng);
    auto y1 = conv2d<float>(nullptr, x, w1, nullptr);
    CHECK(max_abs_diff(*y1, oracle::conv2d<float>(*x, *w1, nullptr)) <= 1e-5);
  }

  TEST_CASE("non-square and single-row images") {
    std::mt19937_64 rng(4);
    for (Shape s : {Shape{2, 3, 1, 7}, Shape{1, 2, 6, 1}, Shape{1, 1, 1, 1}, Shape{3, 2, 5, 9}}) {
      auto x = oracle::random_tensor<double>(s, rng);
      auto w = oracle::random_tensor<double>({4, s.c, 3, 3}, rng);
      auto y = conv2d<double>(nullptr, x, w, nullptr);
      CHECK(max_abs_diff(*y, oracle::conv2d<double>(*x, *w, nullptr)) <= 1e-12);
    }
  }

  TEST_CASE("shape errors name the dimension") {
    auto x = make_tensor<float>({1, 2, 4, 4});
    auto w = make_tensor<float>({3, 5, 3, 3});
    try {
      conv2d<float>(nullptr, x, w, nullptr);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("c_in") != std::string::npos);
    }
    CHECK_THROWS_AS(conv2d<float>(nullptr, x, make_tensor<float>({3, 2, 5, 5}), nullptr),
                    ShapeError);
  }
}

TEST_SUITE("batchnorm2d") {
  TEST_CASE("constant channel maps to beta") {
    auto x = make_tensor<float>({2, 2, 3, 3}, 0.7f);
    BatchNormState<float> st(2);
    auto y = batchnorm2d<float>(nullptr, x, vec({2.0f, 3.0f}), vec({0.25f, -1.5f}), st, Mode::Train);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 9; ++i) {
        CHECK(y->data()[(n * 2 + 0) * 9 + i] == doctest::Approx(0.25f));
        CHECK(y->data()[(n * 2 + 1) * 9 + i] == doctest::Approx(-1.5f));
      }
  }

  TEST_CASE("unit gamma gives zero mean and unit variance per channel") {
    std::mt19937_64 rng(5);
    auto x = oracle::random_tensor<float>({4, 3, 5, 5}, rng, -3.0, 5.0);
    BatchNormState<float> st(3);
    auto y = batchnorm2d<float>(nullptr, x, vec({1, 1, 1}), vec({0, 0, 0}), st, Mode::Train);
    const auto stats = oracle::channel_stats(*y);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(std::abs(stats.mean[c]) <= 1e-4);
      CHECK(std::abs(stats.var[c] - 1.0) <= 1e-4);
    }
  }

  TEST_CASE("matches the direct statistics oracle") {
    std::mt19937_64 rng(6);
    auto x = oracle::random_tensor<float>({4, 3, 5, 5}, rng);
    std::vector<float> g{0.5f, 1.5f, -2.0f}, b{0.1f, 0.0f, 0.3f};
    BatchNormState<float> st(3);
    auto y = batchnorm2d<float>(nullptr, x, vec(g), vec(b), st, Mode::Train);
    CHECK(max_abs_diff(*y, oracle::batchnorm_train(*x, g, b)) <= 1e-5);
  }

  TEST_CASE("running statistics follow the moving average") {
    std::mt19937_64 rng(7);
    auto x = oracle::random_tensor<double>({2, 1, 4, 4}, rng);
    BatchNormState<double> st(1);
    CHECK_FALSE(st.initialized);
    auto ones = make_tensor<double>({1, 1, 1, 1}, 1.0);
    auto zeros = make_tensor<double>({1, 1, 1, 1}, 0.0);
    CHECK_THROWS_AS(batchnorm2d_eval<double>(nullptr, x, ones, zeros, st), std::logic_error);
    batchnorm2d<double>(nullptr, x, ones, zeros, st, Mode::Train);
    CHECK(st.initialized);
    const auto stats = oracle::channel_stats(*x);
    CHECK(st.running_mean->data()[0] == doctest::Approx(0.1 * stats.mean[0]));
    CHECK(st.running_var->data()[0] == doctest::Approx(0.9 + 0.1 * stats.var[0] * 32.0 / 31.0));

    auto y = batchnorm2d_eval<double>(nullptr, x, ones, zeros, st);
    const double m = st.running_mean->data()[0];
    const double inv = 1.0 / std::sqrt(st.running_var->data()[0] + 1e-5);
    CHECK(y->data()[5] == doctest::Approx((x->data()[5] - m) * inv));
  }
}

TEST_SUITE("pointwise") {
  TEST_CASE("relu definition and masked gradient") {
    auto x = make_tensor<float>({1, 3, 1, 1}, std::vector<float>{-1, 0, 2});
    auto y = relu<float>(nullptr, x);
    CHECK(y->data()[0] == 0.0f);
    CHECK(y->data()[1] == 0.0f);
    CHECK(y->data()[2] == 2.0f);

    std::mt19937_64 rng(8);
    auto neg = oracle::random_tensor<float>({2, 2, 3, 3}, rng, -2.0, -0.1);
    neg->set_requires_grad(true);
    Tape<float> tape;
    auto loss = sum(&tape, relu(&tape, neg));
    CHECK(loss->data()[0] == 0.0f);
    tape.backward(loss);
    for (float g : neg->grad()) CHECK(g == 0.0f);
  }

  TEST_CASE("relu matches the elementwise oracle exactly") {
    std::mt19937_64 rng(9);
    auto x = oracle::random_tensor<float>({2, 3, 4, 5}, rng);
    auto y = relu<float>(nullptr, x);
    for (std::size_t i = 0; i < x->size(); ++i) CHECK(y->data()[i] == std::max(0.0f, x->data()[i]));
  }

  TEST_CASE("sigmoid values and saturation") {
    auto x = make_tensor<float>({1, 4, 1, 1}, std::vector<float>{0.0f, 1000.0f, -1000.0f, 88.0f});
    auto y = sigmoid<float>(nullptr, x);
    CHECK(y->data()[0] == 0.5f);
    CHECK(y->data()[1] == 1.0f);
    CHECK(y->data()[2] == 0.0f);
    CHECK(y->all_finite());

    std::mt19937_64 rng(10);
    auto r = oracle::random_tensor<double>({2, 3, 4, 4}, rng, -6.0, 6.0);
    auto s = sigmoid<double>(nullptr, r);
    for (std::size_t i = 0; i < r->size(); ++i) {
      CHECK(std::abs(s->data()[i] - 1.0 / (1.0 + std::exp(-r->data()[i]))) <= 1e-6);
    }
  }
}

TEST_SUITE("softmax_channels") {
  TEST_CASE("uniform logits give uniform probabilities") {
    auto x = make_tensor<float>({1, 4, 2, 2}, 3.0f);
    auto y = softmax_channels<float>(nullptr, x);
    for (float v : y->data()) CHECK(v == doctest::Approx(0.25f));
  }

  TEST_CASE("two-channel analytic case") {
    auto x = make_tensor<double>({1, 2, 1, 1}, std::vector<double>{0.0, std::log(3.0)});
    auto y = softmax_channels<double>(nullptr, x);
    CHECK(y->data()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y->data()[1] == doctest::Approx(0.75).epsilon(1e-12));
  }

  TEST_CASE("normalized and matches the direct oracle") {
    std::mt19937_64 rng(11);
    auto x = oracle::random_tensor<float>({2, 8, 3, 3}, rng, -4.0, 4.0);
    auto y = softmax_channels<float>(nullptr, x);
    const auto ref = oracle::softmax_channels(*x);
    CHECK(max_abs_diff(*y, ref) <= 1e-5);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          double total = 0.0;
          for (std::size_t c = 0; c < 8; ++c) {
            const float v = y->at(n, c, i, j);
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
            total += v;
          }
          CHECK(std::abs(total - 1.0) <= 1e-5);
        }
  }

  TEST_CASE("large logits stay finite") {
    auto x = make_tensor<float>({1, 3, 1, 1}, std::vector<float>{1000.0f, 999.0f, -1000.0f});
    auto y = softmax_channels<float>(nullptr, x);
    CHECK(y->all_finite());
  }
}

TEST_SUITE("resampling") {
  TEST_CASE("maxpool picks the window maximum and routes its gradient") {
    auto x = make_tensor<float>({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    x->set_requires_grad(true);
    Tape<float> tape;
    auto pooled = maxpool2x2(&tape, x);
    CHECK(pooled.output->data()[0] == 4.0f);
    CHECK(pooled.argmax[0] == 3u);
    tape.backward(sum(&tape, pooled.output));
    CHECK(x->grad()[3] == 1.0f);
    CHECK(x->grad()[0] + x->grad()[1] + x->grad()[2] == 0.0f);
  }

  TEST_CASE("maxpool ties go to the top-left") {
    auto x = make_tensor<float>({1, 2, 4, 4}, 1.5f);
    x->set_requires_grad(true);
    Tape<float> tape;
    auto pooled = maxpool2x2(&tape, x);
    for (float v : pooled.output->data()) CHECK(v == 1.5f);
    tape.backward(sum(&tape, pooled.output));
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          const float expected = (i % 2 == 0 && j % 2 == 0) ? 1.0f : 0.0f;
          CHECK(x->grad()[x->index(0, c, i, j)] == expected);
        }
  }

  TEST_CASE("maxpool matches the window-scan oracle and rejects odd sizes") {
    std::mt19937_64 rng(12);
    auto x = oracle::random_tensor<float>({1, 1, 6, 6}, rng);
    CHECK(max_abs_diff(*maxpool2x2<float>(nullptr, x).output, oracle::maxpool2x2(*x)) == 0.0);
    CHECK_THROWS_AS(maxpool2x2<float>(nullptr, make_tensor<float>({1, 1, 5, 4})), ShapeError);
    CHECK_THROWS_AS(maxpool2x2<float>(nullptr, make_tensor<float>({1, 1, 4, 3})), ShapeError);
  }

  TEST_CASE("upsample replicates and maxpool inverts it") {
    auto one = make_tensor<float>({1, 1, 1, 1}, 0.3f);
    auto up = upsample_nearest2x<float>(nullptr, one);
    CHECK(up->shape() == Shape{1, 1, 2, 2});
    for (float v : up->data()) CHECK(v == 0.3f);

    std::mt19937_64 rng(13);
    auto x = oracle::random_tensor<float>({2, 3, 3, 5}, rng);
    auto y = upsample_nearest2x<float>(nullptr, x);
    CHECK(max_abs_diff(*y, oracle::upsample2x(*x)) == 0.0);
    CHECK(max_abs_diff(*maxpool2x2<float>(nullptr, y).output, *x) == 0.0);
  }

  TEST_CASE("upsample backward sums the four children") {
    auto x = make_tensor<double>({1, 1, 2, 2});
    x->set_requires_grad(true);
    Tape<double> tape;
    tape.backward(sum(&tape, upsample_nearest2x(&tape, x)));
    for (double g : x->grad()) CHECK(g == 4.0);
  }

  TEST_CASE("reflect pad mirrors without repeating the edge and crop undoes it") {
    auto x = make_tensor<float>({1, 1, 1, 3}, std::vector<float>{1, 2, 3});
    auto p = reflect_pad<float>(nullptr, x, 1, 8);
    const std::vector<float> expected{1, 2, 3, 2, 1, 2, 3, 2};
    for (std::size_t i = 0; i < 8; ++i) CHECK(p->data()[i] == expected[i]);
    auto back = crop<float>(nullptr, p, 1, 3);
    CHECK(max_abs_diff(*back, *x) == 0.0);
    auto single = reflect_pad<float>(nullptr, make_tensor<float>({1, 1, 1, 1}, 7.0f), 4, 4);
    for (float v : single->data()) CHECK(v == 7.0f);
  }
}

TEST_SUITE("channels") {
  TEST_CASE("concat shape, inverse and gradient split") {
    std::mt19937_64 rng(14);
    auto a = oracle::random_tensor<float>({1, 2, 4, 4}, rng);
    auto b = oracle::random_tensor<float>({1, 3, 4, 4}, rng);
    a->set_requires_grad(true);
    b->set_requires_grad(true);
    Tape<float> tape;
    auto ab = concat_channels(&tape, a, b);
    CHECK(ab->shape() == Shape{1, 5, 4, 4});
    CHECK(max_abs_diff(*slice_channels<float>(nullptr, ab, 0, 2), *a) == 0.0);
    CHECK(max_abs_diff(*slice_channels<float>(nullptr, ab, 2, 3), *b) == 0.0);
    tape.backward(sum(&tape, ab));
    for (float g : a->grad()) CHECK(g == 1.0f);
    for (float g : b->grad()) CHECK(g == 1.0f);
  }

  TEST_CASE("concat rejects spatial mismatch") {
    CHECK_THROWS_AS(concat_channels<float>(nullptr, make_tensor<float>({1, 1, 4, 4}),
                                           make_tensor<float>({1, 1, 4, 2})),
                    ShapeError);
  }
}

TEST_SUITE("tape") {
  TEST_CASE("sum of relu on positive input has unit gradient") {
    std::mt19937_64 rng(15);
    auto x = oracle::random_tensor<float>({1, 2, 3, 3}, rng, 0.1, 2.0);
    x->set_requires_grad(true);
    Tape<float> tape;
    tape.backward(sum(&tape, relu(&tape, x)));
    for (float g : x->grad()) CHECK(g == 1.0f);
  }

  TEST_CASE("product rule") {
    std::mt19937_64 rng(16);
    auto a = oracle::random_tensor<double>({1, 2, 2, 2}, rng);
    auto b = oracle::random_tensor<double>({1, 2, 2, 2}, rng);
    a->set_requires_grad(true);
    Tape<double> tape;
    tape.backward(sum(&tape, mul(&tape, a, b)));
    for (std::size_t i = 0; i < a->size(); ++i) CHECK(a->grad()[i] == b->data()[i]);
  }

  TEST_CASE("empty tape and non-scalar loss are rejected") {
    Tape<float> tape;
    auto x = make_tensor<float>({1, 1, 1, 1});
    CHECK_THROWS_AS(tape.backward(x), std::logic_error);
    x->set_requires_grad(true);
    auto y = relu(&tape, make_tensor<float>({1, 2, 1, 1}));
    CHECK(tape.empty());  // no input requires grad, nothing recorded
    auto z = relu(&tape, x);
    auto wide = add_scalar(&tape, make_tensor<float>({1, 2, 1, 1}), 1.0f);
    CHECK_THROWS_AS(tape.backward(wide), std::invalid_argument);
    CHECK_THROWS_AS(tape.backward(make_tensor<float>({1, 1, 1, 1})), std::invalid_argument);
    CHECK_NOTHROW(tape.backward(z));
  }

  TEST_CASE("replaying accumulates, reset gives identical gradients") {
    std::mt19937_64 rng(17);
    auto x = oracle::random_tensor<double>({2, 2, 4, 4}, rng);
    auto w = oracle::random_tensor<double>({3, 2, 3, 3}, rng);
    w->set_requires_grad(true);
    auto run = [&](Tape<double>& tape) {
      return sum(&tape, relu(&tape, conv2d<double>(&tape, x, w, nullptr)));
    };
    Tape<double> tape;
    auto loss = run(tape);
    tape.backward(loss);
    const std::vector<double> once(w->grad().begin(), w->grad().end());
    tape.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(w->grad()[i] == doctest::Approx(2 * once[i]));

    tape.clear();
    CHECK(tape.empty());
    w->zero_grad();
    auto again = run(tape);
    tape.backward(again);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(w->grad()[i] == once[i]);
  }

  TEST_CASE("clear releases saved activations") {
    auto x = make_tensor<float>({1, 1, 2, 2}, 1.0f);
    x->set_requires_grad(true);
    std::weak_ptr<Tensor4<float>> watched;
    Tape<float> tape;
    {
      auto hidden = relu(&tape, x);
      watched = hidden;
      auto out = sum(&tape, hidden);
    }
    CHECK_FALSE(watched.expired());
    tape.clear();
    CHECK(watched.expired());
  }
}

TEST_SUITE("properties") {
  TEST_CASE("shape algebra on random shapes") {
    std::mt19937_64 rng(18);
    std::uniform_int_distribution<std::size_t> dim(1, 6);
    for (int trial = 0; trial < 25; ++trial) {
      const Shape s{dim(rng), dim(rng), 2 * dim(rng), 2 * dim(rng)};
      auto x = oracle::random_tensor<float>(s, rng);
      const std::size_t c_out = dim(rng);
      CHECK(conv2d<float>(nullptr, x, make_tensor<float>({c_out, s.c, 3, 3}), nullptr)->shape() ==
            Shape{s.n, c_out, s.h, s.w});
      CHECK(conv2d<float>(nullptr, x, make_tensor<float>({c_out, s.c, 1, 1}), nullptr)->shape() ==
            Shape{s.n, c_out, s.h, s.w});
      CHECK(maxpool2x2<float>(nullptr, x).output->shape() == Shape{s.n, s.c, s.h / 2, s.w / 2});
      CHECK(upsample_nearest2x<float>(nullptr, x)->shape() == Shape{s.n, s.c, 2 * s.h, 2 * s.w});
      CHECK(concat_channels<float>(nullptr, x, x)->shape() == Shape{s.n, 2 * s.c, s.h, s.w});
    }
  }

  TEST_CASE("forward and backward are bit-identical across runs") {
    auto run = [] {
      std::mt19937_64 rng(19);
      auto x = oracle::random_tensor<float>({2, 3, 8, 8}, rng);
      auto w = oracle::random_tensor<float>({3, 3, 3, 3}, rng);
      w->set_requires_grad(true);
      BatchNormState<float> st(3);
      auto g = make_tensor<float>({1, 3, 1, 1}, 1.0f);
      auto b = make_tensor<float>({1, 3, 1, 1}, 0.0f);
      Tape<float> tape;
      auto y = batchnorm2d(&tape, conv2d<float>(&tape, x, w, nullptr), g, b, st, Mode::Train);
      auto loss = sum(&tape, softmax_channels(&tape, maxpool2x2(&tape, relu(&tape, y)).output));
      auto weighted = sum(&tape, mul(&tape, y, y));
      tape.backward(weighted);
      return std::pair{std::vector<float>(y->data().begin(), y->data().end()),
                       std::vector<float>(w->grad().begin(), w->grad().end())};
    };
    const auto a = run();
    const auto b = run();
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
  }
}
