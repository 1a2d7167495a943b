#include "gtcnn/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

namespace gtcnn {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
bool needs_grad(const TensorPtr<T>& t) {
  return t && t->requires_grad();
}

template <typename T, typename... Rest>
bool any_needs_grad(const TensorPtr<T>& first, const Rest&... rest) {
  return (needs_grad(first) || ... || needs_grad(rest));
}

void check_dim(const char* op, const char* dim, std::size_t got, std::size_t want) {
  if (got != want) {
    throw ShapeError(std::string(op) + ": dimension " + dim + " is " + std::to_string(got) +
                     ", expected " + std::to_string(want));
  }
}

template <typename T>
void check_same_shape(const char* op, const Tensor4<T>& a, const Tensor4<T>& b) {
  check_dim(op, "n", b.shape().n, a.shape().n);
  check_dim(op, "c", b.shape().c, a.shape().c);
  check_dim(op, "h", b.shape().h, a.shape().h);
  check_dim(op, "w", b.shape().w, a.shape().w);
}

template <typename T>
void check_not_null(const char* op, const TensorPtr<T>& t) {
  if (!t) throw std::invalid_argument(std::string(op) + ": null tensor");
}

// Expands one image (c, h, w) into rows (ci, ky, kx) by columns (y, x) for a
// 3x3 kernel with zero padding 1.
template <typename T>
void im2col3x3(const T* src, std::size_t c, std::size_t h, std::size_t w, T* col) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci) {
    const T* plane = src + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col + ((ci * 3 + ky) * 3 + kx) * hw;
        const int dx = kx - 1;
        const std::size_t x_lo = dx < 0 ? 1 : 0;
        const std::size_t x_hi = dx > 0 ? w - 1 : w;
        for (std::size_t y = 0; y < h; ++y) {
          T* dst = row + y * w;
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h) || x_hi <= x_lo) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* srow = plane + static_cast<std::size_t>(sy) * w;
          if (x_lo == 1) dst[0] = T(0);
          if (x_hi == w - 1 && w > 0) dst[w - 1] = T(0);
          for (std::size_t x = x_lo; x < x_hi; ++x) dst[x] = srow[x + dx];
        }
      }
    }
  }
}

// Adjoint of im2col3x3: scatters column gradients back into (c, h, w).
template <typename T>
void col2im3x3(const T* col, std::size_t c, std::size_t h, std::size_t w, T* dst) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci) {
    T* plane = dst + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col + ((ci * 3 + ky) * 3 + kx) * hw;
        const int dx = kx - 1;
        const std::size_t x_lo = dx < 0 ? 1 : 0;
        const std::size_t x_hi = dx > 0 ? w - 1 : w;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          T* drow = plane + static_cast<std::size_t>(sy) * w;
          const T* srow = row + y * w;
          for (std::size_t x = x_lo; x < x_hi; ++x) drow[x + dx] += srow[x];
        }
      }
    }
  }
}

thread_local KinkMonitor* g_monitor = nullptr;

}  // namespace

// ---------------------------------------------------------------------------
// KinkMonitor

KinkMonitor::KinkMonitor() : previous_(g_monitor) { g_monitor = this; }
KinkMonitor::~KinkMonitor() { g_monitor = previous_; }
KinkMonitor* KinkMonitor::current() { return g_monitor; }

void KinkMonitor::mix(std::uint64_t value) {
  hash_ ^= value;
  hash_ *= 1099511628211ULL;
}

// ---------------------------------------------------------------------------
// BatchNormState

template <typename T>
BatchNormState<T>::BatchNormState(std::size_t channels)
    : running_mean(make_tensor<T>({1, channels, 1, 1}, T(0))),
      running_var(make_tensor<T>({1, channels, 1, 1}, T(1))) {}

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
TensorPtr<T> conv2d(Tape<T>* tape, const TensorPtr<T>& input, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias) {
  check_not_null("conv2d", input);
  check_not_null("conv2d", weight);
  const Shape in = input->shape();
  const Shape ws = weight->shape();
  const std::size_t k = ws.h;
  if ((k != 1 && k != 3) || ws.w != k) {
    throw ShapeError("conv2d: kernel must be 1x1 or 3x3, got " + std::to_string(ws.h) + "x" +
                     std::to_string(ws.w));
  }
  check_dim("conv2d", "c_in", ws.c, in.c);
  const std::size_t c_out = ws.n;
  if (bias) check_dim("conv2d", "bias c", bias->shape().c, c_out);

  const std::size_t hw = in.plane();
  const std::size_t rows = in.c * k * k;
  auto out = make_tensor<T>({in.n, c_out, in.h, in.w});

  ConstMatMap<T> wmat(weight->data().data(), c_out, rows);
  AlignedVector<T> col(k == 3 ? rows * hw : 0);
  for (std::size_t n = 0; n < in.n; ++n) {
    const T* src = input->data().data() + n * in.c * hw;
    MatMap<T> omat(out->data().data() + n * c_out * hw, c_out, hw);
    if (k == 3) {
      im2col3x3(src, in.c, in.h, in.w, col.data());
      omat.noalias() = wmat * ConstMatMap<T>(col.data(), rows, hw);
    } else {
      omat.noalias() = wmat * ConstMatMap<T>(src, rows, hw);
    }
    if (bias) {
      for (std::size_t co = 0; co < c_out; ++co) omat.row(co).array() += bias->data()[co];
    }
  }

  if (tape && any_needs_grad(input, weight, bias)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input, weight, bias, k, rows, c_out]() {
      const Shape in = input->shape();
      const std::size_t hw = in.plane();
      ConstMatMap<T> wmat(weight->data().data(), c_out, rows);
      AlignedVector<T> col(k == 3 ? rows * hw : 0);
      AlignedVector<T> dcol(k == 3 && needs_grad(input) ? rows * hw : 0);
      for (std::size_t n = 0; n < in.n; ++n) {
        ConstMatMap<T> dout(o->grad().data() + n * c_out * hw, c_out, hw);
        const T* src = input->data().data() + n * in.c * hw;
        if (needs_grad(bias)) {
          auto db = bias->grad();
          for (std::size_t co = 0; co < c_out; ++co) {
            const T* row = o->grad().data() + (n * c_out + co) * hw;
            T acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += row[i];
            db[co] += acc;
          }
        }
        if (needs_grad(weight)) {
          MatMap<T> dw(weight->grad().data(), c_out, rows);
          if (k == 3) {
            im2col3x3(src, in.c, in.h, in.w, col.data());
            dw.noalias() += dout * ConstMatMap<T>(col.data(), rows, hw).transpose();
          } else {
            dw.noalias() += dout * ConstMatMap<T>(src, rows, hw).transpose();
          }
        }
        if (needs_grad(input)) {
          T* dx = input->grad().data() + n * in.c * hw;
          if (k == 3) {
            MatMap<T> dc(dcol.data(), rows, hw);
            dc.noalias() = wmat.transpose() * dout;
            col2im3x3(dcol.data(), in.c, in.h, in.w, dx);
          } else {
            MatMap<T> dxm(dx, rows, hw);
            dxm.noalias() += wmat.transpose() * dout;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d

namespace {

template <typename T>
void check_bn_params(const Tensor4<T>& x, const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                     const BatchNormState<T>& state) {
  check_not_null("batchnorm2d", gamma);
  check_not_null("batchnorm2d", beta);
  check_dim("batchnorm2d", "gamma c", gamma->size(), x.shape().c);
  check_dim("batchnorm2d", "beta c", beta->size(), x.shape().c);
  check_dim("batchnorm2d", "running stats c", state.running_mean->size(), x.shape().c);
}

// y = gamma * xhat + beta, with xhat = (x - mean) * inv_std; records backward.
// When batch_stats is set the backward rule includes the dependence of mean
// and variance on the input.
template <typename T>
TensorPtr<T> bn_apply(Tape<T>* tape, const TensorPtr<T>& input, const TensorPtr<T>& gamma,
                      const TensorPtr<T>& beta, std::vector<double> mean,
                      std::vector<double> inv_std, bool batch_stats) {
  const Shape s = input->shape();
  const std::size_t hw = s.plane();
  auto out = make_tensor<T>(s);
  const T* x = input->data().data();
  T* y = out->data().data();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const double g = gamma->data()[c];
      const double b = beta->data()[c];
      const std::size_t base = (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        y[base + i] = static_cast<T>(g * ((x[base + i] - mean[c]) * inv_std[c]) + b);
      }
    }
  }
  if (tape && any_needs_grad(input, gamma, beta)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input, gamma, beta, mean = std::move(mean),
                       inv_std = std::move(inv_std), batch_stats]() {
      const Shape s = input->shape();
      const std::size_t hw = s.plane();
      const double m = static_cast<double>(s.n * hw);
      const T* x = input->data().data();
      const T* dy = o->grad().data();
      for (std::size_t c = 0; c < s.c; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
          const std::size_t base = (n * s.c + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            const double xhat = (x[base + i] - mean[c]) * inv_std[c];
            sum_dy += dy[base + i];
            sum_dy_xhat += dy[base + i] * xhat;
          }
        }
        if (needs_grad(gamma)) gamma->grad()[c] += static_cast<T>(sum_dy_xhat);
        if (needs_grad(beta)) beta->grad()[c] += static_cast<T>(sum_dy);
        if (!needs_grad(input)) continue;
        const double g = gamma->data()[c];
        T* dx = input->grad().data();
        for (std::size_t n = 0; n < s.n; ++n) {
          const std::size_t base = (n * s.c + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            if (batch_stats) {
              const double xhat = (x[base + i] - mean[c]) * inv_std[c];
              dx[base + i] += static_cast<T>(
                  g * inv_std[c] * (dy[base + i] - sum_dy / m - xhat * sum_dy_xhat / m));
            } else {
              dx[base + i] += static_cast<T>(g * inv_std[c] * dy[base + i]);
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
TensorPtr<T> batchnorm2d(Tape<T>* tape, const TensorPtr<T>& input, const TensorPtr<T>& gamma,
                         const TensorPtr<T>& beta, BatchNormState<T>& state, Mode mode) {
  if (mode == Mode::Eval) return batchnorm2d_eval(tape, input, gamma, beta, state);
  check_not_null("batchnorm2d", input);
  check_bn_params(*input, gamma, beta, state);
  const Shape s = input->shape();
  const std::size_t hw = s.plane();
  const double m = static_cast<double>(s.n * hw);
  if (m == 0) throw ShapeError("batchnorm2d: empty batch");

  std::vector<double> mean(s.c, 0.0), var(s.c, 0.0), inv_std(s.c);
  const T* x = input->data().data();
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x + (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    }
    mean[c] = acc / m;
    double sq = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x + (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = p[i] - mean[c];
        sq += d * d;
      }
    }
    var[c] = sq / m;
    inv_std[c] = 1.0 / std::sqrt(var[c] + BatchNormState<T>::kEpsilon);
  }

  constexpr double mom = BatchNormState<T>::kMomentum;
  auto rm = state.running_mean->data();
  auto rv = state.running_var->data();
  const double unbias = m > 1 ? m / (m - 1) : 1.0;
  for (std::size_t c = 0; c < s.c; ++c) {
    rm[c] = static_cast<T>(mom * rm[c] + (1.0 - mom) * mean[c]);
    rv[c] = static_cast<T>(mom * rv[c] + (1.0 - mom) * var[c] * unbias);
  }
  state.initialized = true;

  return bn_apply(tape, input, gamma, beta, std::move(mean), std::move(inv_std), true);
}

template <typename T>
TensorPtr<T> batchnorm2d_eval(Tape<T>* tape, const TensorPtr<T>& input,
                              const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                              const BatchNormState<T>& state) {
  check_not_null("batchnorm2d", input);
  check_bn_params(*input, gamma, beta, state);
  if (!state.initialized) {
    throw std::logic_error("batchnorm2d: eval mode requires running statistics from training");
  }
  const std::size_t c = input->shape().c;
  std::vector<double> mean(c), inv_std(c);
  for (std::size_t i = 0; i < c; ++i) {
    mean[i] = state.running_mean->data()[i];
    inv_std[i] = 1.0 / std::sqrt(static_cast<double>(state.running_var->data()[i]) +
                                 BatchNormState<T>::kEpsilon);
  }
  return bn_apply(tape, input, gamma, beta, std::move(mean), std::move(inv_std), false);
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

template <typename T>
TensorPtr<T> relu(Tape<T>* tape, const TensorPtr<T>& input) {
  check_not_null("relu", input);
  auto out = make_tensor<T>(input->shape());
  auto x = input->data();
  auto y = out->data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);

  if (auto* mon = KinkMonitor::current()) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      word = (word << 1) | (x[i] > T(0) ? 1u : 0u);
      if (i % 64 == 63) mon->mix(word), word = 0;
    }
    mon->mix(word);
  }

  if (tape && needs_grad(input)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input]() {
      auto x = input->data();
      auto dy = o->grad();
      auto dx = input->grad();
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > T(0)) dx[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sigmoid(Tape<T>* tape, const TensorPtr<T>& input) {
  check_not_null("sigmoid", input);
  auto out = make_tensor<T>(input->shape());
  auto x = input->data();
  auto y = out->data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      y[i] = e / (T(1) + e);
    }
  }
  if (tape && needs_grad(input)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input]() {
      auto y = o->data();
      auto dy = o->grad();
      auto dx = input->grad();
      for (std::size_t i = 0; i < y.size(); ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> softmax_channels(Tape<T>* tape, const TensorPtr<T>& input) {
  check_not_null("softmax_channels", input);
  const Shape s = input->shape();
  if (s.c == 0) throw ShapeError("softmax_channels: dimension c is 0, expected >= 1");
  const std::size_t hw = s.plane();
  auto out = make_tensor<T>(s);
  const T* x = input->data().data();
  T* y = out->data().data();
  std::vector<T> mx(hw);
  std::vector<T> denom(hw);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* xn = x + n * s.c * hw;
    T* yn = y + n * s.c * hw;
    std::copy(xn, xn + hw, mx.begin());
    for (std::size_t c = 1; c < s.c; ++c) {
      for (std::size_t i = 0; i < hw; ++i) mx[i] = std::max(mx[i], xn[c * hw + i]);
    }
    std::fill(denom.begin(), denom.end(), T(0));
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t i = 0; i < hw; ++i) {
        const T e = std::exp(xn[c * hw + i] - mx[i]);
        yn[c * hw + i] = e;
        denom[i] += e;
      }
    }
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t i = 0; i < hw; ++i) yn[c * hw + i] /= denom[i];
    }
  }
  if (tape && needs_grad(input)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input]() {
      const Shape s = input->shape();
      const std::size_t hw = s.plane();
      const T* y = o->data().data();
      const T* dy = o->grad().data();
      T* dx = input->grad().data();
      std::vector<T> dot(hw);
      for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t base = n * s.c * hw;
        std::fill(dot.begin(), dot.end(), T(0));
        for (std::size_t c = 0; c < s.c; ++c) {
          for (std::size_t i = 0; i < hw; ++i) {
            dot[i] += dy[base + c * hw + i] * y[base + c * hw + i];
          }
        }
        for (std::size_t c = 0; c < s.c; ++c) {
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t j = base + c * hw + i;
            dx[j] += y[j] * (dy[j] - dot[i]);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// resampling

template <typename T>
PoolResult<T> maxpool2x2(Tape<T>* tape, const TensorPtr<T>& input) {
  check_not_null("maxpool2x2", input);
  const Shape s = input->shape();
  if (s.h % 2 != 0) throw ShapeError("maxpool2x2: dimension h is odd (" + std::to_string(s.h) + ")");
  if (s.w % 2 != 0) throw ShapeError("maxpool2x2: dimension w is odd (" + std::to_string(s.w) + ")");
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  PoolResult<T> result{make_tensor<T>(os), std::vector<std::uint32_t>(os.size())};
  const T* x = input->data().data();
  T* y = result.output->data().data();
  std::size_t o = 0;
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const std::size_t base = p * s.h * s.w;
    for (std::size_t oy = 0; oy < os.h; ++oy) {
      for (std::size_t ox = 0; ox < os.w; ++ox, ++o) {
        const std::size_t i00 = base + (2 * oy) * s.w + 2 * ox;
        const std::size_t cand[4] = {i00, i00 + 1, i00 + s.w, i00 + s.w + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k) {
          if (x[cand[k]] > x[best]) best = cand[k];
        }
        y[o] = x[best];
        result.argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  if (auto* mon = KinkMonitor::current()) {
    for (auto idx : result.argmax) mon->mix(idx);
  }
  if (tape && needs_grad(input)) {
    Tensor4<T>* out = result.output.get();
    tape->record(result.output, [out, input, argmax = result.argmax]() {
      auto dy = out->grad();
      auto dx = input->grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
    });
  }
  return result;
}

template <typename T>
TensorPtr<T> upsample_nearest2x(Tape<T>* tape, const TensorPtr<T>& input) {
  check_not_null("upsample_nearest2x", input);
  const Shape s = input->shape();
  const Shape os{s.n, s.c, s.h * 2, s.w * 2};
  auto out = make_tensor<T>(os);
  const T* x = input->data().data();
  T* y = out->data().data();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    for (std::size_t iy = 0; iy < s.h; ++iy) {
      T* r0 = y + (p * os.h + 2 * iy) * os.w;
      T* r1 = r0 + os.w;
      const T* src = x + (p * s.h + iy) * s.w;
      for (std::size_t ix = 0; ix < s.w; ++ix) {
        r0[2 * ix] = r0[2 * ix + 1] = r1[2 * ix] = r1[2 * ix + 1] = src[ix];
      }
    }
  }
  if (tape && needs_grad(input)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input]() {
      const Shape s = input->shape();
      const std::size_t ow = s.w * 2;
      const T* dy = o->grad().data();
      T* dx = input->grad().data();
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        for (std::size_t iy = 0; iy < s.h; ++iy) {
          const T* r0 = dy + (p * s.h * 2 + 2 * iy) * ow;
          const T* r1 = r0 + ow;
          T* dst = dx + (p * s.h + iy) * s.w;
          for (std::size_t ix = 0; ix < s.w; ++ix) {
            dst[ix] += (r0[2 * ix] + r0[2 * ix + 1]) + (r1[2 * ix] + r1[2 * ix + 1]);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel plumbing

template <typename T>
TensorPtr<T> concat_channels(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  check_not_null("concat_channels", a);
  check_not_null("concat_channels", b);
  const Shape sa = a->shape();
  const Shape sb = b->shape();
  check_dim("concat_channels", "n", sb.n, sa.n);
  check_dim("concat_channels", "h", sb.h, sa.h);
  check_dim("concat_channels", "w", sb.w, sa.w);
  const std::size_t hw = sa.plane();
  auto out = make_tensor<T>({sa.n, sa.c + sb.c, sa.h, sa.w});
  for (std::size_t n = 0; n < sa.n; ++n) {
    T* dst = out->data().data() + n * (sa.c + sb.c) * hw;
    const T* pa = a->data().data() + n * sa.c * hw;
    const T* pb = b->data().data() + n * sb.c * hw;
    std::copy(pa, pa + sa.c * hw, dst);
    std::copy(pb, pb + sb.c * hw, dst + sa.c * hw);
  }
  if (tape && any_needs_grad(a, b)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, a, b]() {
      const Shape sa = a->shape();
      const Shape sb = b->shape();
      const std::size_t hw = sa.plane();
      const T* dy = o->grad().data();
      for (std::size_t n = 0; n < sa.n; ++n) {
        const T* src = dy + n * (sa.c + sb.c) * hw;
        if (needs_grad(a)) {
          T* da = a->grad().data() + n * sa.c * hw;
          for (std::size_t i = 0; i < sa.c * hw; ++i) da[i] += src[i];
        }
        if (needs_grad(b)) {
          T* db = b->grad().data() + n * sb.c * hw;
          for (std::size_t i = 0; i < sb.c * hw; ++i) db[i] += src[sa.c * hw + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> slice_channels(Tape<T>* tape, const TensorPtr<T>& input, std::size_t begin,
                            std::size_t count) {
  check_not_null("slice_channels", input);
  const Shape s = input->shape();
  if (begin + count > s.c) {
    throw ShapeError("slice_channels: channel range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") exceeds dimension c = " +
                     std::to_string(s.c));
  }
  const std::size_t hw = s.plane();
  auto out = make_tensor<T>({s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* src = input->data().data() + (n * s.c + begin) * hw;
    std::copy(src, src + count * hw, out->data().data() + n * count * hw);
  }
  if (tape && needs_grad(input)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input, begin, count]() {
      const Shape s = input->shape();
      const std::size_t hw = s.plane();
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* src = o->grad().data() + n * count * hw;
        T* dst = input->grad().data() + (n * s.c + begin) * hw;
        for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

template <typename T>
TensorPtr<T> add(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  check_not_null("add", a);
  check_not_null("add", b);
  check_same_shape("add", *a, *b);
  auto out = make_tensor<T>(a->shape());
  auto pa = a->data(), pb = b->data();
  auto y = out->data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] + pb[i];
  if (tape && any_needs_grad(a, b)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, a, b]() {
      auto dy = o->grad();
      if (needs_grad(a)) {
        auto da = a->grad();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (needs_grad(b)) {
        auto db = b->grad();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sub(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  check_not_null("sub", a);
  check_not_null("sub", b);
  check_same_shape("sub", *a, *b);
  auto out = make_tensor<T>(a->shape());
  auto pa = a->data(), pb = b->data();
  auto y = out->data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] - pb[i];
  if (tape && any_needs_grad(a, b)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, a, b]() {
      auto dy = o->grad();
      if (needs_grad(a)) {
        auto da = a->grad();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (needs_grad(b)) {
        auto db = b->grad();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> mul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  check_not_null("mul", a);
  check_not_null("mul", b);
  check_same_shape("mul", *a, *b);
  auto out = make_tensor<T>(a->shape());
  auto pa = a->data(), pb = b->data();
  auto y = out->data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] * pb[i];
  if (tape && any_needs_grad(a, b)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, a, b]() {
      auto dy = o->grad();
      if (needs_grad(a)) {
        auto da = a->grad();
        auto vb = b->data();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * vb[i];
      }
      if (needs_grad(b)) {
        auto db = b->grad();
        auto va = a->data();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * va[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> add_scalar(Tape<T>* tape, const TensorPtr<T>& input, T value) {
  check_not_null("add_scalar", input);
  auto out = make_tensor<T>(input->shape());
  auto x = input->data();
  auto y = out->data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + value;
  if (tape && needs_grad(input)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input]() {
      auto dy = o->grad();
      auto dx = input->grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// spatial padding

namespace {

std::size_t mirror_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace

template <typename T>
TensorPtr<T> reflect_pad(Tape<T>* tape, const TensorPtr<T>& input, std::size_t h,
                         std::size_t w) {
  check_not_null("reflect_pad", input);
  const Shape s = input->shape();
  if (h < s.h || w < s.w) {
    throw ShapeError("reflect_pad: target " + std::to_string(h) + "x" + std::to_string(w) +
                     " is smaller than input " + std::to_string(s.h) + "x" + std::to_string(s.w));
  }
  if (h == s.h && w == s.w) return input;
  std::vector<std::size_t> ry(h), rx(w);
  for (std::size_t y = 0; y < h; ++y) ry[y] = mirror_index(y, s.h);
  for (std::size_t x = 0; x < w; ++x) rx[x] = mirror_index(x, s.w);
  auto out = make_tensor<T>({s.n, s.c, h, w});
  const T* src = input->data().data();
  T* dst = out->data().data();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      const T* srow = src + (p * s.h + ry[y]) * s.w;
      T* drow = dst + (p * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) drow[x] = srow[rx[x]];
    }
  }
  if (tape && needs_grad(input)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input, ry = std::move(ry), rx = std::move(rx)]() {
      const Shape s = input->shape();
      const std::size_t h = ry.size(), w = rx.size();
      const T* dy = o->grad().data();
      T* dx = input->grad().data();
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        for (std::size_t y = 0; y < h; ++y) {
          T* drow = dx + (p * s.h + ry[y]) * s.w;
          const T* srow = dy + (p * h + y) * w;
          for (std::size_t x = 0; x < w; ++x) drow[rx[x]] += srow[x];
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> crop(Tape<T>* tape, const TensorPtr<T>& input, std::size_t h, std::size_t w) {
  check_not_null("crop", input);
  const Shape s = input->shape();
  if (h > s.h || w > s.w) {
    throw ShapeError("crop: target " + std::to_string(h) + "x" + std::to_string(w) +
                     " exceeds input " + std::to_string(s.h) + "x" + std::to_string(s.w));
  }
  if (h == s.h && w == s.w) return input;
  auto out = make_tensor<T>({s.n, s.c, h, w});
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      const T* srow = input->data().data() + (p * s.h + y) * s.w;
      std::copy(srow, srow + w, out->data().data() + (p * h + y) * w);
    }
  }
  if (tape && needs_grad(input)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input, h, w]() {
      const Shape s = input->shape();
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        for (std::size_t y = 0; y < h; ++y) {
          const T* srow = o->grad().data() + (p * h + y) * w;
          T* drow = input->grad().data() + (p * s.h + y) * s.w;
          for (std::size_t x = 0; x < w; ++x) drow[x] += srow[x];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
TensorPtr<T> sum(Tape<T>* tape, const TensorPtr<T>& input) {
  check_not_null("sum", input);
  double acc = 0.0;
  for (T v : input->data()) acc += v;
  auto out = make_tensor<T>({1, 1, 1, 1}, static_cast<T>(acc));
  if (tape && needs_grad(input)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, input]() {
      const T g = o->grad()[0];
      for (T& d : input->grad()) d += g;
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> mse_loss(Tape<T>* tape, const TensorPtr<T>& prediction, const TensorPtr<T>& target) {
  check_not_null("mse_loss", prediction);
  check_not_null("mse_loss", target);
  check_same_shape("mse_loss", *prediction, *target);
  auto p = prediction->data();
  auto t = target->data();
  const double count = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    acc += d * d;
  }
  auto out = make_tensor<T>({1, 1, 1, 1}, static_cast<T>(count > 0 ? acc / count : 0.0));
  if (tape && any_needs_grad(prediction, target)) {
    Tensor4<T>* o = out.get();
    tape->record(out, [o, prediction, target, count]() {
      const T scale = static_cast<T>(2.0 / count) * o->grad()[0];
      auto p = prediction->data();
      auto t = target->data();
      if (needs_grad(prediction)) {
        auto dp = prediction->grad();
        for (std::size_t i = 0; i < p.size(); ++i) dp[i] += scale * (p[i] - t[i]);
      }
      if (needs_grad(target)) {
        auto dt = target->grad();
        for (std::size_t i = 0; i < p.size(); ++i) dt[i] -= scale * (p[i] - t[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

#define GTCNN_INSTANTIATE_OPS(T)                                                               \
  template struct BatchNormState<T>;                                                            \
  template TensorPtr<T> conv2d(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&,             \
                               const TensorPtr<T>&);                                            \
  template TensorPtr<T> batchnorm2d(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&,        \
                                    const TensorPtr<T>&, BatchNormState<T>&, Mode);             \
  template TensorPtr<T> batchnorm2d_eval(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&,   \
                                         const TensorPtr<T>&, const BatchNormState<T>&);        \
  template TensorPtr<T> relu(Tape<T>*, const TensorPtr<T>&);                                    \
  template TensorPtr<T> sigmoid(Tape<T>*, const TensorPtr<T>&);                                 \
  template TensorPtr<T> softmax_channels(Tape<T>*, const TensorPtr<T>&);                        \
  template PoolResult<T> maxpool2x2(Tape<T>*, const TensorPtr<T>&);                             \
  template TensorPtr<T> upsample_nearest2x(Tape<T>*, const TensorPtr<T>&);                      \
  template TensorPtr<T> concat_channels(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&);    \
  template TensorPtr<T> slice_channels(Tape<T>*, const TensorPtr<T>&, std::size_t,             \
                                       std::size_t);                                            \
  template TensorPtr<T> add(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&);                \
  template TensorPtr<T> sub(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&);                \
  template TensorPtr<T> mul(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&);                \
  template TensorPtr<T> add_scalar(Tape<T>*, const TensorPtr<T>&, T);                           \
  template TensorPtr<T> reflect_pad(Tape<T>*, const TensorPtr<T>&, std::size_t, std::size_t);  \
  template TensorPtr<T> crop(Tape<T>*, const TensorPtr<T>&, std::size_t, std::size_t);         \
  template TensorPtr<T> sum(Tape<T>*, const TensorPtr<T>&);                                     \
  template TensorPtr<T> mse_loss(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&);

GTCNN_INSTANTIATE_OPS(float)
GTCNN_INSTANTIATE_OPS(double)

#undef GTCNN_INSTANTIATE_OPS

}  // namespace gtcnn
