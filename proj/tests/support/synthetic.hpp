#pragma once

// Procedural grayscale scenes for training runs without an image dataset:
// a smooth background with overlapping discs, rectangles and stripe patches.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "gtcnn/tensor.hpp"

namespace gtcnn::synthetic {

inline Tensor4<float> scene(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor4<float> img({1, 1, h, w});

  const double gx = u(rng) - 0.5, gy = u(rng) - 0.5, base = 0.3 + 0.4 * u(rng);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      img.at(0, 0, i, j) = static_cast<float>(base + 0.4 * (gx * j / w + gy * i / h));

  const int shapes = 6 + static_cast<int>(u(rng) * 6);
  for (int k = 0; k < shapes; ++k) {
    const double cx = u(rng) * w, cy = u(rng) * h;
    const double r = 4.0 + u(rng) * 0.25 * std::min(h, w);
    const double level = u(rng);
    const int kind = static_cast<int>(u(rng) * 3);
    const double period = 3.0 + u(rng) * 6.0, angle = u(rng) * 3.14159;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double dx = j - cx, dy = i - cy;
        bool inside = false;
        double v = level;
        if (kind == 0) {
          inside = dx * dx + dy * dy <= r * r;
        } else if (kind == 1) {
          inside = std::abs(dx) <= r && std::abs(dy) <= 0.6 * r;
        } else {
          inside = std::abs(dx) <= r && std::abs(dy) <= r;
          const double t = dx * std::cos(angle) + dy * std::sin(angle);
          v = 0.5 + 0.35 * std::sin(2.0 * 3.14159 * t / period);
        }
        if (inside) img.at(0, 0, i, j) = static_cast<float>(v);
      }
  }
  for (float& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

inline std::vector<Tensor4<float>> corpus(std::size_t count, std::size_t h, std::size_t w,
                                          std::uint64_t seed) {
  std::vector<Tensor4<float>> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(scene(h, w, seed * 7919 + i));
  return out;
}

}  // namespace gtcnn::synthetic
