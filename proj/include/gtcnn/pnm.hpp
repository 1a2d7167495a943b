#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "gtcnn/tensor.hpp"

namespace gtcnn {

class PnmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit binary netpbm image: P5 (gray) or P6 (RGB), samples interleaved.
struct PnmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> samples;

  /// (1, channels, height, width) tensor with values sample / 255.
  Tensor4<float> to_tensor() const;
  /// Rounds clamp(v, 0, 1) * 255 to the nearest sample. n must be 1.
  static PnmImage from_tensor(const Tensor4<float>& t);

  friend bool operator==(const PnmImage&, const PnmImage&) = default;
};

/// Accepts comments and arbitrary whitespace in the header; maxval must be 255.
PnmImage decode_pnm(std::span<const std::uint8_t> bytes);
/// Canonical header "P5\n<w> <h>\n255\n" (or P6) followed by the samples.
std::vector<std::uint8_t> encode_pnm(const PnmImage& image);

PnmImage read_pnm(const std::filesystem::path& path);
void write_pnm(const PnmImage& image, const std::filesystem::path& path);

}  // namespace gtcnn
