#include "gtcnn/pnm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace gtcnn {

Tensor4<float> PnmImage::to_tensor() const {
  Tensor4<float> t({1, channels, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        t.at(0, c, y, x) = static_cast<float>(samples[(y * width + x) * channels + c]) / 255.0f;
      }
    }
  }
  return t;
}

PnmImage PnmImage::from_tensor(const Tensor4<float>& t) {
  const Shape s = t.shape();
  if (s.n != 1) throw ShapeError("PnmImage::from_tensor: n is " + std::to_string(s.n) + ", expected 1");
  if (s.c != 1 && s.c != 3) {
    throw ShapeError("PnmImage::from_tensor: c is " + std::to_string(s.c) + ", expected 1 or 3");
  }
  PnmImage img{s.w, s.h, s.c, std::vector<std::uint8_t>(s.size())};
  for (std::size_t y = 0; y < s.h; ++y) {
    for (std::size_t x = 0; x < s.w; ++x) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const float v = std::clamp(t.at(0, c, y, x), 0.0f, 1.0f);
        img.samples[(y * s.w + x) * s.c + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return img;
}

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto ch = bytes_[pos_];
      if (ch == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
      } else if (std::isspace(ch)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* field) {
    skip_space_and_comments();
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > (std::size_t{1} << 31)) throw PnmError(std::string("PNM ") + field + " too large");
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw PnmError(std::string("PNM header: missing ") + field);
    return value;
  }

  /// Exactly one whitespace byte separates maxval from the raster.
  void single_whitespace() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw PnmError("PNM header: expected whitespace after maxval");
    }
    ++pos_;
  }

  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 2;
};

}  // namespace

PnmImage decode_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw PnmError("unsupported image: expected binary PGM (P5) or PPM (P6) magic");
  }
  PnmImage img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader r(bytes);
  img.width = r.number("width");
  img.height = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (maxval != 255) throw PnmError("unsupported PNM maxval " + std::to_string(maxval) + " (need 255)");
  if (img.width == 0 || img.height == 0) throw PnmError("PNM image has zero size");
  r.single_whitespace();
  const std::size_t need = img.width * img.height * img.channels;
  const std::size_t have = bytes.size() - r.pos();
  if (have < need) {
    throw PnmError("PNM raster too short: " + std::to_string(have) + " of " +
                   std::to_string(need) + " bytes");
  }
  img.samples.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos()),
                     bytes.begin() + static_cast<std::ptrdiff_t>(r.pos() + need));
  return img;
}

std::vector<std::uint8_t> encode_pnm(const PnmImage& image) {
  if (image.channels != 1 && image.channels != 3) throw PnmError("PNM channels must be 1 or 3");
  if (image.samples.size() != image.width * image.height * image.channels) {
    throw PnmError("PNM sample count does not match dimensions");
  }
  const std::string header = std::string(image.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(image.width) + " " + std::to_string(image.height) +
                             "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.samples.begin(), image.samples.end());
  return out;
}

PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PnmError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_pnm(bytes);
  } catch (const PnmError& e) {
    throw PnmError(path.string() + ": " + e.what());
  }
}

void write_pnm(const PnmImage& image, const std::filesystem::path& path) {
  const auto bytes = encode_pnm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PnmError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw PnmError("failed writing " + path.string());
}

}  // namespace gtcnn
