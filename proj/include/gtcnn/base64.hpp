#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gtcnn {

/// RFC 4648 standard alphabet with '=' padding.
std::string base64_encode(std::span<const std::uint8_t> bytes);

/// Strict decode: rejects characters outside the alphabet, bad padding,
/// nonzero bits under the padding and lengths that are not a multiple of four.
std::optional<std::vector<std::uint8_t>> base64_decode(std::string_view text);

}  // namespace gtcnn
