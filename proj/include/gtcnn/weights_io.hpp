#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "gtcnn/model.hpp"

namespace gtcnn {

/// Malformed or mismatched weights file.
class WeightsFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kWeightsMagic[4] = {'G', 'T', 'C', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

// Little-endian layout:
//   "GTCW" | u32 version | u8 c_in, u16 channels, u8 depth, u8 stages,
//   u8 gate, u8 use_1x1 | u32 tensor count | per tensor: u16 name length,
//   name bytes, u8 dtype (0 = f32), u8 rank, rank x u32 dims, raw values.
// Tensors appear in tensor_layout() order, running statistics included.

std::vector<std::uint8_t> serialize_weights(const GtcnnModel<float>& model);

/// Validates magic, version, config, names, dtypes and shapes. Nothing is
/// returned unless the whole buffer parses.
GtcnnModel<float> deserialize_weights(const std::vector<std::uint8_t>& bytes);

void save_weights(const GtcnnModel<float>& model, const std::filesystem::path& path);
GtcnnModel<float> load_weights(const std::filesystem::path& path);

}  // namespace gtcnn
