#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gtcnn/ops.hpp"
#include "gtcnn/tape.hpp"
#include "gtcnn/tensor.hpp"

namespace gtcnn {

/// Nonlinearity turning the texture-layer output into a gate.
enum class GateKind : std::uint8_t {
  ChannelSoftmax = 0,
  Sigmoid = 1,
};

struct GtcnnConfig {
  std::uint8_t c_in = 1;        ///< image channels (1 or 3)
  std::uint16_t channels = 64;  ///< feature channels
  std::uint8_t depth = 1;       ///< number of gated CBR layers
  std::uint8_t stages = 4;      ///< pooling stages in each texture layer
  GateKind gate = GateKind::ChannelSoftmax;
  bool use_1x1 = false;  ///< 1x1 conv after the texture layer's last decoder block

  /// Throws std::invalid_argument describing the first bad field.
  void validate() const;

  static GtcnnConfig d1() { return {}; }
  static GtcnnConfig d3() { return {1, 64, 3, 4, GateKind::ChannelSoftmax, false}; }
  static GtcnnConfig d6() { return {1, 64, 6, 4, GateKind::ChannelSoftmax, true}; }

  friend bool operator==(const GtcnnConfig&, const GtcnnConfig&) = default;
};

/// Shift of one encoder skip tensor inside one gated layer's texture layer.
struct Modulation {
  double lambda = 0.0;
  std::size_t stage = 2;
  std::size_t layer = 0;
};

inline constexpr double kMaxLambda = 0.5;

/// Name, logical dimensions and role of one stored tensor.
struct TensorSpec {
  std::string name;
  std::vector<std::uint32_t> dims;
  bool learnable = true;

  std::size_t count() const;
};

/// Every tensor of the model in the fixed topological order used for
/// construction and serialization, running statistics included.
std::vector<TensorSpec> tensor_layout(const GtcnnConfig& config);

/// Learned parameters only (conv weights, conv biases, batch-norm scale and
/// shift). Running statistics are excluded.
std::size_t param_count(const GtcnnConfig& config);

template <typename T>
struct ConvParams {
  TensorPtr<T> weight;
  TensorPtr<T> bias;  ///< null for convolutions feeding batch norm
};

template <typename T>
struct CbrParams {
  TensorPtr<T> weight;
  TensorPtr<T> gamma;
  TensorPtr<T> beta;
  BatchNormState<T> bn;
};

template <typename T>
struct DcbrParams {
  CbrParams<T> first;
  CbrParams<T> second;
};

template <typename T>
struct GtlParams {
  /// One block per pooling stage; a single block when there are no stages.
  std::vector<DcbrParams<T>> encoder;
  DcbrParams<T> bottleneck;
  /// decoder[s] consumes the stage-s skip; run from s = S - 1 down to 0.
  std::vector<DcbrParams<T>> decoder;
  std::optional<ConvParams<T>> projection;
};

template <typename T>
struct GcbrParams {
  CbrParams<T> cbr;
  GtlParams<T> gtl;
};

/// Encoder skips e_0 .. e_{S-1} of one texture layer, on the padded grid,
/// as captured before any modulation shift.
template <typename T>
using SkipRecord = std::vector<TensorPtr<T>>;

/// Optional per-layer capture of gates and skips from a forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<TensorPtr<T>> gates;
  std::vector<SkipRecord<T>> skips;
};

template <typename T>
struct GtlShift {
  T lambda;
  std::size_t stage;
};

// Building blocks. The non-const overloads honour `mode` (train mode updates
// running statistics); the const overloads always run in eval mode.

template <typename T>
TensorPtr<T> cbr_forward(Tape<T>* tape, const TensorPtr<T>& x, CbrParams<T>& p, Mode mode);
template <typename T>
TensorPtr<T> cbr_forward(Tape<T>* tape, const TensorPtr<T>& x, const CbrParams<T>& p);

template <typename T>
TensorPtr<T> dcbr_forward(Tape<T>* tape, const TensorPtr<T>& x, DcbrParams<T>& p, Mode mode);
template <typename T>
TensorPtr<T> dcbr_forward(Tape<T>* tape, const TensorPtr<T>& x, const DcbrParams<T>& p);

/// Returns the gate t = gate(texture(f)), cropped to f's spatial size.
template <typename T>
TensorPtr<T> gtl_forward(Tape<T>* tape, const TensorPtr<T>& f, GtlParams<T>& p, GateKind gate,
                         Mode mode, const std::optional<GtlShift<T>>& shift = std::nullopt,
                         SkipRecord<T>* skips = nullptr);
template <typename T>
TensorPtr<T> gtl_forward(Tape<T>* tape, const TensorPtr<T>& f, const GtlParams<T>& p,
                         GateKind gate, const std::optional<GtlShift<T>>& shift = std::nullopt,
                         SkipRecord<T>* skips = nullptr);

/// Gated texture network denoiser: input conv + ReLU, a chain of gated CBR
/// layers, an output conv estimating the noise, and the global residual.
template <typename T>
class GtcnnModel {
 public:
  struct Output {
    TensorPtr<T> denoised;  ///< x - noise
    TensorPtr<T> noise;     ///< x - denoised, the estimate as actually removed
  };

  /// Kaiming-normal conv weights from `seed`, gamma 1, beta 0, biases 0.
  explicit GtcnnModel(const GtcnnConfig& config, std::uint64_t seed = 0);

  // Parameters are shared_ptr-held; copies would alias them, so only deep
  // clones are offered.
  GtcnnModel(const GtcnnModel&) = delete;
  GtcnnModel& operator=(const GtcnnModel&) = delete;
  GtcnnModel(GtcnnModel&&) noexcept = default;
  GtcnnModel& operator=(GtcnnModel&&) noexcept = default;

  GtcnnModel clone() const;

  const GtcnnConfig& config() const { return config_; }

  /// Full forward. Train mode uses batch statistics and updates the running
  /// averages. Lambda in `mod` is clamped to [-0.5, 0.5].
  Output forward(Tape<T>* tape, const TensorPtr<T>& x, Mode mode,
                 const std::optional<Modulation>& mod = std::nullopt,
                 ForwardTrace<T>* trace = nullptr);

  /// Eval-mode forward that never mutates the model; safe to call
  /// concurrently from several threads.
  Output infer(const TensorPtr<T>& x, const std::optional<Modulation>& mod = std::nullopt,
               ForwardTrace<T>* trace = nullptr) const;

  struct NamedTensor {
    TensorSpec spec;
    TensorPtr<T> tensor;
  };
  /// All stored tensors in layout order.
  std::vector<NamedTensor> named_tensors() const;
  /// Learnable parameters in layout order.
  std::vector<TensorPtr<T>> parameters() const;
  std::size_t param_count() const;

  /// Marks every batch-norm layer as having usable running statistics.
  void mark_statistics_initialized();
  bool statistics_initialized() const;

  ConvParams<T>& input_layer() { return input_; }
  ConvParams<T>& output_layer() { return output_; }
  std::vector<GcbrParams<T>>& layers() { return layers_; }
  const std::vector<GcbrParams<T>>& layers() const { return layers_; }

 private:
  template <typename Self>
  static Output run(Self& self, Tape<T>* tape, const TensorPtr<T>& x, Mode mode,
                    const std::optional<Modulation>& mod, ForwardTrace<T>* trace);

  GtcnnConfig config_;
  ConvParams<T> input_;
  std::vector<GcbrParams<T>> layers_;
  ConvParams<T> output_;
};

extern template class GtcnnModel<float>;
extern template class GtcnnModel<double>;

/// Copies a model into another scalar type, running statistics included.
template <typename To, typename From>
GtcnnModel<To> convert_model(const GtcnnModel<From>& src) {
  GtcnnModel<To> dst(src.config());
  auto from = src.named_tensors();
  auto to = dst.named_tensors();
  for (std::size_t i = 0; i < from.size(); ++i) {
    auto in = from[i].tensor->data();
    auto out = to[i].tensor->data();
    for (std::size_t j = 0; j < in.size(); ++j) out[j] = static_cast<To>(in[j]);
  }
  if (src.statistics_initialized()) dst.mark_statistics_initialized();
  return dst;
}

}  // namespace gtcnn
