#include "gtcnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <type_traits>

namespace gtcnn {

// ---------------------------------------------------------------------------
// configuration and layout

void GtcnnConfig::validate() const {
  if (c_in != 1 && c_in != 3) {
    throw std::invalid_argument("c_in must be 1 or 3, got " + std::to_string(c_in));
  }
  if (channels < 1) throw std::invalid_argument("channels must be >= 1");
  if (depth < 1) throw std::invalid_argument("depth must be >= 1");
  if (stages > 12) throw std::invalid_argument("stages must be <= 12");
  if (gate != GateKind::ChannelSoftmax && gate != GateKind::Sigmoid) {
    throw std::invalid_argument("unknown gate kind " + std::to_string(static_cast<int>(gate)));
  }
}

std::size_t TensorSpec::count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

namespace {

std::uint32_t u32(std::size_t v) { return static_cast<std::uint32_t>(v); }

void push_conv(std::vector<TensorSpec>& out, const std::string& name, std::size_t c_out,
               std::size_t c_in, std::size_t k, bool bias) {
  out.push_back({name + ".weight", {u32(c_out), u32(c_in), u32(k), u32(k)}, true});
  if (bias) out.push_back({name + ".bias", {u32(c_out)}, true});
}

void push_cbr(std::vector<TensorSpec>& out, const std::string& name, std::size_t c_out,
              std::size_t c_in) {
  push_conv(out, name + ".conv", c_out, c_in, 3, false);
  out.push_back({name + ".bn.gamma", {u32(c_out)}, true});
  out.push_back({name + ".bn.beta", {u32(c_out)}, true});
  out.push_back({name + ".bn.running_mean", {u32(c_out)}, false});
  out.push_back({name + ".bn.running_var", {u32(c_out)}, false});
}

void push_dcbr(std::vector<TensorSpec>& out, const std::string& name, std::size_t c_out,
               std::size_t c_in) {
  push_cbr(out, name + ".cbr0", c_out, c_in);
  push_cbr(out, name + ".cbr1", c_out, c_out);
}

std::size_t encoder_blocks(const GtcnnConfig& cfg) { return std::max<std::size_t>(cfg.stages, 1); }

std::string layer_prefix(std::size_t l) { return "gcbr" + std::to_string(l); }

}  // namespace

std::vector<TensorSpec> tensor_layout(const GtcnnConfig& config) {
  config.validate();
  const std::size_t c = config.channels;
  std::vector<TensorSpec> out;
  push_conv(out, "input", c, config.c_in, 3, true);
  for (std::size_t l = 0; l < config.depth; ++l) {
    const std::string p = layer_prefix(l);
    push_cbr(out, p + ".cbr", c, c);
    for (std::size_t s = 0; s < encoder_blocks(config); ++s) {
      push_dcbr(out, p + ".gtl.enc" + std::to_string(s), c, c);
    }
    push_dcbr(out, p + ".gtl.mid", c, c);
    for (std::size_t s = config.stages; s-- > 0;) {
      push_dcbr(out, p + ".gtl.dec" + std::to_string(s), c, 2 * c);
    }
    if (config.use_1x1) push_conv(out, p + ".gtl.proj", c, c, 1, true);
  }
  push_conv(out, "output", config.c_in, c, 3, true);
  return out;
}

std::size_t param_count(const GtcnnConfig& config) {
  std::size_t total = 0;
  for (const auto& spec : tensor_layout(config)) {
    if (spec.learnable) total += spec.count();
  }
  return total;
}

// ---------------------------------------------------------------------------
// building blocks

namespace {

template <typename T>
TensorPtr<T> apply_gate(Tape<T>* tape, const TensorPtr<T>& x, GateKind gate) {
  return gate == GateKind::Sigmoid ? sigmoid(tape, x) : softmax_channels(tape, x);
}

// Shared body for the mutable (mode-aware) and const (eval) paths.
template <typename T, typename P>
TensorPtr<T> cbr_impl(Tape<T>* tape, const TensorPtr<T>& x, P& p, Mode mode) {
  if (x->shape().c != p.weight->shape().c) {
    throw ShapeError("cbr: input has " + std::to_string(x->shape().c) + " channels, expected " +
                     std::to_string(p.weight->shape().c));
  }
  auto y = conv2d<T>(tape, x, p.weight, nullptr);
  if constexpr (std::is_const_v<P>) {
    y = batchnorm2d_eval(tape, y, p.gamma, p.beta, p.bn);
  } else {
    y = batchnorm2d(tape, y, p.gamma, p.beta, p.bn, mode);
  }
  return relu(tape, y);
}

template <typename T, typename P>
TensorPtr<T> dcbr_impl(Tape<T>* tape, const TensorPtr<T>& x, P& p, Mode mode) {
  return cbr_impl<T>(tape, cbr_impl<T>(tape, x, p.first, mode), p.second, mode);
}

template <typename T, typename P>
TensorPtr<T> gtl_impl(Tape<T>* tape, const TensorPtr<T>& f, P& p, GateKind gate, Mode mode,
                      const std::optional<GtlShift<T>>& shift, SkipRecord<T>* skips) {
  const std::size_t stages = p.decoder.size();
  if (shift && shift->stage >= stages) {
    throw std::out_of_range("modulation stage " + std::to_string(shift->stage) +
                            " out of range; texture layer has " + std::to_string(stages) +
                            " skip connections");
  }
  const Shape s = f->shape();
  const std::size_t mult = std::size_t{1} << stages;
  const std::size_t ph = (s.h + mult - 1) / mult * mult;
  const std::size_t pw = (s.w + mult - 1) / mult * mult;

  auto x = reflect_pad(tape, f, ph, pw);
  std::vector<TensorPtr<T>> enc(stages);
  if (stages == 0) {
    x = dcbr_impl<T>(tape, x, p.encoder.front(), mode);
  } else {
    for (std::size_t st = 0; st < stages; ++st) {
      enc[st] = dcbr_impl<T>(tape, x, p.encoder[st], mode);
      x = maxpool2x2(tape, enc[st]).output;
    }
  }
  if (skips) *skips = enc;
  x = dcbr_impl<T>(tape, x, p.bottleneck, mode);
  for (std::size_t st = stages; st-- > 0;) {
    auto up = upsample_nearest2x(tape, x);
    auto skip = enc[st];
    if (shift && shift->stage == st) skip = add_scalar(tape, skip, shift->lambda);
    x = dcbr_impl<T>(tape, concat_channels(tape, up, skip), p.decoder[st], mode);
  }
  if (p.projection) x = conv2d(tape, x, p.projection->weight, p.projection->bias);
  x = crop(tape, x, s.h, s.w);
  return apply_gate(tape, x, gate);
}

}  // namespace

template <typename T>
TensorPtr<T> cbr_forward(Tape<T>* tape, const TensorPtr<T>& x, CbrParams<T>& p, Mode mode) {
  return cbr_impl<T>(tape, x, p, mode);
}
template <typename T>
TensorPtr<T> cbr_forward(Tape<T>* tape, const TensorPtr<T>& x, const CbrParams<T>& p) {
  return cbr_impl<T>(tape, x, p, Mode::Eval);
}
template <typename T>
TensorPtr<T> dcbr_forward(Tape<T>* tape, const TensorPtr<T>& x, DcbrParams<T>& p, Mode mode) {
  return dcbr_impl<T>(tape, x, p, mode);
}
template <typename T>
TensorPtr<T> dcbr_forward(Tape<T>* tape, const TensorPtr<T>& x, const DcbrParams<T>& p) {
  return dcbr_impl<T>(tape, x, p, Mode::Eval);
}
template <typename T>
TensorPtr<T> gtl_forward(Tape<T>* tape, const TensorPtr<T>& f, GtlParams<T>& p, GateKind gate,
                         Mode mode, const std::optional<GtlShift<T>>& shift,
                         SkipRecord<T>* skips) {
  return gtl_impl<T>(tape, f, p, gate, mode, shift, skips);
}
template <typename T>
TensorPtr<T> gtl_forward(Tape<T>* tape, const TensorPtr<T>& f, const GtlParams<T>& p,
                         GateKind gate, const std::optional<GtlShift<T>>& shift,
                         SkipRecord<T>* skips) {
  return gtl_impl<T>(tape, f, p, gate, Mode::Eval, shift, skips);
}

// ---------------------------------------------------------------------------
// GtcnnModel

namespace {

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  TensorPtr<T> conv_weight(std::size_t c_out, std::size_t c_in, std::size_t k) {
    auto w = make_tensor<T>({c_out, c_in, k, k});
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(c_in * k * k)));
    for (T& v : w->data()) v = static_cast<T>(dist(rng_));
    w->set_requires_grad(true);
    return w;
  }

  static TensorPtr<T> vector(std::size_t c, T fill, bool learnable) {
    auto v = make_tensor<T>({1, c, 1, 1}, fill);
    v->set_requires_grad(learnable);
    return v;
  }

  ConvParams<T> conv(std::size_t c_out, std::size_t c_in, std::size_t k) {
    return {conv_weight(c_out, c_in, k), vector(c_out, T(0), true)};
  }

  CbrParams<T> cbr(std::size_t c_out, std::size_t c_in) {
    return {conv_weight(c_out, c_in, 3), vector(c_out, T(1), true), vector(c_out, T(0), true),
            BatchNormState<T>(c_out)};
  }

  DcbrParams<T> dcbr(std::size_t c_out, std::size_t c_in) {
    auto first = cbr(c_out, c_in);
    auto second = cbr(c_out, c_out);
    return {std::move(first), std::move(second)};
  }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
void emit_conv(std::vector<typename GtcnnModel<T>::NamedTensor>& out,
               std::vector<TensorSpec>::const_iterator& spec, const ConvParams<T>& p) {
  out.push_back({*spec++, p.weight});
  if (p.bias) out.push_back({*spec++, p.bias});
}

template <typename T>
void emit_cbr(std::vector<typename GtcnnModel<T>::NamedTensor>& out,
              std::vector<TensorSpec>::const_iterator& spec, const CbrParams<T>& p) {
  out.push_back({*spec++, p.weight});
  out.push_back({*spec++, p.gamma});
  out.push_back({*spec++, p.beta});
  out.push_back({*spec++, p.bn.running_mean});
  out.push_back({*spec++, p.bn.running_var});
}

template <typename T>
void emit_dcbr(std::vector<typename GtcnnModel<T>::NamedTensor>& out,
               std::vector<TensorSpec>::const_iterator& spec, const DcbrParams<T>& p) {
  emit_cbr(out, spec, p.first);
  emit_cbr(out, spec, p.second);
}

template <typename Layers, typename Fn>
void for_each_bn(Layers& layers, Fn fn) {
  auto dcbr = [&](auto& d) {
    fn(d.first.bn);
    fn(d.second.bn);
  };
  for (auto& layer : layers) {
    fn(layer.cbr.bn);
    for (auto& d : layer.gtl.encoder) dcbr(d);
    dcbr(layer.gtl.bottleneck);
    for (auto& d : layer.gtl.decoder) dcbr(d);
  }
}

}  // namespace

template <typename T>
GtcnnModel<T>::GtcnnModel(const GtcnnConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t c = config_.channels;
  Initializer<T> init(seed);
  input_ = init.conv(c, config_.c_in, 3);
  layers_.reserve(config_.depth);
  for (std::size_t l = 0; l < config_.depth; ++l) {
    GcbrParams<T> layer{init.cbr(c, c), {}};
    for (std::size_t s = 0; s < encoder_blocks(config_); ++s) {
      layer.gtl.encoder.push_back(init.dcbr(c, c));
    }
    layer.gtl.bottleneck = init.dcbr(c, c);
    // Decoder blocks are created in execution order (deepest first) so that
    // random draws follow the layout order.
    layer.gtl.decoder.resize(config_.stages);
    for (std::size_t s = config_.stages; s-- > 0;) layer.gtl.decoder[s] = init.dcbr(c, 2 * c);
    if (config_.use_1x1) layer.gtl.projection = init.conv(c, c, 1);
    layers_.push_back(std::move(layer));
  }
  output_ = init.conv(config_.c_in, c, 3);
}

template <typename T>
GtcnnModel<T> GtcnnModel<T>::clone() const {
  return convert_model<T>(*this);
}

template <typename T>
std::vector<typename GtcnnModel<T>::NamedTensor> GtcnnModel<T>::named_tensors() const {
  const auto layout = tensor_layout(config_);
  std::vector<NamedTensor> out;
  out.reserve(layout.size());
  auto spec = layout.cbegin();
  emit_conv(out, spec, input_);
  for (const auto& layer : layers_) {
    emit_cbr(out, spec, layer.cbr);
    for (const auto& d : layer.gtl.encoder) emit_dcbr(out, spec, d);
    emit_dcbr(out, spec, layer.gtl.bottleneck);
    for (std::size_t s = layer.gtl.decoder.size(); s-- > 0;) {
      emit_dcbr(out, spec, layer.gtl.decoder[s]);
    }
    if (layer.gtl.projection) emit_conv(out, spec, *layer.gtl.projection);
  }
  emit_conv(out, spec, output_);
  return out;
}

template <typename T>
std::vector<TensorPtr<T>> GtcnnModel<T>::parameters() const {
  std::vector<TensorPtr<T>> out;
  for (auto& nt : named_tensors()) {
    if (nt.spec.learnable) out.push_back(nt.tensor);
  }
  return out;
}

template <typename T>
std::size_t GtcnnModel<T>::param_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters()) total += p->size();
  return total;
}

template <typename T>
void GtcnnModel<T>::mark_statistics_initialized() {
  for_each_bn(layers_, [](BatchNormState<T>& bn) { bn.initialized = true; });
}

template <typename T>
bool GtcnnModel<T>::statistics_initialized() const {
  bool all = true;
  for_each_bn(layers_, [&](const BatchNormState<T>& bn) { all = all && bn.initialized; });
  return all;
}

template <typename T>
template <typename Self>
typename GtcnnModel<T>::Output GtcnnModel<T>::run(Self& self, Tape<T>* tape,
                                                 const TensorPtr<T>& x, Mode mode,
                                                 const std::optional<Modulation>& mod,
                                                 ForwardTrace<T>* trace) {
  const GtcnnConfig& cfg = self.config_;
  if (!x) throw std::invalid_argument("model forward: null input");
  if (x->shape().c != cfg.c_in) {
    throw ShapeError("model forward: input has " + std::to_string(x->shape().c) +
                     " channels, model expects " + std::to_string(cfg.c_in));
  }
  if (mod && mod->layer >= self.layers_.size()) {
    throw std::out_of_range("modulation layer " + std::to_string(mod->layer) +
                            " out of range; model has " + std::to_string(self.layers_.size()) +
                            " gated layers");
  }
  if (trace) {
    trace->gates.clear();
    trace->skips.clear();
  }

  auto f = relu(tape, conv2d(tape, x, self.input_.weight, self.input_.bias));
  for (std::size_t l = 0; l < self.layers_.size(); ++l) {
    auto& layer = self.layers_[l];
    std::optional<GtlShift<T>> shift;
    if (mod && mod->layer == l) {
      const double lambda = std::clamp(mod->lambda, -kMaxLambda, kMaxLambda);
      shift = GtlShift<T>{static_cast<T>(lambda), mod->stage};
    }
    SkipRecord<T> skips;
    TensorPtr<T> theta;
    TensorPtr<T> gate;
    if constexpr (std::is_const_v<Self>) {
      theta = cbr_forward(tape, f, layer.cbr);
      gate = gtl_forward(tape, f, layer.gtl, cfg.gate, shift, trace ? &skips : nullptr);
    } else {
      theta = cbr_forward(tape, f, layer.cbr, mode);
      gate = gtl_forward(tape, f, layer.gtl, cfg.gate, mode, shift, trace ? &skips : nullptr);
    }
    if (trace) {
      trace->gates.push_back(gate);
      trace->skips.push_back(std::move(skips));
    }
    f = mul(tape, theta, gate);
  }
  auto estimate = conv2d(tape, f, self.output_.weight, self.output_.bias);
  auto denoised = sub(tape, x, estimate);
  // Report what was actually removed so x - denoised == noise holds exactly;
  // it differs from the raw estimate by at most a rounding step.
  auto noise = sub(tape, x, denoised);
  return {denoised, noise};
}

template <typename T>
typename GtcnnModel<T>::Output GtcnnModel<T>::forward(Tape<T>* tape, const TensorPtr<T>& x,
                                                     Mode mode,
                                                     const std::optional<Modulation>& mod,
                                                     ForwardTrace<T>* trace) {
  if (mode == Mode::Eval) {
    return run(std::as_const(*this), tape, x, mode, mod, trace);
  }
  return run(*this, tape, x, mode, mod, trace);
}

template <typename T>
typename GtcnnModel<T>::Output GtcnnModel<T>::infer(const TensorPtr<T>& x,
                                                   const std::optional<Modulation>& mod,
                                                   ForwardTrace<T>* trace) const {
  return run(*this, nullptr, x, Mode::Eval, mod, trace);
}

#define GTCNN_INSTANTIATE_MODEL(T)                                                             \
  template TensorPtr<T> cbr_forward(Tape<T>*, const TensorPtr<T>&, CbrParams<T>&, Mode);       \
  template TensorPtr<T> cbr_forward(Tape<T>*, const TensorPtr<T>&, const CbrParams<T>&);       \
  template TensorPtr<T> dcbr_forward(Tape<T>*, const TensorPtr<T>&, DcbrParams<T>&, Mode);     \
  template TensorPtr<T> dcbr_forward(Tape<T>*, const TensorPtr<T>&, const DcbrParams<T>&);     \
  template TensorPtr<T> gtl_forward(Tape<T>*, const TensorPtr<T>&, GtlParams<T>&, GateKind,    \
                                    Mode, const std::optional<GtlShift<T>>&, SkipRecord<T>*);  \
  template TensorPtr<T> gtl_forward(Tape<T>*, const TensorPtr<T>&, const GtlParams<T>&,        \
                                    GateKind, const std::optional<GtlShift<T>>&,               \
                                    SkipRecord<T>*);                                           \
  template class GtcnnModel<T>;

GTCNN_INSTANTIATE_MODEL(float)
GTCNN_INSTANTIATE_MODEL(double)

#undef GTCNN_INSTANTIATE_MODEL

}  // namespace gtcnn
