#include "gtcnn/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace gtcnn {
namespace {

static_assert(std::endian::native == std::endian::little,
              "weights serialization assumes a little-endian host");
static_assert(sizeof(float) == 4);

class Writer {
 public:
  template <typename U>
  void put(U value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const std::string& what) {
    U value;
    get_bytes(&value, sizeof(U), what);
    return value;
  }
  void get_bytes(void* out, std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) {
      throw WeightsFormatError("weights file truncated while reading " + what);
    }
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_weights(const GtcnnModel<float>& model) {
  const GtcnnConfig& cfg = model.config();
  const auto tensors = model.named_tensors();
  Writer w;
  w.put_bytes(kWeightsMagic, 4);
  w.put<std::uint32_t>(kWeightsVersion);
  w.put<std::uint8_t>(cfg.c_in);
  w.put<std::uint16_t>(cfg.channels);
  w.put<std::uint8_t>(cfg.depth);
  w.put<std::uint8_t>(cfg.stages);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(cfg.gate));
  w.put<std::uint8_t>(cfg.use_1x1 ? 1 : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.spec.name.size()));
    w.put_bytes(t.spec.name.data(), t.spec.name.size());
    w.put<std::uint8_t>(0);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.spec.dims.size()));
    for (auto d : t.spec.dims) w.put<std::uint32_t>(d);
    w.put_bytes(t.tensor->data().data(), t.tensor->size() * sizeof(float));
  }
  return w.take();
}

GtcnnModel<float> deserialize_weights(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kWeightsMagic, 4) != 0) {
    throw WeightsFormatError("not a weights file: bad magic");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kWeightsVersion) {
    throw WeightsFormatError("unsupported weights version " + std::to_string(version));
  }
  GtcnnConfig cfg;
  cfg.c_in = r.get<std::uint8_t>("config.c_in");
  cfg.channels = r.get<std::uint16_t>("config.channels");
  cfg.depth = r.get<std::uint8_t>("config.depth");
  cfg.stages = r.get<std::uint8_t>("config.stages");
  const auto gate = r.get<std::uint8_t>("config.gate");
  if (gate > 1) throw WeightsFormatError("invalid gate kind " + std::to_string(gate));
  cfg.gate = static_cast<GateKind>(gate);
  const auto use_1x1 = r.get<std::uint8_t>("config.use_1x1");
  if (use_1x1 > 1) throw WeightsFormatError("invalid use_1x1 flag " + std::to_string(use_1x1));
  cfg.use_1x1 = use_1x1 == 1;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw WeightsFormatError(std::string("invalid config block: ") + e.what());
  }

  GtcnnModel<float> model(cfg);
  auto tensors = model.named_tensors();
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != tensors.size()) {
    throw WeightsFormatError("tensor count " + std::to_string(count) + " does not match config (" +
                             std::to_string(tensors.size()) + ")");
  }
  for (auto& t : tensors) {
    const std::string& expected = t.spec.name;
    const auto name_len = r.get<std::uint16_t>("name length of " + expected);
    std::string name(name_len, '\0');
    r.get_bytes(name.data(), name_len, "name of " + expected);
    if (name != expected) {
      throw WeightsFormatError("unexpected tensor '" + name + "', expected '" + expected + "'");
    }
    const auto dtype = r.get<std::uint8_t>("dtype of " + name);
    if (dtype != 0) {
      throw WeightsFormatError("tensor " + name + ": unsupported dtype " + std::to_string(dtype));
    }
    const auto rank = r.get<std::uint8_t>("rank of " + name);
    if (rank != t.spec.dims.size()) {
      throw WeightsFormatError("tensor " + name + ": rank " + std::to_string(rank) +
                               ", expected " + std::to_string(t.spec.dims.size()));
    }
    for (std::size_t i = 0; i < rank; ++i) {
      const auto d = r.get<std::uint32_t>("dims of " + name);
      if (d != t.spec.dims[i]) {
        throw WeightsFormatError("tensor " + name + ": dim " + std::to_string(i) + " is " +
                                 std::to_string(d) + ", expected " +
                                 std::to_string(t.spec.dims[i]));
      }
    }
    r.get_bytes(t.tensor->data().data(), t.tensor->size() * sizeof(float), "values of " + name);
  }
  if (!r.at_end()) throw WeightsFormatError("trailing bytes after last tensor");
  model.mark_statistics_initialized();
  return model;
}

void save_weights(const GtcnnModel<float>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

GtcnnModel<float> load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open weights file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

}  // namespace gtcnn
