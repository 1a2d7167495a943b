#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

#include "gtcnn/model.hpp"

namespace httplib {
class Server;
}

namespace gtcnn {

struct ServiceOptions {
  std::size_t max_pixels = 1'048'576;
  /// Directory of built UI assets mounted at "/"; a placeholder page is
  /// served when empty or missing.
  std::filesystem::path ui_dir;
  /// Noise seed for demo-mode requests that do not carry one.
  std::uint64_t default_seed = 0;
};

struct HttpReply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// JSON facade over one immutable model. Handlers are const and safe to run
/// concurrently; each request allocates its own activations.
class ModulationService {
 public:
  /// A null model makes every model-backed endpoint answer 503.
  ModulationService(std::shared_ptr<const GtcnnModel<float>> model, ServiceOptions options = {});

  /// Body: {"image": base64 PNM, "lambda": r, "stage"?: i, "layer"?: i,
  ///        "sigma"?: r, "seed"?: u}.
  HttpReply handle_denoise(std::string_view body) const;
  HttpReply handle_model_info() const;
  HttpReply handle_health() const;

  /// Registers /api/denoise, /api/model, /api/health, CORS and static UI.
  void register_routes(httplib::Server& server) const;

 private:
  std::shared_ptr<const GtcnnModel<float>> model_;
  ServiceOptions options_;
};

/// Loads the weights, then listens until the process is signalled. Returns
/// a nonzero exit code when the address cannot be bound.
int serve(const std::filesystem::path& model_path, const std::string& host, int port,
          const ServiceOptions& options);

}  // namespace gtcnn
