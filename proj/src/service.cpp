#include "gtcnn/service.hpp"

#include <httplib.h>

#include <chrono>
#include <csignal>
#include <iostream>
#include <json.hpp>

#include "gtcnn/base64.hpp"
#include "gtcnn/denoise.hpp"
#include "gtcnn/pnm.hpp"
#include "gtcnn/weights_io.hpp"

namespace gtcnn {
namespace {

using nlohmann::json;

HttpReply error_reply(int status, const std::string& message, const std::string& field = {}) {
  json body{{"error", message}};
  if (!field.empty()) body["field"] = field;
  return {status, body.dump()};
}

HttpReply unavailable() { return error_reply(503, "model not loaded"); }

template <typename U>
U required_number(const json& req, const char* field) {
  if (!req.contains(field)) throw ValidationError(field, std::string("missing field ") + field);
  const auto& v = req.at(field);
  if (!v.is_number()) throw ValidationError(field, std::string(field) + " must be a number");
  if constexpr (std::is_unsigned_v<U>) {
    if (!v.is_number_unsigned()) {
      throw ValidationError(field, std::string(field) + " must be a non-negative integer");
    }
  }
  return v.get<U>();
}

constexpr const char* kPlaceholderPage =
    "<!doctype html><html><head><meta charset=\"utf-8\"><title>GTCNN</title></head>"
    "<body><p>Texture modulation service is running. Build the UI and start the server "
    "with <code>--ui-dir</code> to serve it here.</p></body></html>";

}  // namespace

ModulationService::ModulationService(std::shared_ptr<const GtcnnModel<float>> model,
                                     ServiceOptions options)
    : model_(std::move(model)), options_(std::move(options)) {}

HttpReply ModulationService::handle_health() const { return {200, "ok", "text/plain"}; }

HttpReply ModulationService::handle_model_info() const {
  if (!model_) return unavailable();
  const GtcnnConfig& cfg = model_->config();
  json stages = json::array();
  for (std::size_t s = 0; s < cfg.stages; ++s) stages.push_back(s);
  json layers = json::array();
  for (std::size_t l = 0; l < cfg.depth; ++l) layers.push_back(l);
  json body{
      {"config",
       {{"c_in", cfg.c_in},
        {"channels", cfg.channels},
        {"depth", cfg.depth},
        {"stages", cfg.stages},
        {"gate", cfg.gate == GateKind::ChannelSoftmax ? "softmax" : "sigmoid"},
        {"use_1x1", cfg.use_1x1}}},
      {"param_count", param_count(cfg)},
      {"stages", stages},
      {"layers", layers},
      {"default_stage", default_modulation_stage(cfg)},
      {"lambda_range", {-kMaxLambda, kMaxLambda}},
  };
  return {200, body.dump()};
}

HttpReply ModulationService::handle_denoise(std::string_view body) const {
  if (!model_) return unavailable();
  const auto start = std::chrono::steady_clock::now();
  json req;
  try {
    req = json::parse(body);
  } catch (const json::parse_error&) {
    return error_reply(400, "request body is not valid JSON", "body");
  }
  if (!req.is_object()) return error_reply(400, "request body must be a JSON object", "body");

  DenoiseJob job;
  try {
    if (!req.contains("image") || !req["image"].is_string()) {
      throw ValidationError("image", "image must be a base64 string");
    }
    auto bytes = base64_decode(req["image"].get<std::string>());
    if (!bytes) throw ValidationError("image", "image is not valid base64");
    try {
      job.image = decode_pnm(*bytes);
    } catch (const PnmError& e) {
      throw ValidationError("image", e.what());
    }
    if (job.image.width * job.image.height > options_.max_pixels) {
      return error_reply(413,
                         "image has " + std::to_string(job.image.width * job.image.height) +
                             " pixels; limit is " + std::to_string(options_.max_pixels),
                         "image");
    }
    job.lambda = required_number<double>(req, "lambda");
    if (req.contains("sigma") && !req["sigma"].is_null()) {
      job.sigma = required_number<double>(req, "sigma");
    }
    if (req.contains("stage") && !req["stage"].is_null()) {
      job.stage = required_number<std::size_t>(req, "stage");
    }
    if (req.contains("layer") && !req["layer"].is_null()) {
      job.layer = required_number<std::size_t>(req, "layer");
    }
    job.seed = options_.default_seed;
    if (req.contains("seed") && !req["seed"].is_null()) {
      job.seed = required_number<std::uint64_t>(req, "seed");
    }
    const DenoiseOutcome outcome = run_denoise(*model_, job);
    json resp{{"image", base64_encode(encode_pnm(outcome.denoised))},
              {"width", outcome.denoised.width},
              {"height", outcome.denoised.height}};
    // Infinite PSNR (identical images) serializes as null.
    if (outcome.psnr_noisy) resp["psnr_noisy"] = *outcome.psnr_noisy;
    if (outcome.psnr_denoised) resp["psnr_denoised"] = *outcome.psnr_denoised;
    resp["elapsed_ms"] = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - start)
                             .count();
    return {200, resp.dump()};
  } catch (const ValidationError& e) {
    return error_reply(400, e.what(), e.field());
  } catch (const json::exception& e) {
    return error_reply(400, e.what(), "body");
  }
}

void ModulationService::register_routes(httplib::Server& server) const {
  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body, reply.content_type);
  };
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
  });
  server.Get("/api/health", [this, send](const httplib::Request&, httplib::Response& res) {
    send(res, handle_health());
  });
  server.Get("/api/model", [this, send](const httplib::Request&, httplib::Response& res) {
    send(res, handle_model_info());
  });
  server.Post("/api/denoise", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, handle_denoise(req.body));
  });
  if (!options_.ui_dir.empty() && std::filesystem::is_directory(options_.ui_dir)) {
    server.set_mount_point("/", options_.ui_dir.string());
  } else {
    server.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(kPlaceholderPage, "text/html");
    });
  }
}

namespace {
httplib::Server* g_server = nullptr;
void stop_on_signal(int) {
  if (g_server) g_server->stop();
}
}  // namespace

int serve(const std::filesystem::path& model_path, const std::string& host, int port,
          const ServiceOptions& options) {
  auto model = std::make_shared<const GtcnnModel<float>>(load_weights(model_path));
  ModulationService service(model, options);
  httplib::Server server;
  // httplib's default adds SO_REUSEPORT, which lets a second server share a
  // port that is already taken; keep only SO_REUSEADDR.
  server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  service.register_routes(server);
  if (!server.bind_to_port(host, port)) {
    std::cerr << "error: cannot bind " << host << ":" << port << "\n";
    return 1;
  }
  g_server = &server;
  std::signal(SIGINT, stop_on_signal);
  std::signal(SIGTERM, stop_on_signal);
  std::cout << "serving on http://" << host << ":" << port << std::endl;
  const bool ok = server.listen_after_bind();
  g_server = nullptr;
  return ok ? 0 : 1;
}

}  // namespace gtcnn
