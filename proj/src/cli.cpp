#include "gtcnn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <numeric>

#include "gtcnn/denoise.hpp"
#include "gtcnn/model.hpp"
#include "gtcnn/pnm.hpp"
#include "gtcnn/service.hpp"
#include "gtcnn/trainer.hpp"
#include "gtcnn/weights_io.hpp"

namespace gtcnn {
namespace {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;

/// Argument or input problem reported with exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string format_psnr(double db) {
  if (std::isinf(db)) return "inf";
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << db;
  return s.str();
}

bool is_pnm_path(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_pnm_path(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("no PGM/PPM images in " + dir.string());
  return files;
}

GateKind parse_gate(const std::string& name) {
  if (name == "softmax") return GateKind::ChannelSoftmax;
  if (name == "sigmoid") return GateKind::Sigmoid;
  throw UsageError("unknown gate '" + name + "' (softmax or sigmoid)");
}

GtcnnConfig checked_config(int c_in, int channels, int depth, int stages, const std::string& gate,
                           bool use_1x1) {
  if (c_in < 1 || c_in > 255 || channels < 1 || channels > 65535 || depth < 1 || depth > 255 ||
      stages < 0 || stages > 255) {
    throw UsageError("model dimensions out of range");
  }
  GtcnnConfig cfg{static_cast<std::uint8_t>(c_in), static_cast<std::uint16_t>(channels),
                  static_cast<std::uint8_t>(depth), static_cast<std::uint8_t>(stages),
                  parse_gate(gate), use_1x1};
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

// ---------------------------------------------------------------------------

struct ParamsArgs {
  int c_in = 1;
  int channels = 64;
  int depth = 1;
  int stages = 4;
  bool use_1x1 = false;
};

int cmd_params(const ParamsArgs& a, std::ostream& out) {
  const auto cfg = checked_config(a.c_in, a.channels, a.depth, a.stages, "softmax", a.use_1x1);
  const std::size_t n = param_count(cfg);
  out << n << " (" << n / 1000 << "k)\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string out;
  int channels = 64;
  int depth = 1;
  int stages = 4;
  bool use_1x1 = false;
  std::string gate = "softmax";
  TrainConfig train;
};

int cmd_train(TrainArgs a, std::ostream& out, std::ostream& err) {
  const auto files = list_images(a.data);
  std::vector<Tensor4<float>> images;
  std::vector<fs::path> used;
  for (const auto& f : files) {
    try {
      auto img = read_pnm(f);
      if (img.width < a.train.patch || img.height < a.train.patch) {
        err << "warning: skipping " << f.string() << " (smaller than patch)\n";
        continue;
      }
      images.push_back(img.to_tensor());
      used.push_back(f);
    } catch (const PnmError& e) {
      err << "warning: skipping " << e.what() << "\n";
    }
  }
  if (images.empty()) throw UsageError("no usable training images in " + a.data);
  const std::size_t c_in = images.front().shape().c;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape().c != c_in) {
      throw UsageError("mixed gray and color images: " + used[i].string());
    }
  }
  const auto cfg = checked_config(static_cast<int>(c_in), a.channels, a.depth, a.stages, a.gate,
                                  a.use_1x1);
  try {
    a.train.validate(cfg.stages);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  // The last image (by name) is held out when there is more than one.
  std::vector<Tensor4<float>> heldout;
  if (images.size() > 1) {
    heldout.push_back(std::move(images.back()));
    images.pop_back();
  } else {
    heldout.push_back(images.front());
    err << "warning: single training image; held-out score reuses it\n";
  }

  GtcnnModel<float> model(cfg, a.train.seed);
  const fs::path out_path = a.out;
  a.train.checkpoint_path = out_path;
  RunLog log = train(model, images, a.train, &heldout);
  save_weights(model, out_path);
  log.write_csv(out_path.string() + ".csv");

  const auto& last = log.evals.back();
  out << "steps " << log.steps.size() << ", final loss " << log.steps.back().loss << "\n";
  out << "held-out PSNR noisy " << format_psnr(last.psnr_noisy) << " dB, denoised "
      << format_psnr(last.psnr_denoised) << " dB\n";
  out << "wrote " << out_path.string() << " and " << out_path.string() << ".csv\n";
  return kExitOk;
}

struct DenoiseArgs {
  std::string model;
  std::string input;
  std::string output;
  std::optional<double> sigma;
  double lambda = 0.0;
  std::optional<std::size_t> stage;
  std::size_t layer = 0;
  std::uint64_t seed = 0;
};

int cmd_denoise(const DenoiseArgs& a, std::ostream& out) {
  const auto model = load_weights(a.model);
  DenoiseJob job{read_pnm(a.input), a.sigma, a.lambda, a.stage, a.layer, a.seed};
  const auto result = run_denoise(model, job);
  write_pnm(result.denoised, a.output);
  if (result.psnr_noisy) {
    out << "PSNR noisy " << format_psnr(*result.psnr_noisy) << " dB, denoised "
        << format_psnr(*result.psnr_denoised) << " dB\n";
  }
  return kExitOk;
}

struct EvalArgs {
  std::string model;
  std::string data;
  double sigma = 25.0;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  if (!(a.sigma >= 0.0)) throw UsageError("sigma must be >= 0");
  const auto model = load_weights(a.model);
  const auto files = list_images(a.data);
  std::size_t skipped = 0;
  double sum_noisy = 0.0, sum_denoised = 0.0;
  std::size_t rows = 0;
  out << std::left << std::setw(32) << "image" << std::setw(12) << "noisy" << "denoised\n";
  for (std::size_t i = 0; i < files.size(); ++i) {
    Tensor4<float> clean;
    try {
      const auto img = read_pnm(files[i]);
      if (img.channels != model.config().c_in) {
        throw PnmError(files[i].string() + ": channel count does not match model");
      }
      clean = img.to_tensor();
    } catch (const PnmError& e) {
      err << "warning: skipping " << e.what() << "\n";
      ++skipped;
      continue;
    }
    const auto score = evaluate_denoising(model, {clean}, a.sigma, a.seed + i).front();
    out << std::setw(32) << files[i].filename().string() << std::setw(12)
        << format_psnr(score.psnr_noisy) << format_psnr(score.psnr_denoised) << "\n";
    sum_noisy += score.psnr_noisy;
    sum_denoised += score.psnr_denoised;
    ++rows;
  }
  if (rows > 0) {
    out << std::setw(32) << "mean" << std::setw(12) << format_psnr(sum_noisy / rows)
        << format_psnr(sum_denoised / rows) << "\n";
  }
  out << "evaluated " << rows << ", skipped " << skipped << "\n";
  return rows > 0 ? kExitOk : kExitFailure;
}

struct ServeArgs {
  std::string model;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t max_pixels = 1'048'576;
  std::string ui_dir;
  std::uint64_t seed = 0;
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gated texture CNN image denoiser"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  ParamsArgs params;
  auto* params_cmd = app.add_subcommand("params", "Print the learned parameter count");
  params_cmd->add_option("--c-in", params.c_in, "Image channels (1 or 3)");
  params_cmd->add_option("--channels", params.channels, "Feature channels");
  params_cmd->add_option("--depth", params.depth, "Gated CBR layers");
  params_cmd->add_option("--stages", params.stages, "Texture-layer pooling stages");
  params_cmd->add_flag("--use-1x1", params.use_1x1, "1x1 conv after the last decoder block");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train on a directory of clean PGM/PPM images");
  train_cmd->add_option("--data", train_args.data, "Image directory")->required();
  train_cmd->add_option("--out", train_args.out, "Weights output path")->required();
  train_cmd->add_option("--channels", train_args.channels, "Feature channels");
  train_cmd->add_option("--depth", train_args.depth, "Gated CBR layers");
  train_cmd->add_option("--stages", train_args.stages, "Texture-layer pooling stages");
  train_cmd->add_flag("--use-1x1", train_args.use_1x1, "1x1 conv after the last decoder block");
  train_cmd->add_option("--gate", train_args.gate, "softmax or sigmoid");
  train_cmd->add_option("--sigma", train_args.train.sigma, "Noise std (8-bit units)");
  train_cmd->add_option("--patch", train_args.train.patch, "Patch side");
  train_cmd->add_option("--stride", train_args.train.stride, "Patch stride");
  train_cmd->add_option("--batch", train_args.train.batch, "Patches per step");
  train_cmd->add_option("--steps", train_args.train.steps, "Optimizer steps");
  train_cmd->add_option("--lr", train_args.train.lr0, "Initial learning rate");
  train_cmd->add_option("--seed", train_args.train.seed, "RNG seed");
  train_cmd->add_option("--checkpoint-every", train_args.train.checkpoint_every,
                        "Checkpoint period in steps (0 = off)");
  train_cmd->add_option("--eval-every", train_args.train.eval_every,
                        "Held-out evaluation period in steps (0 = end only)");

  DenoiseArgs denoise_args;
  auto* denoise_cmd = app.add_subcommand("denoise", "Denoise one image");
  denoise_cmd->add_option("--model", denoise_args.model, "Weights file")->required();
  denoise_cmd->add_option("--input", denoise_args.input, "Input PGM/PPM")->required();
  denoise_cmd->add_option("--output", denoise_args.output, "Output PGM/PPM")->required();
  denoise_cmd->add_option("--sigma", denoise_args.sigma,
                          "Add noise of this std first and report PSNR (demo mode)");
  denoise_cmd->add_option("--lambda", denoise_args.lambda, "Skip shift in [-0.5, 0.5]");
  denoise_cmd->add_option("--stage", denoise_args.stage, "Skip connection to shift (default min(2, stages - 1))");
  denoise_cmd->add_option("--layer", denoise_args.layer, "Gated layer to modulate");
  denoise_cmd->add_option("--seed", denoise_args.seed, "Noise seed (demo mode)");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Mean PSNR over a directory of clean images");
  eval_cmd->add_option("--model", eval_args.model, "Weights file")->required();
  eval_cmd->add_option("--data", eval_args.data, "Image directory")->required();
  eval_cmd->add_option("--sigma", eval_args.sigma, "Noise std (8-bit units)");
  eval_cmd->add_option("--seed", eval_args.seed, "Noise seed");

  ServeArgs serve_args;
  auto* serve_cmd = app.add_subcommand("serve", "Serve the modulation API and UI");
  serve_cmd->add_option("--model", serve_args.model, "Weights file")->required();
  serve_cmd->add_option("--host", serve_args.host, "Bind address");
  serve_cmd->add_option("--port", serve_args.port, "Port");
  serve_cmd->add_option("--max-pixels", serve_args.max_pixels, "Largest accepted image");
  serve_cmd->add_option("--ui-dir", serve_args.ui_dir, "Built UI assets");
  serve_cmd->add_option("--seed", serve_args.seed, "Noise seed for demo requests without one");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  try {
    if (params_cmd->parsed()) return cmd_params(params, out);
    if (train_cmd->parsed()) return cmd_train(train_args, out, err);
    if (denoise_cmd->parsed()) return cmd_denoise(denoise_args, out);
    if (eval_cmd->parsed()) return cmd_eval(eval_args, out, err);
    if (serve_cmd->parsed()) {
      return serve(serve_args.model, serve_args.host, serve_args.port,
                   {serve_args.max_pixels, serve_args.ui_dir, serve_args.seed});
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ValidationError& e) {
    err << "error: " << e.field() << ": " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitValidation;
}

}  // namespace gtcnn
