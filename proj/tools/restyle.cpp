#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "restyle/backends.hpp"
#include "restyle/camera.hpp"
#include "restyle/cubemap.hpp"
#include "restyle/gradcheck.hpp"
#include "restyle/image_io.hpp"
#include "restyle/mesh.hpp"
#include "restyle/metrics.hpp"
#include "restyle/pipeline.hpp"
#include "restyle/raster.hpp"
#include "restyle/stub_server.hpp"

using namespace restyle;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

TriangleMesh load_mesh_or_usage(const fs::path& path) {
  try {
    return load_mesh(path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

Camera load_camera(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(fmt::format("cannot open camera file {}", path.string()));
  try {
    return camera_from_json(nlohmann::json::parse(in));
  } catch (const std::exception& e) {
    throw UsageError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

PipelineConfig build_config(const std::string& config_path, const std::vector<std::string>& sets) {
  try {
    PipelineConfig c = config_path.empty() ? PipelineConfig{} : load_pipeline_config(config_path);
    for (const std::string& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument(fmt::format("--set expects key=value, got '{}'", kv));
      set_pipeline_option(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return c;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

std::vector<std::string> png_names(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError(fmt::format("not a directory: {}", dir.string()));
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png") names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

struct MainArgs {
  std::string mesh;
  std::string prompt;
  std::string config;
  std::string mode;
  std::string backend;
  std::string out;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  int threads = 0;
};

int run_main(const MainArgs& a, CLI::App& app) {
  PipelineConfig c = build_config(a.config, a.sets);
  if (app.count("--prompt")) c.prompt = a.prompt;
  if (app.count("--seed")) c.seed = a.seed;
  if (app.count("--backend")) c.backend = a.backend;
  if (app.count("--out")) c.output_dir = a.out;
  if (app.count("--threads")) c.threads = a.threads;
  if (app.count("--mode")) {
    try {
      c.mode = parse_pipeline_mode(a.mode);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  if (a.mesh.empty()) throw UsageError("a mesh path is required");
  if (c.prompt.empty()) throw UsageError("--prompt is required (flag or config file)");
  set_default_render_threads(c.threads);
  try {
    const PipelineResult r = run_pipeline(fs::path(a.mesh), c);
    std::cout << r.mesh_path.string() << "\n" << r.report_path.string() << "\n";
    return kOk;
  } catch (const PipelineError& e) {
    if (e.stage() == "load" || e.stage() == "config") throw UsageError(e.what());
    std::cerr << "restyle: " << e.what() << "\n";
    return kCheckFailed;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Restyle a scanned room mesh from a text prompt"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(0, 1);

  MainArgs m;
  app.add_option("mesh", m.mesh, "Input mesh (.ply)");
  app.add_option("--prompt", m.prompt, "Style prompt");
  app.add_option("--config", m.config, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--mode", m.mode, "cubemap | outpaint-baseline");
  app.add_option("--backend", m.backend, "stub or a service base URL");
  app.add_option("--seed", m.seed, "Random seed");
  app.add_option("--out", m.out, "Output directory");
  app.add_option("--threads", m.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--set", m.sets, "Config override key=value (repeatable)");

  auto* render_cmd = app.add_subcommand("render", "Render color PNG and depth PFM from a camera JSON");
  std::string r_mesh, r_camera, r_png = "render.png", r_pfm = "render.pfm";
  render_cmd->add_option("mesh", r_mesh)->required();
  render_cmd->add_option("camera", r_camera, "Camera JSON")->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--png", r_png, "Color output")->capture_default_str();
  render_cmd->add_option("--pfm", r_pfm, "Depth output")->capture_default_str();

  auto* cube_cmd = app.add_subcommand("cubemap", "Generate the six cubemap faces");
  std::string c_mesh, c_config, c_prompt, c_out = "cubemap", c_backend;
  std::uint64_t c_seed = 0;
  int c_res = 0, c_threads = 0;
  cube_cmd->add_option("mesh", c_mesh)->required();
  cube_cmd->add_option("--config", c_config, "INI config file")->check(CLI::ExistingFile);
  cube_cmd->add_option("--prompt", c_prompt, "Style prompt");
  cube_cmd->add_option("--seed", c_seed, "Random seed");
  cube_cmd->add_option("--resolution", c_res, "Face resolution")->check(CLI::PositiveNumber);
  cube_cmd->add_option("--backend", c_backend, "stub or a service base URL");
  cube_cmd->add_option("--threads", c_threads, "Worker threads")->check(CLI::PositiveNumber);
  cube_cmd->add_option("--out", c_out, "Output directory")->capture_default_str();

  auto* eval_cmd = app.add_subcommand("evaluate", "Text-image similarity and direction consistency");
  std::string e_orig, e_gen, e_prompt, e_out, e_backend = "stub";
  std::uint64_t e_seed = 0;
  int e_held_out = -1, e_views = 4;
  eval_cmd->add_option("original", e_orig, "Directory of original views (*.png)")->required();
  eval_cmd->add_option("generated", e_gen, "Directory of generated views, same file names")->required();
  eval_cmd->add_option("--prompt", e_prompt, "Style prompt")->required();
  eval_cmd->add_option("--seed", e_seed, "Sampling seed");
  eval_cmd->add_option("--held-out", e_held_out, "Held-out view index (default: drawn from the seed)");
  eval_cmd->add_option("--views", e_views, "Sampled views")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--backend", e_backend, "stub or a service base URL")->capture_default_str();
  eval_cmd->add_option("--out", e_out, "Write JSON here instead of stdout");

  auto* grad_cmd = app.add_subcommand("check-grad", "Finite-difference check of the renderer gradients");
  std::string g_mesh, g_camera;
  GradCheckOptions g_opts;
  grad_cmd->add_option("mesh", g_mesh)->required();
  grad_cmd->add_option("camera", g_camera, "Camera JSON")->required()->check(CLI::ExistingFile);
  grad_cmd->add_option("--max-vertices", g_opts.max_vertices, "Vertices sampled (0: all)")->capture_default_str();
  grad_cmd->add_option("--seed", g_opts.seed, "Sampling seed");

  auto* conf_cmd = app.add_subcommand("conformance", "Run the wire-protocol conformance checks against a service");
  std::string k_url;
  conf_cmd->add_option("url", k_url, "Service base URL")->required();

  auto* serve_cmd = app.add_subcommand("serve-stub", "Serve the stub backends over the wire protocol");
  std::string s_host = "127.0.0.1";
  int s_port = 8080, s_steps = 20;
  serve_cmd->add_option("--host", s_host)->capture_default_str();
  serve_cmd->add_option("--port", s_port)->capture_default_str();
  serve_cmd->add_option("--steps", s_steps, "Default diffusion steps")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*render_cmd) {
      const TriangleMesh mesh = load_mesh_or_usage(r_mesh);
      const RenderOutput out = render(mesh, load_camera(r_camera));
      write_file(r_png, encode_png8(out.color));
      write_file(r_pfm, encode_pfm(out.depth));
      std::cout << fmt::format("{} {}\n", r_png, r_pfm);
      return kOk;
    }
    if (*cube_cmd) {
      PipelineConfig c = build_config(c_config, {});
      if (cube_cmd->count("--prompt")) c.prompt = c_prompt;
      if (cube_cmd->count("--seed")) c.seed = c_seed;
      if (cube_cmd->count("--resolution")) c.cubemap_resolution = c_res;
      if (cube_cmd->count("--backend")) c.backend = c_backend;
      if (cube_cmd->count("--threads")) c.threads = c_threads;
      if (c.prompt.empty()) throw UsageError("--prompt is required (flag or config file)");
      set_default_render_threads(c.threads);
      const TriangleMesh mesh = load_mesh_or_usage(c_mesh);
      Backends backends = make_backends(c.backend);
      const CubemapRig rig = make_cubemap_rig(mesh_bounds(mesh).centroid, c.cubemap_resolution);
      CubemapConfig cc;
      cc.patch_size = c.patch_size;
      cc.stride = c.stride;
      cc.steps = c.diffusion_steps;
      cc.seed = c.seed;
      cc.threads = c.threads;
      const CubemapResult cube = generate_cubemap(mesh, rig, c.prompt, *backends.denoiser, cc);
      fs::create_directories(c_out);
      for (int f = 0; f < 6; ++f) {
        const fs::path p = fs::path(c_out) / (std::string(kCubeFaceNames[f]) + ".png");
        write_file(p, encode_png8(cube.faces[f]));
        std::cout << fmt::format("{} {}\n", p.string(), hex64(content_hash(cube.faces[f])));
      }
      for (const std::string& w : cube.warnings) std::cerr << "warning: " << w << "\n";
      return kOk;
    }
    if (*eval_cmd) {
      const std::vector<std::string> names = png_names(e_orig);
      if (names.empty()) throw UsageError(fmt::format("no .png files in {}", e_orig));
      if (png_names(e_gen) != names)
        throw UsageError("original and generated directories must hold the same .png file names");
      std::vector<ImageBuffer> original, generated;
      for (const std::string& n : names) {
        original.push_back(decode_png(read_file(fs::path(e_orig) / n)));
        generated.push_back(decode_png(read_file(fs::path(e_gen) / n)));
      }
      Backends backends = make_backends(e_backend);
      EvalOptions opts;
      opts.seed = e_seed;
      opts.held_out = e_held_out;
      opts.sampled_views = e_views;
      auto j = evaluate_scene(original, generated, e_prompt, *backends.embedder, opts).to_json();
      j["views"] = names;
      const std::string text = j.dump(2) + "\n";
      if (e_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream(e_out) << text;
      }
      return kOk;
    }
    if (*grad_cmd) {
      const TriangleMesh mesh = load_mesh_or_usage(g_mesh);
      const GradCheckReport r = check_gradients(mesh, load_camera(g_camera), g_opts);
      std::cout << r.summary() << "\n";
      return r.passed() ? kOk : kCheckFailed;
    }
    if (*conf_cmd) {
      bool all = true;
      for (const ConformanceCheck& c : run_conformance(k_url)) {
        std::cout << fmt::format("{} {}{}\n", c.passed ? "PASS" : "FAIL", c.name,
                                 c.detail.empty() ? "" : " (" + c.detail + ")");
        all = all && c.passed;
      }
      return all ? kOk : kCheckFailed;
    }
    if (*serve_cmd) {
      ProtocolServer server(make_service_stub_backends(s_steps));
      std::cerr << fmt::format("serving stub backends on http://{}:{}\n", s_host, s_port);
      server.run(s_host, s_port);
      return kOk;
    }
    return run_main(m, app);
  } catch (const UsageError& e) {
    std::cerr << "restyle: " << e.what() << "\n\n" << app.help();
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "restyle: " << e.what() << "\n";
    return kCheckFailed;
  }
}
