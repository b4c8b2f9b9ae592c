#include "restyle/pipeline.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <optional>

#include <fmt/format.h>

#include "restyle/camera.hpp"
#include "restyle/coverage.hpp"
#include "restyle/cubemap.hpp"
#include "restyle/hashing.hpp"
#include "restyle/image_io.hpp"
#include "restyle/optimizer.hpp"
#include "restyle/raster.hpp"

#ifndef RESTYLE_GIT_DESCRIBE
#define RESTYLE_GIT_DESCRIBE "unknown"
#endif

namespace restyle {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw std::invalid_argument(fmt::format("config key '{}': cannot parse '{}'", key, value));
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw std::invalid_argument(fmt::format("config key '{}': expected true/false, got '{}'", key, value));
}

using Setter = std::function<void(PipelineConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter number(T PipelineConfig::*field) {
  return [field](PipelineConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<T>(k, v); };
}

Setter flag(bool PipelineConfig::*field) {
  return [field](PipelineConfig& c, const std::string& k, const std::string& v) { c.*field = parse_bool(k, v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"prompt", [](PipelineConfig& c, const std::string&, const std::string& v) { c.prompt = v; }},
      {"seed", number(&PipelineConfig::seed)},
      {"mode", [](PipelineConfig& c, const std::string&, const std::string& v) { c.mode = parse_pipeline_mode(v); }},
      {"backend", [](PipelineConfig& c, const std::string&, const std::string& v) { c.backend = v; }},
      {"output_dir", [](PipelineConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }},
      {"threads", number(&PipelineConfig::threads)},
      {"cubemap.resolution", number(&PipelineConfig::cubemap_resolution)},
      {"cubemap.patch_size", number(&PipelineConfig::patch_size)},
      {"cubemap.stride", number(&PipelineConfig::stride)},
      {"cubemap.diffusion_steps", number(&PipelineConfig::diffusion_steps)},
      {"cubemap.dump_steps", flag(&PipelineConfig::dump_steps)},
      {"outpaint.cameras", number(&PipelineConfig::outpaint_cameras)},
      {"outpaint.width", number(&PipelineConfig::view_width)},
      {"outpaint.height", number(&PipelineConfig::view_height)},
      {"outpaint.fov_deg", number(&PipelineConfig::view_fov_deg)},
      {"outpaint.ball_fraction", number(&PipelineConfig::ball_fraction)},
      {"outpaint.pitch_max_deg", number(&PipelineConfig::pitch_max_deg)},
      {"outpaint.dilate_px", number(&PipelineConfig::dilate_px)},
      {"outpaint.baseline_fit_steps", number(&PipelineConfig::baseline_fit_steps)},
      {"optimize.texture_init_steps", number(&PipelineConfig::texture_init_steps)},
      {"optimize.steps", number(&PipelineConfig::optimizer_steps)},
      {"optimize.learning_rate", number(&PipelineConfig::learning_rate)},
      {"optimize.tau", number(&PipelineConfig::tau)},
      {"optimize.geometry_weight", number(&PipelineConfig::geometry_weight)},
      {"optimize.cameras_per_step", number(&PipelineConfig::cameras_per_step)},
      {"optimize.checkpoint_every", number(&PipelineConfig::checkpoint_every)},
      {"optimize.inverse_depth", flag(&PipelineConfig::inverse_depth)},
  };
  return table;
}

struct StageRecord {
  std::string name;
  std::vector<int> lines;
  std::string description;
  double seconds = 0.0;
  ordered_json details = ordered_json::object();
};

class StageLog {
 public:
  template <typename Fn>
  void run(std::string name, std::vector<int> lines, std::string description, Fn fn) {
    StageRecord rec{std::move(name), std::move(lines), std::move(description), 0.0, ordered_json::object()};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn(rec.details);
    } catch (const PipelineError&) {
      throw;
    } catch (const std::exception& e) {
      throw PipelineError(rec.name, e.what());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    records_.push_back(std::move(rec));
  }

  [[nodiscard]] ordered_json stages() const {
    auto out = ordered_json::array();
    for (const StageRecord& r : records_) {
      ordered_json j;
      j["stage"] = r.name;
      j["algorithm_lines"] = r.lines;
      j["description"] = r.description;
      j["details"] = r.details;
      out.push_back(j);
    }
    return out;
  }

  [[nodiscard]] ordered_json timings() const {
    ordered_json out = ordered_json::object();
    double total = 0.0;
    for (const StageRecord& r : records_) {
      out[r.name] = r.seconds;
      total += r.seconds;
    }
    out["total"] = total;
    return out;
  }

 private:
  std::vector<StageRecord> records_;
};

struct GeneratedView {
  Camera camera;
  ImageBuffer image;
  std::string source;
};

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << j.dump(2) << "\n";
}

OptimizerConfig base_optimizer(const PipelineConfig& c) {
  OptimizerConfig o;
  o.learning_rate = c.learning_rate;
  o.tau = c.tau;
  o.geometry_weight = c.geometry_weight;
  o.inverse_depth = c.inverse_depth;
  o.seed = c.seed;
  o.threads = c.threads;
  return o;
}

TriangleMesh fit_colors(const TriangleMesh& mesh, const std::vector<GeneratedView>& views, int steps,
                        const PipelineConfig& config) {
  SupervisionSet sup;
  for (const GeneratedView& v : views) sup.push_back(SupervisionView{v.camera, v.image, {}, {}});
  OptimizerConfig o = base_optimizer(config);
  o.steps = steps;
  o.update_positions = false;
  o.cameras_per_step = static_cast<int>(sup.size());
  return optimize(mesh, sup, o).mesh;
}

}  // namespace

const char* pipeline_mode_name(PipelineMode mode) {
  return mode == PipelineMode::Cubemap ? "cubemap" : "outpaint-baseline";
}

PipelineMode parse_pipeline_mode(const std::string& name) {
  if (name == "cubemap") return PipelineMode::Cubemap;
  if (name == "outpaint-baseline") return PipelineMode::OutpaintBaseline;
  throw std::invalid_argument(fmt::format("unknown mode '{}' (expected cubemap or outpaint-baseline)", name));
}

void PipelineConfig::validate() const {
  const auto require = [](bool ok, const char* key, const char* rule) {
    if (!ok) throw std::invalid_argument(fmt::format("config key '{}' must be {}", key, rule));
  };
  require(!prompt.empty(), "prompt", "non-empty");
  require(threads >= 1, "threads", ">= 1");
  require(cubemap_resolution >= 2, "cubemap.resolution", ">= 2");
  require(patch_size >= 0 && patch_size <= cubemap_resolution, "cubemap.patch_size", "in [0, resolution]");
  require(stride >= 0, "cubemap.stride", ">= 0");
  require(diffusion_steps >= 0, "cubemap.diffusion_steps", ">= 0");
  require(outpaint_cameras >= 0, "outpaint.cameras", ">= 0");
  require(view_width >= 3 && view_height >= 3, "outpaint.width/height", ">= 3");
  require(view_fov_deg > 0.0 && view_fov_deg < 180.0, "outpaint.fov_deg", "in (0, 180)");
  require(ball_fraction >= 0.0 && ball_fraction <= 1.0, "outpaint.ball_fraction", "in [0, 1]");
  require(pitch_max_deg >= 0.0 && pitch_max_deg < 90.0, "outpaint.pitch_max_deg", "in [0, 90)");
  require(dilate_px >= 0, "outpaint.dilate_px", ">= 0");
  require(baseline_fit_steps >= 0, "outpaint.baseline_fit_steps", ">= 0");
  require(texture_init_steps >= 0, "optimize.texture_init_steps", ">= 0");
  require(optimizer_steps >= 0, "optimize.steps", ">= 0");
  require(learning_rate > 0.0, "optimize.learning_rate", "> 0");
  require(tau > 0.0, "optimize.tau", "> 0");
  require(geometry_weight >= 0.0, "optimize.geometry_weight", ">= 0");
  require(cameras_per_step >= 1, "optimize.cameras_per_step", ">= 1");
  require(checkpoint_every >= 0, "optimize.checkpoint_every", ">= 0");
  require(mode == PipelineMode::Cubemap || outpaint_cameras >= 1, "outpaint.cameras", ">= 1 in outpaint-baseline mode");
}

ordered_json PipelineConfig::to_json() const {
  ordered_json j;
  j["prompt"] = prompt;
  j["seed"] = seed;
  j["mode"] = pipeline_mode_name(mode);
  j["backend"] = backend;
  j["threads"] = threads;
  j["cubemap"] = {{"resolution", cubemap_resolution}, {"patch_size", patch_size}, {"stride", stride},
                  {"diffusion_steps", diffusion_steps}, {"dump_steps", dump_steps}};
  j["outpaint"] = {{"cameras", outpaint_cameras}, {"width", view_width}, {"height", view_height},
                   {"fov_deg", view_fov_deg}, {"ball_fraction", ball_fraction},
                   {"pitch_max_deg", pitch_max_deg}, {"dilate_px", dilate_px},
                   {"baseline_fit_steps", baseline_fit_steps}};
  j["optimize"] = {{"texture_init_steps", texture_init_steps}, {"steps", optimizer_steps},
                   {"learning_rate", learning_rate}, {"tau", tau}, {"geometry_weight", geometry_weight},
                   {"cameras_per_step", cameras_per_step}, {"checkpoint_every", checkpoint_every},
                   {"inverse_depth", inverse_depth}};
  return j;
}

void set_pipeline_option(PipelineConfig& config, const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw std::invalid_argument(fmt::format("unknown config key '{}'", key));
  it->second(config, key, value);
}

PipelineConfig load_pipeline_config(const fs::path& path, PipelineConfig base) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::invalid_argument(fmt::format("config {}: {}", path.string(), e.what()));
  }
  for (const auto& [key, node] : tree) {
    if (node.empty()) {
      set_pipeline_option(base, key, node.data());
      continue;
    }
    for (const auto& [sub, leaf] : node) set_pipeline_option(base, key + "." + sub, leaf.data());
  }
  return base;
}

PipelineError::PipelineError(std::string stage, const std::string& message)
    : std::runtime_error(fmt::format("stage {}: {}", stage, message)), stage_(std::move(stage)) {}

std::uint64_t mesh_checksum(const TriangleMesh& mesh) {
  Fnv1a h;
  for (const Vec3& v : mesh.vertices()) h.update(v.data(), 3 * sizeof(double));
  for (const Face& f : mesh.faces()) h.update(f.data(), sizeof(f));
  for (const Vec3& c : mesh.colors()) h.update(c.data(), 3 * sizeof(double));
  return h.value();
}

std::string hex64(std::uint64_t value) { return fmt::format("{:016x}", value); }

PipelineResult run_pipeline(const TriangleMesh& input, const PipelineConfig& config, Backends& backends) {
  try {
    config.validate();
  } catch (const std::exception& e) {
    throw PipelineError("config", e.what());
  }
  if (!backends.denoiser || !backends.depth) throw PipelineError("config", "backends are incomplete");

  const fs::path out = config.output_dir;
  const fs::path cube_dir = out / "01_cubemap";
  const fs::path outpaint_dir = out / "02_outpaint";
  const fs::path optimize_dir = out / "03_optimize";
  fs::create_directories(out);

  const bool cubemap_mode = config.mode == PipelineMode::Cubemap;
  const int steps = config.diffusion_steps > 0 ? config.diffusion_steps : backends.denoiser->default_steps();
  const MeshBounds bounds = mesh_bounds(input);
  StageLog log;
  ordered_json report;
  report["mode"] = pipeline_mode_name(config.mode);
  if (!cubemap_mode) report["ablation"] = "w/o Cubemap (outpainting baseline)";
  report["prompt"] = config.prompt;
  report["seed"] = config.seed;
  report["git_describe"] = RESTYLE_GIT_DESCRIBE;
  report["backends"] = {{"denoiser", backends.denoiser->name()},
                        {"depth", backends.depth->name()},
                        {"embedder", backends.embedder ? backends.embedder->name() : "none"}};
  report["diffusion_steps"] = steps;
  report["input"] = {{"vertices", input.vertex_count()},
                     {"faces", input.face_count()},
                     {"checksum", hex64(mesh_checksum(input))}};

  TriangleMesh textured = input;
  CoverageState coverage = make_coverage(input);
  std::vector<GeneratedView> generated;
  std::optional<CubemapRig> rig;

  if (cubemap_mode) {
    fs::create_directories(cube_dir);
    log.run("cubemap_rig", {1}, "set cubemap cameras at scene center", [&](ordered_json& d) {
      rig = make_cubemap_rig(bounds.centroid, config.cubemap_resolution);
      d["center"] = {bounds.centroid.x(), bounds.centroid.y(), bounds.centroid.z()};
      d["resolution"] = config.cubemap_resolution;
    });
    log.run("cubemap_geometry", {2}, "acquire cubemap depth and distance", [&](ordered_json& d) {
      auto empty = ordered_json::object();
      for (int f = 0; f < 6; ++f) {
        const RenderOutput r = render(input, rig->faces[f]);
        const std::string name = kCubeFaceNames[f];
        dump_image(cube_dir / (name + "_depth.pfm"), r.depth);
        dump_image(cube_dir / (name + "_distance.pfm"), r.distance);
        std::size_t holes = 0;
        for (int id : r.face_id) holes += id < 0 ? 1 : 0;
        empty[name] = holes;
      }
      d["empty_pixels"] = empty;
    });
    log.run("cubemap_generation", {3}, "generate cubemap with depth/distance blending", [&](ordered_json& d) {
      CubemapConfig cc;
      cc.patch_size = config.patch_size;
      cc.stride = config.stride;
      cc.steps = steps;
      cc.seed = config.seed;
      cc.threads = config.threads;
      if (config.dump_steps) cc.debug_dir = cube_dir / "steps";
      const CubemapResult cube = generate_cubemap(input, *rig, config.prompt, *backends.denoiser, cc);
      auto sums = ordered_json::object();
      for (int f = 0; f < 6; ++f) {
        write_file(cube_dir / (std::string(kCubeFaceNames[f]) + ".png"), encode_png8(cube.faces[f]));
        sums[kCubeFaceNames[f]] = hex64(content_hash(cube.faces[f]));
        generated.push_back({rig->faces[f], cube.faces[f], std::string("cubemap ") + kCubeFaceNames[f]});
      }
      report["cubemap_checksums"] = sums;
      d["patches"] = cube.patches.size();
      d["depth_range"] = {cube.depth_range.near, cube.depth_range.far};
      d["distance_range"] = {cube.distance_range.near, cube.distance_range.far};
      d["warnings"] = cube.warnings;
    });
    log.run("texture_init", {}, "fit vertex colors to the six cubemap views", [&](ordered_json& d) {
      if (config.texture_init_steps > 0) textured = fit_colors(input, generated, config.texture_init_steps, config);
      for (int f = 0; f < 6; ++f) {
        coverage = mark_covered(coverage, textured, rig->faces[f], render(textured, rig->faces[f]).depth);
      }
      d["steps"] = config.texture_init_steps;
      d["covered_vertices"] = coverage.count();
      save_coverage_ply(coverage, textured, cube_dir / "coverage.ply");
    });
  }

  std::vector<Camera> cameras;
  log.run("sample_cameras", {4}, "sample K random cameras", [&](ordered_json& d) {
    if (config.outpaint_cameras > 0) {
      OutpaintSampling s;
      s.ball_fraction = config.ball_fraction;
      s.pitch_max_deg = config.pitch_max_deg;
      s.width = config.view_width;
      s.height = config.view_height;
      s.vertical_fov_deg = config.view_fov_deg;
      cameras = sample_outpaint_cameras(bounds.centroid, bounds, config.outpaint_cameras, config.seed, s);
    }
    d["count"] = cameras.size();
  });

  log.run("outpaint", {5, 6, 7, 8, 9, 10}, "generate views that see uncovered areas", [&](ordered_json& d) {
    fs::create_directories(outpaint_dir);
    auto views = ordered_json::array();
    int skipped = 0;
    for (std::size_t k = 0; k < cameras.size(); ++k) {
      const Camera& cam = cameras[k];
      const GenerationMask mask = outpaint_mask(coverage, textured, cam, config.dilate_px);
      if (mask_empty(mask)) {
        ++skipped;
        continue;
      }
      const RenderOutput r = render(textured, cam);
      const ConditionMap cond = make_condition(ConditionKind::Depth, r.depth);
      const std::uint64_t seed = mix64(config.seed * 1000003ULL + k + 1);
      const ImageBuffer image = backends.denoiser->generate(config.prompt, cond, &mask, &r.color, seed, steps);
      const std::string stem = fmt::format("view_{:03d}", k);
      write_file(outpaint_dir / (stem + ".png"), encode_png8(image));
      write_file(outpaint_dir / (stem + "_mask.png"), encode_png8(mask));
      std::size_t masked = 0;
      for (double m : mask.samples()) masked += m > 0.0 ? 1 : 0;
      views.push_back({{"camera", k}, {"masked_pixels", masked}, {"checksum", hex64(content_hash(image))},
                       {"pose", camera_to_json(cam)}});
      generated.push_back({cam, image, fmt::format("outpaint {}", k)});
      if (!cubemap_mode && config.baseline_fit_steps > 0) {
        textured = fit_colors(textured, {generated.back()}, config.baseline_fit_steps, config);
      }
      coverage = mark_covered(coverage, textured, cam, r.depth);
    }
    d["generated"] = views.size();
    d["skipped_fully_covered"] = skipped;
    d["covered_vertices"] = coverage.count();
    report["outpaint_views"] = views;
  });
  if (generated.empty()) throw PipelineError("outpaint", "no view generated anything; nothing to optimize");

  SupervisionSet supervision;
  log.run("depth_estimation", {11, 12, 13}, "estimate depth of every generated image", [&](ordered_json& d) {
    for (const GeneratedView& g : generated) {
      if (backends.depth_registry) backends.depth_registry->register_depth(g.image, render(input, g.camera).depth);
      ImageBuffer depth = backends.depth->estimate_depth(g.image);
      supervision.push_back(make_supervision(g.camera, g.image, std::move(depth), config.tau, config.inverse_depth));
    }
    std::size_t smooth = 0;
    std::size_t total = 0;
    for (const SupervisionView& v : supervision) {
      for (std::uint8_t m : v.smooth) smooth += m;
      total += v.smooth.size();
    }
    d["views"] = supervision.size();
    d["smooth_fraction"] = total > 0 ? static_cast<double>(smooth) / static_cast<double>(total) : 0.0;
  });

  TriangleMesh result = textured;
  log.run("mesh_optimization", {14, 15, 16}, "update the mesh for N steps", [&](ordered_json& d) {
    fs::create_directories(optimize_dir);
    if (config.optimizer_steps > 0) {
      OptimizerConfig o = base_optimizer(config);
      o.steps = config.optimizer_steps;
      o.cameras_per_step = config.cameras_per_step;
      o.loss_csv = optimize_dir / "loss.csv";
      if (config.checkpoint_every > 0) {
        o.checkpoint_dir = optimize_dir / "checkpoints";
        o.checkpoint_every = config.checkpoint_every;
      }
      const OptimizeResult r = optimize(textured, supervision, o);
      result = r.mesh;
      d["final_texture_loss"] = r.history.back().texture;
      d["final_geometry_loss"] = r.history.back().geometry;
      d["max_position_step"] = r.max_position_step;
      d["loss_csv"] = "03_optimize/loss.csv";
    }
    d["steps"] = config.optimizer_steps;
    for (std::size_t i = 0; i < std::min<std::size_t>(6, supervision.size()); ++i) {
      write_file(optimize_dir / fmt::format("final_{:03d}.png", i),
                 encode_png8(render(result, supervision[i].camera).color));
    }
  });

  PipelineResult res;
  log.run("save", {}, "write the updated mesh and report", [&](ordered_json& d) {
    const std::string problem = validate_mesh(result.vertices(), result.faces(), result.colors());
    if (!problem.empty()) throw std::runtime_error("output mesh is invalid: " + problem);
    res.mesh_path = out / "mesh.ply";
    save_mesh(result, res.mesh_path);
    d["mesh"] = "mesh.ply";
    report["output"] = {{"mesh", "mesh.ply"},
                        {"checksum", hex64(mesh_checksum(result))},
                        {"file_checksum", hex64([&] {
                           Fnv1a h;
                           const Bytes bytes = read_file(res.mesh_path);
                           h.update(bytes.data(), bytes.size());
                           return h.value();
                         }())}};
  });

  report["config"] = config.to_json();
  report["stages"] = log.stages();
  report["timings"] = "timings.json";
  res.report_path = out / "report.json";
  write_json(res.report_path, report);
  write_json(out / "timings.json", log.timings());
  res.mesh = std::move(result);
  res.report = std::move(report);
  return res;
}

PipelineResult run_pipeline(const fs::path& mesh_path, const PipelineConfig& config) {
  TriangleMesh mesh;
  try {
    mesh = load_mesh(mesh_path);
  } catch (const std::exception& e) {
    throw PipelineError("load", e.what());
  }
  Backends backends;
  try {
    backends = make_backends(config.backend);
  } catch (const std::exception& e) {
    throw PipelineError("backends", e.what());
  }
  return run_pipeline(mesh, config, backends);
}

}  // namespace restyle
