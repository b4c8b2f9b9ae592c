#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "restyle/backends.hpp"
#include "restyle/mesh.hpp"

namespace restyle {

enum class PipelineMode { Cubemap, OutpaintBaseline };

const char* pipeline_mode_name(PipelineMode mode);
PipelineMode parse_pipeline_mode(const std::string& name);

struct PipelineConfig {
  std::string prompt;
  std::uint64_t seed = 0;
  PipelineMode mode = PipelineMode::Cubemap;
  std::string backend = "stub";
  std::filesystem::path output_dir = "restyle_out";
  int threads = 1;

  // cubemap
  int cubemap_resolution = 512;
  int patch_size = 0;      // 0: the face resolution
  int stride = 0;          // 0: half the patch
  int diffusion_steps = 0; // 0: the denoiser default
  bool dump_steps = false;

  // outpainting
  int outpaint_cameras = 100;
  int view_width = 512;
  int view_height = 512;
  double view_fov_deg = 60.0;
  double ball_fraction = 0.3;
  double pitch_max_deg = 30.0;
  int dilate_px = 8;
  int baseline_fit_steps = 50;

  // optimization
  int texture_init_steps = 200;
  int optimizer_steps = 1000;
  double learning_rate = 1e-3;
  double tau = 0.01;
  double geometry_weight = 1.0;
  int cameras_per_step = 4;
  int checkpoint_every = 250;
  bool inverse_depth = true;

  /// Throws std::invalid_argument naming the first bad key.
  void validate() const;
  [[nodiscard]] nlohmann::ordered_json to_json() const;
};

/// INI file with optional [cubemap], [outpaint] and [optimize] sections.
/// Unknown keys and malformed values throw std::invalid_argument.
PipelineConfig load_pipeline_config(const std::filesystem::path& path, PipelineConfig base = {});

/// Applies one "section.key" or "key" = value pair.
void set_pipeline_option(PipelineConfig& config, const std::string& key, const std::string& value);

class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, const std::string& message);
  [[nodiscard]] const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct PipelineResult {
  TriangleMesh mesh;
  std::filesystem::path mesh_path;
  std::filesystem::path report_path;
  nlohmann::ordered_json report;
};

/// Runs every stage and writes mesh.ply, report.json (deterministic for a
/// fixed config) and timings.json under config.output_dir. Stage failures
/// throw PipelineError; files written so far are kept.
PipelineResult run_pipeline(const TriangleMesh& mesh, const PipelineConfig& config, Backends& backends);
PipelineResult run_pipeline(const std::filesystem::path& mesh_path, const PipelineConfig& config);

/// FNV-1a over vertices, faces and colors.
std::uint64_t mesh_checksum(const TriangleMesh& mesh);

std::string hex64(std::uint64_t value);

}  // namespace restyle
