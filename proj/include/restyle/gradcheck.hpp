#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "restyle/camera.hpp"
#include "restyle/mesh.hpp"
#include "restyle/raster.hpp"

namespace restyle {

struct GradCheckOptions {
  double color_step = 1e-3;
  double position_step = 1e-5;
  double color_tolerance = 1e-5;     // absolute
  double depth_tolerance = 0.02;     // relative L2
  int interior_margin = 2;
  int max_vertices = 48;             // 0: all vertices
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double color_max_abs = 0.0;
  double depth_rel = 0.0;
  int vertices_checked = 0;
  int interior_pixels = 0;
  bool color_pass = false;
  bool depth_pass = false;

  [[nodiscard]] bool passed() const { return color_pass && depth_pass; }
  /// "PASS color 3.1e-07, depth 0.80%" style summary.
  [[nodiscard]] std::string summary() const;
};

/// Pixels whose (2m+1)^2 neighborhood is covered by a single face.
std::vector<std::uint8_t> interior_pixels(const RenderOutput& out, int margin);

/// Compares grad_vertex_colors against central differences of sum |color|^2
/// and grad_vertex_positions_depth against central differences of a random
/// weighting of depth over interior pixels. Vertices are sampled among those
/// touching a visible face when the mesh is larger than max_vertices.
GradCheckReport check_gradients(const TriangleMesh& mesh, const Camera& camera,
                                const GradCheckOptions& options = {});

}  // namespace restyle
