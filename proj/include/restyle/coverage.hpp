#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "restyle/backends.hpp"
#include "restyle/camera.hpp"
#include "restyle/mesh.hpp"

namespace restyle {

/// Per-vertex textured flags plus the cameras that set them. Flags only
/// ever flip from 0 to 1.
struct CoverageState {
  std::vector<std::uint8_t> covered;
  std::vector<Camera> cameras;

  [[nodiscard]] std::size_t count() const;
};

CoverageState make_coverage(const TriangleMesh& mesh);

/// 1% of the bounding-box diagonal.
double default_occlusion_epsilon(const TriangleMesh& mesh);

struct CoverageOptions {
  double epsilon_occ = -1.0;  // < 0: default_occlusion_epsilon
  double z_near = kDefaultZNear;
  int lookup_radius = 2;  // depth window around the projected pixel
};

/// Marks vertices that project inside the image in front of z_near and
/// whose view depth is within epsilon_occ of the rendered depth at some
/// pixel within lookup_radius (Chebyshev) of their pixel. `depth` must be
/// the render of (mesh, camera).
CoverageState mark_covered(CoverageState state, const TriangleMesh& mesh, const Camera& camera,
                           const ImageBuffer& depth, const CoverageOptions& options = {});

/// Visible pixels whose interpolated coverage flag is below 0.5, dilated
/// by `dilate_px` (square) and kept inside the visible region.
GenerationMask outpaint_mask(const CoverageState& state, const TriangleMesh& mesh,
                             const Camera& camera, int dilate_px = 8);

[[nodiscard]] bool mask_empty(const GenerationMask& mask);

/// Square (Chebyshev) binary dilation.
ImageBuffer dilate(const ImageBuffer& mask, int radius);

/// PLY with covered vertices green and the rest dark gray.
void save_coverage_ply(const CoverageState& state, const TriangleMesh& mesh,
                       const std::filesystem::path& path);

}  // namespace restyle
