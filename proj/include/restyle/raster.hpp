#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "restyle/camera.hpp"
#include "restyle/image.hpp"
#include "restyle/mesh.hpp"

namespace restyle {

struct RenderOptions {
  double z_near = kDefaultZNear;
  /// Worker threads for scanline bands; 0 uses the process-wide default.
  int threads = 0;
};

/// Process-wide default for RenderOptions::threads == 0. Output never
/// depends on this value.
void set_default_render_threads(int threads);
int default_render_threads();

/// Everything one z-buffered pass produces. Invisible pixels have
/// face_id == -1, zero color/depth/distance and zero barycentrics.
struct RenderOutput {
  int width = 0;
  int height = 0;
  ImageBuffer color;       // 3 channels, interpolated vertex colors
  ImageBuffer depth;       // view-space z, meters
  ImageBuffer distance;    // |p - o|, meters
  ImageBuffer visibility;  // 1 where any face covers the pixel center
  std::vector<int> face_id;
  /// Perspective-correct barycentrics of the covering point with respect
  /// to the original (unclipped) face vertices.
  std::vector<std::array<double, 3>> barycentric;

  [[nodiscard]] std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(x);
  }
  [[nodiscard]] bool visible(int x, int y) const { return face_id[index(x, y)] >= 0; }
  [[nodiscard]] std::vector<std::uint8_t> visible_mask() const;
};

/// Z-buffered rasterization with perspective-correct interpolation, z_near
/// clipping, and the top-left fill rule. No back-face culling. Bit-identical
/// for any thread count.
RenderOutput render(const TriangleMesh& mesh, const Camera& camera,
                    const RenderOptions& options = {});

/// Gradient of sum(loss_grad * color) with respect to vertex colors. Exact:
/// color is linear in the vertex colors at fixed coverage.
std::vector<Vec3> grad_vertex_colors(const RenderOutput& out, const TriangleMesh& mesh,
                                     const ImageBuffer& loss_grad);

/// Gradient of sum(loss_grad * depth) with respect to world-space vertex
/// positions, holding the pixel-to-face assignment fixed. At a covered
/// pixel with ray r the depth is the ray/plane intersection of the face, so
/// d depth / d p_i = beta_i * n / (n . r) in view space (n the face normal,
/// beta the barycentrics of the hit). Silhouette terms are zero.
std::vector<Vec3> grad_vertex_positions_depth(const RenderOutput& out, const TriangleMesh& mesh,
                                              const Camera& camera,
                                              const ImageBuffer& loss_grad_depth);

/// Interpolates a per-vertex {0,1} flag and thresholds at 0.5.
ImageBuffer render_coverage_attribute(const TriangleMesh& mesh,
                                      std::span<const std::uint8_t> per_vertex_flag,
                                      const Camera& camera, const RenderOptions& options = {});
ImageBuffer render_coverage_attribute(const RenderOutput& out, const TriangleMesh& mesh,
                                      std::span<const std::uint8_t> per_vertex_flag);

/// 5-point Laplacian f(x+1,y)+f(x-1,y)+f(x,y+1)+f(x,y-1)-4f(x,y). `valid`
/// is 1 only off the 1-pixel border where all five taps are `defined`.
struct Laplacian {
  ImageBuffer value;
  std::vector<std::uint8_t> valid;
};
Laplacian laplacian5(const ImageBuffer& field, std::span<const std::uint8_t> defined);

}  // namespace restyle
