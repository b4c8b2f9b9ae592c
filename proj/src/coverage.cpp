#include "restyle/coverage.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "restyle/raster.hpp"

namespace restyle {

std::size_t CoverageState::count() const {
  return static_cast<std::size_t>(std::count(covered.begin(), covered.end(), std::uint8_t{1}));
}

CoverageState make_coverage(const TriangleMesh& mesh) {
  CoverageState s;
  s.covered.assign(mesh.vertex_count(), 0);
  return s;
}

double default_occlusion_epsilon(const TriangleMesh& mesh) { return 0.01 * mesh_bounds(mesh).diagonal(); }

CoverageState mark_covered(CoverageState state, const TriangleMesh& mesh, const Camera& camera,
                           const ImageBuffer& depth, const CoverageOptions& options) {
  if (state.covered.size() != mesh.vertex_count()) {
    throw std::invalid_argument(fmt::format("coverage has {} flags for {} vertices",
                                            state.covered.size(), mesh.vertex_count()));
  }
  if (depth.width() != camera.width() || depth.height() != camera.height() || depth.channels() != 1) {
    throw std::invalid_argument("mark_covered: depth does not match the camera");
  }
  const double eps = options.epsilon_occ >= 0.0 ? options.epsilon_occ : default_occlusion_epsilon(mesh);
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    if (state.covered[i]) continue;
    const auto p = project(camera, mesh.vertices()[i], options.z_near);
    if (!p) continue;
    if (!(p->u >= 0.0 && p->u < camera.width() && p->v >= 0.0 && p->v < camera.height())) continue;
    const int px = static_cast<int>(p->u);
    const int py = static_cast<int>(p->v);
    const int r = std::max(0, options.lookup_radius);
    for (int y = std::max(0, py - r); y <= std::min(camera.height() - 1, py + r) && !state.covered[i]; ++y) {
      for (int x = std::max(0, px - r); x <= std::min(camera.width() - 1, px + r); ++x) {
        const double d = depth.at(x, y);
        if (d > 0.0 && std::abs(p->z - d) <= eps) {
          state.covered[i] = 1;
          break;
        }
      }
    }
  }
  state.cameras.push_back(camera);
  return state;
}

ImageBuffer dilate(const ImageBuffer& mask, int radius) {
  if (radius <= 0) return mask;
  const int w = mask.width();
  const int h = mask.height();
  ImageBuffer rows(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m = 0.0;
      for (int dx = std::max(0, x - radius); dx <= std::min(w - 1, x + radius) && m == 0.0; ++dx)
        m = mask.at(dx, y);
      rows.at(x, y) = m;
    }
  }
  ImageBuffer out(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m = 0.0;
      for (int dy = std::max(0, y - radius); dy <= std::min(h - 1, y + radius) && m == 0.0; ++dy)
        m = rows.at(x, dy);
      out.at(x, y) = m;
    }
  }
  return out;
}

GenerationMask outpaint_mask(const CoverageState& state, const TriangleMesh& mesh,
                             const Camera& camera, int dilate_px) {
  const RenderOutput out = render(mesh, camera);
  const ImageBuffer covered = render_coverage_attribute(out, mesh, state.covered);
  GenerationMask mask(out.width, out.height, 1);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      mask.at(x, y) = out.visible(x, y) && covered.at(x, y) == 0.0 ? 1.0 : 0.0;
  mask = dilate(mask, dilate_px);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      if (!out.visible(x, y)) mask.at(x, y) = 0.0;
  return mask;
}

bool mask_empty(const GenerationMask& mask) {
  return std::all_of(mask.samples().begin(), mask.samples().end(), [](double v) { return v == 0.0; });
}

void save_coverage_ply(const CoverageState& state, const TriangleMesh& mesh,
                       const std::filesystem::path& path) {
  std::vector<Vec3> colors(mesh.vertex_count());
  for (std::size_t i = 0; i < colors.size(); ++i)
    colors[i] = state.covered[i] ? Vec3(0.0, 1.0, 0.0) : Vec3(0.2, 0.2, 0.2);
  save_mesh(mesh.with_colors(std::move(colors)), path);
}

}  // namespace restyle
