#include "restyle/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "restyle/hashing.hpp"

namespace restyle {

namespace {

double sum_squares(const ImageBuffer& img) {
  double s = 0.0;
  for (double v : img.samples()) s += v * v;
  return s;
}

double weighted_depth(const TriangleMesh& mesh, const Camera& camera, const ImageBuffer& weights) {
  const RenderOutput out = render(mesh, camera);
  double s = 0.0;
  for (std::size_t i = 0; i < weights.samples().size(); ++i) s += weights.samples()[i] * out.depth.samples()[i];
  return s;
}

std::vector<int> sample_vertices(const RenderOutput& out, const TriangleMesh& mesh, const GradCheckOptions& options) {
  std::vector<std::uint8_t> seen(mesh.vertex_count(), 0);
  for (int f : out.face_id) {
    if (f < 0) continue;
    for (int v : mesh.faces()[f]) seen[v] = 1;
  }
  std::vector<int> picked;
  for (std::size_t v = 0; v < seen.size(); ++v)
    if (seen[v]) picked.push_back(static_cast<int>(v));
  const auto limit = static_cast<std::size_t>(options.max_vertices);
  if (options.max_vertices > 0 && picked.size() > limit) {
    for (std::size_t i = 0; i < limit; ++i) {
      const double u = unit_double(mix64(options.seed ^ mix64(i + 1)));
      const std::size_t j = i + static_cast<std::size_t>(u * static_cast<double>(picked.size() - i));
      std::swap(picked[i], picked[std::min(j, picked.size() - 1)]);
    }
    picked.resize(limit);
    std::sort(picked.begin(), picked.end());
  }
  return picked;
}

}  // namespace

std::string GradCheckReport::summary() const {
  return fmt::format("{} color {:.1e}, depth {:.3g}% ({} vertices, {} interior pixels)",
                     passed() ? "PASS" : "FAIL", color_max_abs, 100.0 * depth_rel, vertices_checked,
                     interior_pixels);
}

std::vector<std::uint8_t> interior_pixels(const RenderOutput& out, int margin) {
  std::vector<std::uint8_t> mask(out.face_id.size(), 0);
  for (int y = margin; y < out.height - margin; ++y) {
    for (int x = margin; x < out.width - margin; ++x) {
      const int f = out.face_id[out.index(x, y)];
      if (f < 0) continue;
      bool same = true;
      for (int dy = -margin; dy <= margin && same; ++dy)
        for (int dx = -margin; dx <= margin && same; ++dx) same = out.face_id[out.index(x + dx, y + dy)] == f;
      mask[out.index(x, y)] = same ? 1 : 0;
    }
  }
  return mask;
}

GradCheckReport check_gradients(const TriangleMesh& mesh, const Camera& camera, const GradCheckOptions& options) {
  GradCheckReport report;
  const RenderOutput out = render(mesh, camera);
  const std::vector<int> vertices = sample_vertices(out, mesh, options);
  report.vertices_checked = static_cast<int>(vertices.size());

  ImageBuffer color_grad = out.color;
  for (double& v : color_grad.samples()) v *= 2.0;
  const auto gc = grad_vertex_colors(out, mesh, color_grad);
  const double hc = options.color_step;
  for (int v : vertices) {
    for (int c = 0; c < 3; ++c) {
      auto plus = mesh.colors();
      auto minus = mesh.colors();
      plus[v][c] += hc;
      minus[v][c] -= hc;
      const double fd = (sum_squares(render(mesh.with_colors(plus), camera).color) -
                         sum_squares(render(mesh.with_colors(minus), camera).color)) /
                        (2 * hc);
      report.color_max_abs = std::max(report.color_max_abs, std::abs(fd - gc[v][c]));
    }
  }
  report.color_pass = report.color_max_abs <= options.color_tolerance;

  const auto interior = interior_pixels(out, options.interior_margin);
  ImageBuffer weights(out.width, out.height, 1);
  for (std::size_t i = 0; i < interior.size(); ++i) {
    if (!interior[i]) continue;
    ++report.interior_pixels;
    weights.samples()[i] = 2.0 * unit_double(mix64(options.seed * 0x9E3779B97F4A7C15ULL + i)) - 1.0;
  }
  const auto gp = grad_vertex_positions_depth(out, mesh, camera, weights);
  const double hp = options.position_step;
  double err2 = 0.0;
  double ref2 = 0.0;
  for (int v : vertices) {
    for (int c = 0; c < 3; ++c) {
      auto plus = mesh.vertices();
      auto minus = mesh.vertices();
      plus[v][c] += hp;
      minus[v][c] -= hp;
      const double fd = (weighted_depth(mesh.with_vertices(plus), camera, weights) -
                         weighted_depth(mesh.with_vertices(minus), camera, weights)) /
                        (2 * hp);
      err2 += (fd - gp[v][c]) * (fd - gp[v][c]);
      ref2 += fd * fd;
    }
  }
  report.depth_rel = ref2 > 0.0 ? std::sqrt(err2 / ref2) : (err2 > 0.0 ? 1.0 : 0.0);
  report.depth_pass = report.interior_pixels > 0 && report.depth_rel <= options.depth_tolerance;
  return report;
}

}  // namespace restyle
