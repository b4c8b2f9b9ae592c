#include "restyle/raster.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

namespace restyle {

namespace {

std::atomic<int> g_default_threads{0};

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const int global = g_default_threads.load();
  if (global > 0) return global;
  return std::max(1u, std::thread::hardware_concurrency());
}

struct ClipVertex {
  Vec3 view;
  Vec3 bary;  // weights w.r.t. the original face vertices
};

// One screen-space triangle after near-plane clipping.
struct ScreenTriangle {
  std::array<double, 3> sx;
  std::array<double, 3> sy;
  std::array<double, 3> inv_z;
  std::array<Vec3, 3> bary;
  double area;
  int face;
  int x0, x1, y0, y1;  // inclusive pixel bounds
  std::array<bool, 3> top_left;  // edge k runs from vertex k+1 to k+2
};

// Sutherland-Hodgman against z >= z_near. Returns 0, 3 or 4 vertices.
int clip_near(const std::array<ClipVertex, 3>& in, double z_near, std::array<ClipVertex, 4>& out) {
  int n = 0;
  for (int i = 0; i < 3; ++i) {
    const ClipVertex& a = in[i];
    const ClipVertex& b = in[(i + 1) % 3];
    const bool a_in = a.view.z() >= z_near;
    const bool b_in = b.view.z() >= z_near;
    if (a_in) out[n++] = a;
    if (a_in != b_in) {
      const double t = (z_near - a.view.z()) / (b.view.z() - a.view.z());
      ClipVertex c{a.view + t * (b.view - a.view), a.bary + t * (b.bary - a.bary)};
      c.view.z() = z_near;
      out[n++] = c;
    }
  }
  return n;
}

bool is_top_left(double ax, double ay, double bx, double by) {
  // Inward normal of edge a->b for a positively oriented triangle.
  const double nx = ay - by;
  const double ny = bx - ax;
  return nx > 0.0 || (nx == 0.0 && ny > 0.0);
}

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

void setup_triangles(const TriangleMesh& mesh, const Camera& camera, double z_near,
                     std::vector<ScreenTriangle>& tris) {
  const auto& k = camera.intrinsics();
  std::vector<Vec3> view(mesh.vertex_count());
  for (std::size_t i = 0; i < view.size(); ++i) {
    view[i] = camera.to_view(mesh.vertices()[i]);
  }
  const std::array<Vec3, 3> unit = {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};
  for (std::size_t f = 0; f < mesh.face_count(); ++f) {
    const Face& face = mesh.faces()[f];
    const std::array<ClipVertex, 3> in = {ClipVertex{view[face[0]], unit[0]},
                                          ClipVertex{view[face[1]], unit[1]},
                                          ClipVertex{view[face[2]], unit[2]}};
    if (in[0].view.z() < z_near && in[1].view.z() < z_near && in[2].view.z() < z_near) {
      continue;
    }
    std::array<ClipVertex, 4> poly;
    const int n = clip_near(in, z_near, poly);
    for (int t = 1; t + 1 < n; ++t) {
      const std::array<const ClipVertex*, 3> v = {&poly[0], &poly[t], &poly[t + 1]};
      ScreenTriangle tri{};
      for (int i = 0; i < 3; ++i) {
        const Vec3& p = v[i]->view;
        tri.inv_z[i] = 1.0 / p.z();
        tri.sx[i] = k.fx * p.x() * tri.inv_z[i] + k.cx;
        tri.sy[i] = k.fy * p.y() * tri.inv_z[i] + k.cy;
        tri.bary[i] = v[i]->bary;
      }
      double area = edge(tri.sx[0], tri.sy[0], tri.sx[1], tri.sy[1], tri.sx[2], tri.sy[2]);
      if (!(std::abs(area) > 0.0) || !std::isfinite(area)) {
        continue;  // degenerate in screen space
      }
      if (area < 0.0) {
        std::swap(tri.sx[1], tri.sx[2]);
        std::swap(tri.sy[1], tri.sy[2]);
        std::swap(tri.inv_z[1], tri.inv_z[2]);
        std::swap(tri.bary[1], tri.bary[2]);
        area = -area;
      }
      tri.area = area;
      tri.face = static_cast<int>(f);
      const double minx = std::min({tri.sx[0], tri.sx[1], tri.sx[2]});
      const double maxx = std::max({tri.sx[0], tri.sx[1], tri.sx[2]});
      const double miny = std::min({tri.sy[0], tri.sy[1], tri.sy[2]});
      const double maxy = std::max({tri.sy[0], tri.sy[1], tri.sy[2]});
      // Pixel centers at i + 0.5 inside [min, max].
      const double lo_x = std::max(std::ceil(minx - 0.5), 0.0);
      const double hi_x = std::min(std::floor(maxx - 0.5), k.width - 1.0);
      const double lo_y = std::max(std::ceil(miny - 0.5), 0.0);
      const double hi_y = std::min(std::floor(maxy - 0.5), k.height - 1.0);
      if (lo_x > hi_x || lo_y > hi_y) continue;
      tri.x0 = static_cast<int>(lo_x);
      tri.x1 = static_cast<int>(hi_x);
      tri.y0 = static_cast<int>(lo_y);
      tri.y1 = static_cast<int>(hi_y);
      for (int e = 0; e < 3; ++e) {
        const int a = (e + 1) % 3;
        const int b = (e + 2) % 3;
        tri.top_left[e] = is_top_left(tri.sx[a], tri.sy[a], tri.sx[b], tri.sy[b]);
      }
      tris.push_back(tri);
    }
  }
}

struct PixelHit {
  double z = std::numeric_limits<double>::infinity();
  int face = -1;
  std::array<double, 3> bary{0.0, 0.0, 0.0};
};

// Rasterizes rows [row_begin, row_end). Each pixel is owned by exactly one
// band and triangles are visited in a fixed order, so results do not depend
// on the banding.
void rasterize_band(const std::vector<ScreenTriangle>& tris, int width, int row_begin,
                    int row_end, std::vector<PixelHit>& hits) {
  for (const ScreenTriangle& tri : tris) {
    const int y_lo = std::max(tri.y0, row_begin);
    const int y_hi = std::min(tri.y1, row_end - 1);
    for (int y = y_lo; y <= y_hi; ++y) {
      const double py = y + 0.5;
      for (int x = tri.x0; x <= tri.x1; ++x) {
        const double px = x + 0.5;
        std::array<double, 3> w;
        bool inside = true;
        for (int e = 0; e < 3 && inside; ++e) {
          const int a = (e + 1) % 3;
          const int b = (e + 2) % 3;
          w[e] = edge(tri.sx[a], tri.sy[a], tri.sx[b], tri.sy[b], px, py);
          inside = w[e] > 0.0 || (w[e] == 0.0 && tri.top_left[e]);
        }
        if (!inside) continue;
        const double b0 = w[0] / tri.area;
        const double b1 = w[1] / tri.area;
        const double b2 = w[2] / tri.area;
        const double q0 = b0 * tri.inv_z[0];
        const double q1 = b1 * tri.inv_z[1];
        const double q2 = b2 * tri.inv_z[2];
        const double inv_z = q0 + q1 + q2;
        const double z = 1.0 / inv_z;
        PixelHit& hit = hits[static_cast<std::size_t>(y) * width + x];
        if (!(z < hit.z)) continue;
        const Vec3 bary = (q0 * tri.bary[0] + q1 * tri.bary[1] + q2 * tri.bary[2]) * z;
        hit.z = z;
        hit.face = tri.face;
        hit.bary = {std::max(bary.x(), 0.0), std::max(bary.y(), 0.0), std::max(bary.z(), 0.0)};
        const double sum = hit.bary[0] + hit.bary[1] + hit.bary[2];
        for (double& c : hit.bary) c /= sum;
      }
    }
  }
}

}  // namespace

void set_default_render_threads(int threads) { g_default_threads.store(std::max(threads, 0)); }

int default_render_threads() { return resolve_threads(0); }

std::vector<std::uint8_t> RenderOutput::visible_mask() const {
  std::vector<std::uint8_t> mask(face_id.size());
  std::transform(face_id.begin(), face_id.end(), mask.begin(),
                 [](int f) { return static_cast<std::uint8_t>(f >= 0 ? 1 : 0); });
  return mask;
}

RenderOutput render(const TriangleMesh& mesh, const Camera& camera, const RenderOptions& options) {
  const int w = camera.width();
  const int h = camera.height();
  std::vector<ScreenTriangle> tris;
  tris.reserve(mesh.face_count());
  setup_triangles(mesh, camera, options.z_near, tris);

  std::vector<PixelHit> hits(static_cast<std::size_t>(w) * h);
  const int threads = std::min(resolve_threads(options.threads), std::max(h, 1));
  if (threads <= 1) {
    rasterize_band(tris, w, 0, h, hits);
  } else {
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      const int begin = static_cast<int>(static_cast<long long>(h) * t / threads);
      const int end = static_cast<int>(static_cast<long long>(h) * (t + 1) / threads);
      workers.emplace_back(
          [&tris, &hits, w, begin, end]() { rasterize_band(tris, w, begin, end, hits); });
    }
    for (auto& worker : workers) worker.join();
  }

  RenderOutput out;
  out.width = w;
  out.height = h;
  out.color = ImageBuffer(w, h, 3);
  out.depth = ImageBuffer(w, h, 1);
  out.distance = ImageBuffer(w, h, 1);
  out.visibility = ImageBuffer(w, h, 1);
  out.face_id.assign(hits.size(), -1);
  out.barycentric.assign(hits.size(), {0.0, 0.0, 0.0});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = out.index(x, y);
      const PixelHit& hit = hits[i];
      if (hit.face < 0) continue;
      const Face& face = mesh.faces()[hit.face];
      out.face_id[i] = hit.face;
      out.barycentric[i] = hit.bary;
      Vec3 c = Vec3::Zero();
      for (int j = 0; j < 3; ++j) c += hit.bary[j] * mesh.colors()[face[j]];
      for (int ch = 0; ch < 3; ++ch) out.color.at(x, y, ch) = std::clamp(c[ch], 0.0, 1.0);
      out.depth.at(x, y) = hit.z;
      out.distance.at(x, y) = hit.z * camera.pixel_ray(x + 0.5, y + 0.5).norm();
      out.visibility.at(x, y) = 1.0;
    }
  }
  return out;
}

namespace {

void check_render_inputs(const RenderOutput& out, const TriangleMesh& mesh, const ImageBuffer& g,
                         int channels, const char* what) {
  if (g.width() != out.width || g.height() != out.height || g.channels() != channels) {
    throw std::invalid_argument(fmt::format(
        "{}: mismatched dimensions (gradient {}x{}x{}, render {}x{}x{})", what, g.width(),
        g.height(), g.channels(), out.width, out.height, channels));
  }
  for (int f : out.face_id) {
    if (f >= static_cast<int>(mesh.face_count())) {
      throw std::invalid_argument(fmt::format("{}: render does not belong to this mesh", what));
    }
  }
}

}  // namespace

std::vector<Vec3> grad_vertex_colors(const RenderOutput& out, const TriangleMesh& mesh,
                                     const ImageBuffer& loss_grad) {
  check_render_inputs(out, mesh, loss_grad, 3, "grad_vertex_colors");
  std::vector<Vec3> grad(mesh.vertex_count(), Vec3::Zero());
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const std::size_t i = out.index(x, y);
      const int f = out.face_id[i];
      if (f < 0) continue;
      const Vec3 g(loss_grad.at(x, y, 0), loss_grad.at(x, y, 1), loss_grad.at(x, y, 2));
      const Face& face = mesh.faces()[f];
      for (int j = 0; j < 3; ++j) grad[face[j]] += out.barycentric[i][j] * g;
    }
  }
  return grad;
}

std::vector<Vec3> grad_vertex_positions_depth(const RenderOutput& out, const TriangleMesh& mesh,
                                              const Camera& camera,
                                              const ImageBuffer& loss_grad_depth) {
  check_render_inputs(out, mesh, loss_grad_depth, 1, "grad_vertex_positions_depth");
  std::vector<Vec3> grad_view(mesh.vertex_count(), Vec3::Zero());
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const std::size_t i = out.index(x, y);
      const int f = out.face_id[i];
      const double g = loss_grad_depth.at(x, y);
      if (f < 0 || g == 0.0) continue;
      const Face& face = mesh.faces()[f];
      const Vec3 p0 = camera.to_view(mesh.vertices()[face[0]]);
      const Vec3 p1 = camera.to_view(mesh.vertices()[face[1]]);
      const Vec3 p2 = camera.to_view(mesh.vertices()[face[2]]);
      const Vec3 n = (p1 - p0).cross(p2 - p0);
      const double n_dot_r = n.dot(camera.pixel_ray(x + 0.5, y + 0.5));
      if (n_dot_r == 0.0) continue;
      const Vec3 dir = (g / n_dot_r) * n;
      for (int j = 0; j < 3; ++j) grad_view[face[j]] += out.barycentric[i][j] * dir;
    }
  }
  // View-space p = R x + t, so world gradients are R^T times view gradients.
  std::vector<Vec3> grad(grad_view.size());
  const Mat3 rt = camera.rotation().transpose();
  for (std::size_t v = 0; v < grad.size(); ++v) grad[v] = rt * grad_view[v];
  return grad;
}

ImageBuffer render_coverage_attribute(const RenderOutput& out, const TriangleMesh& mesh,
                                      std::span<const std::uint8_t> per_vertex_flag) {
  if (per_vertex_flag.size() != mesh.vertex_count()) {
    throw std::invalid_argument(fmt::format(
        "render_coverage_attribute: flag length {} does not match vertex count {}",
        per_vertex_flag.size(), mesh.vertex_count()));
  }
  ImageBuffer mask(out.width, out.height, 1);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const std::size_t i = out.index(x, y);
      const int f = out.face_id[i];
      if (f < 0) continue;
      const Face& face = mesh.faces()[f];
      double value = 0.0;
      for (int j = 0; j < 3; ++j) value += out.barycentric[i][j] * (per_vertex_flag[face[j]] ? 1.0 : 0.0);
      mask.at(x, y) = value >= 0.5 ? 1.0 : 0.0;
    }
  }
  return mask;
}

ImageBuffer render_coverage_attribute(const TriangleMesh& mesh,
                                      std::span<const std::uint8_t> per_vertex_flag,
                                      const Camera& camera, const RenderOptions& options) {
  if (per_vertex_flag.size() != mesh.vertex_count()) {
    throw std::invalid_argument(fmt::format(
        "render_coverage_attribute: flag length {} does not match vertex count {}",
        per_vertex_flag.size(), mesh.vertex_count()));
  }
  return render_coverage_attribute(render(mesh, camera, options), mesh, per_vertex_flag);
}

Laplacian laplacian5(const ImageBuffer& field, std::span<const std::uint8_t> defined) {
  if (field.channels() != 1 || defined.size() != field.pixel_count()) {
    throw std::invalid_argument("laplacian5: expected a 1-channel field and matching mask");
  }
  const int w = field.width();
  const int h = field.height();
  Laplacian lap{ImageBuffer(w, h, 1), std::vector<std::uint8_t>(field.pixel_count(), 0)};
  auto def = [&](int x, int y) { return defined[static_cast<std::size_t>(y) * w + x] != 0; };
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      if (!def(x, y) || !def(x + 1, y) || !def(x - 1, y) || !def(x, y + 1) || !def(x, y - 1)) {
        continue;
      }
      lap.value.at(x, y) = field.at(x + 1, y) + field.at(x - 1, y) + field.at(x, y + 1) +
                           field.at(x, y - 1) - 4.0 * field.at(x, y);
      lap.valid[static_cast<std::size_t>(y) * w + x] = 1;
    }
  }
  return lap;
}

}  // namespace restyle
