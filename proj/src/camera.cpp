#include "restyle/camera.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include <Eigen/Geometry>
#include <fmt/format.h>
#include <json.hpp>

#include "restyle/hashing.hpp"

namespace restyle {

Camera::Camera(Intrinsics intrinsics, const Mat3& rotation, const Vec3& translation)
    : intrinsics_(intrinsics), rotation_(rotation), translation_(translation) {
  if (!(intrinsics.fx > 0.0) || !(intrinsics.fy > 0.0)) {
    throw std::invalid_argument("camera focal lengths must be positive");
  }
  if (intrinsics.width < 1 || intrinsics.height < 1) {
    throw std::invalid_argument("camera image size must be at least 1x1");
  }
  const double ortho_err = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!(ortho_err < 1e-6) || !(std::abs(rotation.determinant() - 1.0) < 1e-6)) {
    throw std::invalid_argument(
        fmt::format("camera rotation is not a proper rotation (orthogonality error {:.3g})",
                    ortho_err));
  }
  if (!translation.allFinite()) {
    throw std::invalid_argument("camera translation is not finite");
  }
}

Camera Camera::look_along(Intrinsics intrinsics, const Vec3& origin, const Vec3& forward,
                          const Vec3& down) {
  const Vec3 z = forward.normalized();
  const Vec3 y = (down - down.dot(z) * z).normalized();
  const Vec3 x = y.cross(z);
  Mat3 r;
  r.row(0) = x.transpose();
  r.row(1) = y.transpose();
  r.row(2) = z.transpose();
  return Camera(intrinsics, r, -(r * origin));
}

std::optional<Projection> project(const Camera& camera, const Vec3& world, double z_near) {
  const Vec3 p = camera.to_view(world);
  if (p.z() <= z_near) {
    return std::nullopt;
  }
  const auto& k = camera.intrinsics();
  return Projection{k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy, p.z()};
}

Vec3 unproject(const Camera& camera, double u, double v, double z) {
  return camera.to_world(camera.pixel_ray(u, v) * z);
}

CubemapRig make_cubemap_rig(const Vec3& center, int resolution) {
  if (resolution < 8) {
    throw std::invalid_argument("cubemap resolution must be at least 8");
  }
  const double half = resolution / 2.0;
  const Intrinsics k{half, half, half, half, resolution, resolution};
  const Vec3 down = -Vec3::UnitY();
  // Top and bottom faces put image-down on +Z / -Z respectively so both
  // have image-right along -X.
  const std::array<Camera, 6> faces = {
      Camera::look_along(k, center, Vec3::UnitX(), down),
      Camera::look_along(k, center, -Vec3::UnitX(), down),
      Camera::look_along(k, center, Vec3::UnitY(), Vec3::UnitZ()),
      Camera::look_along(k, center, -Vec3::UnitY(), -Vec3::UnitZ()),
      Camera::look_along(k, center, Vec3::UnitZ(), down),
      Camera::look_along(k, center, -Vec3::UnitZ(), down),
  };
  return CubemapRig{faces, center, resolution};
}

Intrinsics intrinsics_from_fov(int width, int height, double vertical_fov_deg) {
  if (!(vertical_fov_deg > 0.0 && vertical_fov_deg < 180.0)) {
    throw std::invalid_argument("vertical field of view must lie in (0, 180) degrees");
  }
  const double f = (height / 2.0) / std::tan(vertical_fov_deg * std::numbers::pi / 360.0);
  return Intrinsics{f, f, width / 2.0, height / 2.0, width, height};
}

std::vector<Camera> sample_outpaint_cameras(const Vec3& center, const MeshBounds& bounds,
                                            int count, std::uint64_t seed,
                                            const OutpaintSampling& options) {
  if (count < 1) {
    throw std::invalid_argument("outpaint camera count must be at least 1");
  }
  const Vec3 ext = bounds.extent();
  const double horizontal_half = std::min(ext.x(), ext.z()) / 2.0;
  if (!(horizontal_half > 0.0) || !(ext.y() > 0.0)) {
    throw std::invalid_argument("degenerate mesh bounds: zero extent");
  }
  const double radius = options.ball_fraction * horizontal_half;
  const double pitch_max = options.pitch_max_deg * std::numbers::pi / 180.0;
  const Intrinsics k = intrinsics_from_fov(options.width, options.height, options.vertical_fov_deg);

  std::mt19937_64 rng(seed);
  auto uniform = [&rng]() { return unit_double(rng()); };
  auto inside = [&](const Vec3& p) {
    return (p.array() >= bounds.min.array()).all() && (p.array() <= bounds.max.array()).all();
  };

  std::vector<Camera> cameras;
  cameras.reserve(static_cast<std::size_t>(count));
  constexpr int kMaxRejections = 10000;
  for (int i = 0; i < count; ++i) {
    Vec3 origin = center;
    bool found = false;
    for (int attempt = 0; attempt < kMaxRejections && !found; ++attempt) {
      const Vec3 offset(2.0 * uniform() - 1.0, 2.0 * uniform() - 1.0, 2.0 * uniform() - 1.0);
      if (offset.squaredNorm() > 1.0) continue;
      const Vec3 candidate = center + radius * offset;
      if (inside(candidate)) {
        origin = candidate;
        found = true;
      }
    }
    if (!found) {
      if (!inside(center)) {
        throw std::invalid_argument("sampling center lies outside the mesh bounds");
      }
      origin = center;
    }
    const double yaw = 2.0 * std::numbers::pi * uniform();
    const double pitch = (2.0 * uniform() - 1.0) * pitch_max;
    const Vec3 forward(std::cos(pitch) * std::cos(yaw), std::sin(pitch),
                       std::cos(pitch) * std::sin(yaw));
    // Image-down is world -Y projected off the viewing direction.
    cameras.push_back(Camera::look_along(k, origin, forward, -Vec3::UnitY()));
  }
  return cameras;
}

nlohmann::json camera_to_json(const Camera& camera) {
  const auto& k = camera.intrinsics();
  nlohmann::json matrix = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      if (r < 3) {
        matrix.push_back(c < 3 ? camera.rotation()(r, c) : camera.translation()(r));
      } else {
        matrix.push_back(c < 3 ? 0.0 : 1.0);
      }
    }
  }
  return {{"width", k.width}, {"height", k.height}, {"fx", k.fx},           {"fy", k.fy},
          {"cx", k.cx},       {"cy", k.cy},         {"world_to_camera", matrix}};
}

Camera camera_from_json(const nlohmann::json& json) {
  try {
    Intrinsics k;
    k.width = json.at("width").get<int>();
    k.height = json.at("height").get<int>();
    k.fx = json.at("fx").get<double>();
    k.fy = json.at("fy").get<double>();
    k.cx = json.at("cx").get<double>();
    k.cy = json.at("cy").get<double>();
    const auto& m = json.at("world_to_camera");
    if (!m.is_array() || m.size() != 16) {
      throw std::invalid_argument("world_to_camera must hold 16 numbers (row-major 4x4)");
    }
    Mat3 r;
    Vec3 t;
    for (int row = 0; row < 3; ++row) {
      for (int c = 0; c < 3; ++c) r(row, c) = m[row * 4 + c].get<double>();
      t(row) = m[row * 4 + 3].get<double>();
    }
    return Camera(k, r, t);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(fmt::format("malformed camera json: {}", e.what()));
  }
}

}  // namespace restyle
