#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "restyle/mesh.hpp"

namespace restyle {

using Mat3 = Eigen::Matrix3d;

inline constexpr double kDefaultZNear = 0.05;

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  bool operator==(const Intrinsics&) const = default;
};

/// Pinhole camera. View space is x right, y down, z forward; a world point
/// p maps to rotation * p + translation. Pixel (i, j) samples the continuous
/// coordinate (i + 0.5, j + 0.5).
class Camera {
 public:
  Camera(Intrinsics intrinsics, const Mat3& rotation, const Vec3& translation);

  /// Camera at `origin` looking along `forward` with image-down along `down`
  /// (orthogonalized against forward).
  static Camera look_along(Intrinsics intrinsics, const Vec3& origin, const Vec3& forward,
                           const Vec3& down);

  [[nodiscard]] const Intrinsics& intrinsics() const { return intrinsics_; }
  [[nodiscard]] const Mat3& rotation() const { return rotation_; }
  [[nodiscard]] const Vec3& translation() const { return translation_; }
  [[nodiscard]] int width() const { return intrinsics_.width; }
  [[nodiscard]] int height() const { return intrinsics_.height; }

  /// World-space camera origin o = -R^T t.
  [[nodiscard]] Vec3 origin() const { return -(rotation_.transpose() * translation_); }

  [[nodiscard]] Vec3 to_view(const Vec3& world) const { return rotation_ * world + translation_; }
  [[nodiscard]] Vec3 to_world(const Vec3& view) const {
    return rotation_.transpose() * (view - translation_);
  }

  /// View-space ray (x', y', 1) through continuous pixel coordinate (u, v).
  [[nodiscard]] Vec3 pixel_ray(double u, double v) const {
    return {(u - intrinsics_.cx) / intrinsics_.fx, (v - intrinsics_.cy) / intrinsics_.fy, 1.0};
  }

  bool operator==(const Camera&) const = default;

 private:
  Intrinsics intrinsics_;
  Mat3 rotation_;
  Vec3 translation_;
};

struct Projection {
  double u;
  double v;
  double z;
};

/// Pinhole projection; nullopt when the point is at or behind z_near.
std::optional<Projection> project(const Camera& camera, const Vec3& world,
                                  double z_near = kDefaultZNear);

/// Inverse of project at a known view-space depth.
Vec3 unproject(const Camera& camera, double u, double v, double z);

enum class CubeFace : int { PosX = 0, NegX = 1, PosY = 2, NegY = 3, PosZ = 4, NegZ = 5 };

inline constexpr std::array<const char*, 6> kCubeFaceNames = {"px", "nx", "py", "ny", "pz", "nz"};

/// Lateral faces in left-to-right order as seen by a viewer standing at the
/// rig with +Y up: each face's right edge meets the next face's left edge.
inline constexpr std::array<int, 4> kLateralStrip = {0, 4, 1, 5};

/// Six 90-degree square cameras sharing one origin. World +Y is up.
struct CubemapRig {
  std::array<Camera, 6> faces;
  Vec3 center;
  int resolution;

  [[nodiscard]] const Camera& face(CubeFace f) const { return faces[static_cast<int>(f)]; }
};

CubemapRig make_cubemap_rig(const Vec3& center, int resolution);

struct OutpaintSampling {
  double ball_fraction = 0.3;     // rho: ball radius over smallest horizontal half-extent
  double pitch_max_deg = 30.0;
  int width = 512;
  int height = 512;
  double vertical_fov_deg = 60.0;
};

/// Seeded random cameras inside a ball around `center`, uniform yaw and
/// pitch within +-pitch_max. Every origin lies inside `bounds`. Throws
/// std::invalid_argument for count < 1 or a zero horizontal extent.
std::vector<Camera> sample_outpaint_cameras(const Vec3& center, const MeshBounds& bounds,
                                            int count, std::uint64_t seed,
                                            const OutpaintSampling& options = {});

Intrinsics intrinsics_from_fov(int width, int height, double vertical_fov_deg);

nlohmann::json camera_to_json(const Camera& camera);
Camera camera_from_json(const nlohmann::json& json);

}  // namespace restyle
