#pragma once

#include <array>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace restyle {

using Vec3 = Eigen::Vector3d;
using Face = std::array<int, 3>;

class MeshError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Indexed triangle mesh with per-vertex RGB colors in [0,1].
///
/// Construction validates every invariant (index range, finiteness, color
/// range, matching lengths, no repeated vertex within a face) and throws
/// MeshError naming the offending element. Instances are immutable; edits
/// produce new meshes.
class TriangleMesh {
 public:
  TriangleMesh() = default;
  TriangleMesh(std::vector<Vec3> vertices, std::vector<Face> faces, std::vector<Vec3> colors);

  [[nodiscard]] const std::vector<Vec3>& vertices() const { return vertices_; }
  [[nodiscard]] const std::vector<Face>& faces() const { return faces_; }
  [[nodiscard]] const std::vector<Vec3>& colors() const { return colors_; }
  [[nodiscard]] std::size_t vertex_count() const { return vertices_.size(); }
  [[nodiscard]] std::size_t face_count() const { return faces_.size(); }

  [[nodiscard]] TriangleMesh with_vertices(std::vector<Vec3> vertices) const;
  [[nodiscard]] TriangleMesh with_colors(std::vector<Vec3> colors) const;

 private:
  std::vector<Vec3> vertices_;
  std::vector<Face> faces_;
  std::vector<Vec3> colors_;
};

/// Validates without constructing; returns an empty string when valid.
std::string validate_mesh(const std::vector<Vec3>& vertices, const std::vector<Face>& faces,
                          const std::vector<Vec3>& colors);

struct MeshBounds {
  Vec3 min;
  Vec3 max;
  Vec3 centroid;

  [[nodiscard]] Vec3 extent() const { return max - min; }
  [[nodiscard]] double diagonal() const { return extent().norm(); }
};

/// Axis-aligned bounds and vertex mean. Throws MeshError on an empty mesh.
MeshBounds mesh_bounds(const TriangleMesh& mesh);

/// Reads ascii or binary_little_endian PLY. Vertices need x,y,z; colors
/// default to mid-gray when red/green/blue are absent. Unknown properties
/// are skipped. Polygons with more than three vertices are fan-triangulated.
TriangleMesh load_mesh(const std::filesystem::path& path);
TriangleMesh parse_ply(const std::string& bytes);

/// Always writes binary_little_endian PLY with float32 positions and
/// uint8 colors.
void save_mesh(const TriangleMesh& mesh, const std::filesystem::path& path);
std::string serialize_ply(const TriangleMesh& mesh);

}  // namespace restyle
