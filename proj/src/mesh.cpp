#include "restyle/mesh.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string_view>

#include <fmt/format.h>

namespace restyle {

std::string validate_mesh(const std::vector<Vec3>& vertices, const std::vector<Face>& faces,
                          const std::vector<Vec3>& colors) {
  if (vertices.size() != colors.size()) {
    return fmt::format("vertex count {} does not match color count {}", vertices.size(),
                       colors.size());
  }
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    if (!vertices[i].allFinite()) {
      return fmt::format("vertex {} has a non-finite coordinate", i);
    }
    const Vec3& c = colors[i];
    if (!c.allFinite() || c.minCoeff() < 0.0 || c.maxCoeff() > 1.0) {
      return fmt::format("vertex {} color outside [0,1]", i);
    }
  }
  const auto n = static_cast<long long>(vertices.size());
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const Face& face = faces[f];
    for (int idx : face) {
      if (idx < 0 || idx >= n) {
        return fmt::format("face {}: face index out of range ({} not in [0,{}))", f, idx, n);
      }
    }
    if (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]) {
      return fmt::format("face {} references vertex {} twice", f,
                         face[0] == face[1] ? face[0] : face[2]);
    }
  }
  return {};
}

TriangleMesh::TriangleMesh(std::vector<Vec3> vertices, std::vector<Face> faces,
                           std::vector<Vec3> colors)
    : vertices_(std::move(vertices)), faces_(std::move(faces)), colors_(std::move(colors)) {
  if (auto err = validate_mesh(vertices_, faces_, colors_); !err.empty()) {
    throw MeshError(err);
  }
}

TriangleMesh TriangleMesh::with_vertices(std::vector<Vec3> vertices) const {
  return TriangleMesh(std::move(vertices), faces_, colors_);
}

TriangleMesh TriangleMesh::with_colors(std::vector<Vec3> colors) const {
  return TriangleMesh(vertices_, faces_, std::move(colors));
}

MeshBounds mesh_bounds(const TriangleMesh& mesh) {
  if (mesh.vertex_count() == 0) {
    throw MeshError("mesh_bounds: empty mesh");
  }
  MeshBounds b{mesh.vertices().front(), mesh.vertices().front(), Vec3::Zero()};
  for (const Vec3& v : mesh.vertices()) {
    b.min = b.min.cwiseMin(v);
    b.max = b.max.cwiseMax(v);
    b.centroid += v;
  }
  b.centroid /= static_cast<double>(mesh.vertex_count());
  return b;
}

// ---------------------------------------------------------------------------
// PLY reading

namespace {

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

std::optional<PlyType> parse_ply_type(std::string_view name) {
  if (name == "char" || name == "int8") return PlyType::Int8;
  if (name == "uchar" || name == "uint8") return PlyType::UInt8;
  if (name == "short" || name == "int16") return PlyType::Int16;
  if (name == "ushort" || name == "uint16") return PlyType::UInt16;
  if (name == "int" || name == "int32") return PlyType::Int32;
  if (name == "uint" || name == "uint32") return PlyType::UInt32;
  if (name == "float" || name == "float32") return PlyType::Float32;
  if (name == "double" || name == "float64") return PlyType::Float64;
  return std::nullopt;
}

std::size_t type_size(PlyType t) {
  switch (t) {
    case PlyType::Int8:
    case PlyType::UInt8:
      return 1;
    case PlyType::Int16:
    case PlyType::UInt16:
      return 2;
    case PlyType::Int32:
    case PlyType::UInt32:
    case PlyType::Float32:
      return 4;
    case PlyType::Float64:
      return 8;
  }
  return 0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::Float32;
  bool is_list = false;
  PlyType count_type = PlyType::UInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

// Pulls scalar values either from whitespace-separated text or from a
// little-endian byte stream.
class PlyReader {
 public:
  PlyReader(const std::string& data, std::size_t offset, bool binary)
      : data_(data), pos_(offset), binary_(binary) {}

  double read(PlyType type, std::string_view context) {
    return binary_ ? read_binary(type, context) : read_ascii(context);
  }

 private:
  double read_binary(PlyType type, std::string_view context) {
    const std::size_t n = type_size(type);
    if (pos_ + n > data_.size()) {
      throw MeshError(fmt::format("PLY parse failure: unexpected end of data reading {}", context));
    }
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < n; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + b])) << (8 * b);
    }
    pos_ += n;
    switch (type) {
      case PlyType::Int8:
        return static_cast<std::int8_t>(bits);
      case PlyType::UInt8:
        return static_cast<std::uint8_t>(bits);
      case PlyType::Int16:
        return static_cast<std::int16_t>(bits);
      case PlyType::UInt16:
        return static_cast<std::uint16_t>(bits);
      case PlyType::Int32:
        return static_cast<std::int32_t>(bits);
      case PlyType::UInt32:
        return static_cast<std::uint32_t>(bits);
      case PlyType::Float32:
        return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
      case PlyType::Float64:
        return std::bit_cast<double>(bits);
    }
    return 0.0;
  }

  double read_ascii(std::string_view context) {
    while (pos_ < data_.size() && std::isspace(static_cast<unsigned char>(data_[pos_])) != 0) {
      ++pos_;
    }
    const std::size_t start = pos_;
    while (pos_ < data_.size() && std::isspace(static_cast<unsigned char>(data_[pos_])) == 0) {
      ++pos_;
    }
    if (start == pos_) {
      throw MeshError(fmt::format("PLY parse failure: unexpected end of data reading {}", context));
    }
    const std::string token = data_.substr(start, pos_ - start);
    try {
      std::size_t used = 0;
      const double v = std::stod(token, &used);
      if (used != token.size()) {
        throw std::invalid_argument(token);
      }
      return v;
    } catch (const std::exception&) {
      throw MeshError(fmt::format("PLY parse failure: bad number '{}' in {}", token, context));
    }
  }

  const std::string& data_;
  std::size_t pos_;
  bool binary_;
};

std::vector<std::string_view> split_words(std::string_view line) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i])) != 0) ++i;
    const std::size_t start = i;
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i])) == 0) ++i;
    if (i > start) words.push_back(line.substr(start, i - start));
  }
  return words;
}

double to_unit_color(double raw, PlyType type) {
  switch (type) {
    case PlyType::UInt8:
      return raw / 255.0;
    case PlyType::UInt16:
      return raw / 65535.0;
    case PlyType::Float32:
    case PlyType::Float64:
      return raw;
    default:
      return raw / 255.0;
  }
}

}  // namespace

TriangleMesh parse_ply(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::optional<std::string_view> {
    if (pos >= bytes.size()) return std::nullopt;
    std::size_t end = bytes.find('\n', pos);
    if (end == std::string::npos) end = bytes.size();
    std::string_view line(bytes.data() + pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return line;
  };

  auto first = next_line();
  if (!first || *first != "ply") {
    throw MeshError("PLY parse failure: missing 'ply' magic");
  }
  bool binary = false;
  bool have_format = false;
  std::vector<PlyElement> elements;
  bool header_done = false;
  while (auto line = next_line()) {
    const auto words = split_words(*line);
    if (words.empty()) continue;
    const std::string_view key = words[0];
    if (key == "format") {
      if (words.size() < 2) throw MeshError("PLY parse failure: malformed format line");
      if (words[1] == "ascii") {
        binary = false;
      } else if (words[1] == "binary_little_endian") {
        binary = true;
      } else {
        throw MeshError(fmt::format("PLY parse failure: unsupported format '{}'", words[1]));
      }
      have_format = true;
    } else if (key == "comment" || key == "obj_info") {
      continue;
    } else if (key == "element") {
      if (words.size() != 3) throw MeshError("PLY parse failure: malformed element line");
      PlyElement el;
      el.name = std::string(words[1]);
      std::uint64_t count = 0;
      auto [p, ec] = std::from_chars(words[2].data(), words[2].data() + words[2].size(), count);
      if (ec != std::errc() || p != words[2].data() + words[2].size()) {
        throw MeshError(fmt::format("PLY parse failure: bad element count '{}'", words[2]));
      }
      el.count = count;
      elements.push_back(std::move(el));
    } else if (key == "property") {
      if (elements.empty()) throw MeshError("PLY parse failure: property before element");
      PlyProperty prop;
      if (words.size() == 5 && words[1] == "list") {
        auto ct = parse_ply_type(words[2]);
        auto it = parse_ply_type(words[3]);
        if (!ct || !it) throw MeshError("PLY parse failure: bad list property type");
        prop.is_list = true;
        prop.count_type = *ct;
        prop.type = *it;
        prop.name = std::string(words[4]);
      } else if (words.size() == 3) {
        auto t = parse_ply_type(words[1]);
        if (!t) throw MeshError(fmt::format("PLY parse failure: bad property type '{}'", words[1]));
        prop.type = *t;
        prop.name = std::string(words[2]);
      } else {
        throw MeshError("PLY parse failure: malformed property line");
      }
      elements.back().properties.push_back(std::move(prop));
    } else if (key == "end_header") {
      header_done = true;
      break;
    } else {
      throw MeshError(fmt::format("PLY parse failure: unknown header keyword '{}'", key));
    }
  }
  if (!header_done) throw MeshError("PLY parse failure: missing end_header");
  if (!have_format) throw MeshError("PLY parse failure: missing format line");

  // Guard against absurd counts before allocating.
  for (const auto& el : elements) {
    if (el.count > bytes.size()) {
      throw MeshError(fmt::format("PLY parse failure: element '{}' count {} exceeds file size",
                                  el.name, el.count));
    }
  }

  std::vector<Vec3> vertices;
  std::vector<Vec3> colors;
  std::vector<Face> faces;
  PlyReader reader(bytes, pos, binary);
  for (const auto& el : elements) {
    if (el.name == "vertex") {
      int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
      for (int i = 0; i < static_cast<int>(el.properties.size()); ++i) {
        const auto& name = el.properties[i].name;
        if (el.properties[i].is_list) continue;
        if (name == "x") ix = i;
        if (name == "y") iy = i;
        if (name == "z") iz = i;
        if (name == "red" || name == "r" || name == "diffuse_red") ir = i;
        if (name == "green" || name == "g" || name == "diffuse_green") ig = i;
        if (name == "blue" || name == "b" || name == "diffuse_blue") ib = i;
      }
      if (ix < 0 || iy < 0 || iz < 0) {
        throw MeshError("PLY parse failure: vertex element lacks x/y/z");
      }
      const bool has_color = ir >= 0 && ig >= 0 && ib >= 0;
      vertices.reserve(el.count);
      colors.reserve(el.count);
      std::vector<double> values(el.properties.size());
      for (std::size_t v = 0; v < el.count; ++v) {
        for (std::size_t p = 0; p < el.properties.size(); ++p) {
          const auto& prop = el.properties[p];
          if (prop.is_list) {
            const auto n = static_cast<std::size_t>(reader.read(prop.count_type, "vertex list"));
            for (std::size_t k = 0; k < n; ++k) reader.read(prop.type, "vertex list");
            values[p] = 0.0;
          } else {
            values[p] = reader.read(prop.type, fmt::format("vertex {}", v));
          }
        }
        vertices.emplace_back(values[ix], values[iy], values[iz]);
        if (has_color) {
          colors.emplace_back(to_unit_color(values[ir], el.properties[ir].type),
                              to_unit_color(values[ig], el.properties[ig].type),
                              to_unit_color(values[ib], el.properties[ib].type));
        } else {
          colors.emplace_back(0.5, 0.5, 0.5);
        }
      }
    } else if (el.name == "face") {
      faces.reserve(el.count);
      for (std::size_t f = 0; f < el.count; ++f) {
        for (const auto& prop : el.properties) {
          if (!prop.is_list) {
            reader.read(prop.type, fmt::format("face {}", f));
            continue;
          }
          const double raw_n = reader.read(prop.count_type, fmt::format("face {}", f));
          if (raw_n < 0 || raw_n > 1024) {
            throw MeshError(fmt::format("PLY parse failure: face {} has invalid vertex count", f));
          }
          const auto n = static_cast<std::size_t>(raw_n);
          std::vector<double> idx(n);
          for (auto& i : idx) i = reader.read(prop.type, fmt::format("face {}", f));
          if (prop.name != "vertex_indices" && prop.name != "vertex_index") continue;
          if (n < 3) {
            throw MeshError(fmt::format("PLY parse failure: face {} has fewer than 3 vertices", f));
          }
          for (std::size_t k = 1; k + 1 < n; ++k) {
            Face face{};
            const double tri[3] = {idx[0], idx[k], idx[k + 1]};
            for (int c = 0; c < 3; ++c) {
              if (tri[c] < -2147483648.0 || tri[c] > 2147483647.0 || tri[c] != std::floor(tri[c])) {
                throw MeshError(
                    fmt::format("face {}: face index out of range ({})", f, tri[c]));
              }
              face[c] = static_cast<int>(tri[c]);
            }
            faces.push_back(face);
          }
        }
      }
    } else {
      // Skip unknown elements.
      for (std::size_t i = 0; i < el.count; ++i) {
        for (const auto& prop : el.properties) {
          if (prop.is_list) {
            const auto n = static_cast<std::size_t>(reader.read(prop.count_type, el.name));
            for (std::size_t k = 0; k < n; ++k) reader.read(prop.type, el.name);
          } else {
            reader.read(prop.type, el.name);
          }
        }
      }
    }
  }
  return TriangleMesh(std::move(vertices), std::move(faces), std::move(colors));
}

TriangleMesh load_mesh(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MeshError(fmt::format("cannot open mesh file {}", path.string()));
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_ply(ss.str());
}

// ---------------------------------------------------------------------------
// PLY writing

namespace {

template <typename T>
void append_le(std::string& out, T value) {
  const auto bits = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(bits.data()), bits.size());
  } else {
    for (auto it = bits.rbegin(); it != bits.rend(); ++it) out.push_back(static_cast<char>(*it));
  }
}

std::uint8_t color_byte(double c) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0));
}

}  // namespace

std::string serialize_ply(const TriangleMesh& mesh) {
  std::string out = fmt::format(
      "ply\nformat binary_little_endian 1.0\n"
      "element vertex {}\n"
      "property float x\nproperty float y\nproperty float z\n"
      "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      "element face {}\n"
      "property list uchar int vertex_indices\n"
      "end_header\n",
      mesh.vertex_count(), mesh.face_count());
  out.reserve(out.size() + mesh.vertex_count() * 15 + mesh.face_count() * 13);
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    const Vec3& v = mesh.vertices()[i];
    const Vec3& c = mesh.colors()[i];
    append_le(out, static_cast<float>(v.x()));
    append_le(out, static_cast<float>(v.y()));
    append_le(out, static_cast<float>(v.z()));
    append_le(out, color_byte(c.x()));
    append_le(out, color_byte(c.y()));
    append_le(out, color_byte(c.z()));
  }
  for (const Face& f : mesh.faces()) {
    append_le(out, static_cast<std::uint8_t>(3));
    for (int idx : f) append_le(out, static_cast<std::int32_t>(idx));
  }
  return out;
}

void save_mesh(const TriangleMesh& mesh, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw MeshError(fmt::format("cannot write mesh file {}", path.string()));
  }
  const std::string bytes = serialize_ply(mesh);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw MeshError(fmt::format("I/O failure writing {}", path.string()));
  }
}

}  // namespace restyle
