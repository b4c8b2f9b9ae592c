#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "restyle/backends.hpp"
#include "restyle/camera.hpp"
#include "restyle/mesh.hpp"

namespace restyle {

struct FaceShare {
  int face;
  double ratio;
};

/// A square diffusion patch. Lateral patches live on the unfolded strip of
/// the four horizontal faces (kLateralStrip order, width 4S, wrapping);
/// x is the strip column. Top/bottom patches cover their whole face.
struct PatchDescriptor {
  bool lateral = true;
  int face = -1;  // owning face when !lateral
  int x = 0;
  int y = 0;
  int size = 0;
  std::vector<FaceShare> membership;
  double lambda = 1.0;  // |r_a - r_b|, 1 on a single face
};

/// Lateral patch at strip column x (taken modulo 4S).
PatchDescriptor make_strip_patch(int resolution, int x, int y, int size);

/// Tiles the lateral strip with offsets 0, stride, 2*stride, ... < 4S and
/// rows 0, stride, ..., S - size, plus one whole-face patch for each of +Y
/// and -Y. Throws std::invalid_argument unless 1 <= stride <= size <= S.
std::vector<PatchDescriptor> plan_patches(const CubemapRig& rig, int patch_size, int stride);

using FaceImages = std::array<ImageBuffer, 6>;
using FaceConditions = std::array<ConditionMap, 6>;

ImageBuffer gather_patch(const FaceImages& faces, const PatchDescriptor& patch);
ConditionMap gather_condition(const FaceConditions& faces, const PatchDescriptor& patch);

/// lambda * f(X, D_p) + (1 - lambda) * f(X, Dhat_p). The unused branch is
/// not evaluated when lambda is 0 or 1.
ImageBuffer blended_patch_step(const DiffusionState& patch_state, const ConditionMap& depth_crop,
                               const ConditionMap& distance_crop, double lambda,
                               Denoiser& denoiser);

struct BlendOptions {
  int threads = 1;
};

/// One Eq.-1 step over every patch. Patch outputs are averaged per pixel
/// with uniform weights; the reduction runs in a canonical patch order so
/// the result does not depend on the order of `patches`.
FaceImages blended_denoise_step(const std::array<DiffusionState, 6>& states,
                                const std::vector<PatchDescriptor>& patches,
                                const FaceConditions& depth, const FaceConditions& distance,
                                Denoiser& denoiser, const BlendOptions& options = {});

struct CubemapConfig {
  int patch_size = 0;  // 0: the face resolution
  int stride = 0;      // 0: half the patch size
  int steps = 0;       // 0: the denoiser's default
  std::uint64_t seed = 0;
  int threads = 1;
  std::optional<std::filesystem::path> debug_dir;
};

struct CubemapResult {
  FaceImages faces;
  FaceConditions depth;
  FaceConditions distance;
  NormalizationRange depth_range;
  NormalizationRange distance_range;
  std::vector<PatchDescriptor> patches;
  int steps = 0;
  std::vector<std::string> warnings;
};

/// Renders depth and distance for each rig face, normalizes each kind over
/// the whole cubemap, and runs the blended sampler from per-face seeded
/// noise.
CubemapResult generate_cubemap(const TriangleMesh& mesh, const CubemapRig& rig,
                               const std::string& prompt, Denoiser& denoiser,
                               const CubemapConfig& config);

}  // namespace restyle
