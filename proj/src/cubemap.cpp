#include "restyle/cubemap.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <numeric>
#include <thread>
#include <tuple>

#include <fmt/format.h>

#include "restyle/hashing.hpp"
#include "restyle/image_io.hpp"
#include "restyle/raster.hpp"

namespace restyle {

namespace {

/// Face and column on that face for strip column x.
std::pair<int, int> strip_column(int resolution, int x) {
  const int w = 4 * resolution;
  const int xs = ((x % w) + w) % w;
  return {kLateralStrip[xs / resolution], xs % resolution};
}

auto patch_key(const PatchDescriptor& p) { return std::tuple(!p.lateral, p.face, p.y, p.x, p.size); }

int resolution_of(const FaceImages& faces) { return faces[0].width(); }

template <typename Fn>
void for_each_patch_pixel(const PatchDescriptor& patch, int resolution, Fn fn) {
  for (int j = 0; j < patch.size; ++j) {
    for (int i = 0; i < patch.size; ++i) {
      if (patch.lateral) {
        const auto [face, col] = strip_column(resolution, patch.x + i);
        fn(i, j, face, col, patch.y + j);
      } else {
        fn(i, j, patch.face, patch.x + i, patch.y + j);
      }
    }
  }
}

ImageBuffer gather(const FaceImages& faces, const PatchDescriptor& patch) {
  const int ch = faces[0].channels();
  ImageBuffer out(patch.size, patch.size, ch);
  for_each_patch_pixel(patch, resolution_of(faces), [&](int i, int j, int f, int x, int y) {
    for (int c = 0; c < ch; ++c) out.at(i, j, c) = faces[f].at(x, y, c);
  });
  return out;
}

}  // namespace

PatchDescriptor make_strip_patch(int resolution, int x, int y, int size) {
  PatchDescriptor p;
  p.lateral = true;
  p.x = ((x % (4 * resolution)) + 4 * resolution) % (4 * resolution);
  p.y = y;
  p.size = size;
  std::array<int, 6> counts{};
  for (int i = 0; i < size; ++i) ++counts[strip_column(resolution, p.x + i).first];
  for (int k = 0; k < 4; ++k) {
    const int f = kLateralStrip[(p.x / resolution + k) % 4];
    if (counts[f] > 0) p.membership.push_back({f, static_cast<double>(counts[f]) / size});
  }
  p.lambda = p.membership.size() == 1
                 ? 1.0
                 : std::abs(p.membership[0].ratio - p.membership[1].ratio);
  return p;
}

std::vector<PatchDescriptor> plan_patches(const CubemapRig& rig, int patch_size, int stride) {
  const int s = rig.resolution;
  if (patch_size < 1 || patch_size > s || stride < 1 || stride > patch_size) {
    throw std::invalid_argument(fmt::format(
        "plan_patches: need 1 <= stride ({}) <= patch ({}) <= face resolution ({})", stride,
        patch_size, s));
  }
  std::vector<int> rows;
  for (int y = 0; y + patch_size < s; y += stride) rows.push_back(y);
  rows.push_back(s - patch_size);
  std::vector<PatchDescriptor> out;
  for (int y : rows) {
    for (int x = 0; x < 4 * s; x += stride) out.push_back(make_strip_patch(s, x, y, patch_size));
  }
  for (CubeFace f : {CubeFace::PosY, CubeFace::NegY}) {
    PatchDescriptor p;
    p.lateral = false;
    p.face = static_cast<int>(f);
    p.size = s;
    p.membership = {{p.face, 1.0}};
    p.lambda = 1.0;
    out.push_back(std::move(p));
  }
  return out;
}

ImageBuffer gather_patch(const FaceImages& faces, const PatchDescriptor& patch) {
  return gather(faces, patch);
}

ConditionMap gather_condition(const FaceConditions& faces, const PatchDescriptor& patch) {
  ConditionMap out;
  out.kind = faces[0].kind;
  FaceImages norm;
  for (int f = 0; f < 6; ++f) norm[f] = faces[f].normalized;
  out.normalized = gather(norm, patch);
  if (!faces[0].map.empty()) {
    FaceImages maps;
    for (int f = 0; f < 6; ++f) maps[f] = faces[f].map;
    out.map = gather(maps, patch);
  }
  return out;
}

ImageBuffer blended_patch_step(const DiffusionState& patch_state, const ConditionMap& depth_crop,
                               const ConditionMap& distance_crop, double lambda,
                               Denoiser& denoiser) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda outside [0,1]");
  if (lambda == 1.0) return denoiser.denoise_step(patch_state, depth_crop, nullptr);
  if (lambda == 0.0) return denoiser.denoise_step(patch_state, distance_crop, nullptr);
  const ImageBuffer a = denoiser.denoise_step(patch_state, depth_crop, nullptr);
  const ImageBuffer b = denoiser.denoise_step(patch_state, distance_crop, nullptr);
  ImageBuffer out(a.width(), a.height(), a.channels());
  for (std::size_t i = 0; i < out.samples().size(); ++i)
    out.samples()[i] = lambda * a.samples()[i] + (1.0 - lambda) * b.samples()[i];
  return out;
}

FaceImages blended_denoise_step(const std::array<DiffusionState, 6>& states,
                                const std::vector<PatchDescriptor>& patches,
                                const FaceConditions& depth, const FaceConditions& distance,
                                Denoiser& denoiser, const BlendOptions& options) {
  const int step = states[0].step;
  FaceImages current;
  for (int f = 0; f < 6; ++f) {
    if (states[f].step != step || states[f].total_steps != states[0].total_steps) {
      throw std::invalid_argument("blended_denoise_step: faces are at different steps");
    }
    if (step < 1) throw std::invalid_argument("blended_denoise_step: step must be >= 1");
    current[f] = states[f].image;
  }
  const int s = resolution_of(current);

  std::vector<ImageBuffer> outputs(patches.size());
  std::vector<std::exception_ptr> errors(patches.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < patches.size(); i = next++) {
      try {
        const PatchDescriptor& p = patches[i];
        DiffusionState ps{gather(current, p), step, states[0].total_steps, states[0].prompt,
                          states[0].seed};
        outputs[i] = blended_patch_step(ps, gather_condition(depth, p), gather_condition(distance, p),
                                        p.lambda, denoiser);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(options.threads, static_cast<int>(patches.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return patch_key(patches[a]) < patch_key(patches[b]);
  });
  FaceImages sum;
  std::array<std::vector<int>, 6> count;
  for (int f = 0; f < 6; ++f) {
    sum[f] = ImageBuffer(s, s, 3);
    count[f].assign(static_cast<std::size_t>(s) * s, 0);
  }
  for (std::size_t i : order) {
    const ImageBuffer& o = outputs[i];
    for_each_patch_pixel(patches[i], s, [&](int pi, int pj, int f, int x, int y) {
      ++count[f][static_cast<std::size_t>(y) * s + x];
      for (int c = 0; c < 3; ++c) sum[f].at(x, y, c) += o.at(pi, pj, c);
    });
  }
  for (int f = 0; f < 6; ++f) {
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const int n = count[f][static_cast<std::size_t>(y) * s + x];
        for (int c = 0; c < 3; ++c) {
          sum[f].at(x, y, c) = n > 0 ? sum[f].at(x, y, c) / n : current[f].at(x, y, c);
        }
      }
    }
  }
  return sum;
}

CubemapResult generate_cubemap(const TriangleMesh& mesh, const CubemapRig& rig,
                               const std::string& prompt, Denoiser& denoiser,
                               const CubemapConfig& config) {
  const int s = rig.resolution;
  const int patch = config.patch_size > 0 ? config.patch_size : s;
  const int stride = config.stride > 0 ? config.stride : std::max(1, patch / 2);
  CubemapResult result;
  result.patches = plan_patches(rig, patch, stride);
  result.steps = config.steps > 0 ? config.steps : denoiser.default_steps();

  FaceImages depth_maps;
  FaceImages distance_maps;
  for (int f = 0; f < 6; ++f) {
    const RenderOutput out = render(mesh, rig.faces[f]);
    std::size_t holes = 0;
    for (int id : out.face_id) holes += id < 0 ? 1 : 0;
    if (holes > 0) {
      result.warnings.push_back(fmt::format(
          "cubemap face {} sees no geometry at {} of {} pixels; is the rig inside the scene?",
          kCubeFaceNames[f], holes, out.face_id.size()));
    }
    depth_maps[f] = out.depth;
    distance_maps[f] = out.distance;
  }
  std::array<const ImageBuffer*, 6> dp{};
  std::array<const ImageBuffer*, 6> hp{};
  for (int f = 0; f < 6; ++f) {
    dp[f] = &depth_maps[f];
    hp[f] = &distance_maps[f];
  }
  result.depth_range = percentile_range(dp);
  result.distance_range = percentile_range(hp);
  for (int f = 0; f < 6; ++f) {
    result.depth[f] = make_condition(ConditionKind::Depth, depth_maps[f], result.depth_range);
    result.distance[f] = make_condition(ConditionKind::Distance, distance_maps[f], result.distance_range);
  }

  if (config.debug_dir) {
    std::filesystem::create_directories(*config.debug_dir);
    for (int f = 0; f < 6; ++f) {
      const auto base = *config.debug_dir / kCubeFaceNames[f];
      dump_image(base.string() + "_depth.pfm", depth_maps[f]);
      dump_image(base.string() + "_distance.pfm", distance_maps[f]);
      write_file(base.string() + "_depth_cond.png", encode_png16(result.depth[f].normalized));
      write_file(base.string() + "_distance_cond.png", encode_png16(result.distance[f].normalized));
    }
  }

  std::array<DiffusionState, 6> states;
  for (int f = 0; f < 6; ++f) {
    states[f] = DiffusionState{seeded_noise(s, s, mix64(config.seed * 6 + static_cast<std::uint64_t>(f))),
                               result.steps, result.steps, prompt, config.seed};
  }
  for (int t = result.steps; t >= 1; --t) {
    for (auto& st : states) st.step = t;
    FaceImages next = blended_denoise_step(states, result.patches, result.depth, result.distance,
                                           denoiser, BlendOptions{config.threads});
    for (int f = 0; f < 6; ++f) states[f].image = std::move(next[f]);
    if (config.debug_dir) {
      for (int f = 0; f < 6; ++f) {
        write_file(*config.debug_dir / fmt::format("step_{:03d}_{}.png", t - 1, kCubeFaceNames[f]),
                   encode_png8(states[f].image));
      }
    }
  }
  for (int f = 0; f < 6; ++f) result.faces[f] = std::move(states[f].image);
  return result;
}

}  // namespace restyle
