#include "restyle/backends.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fmt/format.h>

#include "restyle/hashing.hpp"

namespace restyle {

namespace {

double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  return unit_double(mix64(seed ^ mix64(static_cast<std::uint64_t>(ix) * 0x9e3779b1ULL +
                                        static_cast<std::uint64_t>(iy))));
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

/// Bilinear value noise in [0,1) with `cell` pixels per lattice cell.
double value_noise(std::uint64_t seed, double x, double y, double cell) {
  const double gx = x / cell;
  const double gy = y / cell;
  const double fx = std::floor(gx);
  const double fy = std::floor(gy);
  const auto ix = static_cast<std::int64_t>(fx);
  const auto iy = static_cast<std::int64_t>(fy);
  const double tx = smoothstep(gx - fx);
  const double ty = smoothstep(gy - fy);
  const double a = lattice(seed, ix, iy);
  const double b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1);
  const double d = lattice(seed, ix + 1, iy + 1);
  return (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty;
}

std::array<double, 3> hsv(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh);
  const double f = hh - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

std::uint64_t prompt_key(const std::string& prompt, std::uint64_t seed) {
  Fnv1a h;
  h.update(prompt);
  h.update_u64(seed);
  return mix64(h.value());
}

double projection_weight(std::uint64_t seed, std::uint64_t feature, int j) {
  return 2.0 * unit_double(mix64(seed ^ mix64(feature * 0x100000001b3ULL + static_cast<std::uint64_t>(j)))) -
         1.0;
}

}  // namespace

const char* condition_kind_name(ConditionKind kind) {
  return kind == ConditionKind::Depth ? "depth" : "distance";
}

ConditionKind parse_condition_kind(const std::string& name) {
  if (name == "depth") return ConditionKind::Depth;
  if (name == "distance") return ConditionKind::Distance;
  throw std::invalid_argument(fmt::format("unknown condition kind '{}'", name));
}

NormalizationRange percentile_range(std::span<const ImageBuffer* const> maps, double lo_pct,
                                    double hi_pct) {
  std::vector<double> values;
  for (const ImageBuffer* m : maps) {
    for (double d : m->samples()) {
      if (d > 0.0 && std::isfinite(d)) values.push_back(d);
    }
  }
  if (values.empty()) throw std::invalid_argument("percentile_range: no positive samples");
  std::sort(values.begin(), values.end());
  const auto rank = [&](double p) {
    const auto i = static_cast<std::size_t>(std::floor(p * static_cast<double>(values.size() - 1)));
    return values[std::min(i, values.size() - 1)];
  };
  return {rank(lo_pct), rank(hi_pct)};
}

ImageBuffer normalize_condition(const ImageBuffer& map, const NormalizationRange& range) {
  ImageBuffer out(map.width(), map.height(), 1);
  const double inv_far = 1.0 / range.far;
  const double span = 1.0 / range.near - inv_far;
  auto src = map.samples();
  auto dst = out.samples();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const double d = src[i * static_cast<std::size_t>(map.channels())];
    if (!(d > 0.0) || !std::isfinite(d)) continue;
    dst[i] = span > 1e-15 ? std::clamp((1.0 / d - inv_far) / span, 0.0, 1.0) : 1.0;
  }
  return out;
}

ConditionMap ConditionMap::crop(int x0, int y0, int w, int h) const {
  ConditionMap out;
  out.kind = kind;
  if (!map.empty()) out.map = map.crop(x0, y0, w, h);
  out.normalized = normalized.crop(x0, y0, w, h);
  return out;
}

ConditionMap make_condition(ConditionKind kind, ImageBuffer map, const NormalizationRange& range) {
  ConditionMap c;
  c.kind = kind;
  c.normalized = normalize_condition(map, range);
  c.map = std::move(map);
  return c;
}

ConditionMap make_condition(ConditionKind kind, ImageBuffer map) {
  const ImageBuffer* one[] = {&map};
  return make_condition(kind, std::move(map), percentile_range(one));
}

void validate_mask(const GenerationMask& mask, const ImageBuffer& like) {
  if (mask.channels() != 1) throw std::invalid_argument("mask must have one channel");
  require_same_size(mask, like, "mask");
  for (double v : mask.samples()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("mask values must be 0 or 1");
  }
}

void apply_preservation(ImageBuffer& out, const ImageBuffer& original, const GenerationMask& mask) {
  const int ch = out.channels();
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      if (mask.at(x, y) != 0.0) continue;
      for (int c = 0; c < ch; ++c) out.at(x, y, c) = original.at(x, y, c);
    }
  }
}

ImageBuffer seeded_noise(int width, int height, std::uint64_t seed) {
  ImageBuffer out(width, height, 3);
  auto s = out.samples();
  const std::uint64_t base = mix64(seed ^ 0x6e6f697365ULL);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = unit_double(mix64(base + i));
  return out;
}

ImageBuffer Denoiser::generate(const std::string& prompt, const ConditionMap& condition,
                               const GenerationMask* mask, const ImageBuffer* init,
                               std::uint64_t seed, int steps) {
  if (steps < 1) throw std::invalid_argument("generate: steps must be >= 1");
  const int w = condition.normalized.width();
  const int h = condition.normalized.height();
  DiffusionState state{seeded_noise(w, h, seed), steps, steps, prompt, seed};
  if (mask) validate_mask(*mask, state.image);
  if (mask && init) {
    if (init->channels() != 3) throw std::invalid_argument("init must have three channels");
    require_same_size(*init, state.image, "init");
    apply_preservation(state.image, *init, *mask);
  }
  for (int t = steps; t >= 1; --t) {
    state.step = t;
    state.image = denoise_step(state, condition, mask);
  }
  return state.image;
}

ImageBuffer stub_target(const ImageBuffer& normalized_condition, const std::string& prompt,
                        std::uint64_t seed) {
  const std::uint64_t key = prompt_key(prompt, seed);
  const auto rgb = hsv(unit_double(key), 0.6, 1.0);
  const std::uint64_t noise_seed = mix64(key);
  ImageBuffer out(normalized_condition.width(), normalized_condition.height(), 3);
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      const double lum = 0.3 + 0.5 * normalized_condition.at(x, y);
      const double n = 0.1 * value_noise(noise_seed, x + 0.5, y + 0.5, 24.0);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = rgb[c] * lum + n;
    }
  }
  return out;
}

ImageBuffer StubDenoiser::denoise_step(const DiffusionState& state, const ConditionMap& condition,
                                       const GenerationMask* mask) {
  if (state.step < 1 || state.step > state.total_steps) {
    throw std::invalid_argument(
        fmt::format("denoise_step: step {} outside [1, {}]", state.step, state.total_steps));
  }
  if (state.image.channels() != 3) throw std::invalid_argument("denoise_step: image must be RGB");
  require_same_size(condition.normalized, state.image, "condition");
  if (mask) validate_mask(*mask, state.image);
  const ImageBuffer psi = stub_target(condition.normalized, state.prompt, state.seed);
  const double t = state.step;
  ImageBuffer out(state.image.width(), state.image.height(), 3);
  auto x = state.image.samples();
  auto p = psi.samples();
  auto o = out.samples();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ((t - 1.0) * x[i] + p[i]) / t;
  if (mask) apply_preservation(out, state.image, *mask);
  return out;
}

void StubDepthEstimator::register_depth(const ImageBuffer& image, const ImageBuffer& depth) {
  require_same_size(image, depth, "registered depth");
  std::lock_guard lock(mutex_);
  registry_[content_hash(image)] = depth;
}

ImageBuffer StubDepthEstimator::estimate_depth(const ImageBuffer& image) {
  ImageBuffer depth;
  {
    std::lock_guard lock(mutex_);
    const auto it = registry_.find(content_hash(image));
    if (it == registry_.end()) throw BackendError("stub depth: no depth registered for this image");
    depth = it->second;
  }
  double far = 0.0;
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      double& d = depth.at(x, y);
      if (!(d > 0.0)) continue;
      d = options_.scale * d + options_.shift;
      if (options_.noise_amplitude != 0.0) {
        d += options_.noise_amplitude *
             (value_noise(options_.noise_seed, x + 0.5, y + 0.5, options_.noise_cell) - 0.5);
      }
      far = std::max(far, d);
    }
  }
  if (!(far > 0.0)) throw BackendError("stub depth: transformed depth is not positive");
  for (double& d : depth.samples()) {
    if (!(d > 0.0)) d = far;
  }
  return depth;
}

void normalize_embedding(std::vector<double>& v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  if (!(n2 > 0.0) || !std::isfinite(n2)) throw BackendError("embedding has zero or invalid norm");
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
}

std::vector<double> StubEmbedder::embed_image(const ImageBuffer& image) {
  constexpr int kBlocks = 16;
  if (image.empty()) throw std::invalid_argument("embed_image: empty image");
  const int ch = image.channels();
  std::vector<double> sums(static_cast<std::size_t>(kBlocks * kBlocks * ch), 0.0);
  std::vector<int> counts(kBlocks * kBlocks, 0);
  for (int y = 0; y < image.height(); ++y) {
    const int by = y * kBlocks / image.height();
    for (int x = 0; x < image.width(); ++x) {
      const int b = by * kBlocks + x * kBlocks / image.width();
      ++counts[b];
      for (int c = 0; c < ch; ++c) sums[static_cast<std::size_t>(b * ch + c)] += image.at(x, y, c);
    }
  }
  std::vector<double> v(static_cast<std::size_t>(dimension_), 0.0);
  const auto add = [&](std::uint64_t feature, double value) {
    for (int j = 0; j < dimension_; ++j) v[j] += value * projection_weight(seed_, feature, j);
  };
  add(0, 1.0);
  for (std::size_t i = 0; i < sums.size(); ++i) {
    const int n = counts[i / static_cast<std::size_t>(ch)];
    if (n > 0) add(i + 1, sums[i] / n - 0.5);
  }
  normalize_embedding(v);
  return v;
}

std::vector<double> StubEmbedder::embed_text(const std::string& text) {
  std::vector<double> v(static_cast<std::size_t>(dimension_), 0.0);
  const auto add = [&](std::uint64_t feature) {
    for (int j = 0; j < dimension_; ++j) v[j] += projection_weight(seed_ ^ 0x74657874ULL, feature, j);
  };
  add(0);
  std::string token;
  const auto flush = [&] {
    if (token.empty()) return;
    Fnv1a h;
    h.update(token);
    add(h.value());
    token.clear();
  };
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else {
      flush();
    }
  }
  flush();
  normalize_embedding(v);
  return v;
}

Backends make_stub_backends(int steps, StubDepthOptions depth_options) {
  Backends b;
  b.denoiser = std::make_shared<StubDenoiser>(steps);
  b.depth_registry = std::make_shared<StubDepthEstimator>(depth_options);
  b.depth = b.depth_registry;
  b.embedder = std::make_shared<StubEmbedder>();
  return b;
}

}  // namespace restyle
