#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "restyle/image.hpp"

namespace restyle {

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ConditionKind { Depth, Distance };

const char* condition_kind_name(ConditionKind kind);
ConditionKind parse_condition_kind(const std::string& name);

/// Inverse-depth normalization window in meters.
struct NormalizationRange {
  double near = 1.0;
  double far = 1.0;
};

/// 1st/99th percentile (nearest rank) of the positive finite samples across
/// all `maps`. Throws std::invalid_argument when no sample is positive.
NormalizationRange percentile_range(std::span<const ImageBuffer* const> maps,
                                    double lo_pct = 0.01, double hi_pct = 0.99);

/// clamp((1/d - 1/far) / (1/near - 1/far), 0, 1); non-positive d maps to 0.
/// A collapsed window maps every positive sample to 1.
ImageBuffer normalize_condition(const ImageBuffer& map, const NormalizationRange& range);

struct ConditionMap {
  ConditionKind kind = ConditionKind::Depth;
  ImageBuffer map;         // meters; may be empty when only the normalized map is known
  ImageBuffer normalized;  // [0,1], near is bright

  [[nodiscard]] ConditionMap crop(int x0, int y0, int w, int h) const;
};

ConditionMap make_condition(ConditionKind kind, ImageBuffer map, const NormalizationRange& range);
/// Normalizes with the map's own percentile window.
ConditionMap make_condition(ConditionKind kind, ImageBuffer map);

/// 1 = generate, 0 = preserve.
using GenerationMask = ImageBuffer;

/// Throws std::invalid_argument unless `mask` is 1-channel, {0,1}, and the
/// size of `like`.
void validate_mask(const GenerationMask& mask, const ImageBuffer& like);

/// Copies `original` into `out` wherever mask == 0.
void apply_preservation(ImageBuffer& out, const ImageBuffer& original, const GenerationMask& mask);

struct DiffusionState {
  ImageBuffer image;
  int step = 1;
  int total_steps = 1;
  std::string prompt;
  std::uint64_t seed = 0;
};

/// Per-pixel seeded uniform noise in [0,1), 3 channels.
ImageBuffer seeded_noise(int width, int height, std::uint64_t seed);

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual int default_steps() const = 0;

  /// X_{t-1} from X_t. mask == nullptr generates everywhere.
  virtual ImageBuffer denoise_step(const DiffusionState& state, const ConditionMap& condition,
                                   const GenerationMask* mask) = 0;

  /// Full sampler from seeded noise (init under mask == 0). The default
  /// loops denoise_step from t = steps down to 1.
  virtual ImageBuffer generate(const std::string& prompt, const ConditionMap& condition,
                               const GenerationMask* mask, const ImageBuffer* init,
                               std::uint64_t seed, int steps);
};

class DepthEstimator {
 public:
  virtual ~DepthEstimator() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  virtual ImageBuffer estimate_depth(const ImageBuffer& image) = 0;
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  virtual std::vector<double> embed_image(const ImageBuffer& image) = 0;
  virtual std::vector<double> embed_text(const std::string& text) = 0;
};

/// Procedural target psi(condition, prompt, seed): a prompt/seed hue scaled
/// by 0.3 + 0.5 * normalized condition, plus 0.1 * low-frequency value
/// noise. Affine in the normalized condition.
ImageBuffer stub_target(const ImageBuffer& normalized_condition, const std::string& prompt,
                        std::uint64_t seed);

/// X_{t-1} = ((t - 1) * X_t + psi) / t, so X_0 == psi exactly.
class StubDenoiser final : public Denoiser {
 public:
  explicit StubDenoiser(int steps = 20) : steps_(steps) {}
  [[nodiscard]] std::string name() const override { return "stub"; }
  [[nodiscard]] int default_steps() const override { return steps_; }
  ImageBuffer denoise_step(const DiffusionState& state, const ConditionMap& condition,
                           const GenerationMask* mask) override;

 private:
  int steps_;
};

struct StubDepthOptions {
  double scale = 1.0;        // a in a * D + b
  double shift = 0.0;        // b
  double noise_amplitude = 0.0;
  int noise_cell = 32;       // pixels per value-noise cell
  std::uint64_t noise_seed = 0;
};

/// Returns the depth registered for an image (keyed by content hash),
/// transformed by the configured affine map and smooth noise.
class StubDepthEstimator final : public DepthEstimator {
 public:
  explicit StubDepthEstimator(StubDepthOptions options = {}) : options_(options) {}
  [[nodiscard]] std::string name() const override { return "stub"; }

  void register_depth(const ImageBuffer& image, const ImageBuffer& depth);
  ImageBuffer estimate_depth(const ImageBuffer& image) override;

 private:
  StubDepthOptions options_;
  std::mutex mutex_;
  std::unordered_map<std::uint64_t, ImageBuffer> registry_;
};

/// Seeded hash projections: 16x16 block means for images, hashed token
/// counts for text. Unit norm.
class StubEmbedder final : public Embedder {
 public:
  explicit StubEmbedder(int dimension = 512, std::uint64_t seed = 0)
      : dimension_(dimension), seed_(seed) {}
  [[nodiscard]] std::string name() const override { return "stub"; }
  [[nodiscard]] int dimension() const { return dimension_; }
  std::vector<double> embed_image(const ImageBuffer& image) override;
  std::vector<double> embed_text(const std::string& text) override;

 private:
  int dimension_;
  std::uint64_t seed_;
};

/// Scales to unit L2 norm; throws BackendError on a zero vector.
void normalize_embedding(std::vector<double>& v);

struct Backends {
  std::shared_ptr<Denoiser> denoiser;
  std::shared_ptr<DepthEstimator> depth;
  std::shared_ptr<Embedder> embedder;
  /// Non-null for the in-process stub: the pipeline registers rendered
  /// depths here so estimate_depth can answer.
  std::shared_ptr<StubDepthEstimator> depth_registry;
};

Backends make_stub_backends(int steps = 20, StubDepthOptions depth_options = {});

/// "stub" or an http(s) base URL of a service speaking the wire protocol.
Backends make_backends(const std::string& spec, int max_in_flight = 4);

}  // namespace restyle
