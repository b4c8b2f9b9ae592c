#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "restyle/backends.hpp"
#include "restyle/image.hpp"

namespace restyle {

class DegeneratePairError : public std::domain_error {
 public:
  DegeneratePairError() : std::domain_error("degenerate pair: zero edit direction") {}
};

/// Embeddings of two original views (o_a, o_b) and the matching generated
/// views (g_a, g_b). All unit norm, one dimension.
struct EvalPair {
  std::vector<double> o_a;
  std::vector<double> o_b;
  std::vector<double> g_a;
  std::vector<double> g_b;
};

/// Inner product of two unit vectors. Throws std::invalid_argument on a
/// dimension mismatch or a norm off by more than 1e-6.
double text_image_similarity(std::span<const double> text, std::span<const double> image);

/// Cosine between g_a - o_a and g_b - o_b.
double direction_consistency(const EvalPair& pair);

/// Cosine between two edit directions; no unit-norm requirement. Throws
/// DegeneratePairError when either has norm below 1e-12.
double edit_direction_cosine(std::span<const double> da, std::span<const double> db);

struct EvalOptions {
  int sampled_views = 4;
  int held_out = -1;  // < 0: drawn with the seed
  std::uint64_t seed = 0;
};

struct SkippedPair {
  int view = 0;
  std::string reason;
};

struct EvalReport {
  double text_image_similarity = 0.0;
  std::optional<double> direction_consistency;
  int n_pairs = 0;
  int held_out = 0;
  std::vector<int> sampled;
  std::vector<SkippedPair> skipped;
  std::string embedder;

  [[nodiscard]] nlohmann::ordered_json to_json() const;
};

/// Pairs each sampled view with the held-out view, averages both metrics
/// over the sampled views. Needs at least two views of each kind, equal counts.
EvalReport evaluate_scene(std::span<const ImageBuffer> original, std::span<const ImageBuffer> generated,
                          const std::string& prompt, Embedder& embedder, const EvalOptions& options = {});

}  // namespace restyle
