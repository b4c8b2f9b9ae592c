#include "restyle/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "restyle/hashing.hpp"

namespace restyle {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_dims(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument(fmt::format("embedding dimensions differ ({} vs {})", a.size(), b.size()));
  }
}

void require_unit(std::span<const double> v, const char* what) {
  const double n = std::sqrt(dot(v, v));
  if (std::abs(n - 1.0) > 1e-6) throw std::invalid_argument(fmt::format("{} has norm {}, expected 1", what, n));
}

std::vector<double> minus(std::span<const double> a, std::span<const double> b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

}  // namespace

double text_image_similarity(std::span<const double> text, std::span<const double> image) {
  require_dims(text, image);
  require_unit(text, "text embedding");
  require_unit(image, "image embedding");
  return std::clamp(dot(text, image), -1.0, 1.0);
}

double edit_direction_cosine(std::span<const double> da, std::span<const double> db) {
  require_dims(da, db);
  const double na = dot(da, da);
  const double nb = dot(db, db);
  if (std::sqrt(na) < 1e-12 || std::sqrt(nb) < 1e-12) throw DegeneratePairError();
  return std::clamp(dot(da, db) / std::sqrt(na * nb), -1.0, 1.0);
}

double direction_consistency(const EvalPair& pair) {
  require_dims(pair.o_a, pair.o_b);
  require_dims(pair.o_a, pair.g_a);
  require_dims(pair.o_a, pair.g_b);
  require_unit(pair.o_a, "o_a");
  require_unit(pair.o_b, "o_b");
  require_unit(pair.g_a, "g_a");
  require_unit(pair.g_b, "g_b");
  return edit_direction_cosine(minus(pair.g_a, pair.o_a), minus(pair.g_b, pair.o_b));
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["text_image_similarity"] = text_image_similarity;
  j["direction_consistency"] = direction_consistency ? nlohmann::ordered_json(*direction_consistency) : nullptr;
  j["n_pairs"] = n_pairs;
  j["held_out_view"] = held_out;
  j["sampled_views"] = sampled;
  auto skip = nlohmann::ordered_json::array();
  for (const SkippedPair& s : skipped) skip.push_back({{"view", s.view}, {"reason", s.reason}});
  j["skipped"] = skip;
  j["embedder"] = embedder;
  j["note"] =
      "direction_consistency is the raw cosine of the two edit directions; its better/worse "
      "direction is ambiguous, so no judgment is applied";
  return j;
}

EvalReport evaluate_scene(std::span<const ImageBuffer> original, std::span<const ImageBuffer> generated,
                          const std::string& prompt, Embedder& embedder, const EvalOptions& options) {
  if (original.size() < 2 || generated.size() < 2) {
    throw std::invalid_argument("evaluate_scene: need at least 2 original and 2 generated views");
  }
  if (original.size() != generated.size()) {
    throw std::invalid_argument(fmt::format("evaluate_scene: {} original vs {} generated views",
                                            original.size(), generated.size()));
  }
  if (options.sampled_views < 1) throw std::invalid_argument("evaluate_scene: sampled_views must be >= 1");
  const int n = static_cast<int>(original.size());
  if (options.held_out >= n) throw std::invalid_argument("evaluate_scene: held_out out of range");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(unit_double(mix64(options.seed ^ mix64(static_cast<std::uint64_t>(i)))) * (i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  EvalReport report;
  report.embedder = embedder.name();
  report.held_out = options.held_out >= 0 ? options.held_out : order.front();
  for (int v : order) {
    if (v == report.held_out || static_cast<int>(report.sampled.size()) >= options.sampled_views) continue;
    report.sampled.push_back(v);
  }

  const std::vector<double> text = embedder.embed_text(prompt);
  const std::size_t h = static_cast<std::size_t>(report.held_out);
  const std::vector<double> o_h = embedder.embed_image(original[h]);
  const std::vector<double> g_h = embedder.embed_image(generated[h]);
  double sim = 0.0;
  double dir = 0.0;
  for (int v : report.sampled) {
    const std::size_t k = static_cast<std::size_t>(v);
    const std::vector<double> g_k = embedder.embed_image(generated[k]);
    sim += text_image_similarity(text, g_k);
    try {
      dir += direction_consistency(EvalPair{embedder.embed_image(original[k]), o_h, g_k, g_h});
      ++report.n_pairs;
    } catch (const DegeneratePairError& e) {
      report.skipped.push_back({v, e.what()});
    }
  }
  report.text_image_similarity = sim / static_cast<double>(report.sampled.size());
  if (report.n_pairs > 0) report.direction_consistency = dir / report.n_pairs;
  return report;
}

}  // namespace restyle
