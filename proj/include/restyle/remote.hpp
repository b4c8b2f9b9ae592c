#pragma once

#include <memory>
#include <semaphore>
#include <string>

#include <json.hpp>

#include "restyle/backends.hpp"

namespace restyle {

namespace protocol {

// Request/response codecs for the HTTP+JSON wire protocol. Images travel
// as base64 8-bit PNG, condition maps as base64 16-bit PNG of the
// normalized map, depth as base64 PFM.

nlohmann::json denoise_request(const DiffusionState& state, const ConditionMap& condition,
                               const GenerationMask* mask);
nlohmann::json generate_request(const std::string& prompt, const ConditionMap& condition,
                                const GenerationMask* mask, const ImageBuffer* init,
                                std::uint64_t seed, int steps);

ImageBuffer image_field(const nlohmann::json& body, const char* key);
/// Decoded 1-channel condition map; `map` is empty.
ConditionMap condition_field(const nlohmann::json& body);
/// Decoded mask thresholded to {0,1}, or an empty buffer when absent.
GenerationMask mask_field(const nlohmann::json& body);
ImageBuffer depth_field(const nlohmann::json& body);
std::vector<double> vector_field(const nlohmann::json& body);

std::string encode_image(const ImageBuffer& image);
std::string encode_depth(const ImageBuffer& depth);

}  // namespace protocol

struct RemoteOptions {
  std::string base_url;
  int max_in_flight = 4;
  int timeout_seconds = 600;
};

/// Shared HTTP session: parses the base URL and bounds in-flight requests.
class RemoteSession {
 public:
  explicit RemoteSession(RemoteOptions options);

  nlohmann::json post(const std::string& path, const nlohmann::json& body);
  nlohmann::json get(const std::string& path);
  [[nodiscard]] const std::string& base_url() const { return options_.base_url; }

 private:
  RemoteOptions options_;
  std::string host_;
  int port_ = 80;
  std::string prefix_;
  std::counting_semaphore<1024> slots_;
};

class RemoteDenoiser final : public Denoiser {
 public:
  RemoteDenoiser(std::shared_ptr<RemoteSession> session, int steps)
      : session_(std::move(session)), steps_(steps) {}
  [[nodiscard]] std::string name() const override { return "remote:" + session_->base_url(); }
  [[nodiscard]] int default_steps() const override { return steps_; }
  ImageBuffer denoise_step(const DiffusionState& state, const ConditionMap& condition,
                           const GenerationMask* mask) override;
  ImageBuffer generate(const std::string& prompt, const ConditionMap& condition,
                       const GenerationMask* mask, const ImageBuffer* init, std::uint64_t seed,
                       int steps) override;

 private:
  std::shared_ptr<RemoteSession> session_;
  int steps_;
};

class RemoteDepthEstimator final : public DepthEstimator {
 public:
  explicit RemoteDepthEstimator(std::shared_ptr<RemoteSession> session)
      : session_(std::move(session)) {}
  [[nodiscard]] std::string name() const override { return "remote:" + session_->base_url(); }
  ImageBuffer estimate_depth(const ImageBuffer& image) override;

 private:
  std::shared_ptr<RemoteSession> session_;
};

class RemoteEmbedder final : public Embedder {
 public:
  explicit RemoteEmbedder(std::shared_ptr<RemoteSession> session) : session_(std::move(session)) {}
  [[nodiscard]] std::string name() const override { return "remote:" + session_->base_url(); }
  std::vector<double> embed_image(const ImageBuffer& image) override;
  std::vector<double> embed_text(const std::string& text) override;

 private:
  std::shared_ptr<RemoteSession> session_;
};

/// Remote backends share one session. `steps` is the sampler length used
/// when the caller runs the step loop itself; 0 asks the service's
/// /healthz for default_steps and falls back to 50.
Backends make_remote_backends(const RemoteOptions& options, int steps = 0);

}  // namespace restyle
