#include "restyle/remote.hpp"

#include <cmath>
#include <regex>

#include <fmt/format.h>
#include <httplib.h>

#include "restyle/image_io.hpp"

namespace restyle {

using nlohmann::json;

namespace protocol {

namespace {

const json& require(const json& body, const char* key) {
  const auto it = body.find(key);
  if (it == body.end()) throw BackendError(fmt::format("protocol: missing field '{}'", key));
  return *it;
}

Bytes decode_b64_field(const json& body, const char* key) {
  const json& v = require(body, key);
  if (!v.is_string()) throw BackendError(fmt::format("protocol: field '{}' must be a string", key));
  return base64_decode(v.get<std::string>());
}

void put_condition(json& j, const ConditionMap& condition) {
  j["condition_png16_b64"] = base64_encode(encode_png16(condition.normalized));
  j["condition_kind"] = condition_kind_name(condition.kind);
}

void put_mask(json& j, const GenerationMask* mask) {
  if (mask) j["mask_png_b64"] = base64_encode(encode_png8(*mask));
}

}  // namespace

std::string encode_image(const ImageBuffer& image) { return base64_encode(encode_png8(image)); }

std::string encode_depth(const ImageBuffer& depth) { return base64_encode(encode_pfm(depth)); }

json denoise_request(const DiffusionState& state, const ConditionMap& condition,
                     const GenerationMask* mask) {
  json j;
  j["image_png_b64"] = encode_image(state.image);
  j["step"] = state.step;
  j["total_steps"] = state.total_steps;
  j["prompt"] = state.prompt;
  j["seed"] = state.seed;
  put_condition(j, condition);
  put_mask(j, mask);
  return j;
}

json generate_request(const std::string& prompt, const ConditionMap& condition,
                      const GenerationMask* mask, const ImageBuffer* init, std::uint64_t seed,
                      int steps) {
  json j;
  j["total_steps"] = steps;
  j["prompt"] = prompt;
  j["seed"] = seed;
  put_condition(j, condition);
  put_mask(j, mask);
  if (init) j["init_png_b64"] = encode_image(*init);
  return j;
}

ImageBuffer image_field(const json& body, const char* key) {
  try {
    return decode_png(decode_b64_field(body, key));
  } catch (const BackendError&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError(fmt::format("protocol: field '{}': {}", key, e.what()));
  }
}

ConditionMap condition_field(const json& body) {
  ConditionMap c;
  const json& kind = require(body, "condition_kind");
  try {
    c.kind = parse_condition_kind(kind.get<std::string>());
  } catch (const std::exception& e) {
    throw BackendError(fmt::format("protocol: {}", e.what()));
  }
  c.normalized = image_field(body, "condition_png16_b64");
  if (c.normalized.channels() != 1) throw BackendError("protocol: condition must be single channel");
  return c;
}

GenerationMask mask_field(const json& body) {
  if (!body.contains("mask_png_b64") || body["mask_png_b64"].is_null()) return {};
  ImageBuffer m = image_field(body, "mask_png_b64");
  if (m.channels() != 1) throw BackendError("protocol: mask must be single channel");
  for (double& v : m.samples()) v = v >= 0.5 ? 1.0 : 0.0;
  return m;
}

ImageBuffer depth_field(const json& body) {
  try {
    return decode_pfm(decode_b64_field(body, "depth_pfm_b64"));
  } catch (const BackendError&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError(fmt::format("protocol: depth_pfm_b64: {}", e.what()));
  }
}

std::vector<double> vector_field(const json& body) {
  const json& v = require(body, "vector");
  if (!v.is_array() || v.empty()) throw BackendError("protocol: 'vector' must be a non-empty array");
  std::vector<double> out;
  out.reserve(v.size());
  for (const json& x : v) {
    if (!x.is_number()) throw BackendError("protocol: 'vector' entries must be numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

}  // namespace protocol

RemoteSession::RemoteSession(RemoteOptions options)
    : options_(std::move(options)), slots_(std::clamp(options_.max_in_flight, 1, 1024)) {
  static const std::regex kUrl(R"(^http://([^/:]+)(?::(\d+))?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(options_.base_url, m, kUrl)) {
    throw BackendError(fmt::format("unsupported backend URL '{}' (expected http://host[:port])",
                                   options_.base_url));
  }
  host_ = m[1].str();
  if (m[2].matched) port_ = std::stoi(m[2].str());
  prefix_ = m[3].matched ? m[3].str() : "";
  while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
}

namespace {

json parse_response(const httplib::Result& res, const std::string& what) {
  if (!res) {
    throw BackendError(fmt::format("{}: backend unavailable ({})", what, httplib::to_string(res.error())));
  }
  json body;
  try {
    body = json::parse(res->body);
  } catch (const std::exception&) {
    throw BackendError(fmt::format("{}: HTTP {} with non-JSON body", what, res->status));
  }
  if (res->status != 200) {
    const std::string msg = body.contains("error") ? body["error"].dump() : res->body;
    throw BackendError(fmt::format("{}: HTTP {}: {}", what, res->status, msg));
  }
  return body;
}

}  // namespace

json RemoteSession::post(const std::string& path, const json& body) {
  slots_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{slots_};
  httplib::Client client(host_, port_);
  client.set_read_timeout(options_.timeout_seconds, 0);
  client.set_write_timeout(options_.timeout_seconds, 0);
  const auto res = client.Post(prefix_ + path, body.dump(), "application/json");
  return parse_response(res, "POST " + path);
}

json RemoteSession::get(const std::string& path) {
  slots_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{slots_};
  httplib::Client client(host_, port_);
  client.set_read_timeout(options_.timeout_seconds, 0);
  return parse_response(client.Get(prefix_ + path), "GET " + path);
}

namespace {

ImageBuffer rgb_response(const json& body, const ImageBuffer& like) {
  ImageBuffer out = protocol::image_field(body, "image_png_b64");
  if (out.channels() != 3 || !out.same_size(like)) {
    throw BackendError(fmt::format("response image is {}x{}x{}, expected {}x{}x3", out.width(),
                                   out.height(), out.channels(), like.width(), like.height()));
  }
  return out;
}

}  // namespace

ImageBuffer RemoteDenoiser::denoise_step(const DiffusionState& state, const ConditionMap& condition,
                                         const GenerationMask* mask) {
  if (state.step < 1 || state.step > state.total_steps) {
    throw std::invalid_argument("denoise_step: step out of range");
  }
  require_same_size(condition.normalized, state.image, "condition");
  if (mask) validate_mask(*mask, state.image);
  ImageBuffer out = rgb_response(
      session_->post("/v1/denoise_step", protocol::denoise_request(state, condition, mask)),
      state.image);
  if (mask) apply_preservation(out, state.image, *mask);
  return out;
}

ImageBuffer RemoteDenoiser::generate(const std::string& prompt, const ConditionMap& condition,
                                     const GenerationMask* mask, const ImageBuffer* init,
                                     std::uint64_t seed, int steps) {
  if (steps < 1) throw std::invalid_argument("generate: steps must be >= 1");
  if (mask) validate_mask(*mask, condition.normalized);
  if (init) require_same_size(*init, condition.normalized, "init");
  ImageBuffer out = rgb_response(
      session_->post("/v1/generate",
                     protocol::generate_request(prompt, condition, mask, init, seed, steps)),
      condition.normalized);
  if (mask && init) apply_preservation(out, *init, *mask);
  return out;
}

ImageBuffer RemoteDepthEstimator::estimate_depth(const ImageBuffer& image) {
  json req;
  req["image_png_b64"] = protocol::encode_image(image);
  ImageBuffer depth = protocol::depth_field(session_->post("/v1/depth", req));
  if (depth.channels() != 1 || !depth.same_size(image)) {
    throw BackendError("depth response dimensions differ from the request");
  }
  for (double d : depth.samples()) {
    if (!(d > 0.0) || !std::isfinite(d)) throw BackendError("depth response has non-positive values");
  }
  return depth;
}

std::vector<double> RemoteEmbedder::embed_image(const ImageBuffer& image) {
  json req;
  req["image_png_b64"] = protocol::encode_image(image);
  std::vector<double> v = protocol::vector_field(session_->post("/v1/embed_image", req));
  normalize_embedding(v);
  return v;
}

std::vector<double> RemoteEmbedder::embed_text(const std::string& text) {
  std::vector<double> v = protocol::vector_field(session_->post("/v1/embed_text", json{{"text", text}}));
  normalize_embedding(v);
  return v;
}

Backends make_remote_backends(const RemoteOptions& options, int steps) {
  auto session = std::make_shared<RemoteSession>(options);
  if (steps <= 0) {
    steps = 50;
    try {
      const json health = session->get("/healthz");
      if (health.contains("default_steps") && health["default_steps"].is_number_integer()) {
        steps = health["default_steps"].get<int>();
      }
    } catch (const BackendError&) {
      // leave the fallback; the first real call reports unavailability
    }
  }
  Backends b;
  b.denoiser = std::make_shared<RemoteDenoiser>(session, steps);
  b.depth = std::make_shared<RemoteDepthEstimator>(session);
  b.embedder = std::make_shared<RemoteEmbedder>(session);
  return b;
}

Backends make_backends(const std::string& spec, int max_in_flight) {
  if (spec == "stub") return make_stub_backends();
  return make_remote_backends(RemoteOptions{spec, max_in_flight});
}

}  // namespace restyle
