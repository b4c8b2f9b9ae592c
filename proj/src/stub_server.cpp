#include "restyle/stub_server.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <httplib.h>

#include "restyle/image_io.hpp"
#include "restyle/remote.hpp"

namespace restyle {

using nlohmann::json;

ImageBuffer LuminanceDepthEstimator::estimate_depth(const ImageBuffer& image) {
  if (image.empty()) throw std::invalid_argument("estimate_depth: empty image");
  ImageBuffer out(image.width(), image.height(), 1);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      double luma = image.at(x, y, 0);
      if (image.channels() == 3) {
        luma = 0.299 * image.at(x, y, 0) + 0.587 * image.at(x, y, 1) + 0.114 * image.at(x, y, 2);
      }
      out.at(x, y) = 1.0 + 2.0 * (1.0 - std::clamp(luma, 0.0, 1.0));
    }
  }
  return out;
}

Backends make_service_stub_backends(int steps) {
  Backends b;
  b.denoiser = std::make_shared<StubDenoiser>(steps);
  b.depth = std::make_shared<LuminanceDepthEstimator>();
  b.embedder = std::make_shared<StubEmbedder>();
  return b;
}

ProtocolServer::ProtocolServer(Backends backends)
    : backends_(std::move(backends)), server_(std::make_unique<httplib::Server>()) {
  install_routes();
}

ProtocolServer::~ProtocolServer() { stop(); }

namespace {

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      const json body = json::parse(req.body);
      if (!body.is_object()) throw BackendError("request body must be a JSON object");
      reply(res, 200, fn(body));
    } catch (const json::exception& e) {
      reply(res, 422, json{{"error", fmt::format("malformed request: {}", e.what())}});
    } catch (const BackendError& e) {
      reply(res, 422, json{{"error", e.what()}});
    } catch (const std::invalid_argument& e) {
      reply(res, 422, json{{"error", e.what()}});
    } catch (const std::exception& e) {
      reply(res, 503, json{{"error", e.what()}});
    }
  };
}

ImageBuffer rgb_field(const json& body, const char* key) {
  ImageBuffer img = protocol::image_field(body, key);
  if (img.channels() != 3) throw BackendError(fmt::format("'{}' must be an RGB image", key));
  return img;
}

}  // namespace

void ProtocolServer::install_routes() {
  auto& s = *server_;
  s.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
    reply(res, 200,
          json{{"ok", true},
               {"capabilities", {"generate", "depth", "embed"}},
               {"default_steps", backends_.denoiser->default_steps()}});
  });
  s.Post("/v1/denoise_step", guarded([this](const json& body) {
           DiffusionState state;
           state.image = rgb_field(body, "image_png_b64");
           state.step = body.at("step").get<int>();
           state.total_steps = body.at("total_steps").get<int>();
           state.prompt = body.at("prompt").get<std::string>();
           state.seed = body.at("seed").get<std::uint64_t>();
           const ConditionMap cond = protocol::condition_field(body);
           const GenerationMask mask = protocol::mask_field(body);
           const ImageBuffer out =
               backends_.denoiser->denoise_step(state, cond, mask.empty() ? nullptr : &mask);
           return json{{"image_png_b64", protocol::encode_image(out)}};
         }));
  s.Post("/v1/generate", guarded([this](const json& body) {
           const ConditionMap cond = protocol::condition_field(body);
           const GenerationMask mask = protocol::mask_field(body);
           ImageBuffer init;
           if (body.contains("init_png_b64") && !body["init_png_b64"].is_null()) {
             init = rgb_field(body, "init_png_b64");
           }
           const ImageBuffer out = backends_.denoiser->generate(
               body.at("prompt").get<std::string>(), cond, mask.empty() ? nullptr : &mask,
               init.empty() ? nullptr : &init, body.at("seed").get<std::uint64_t>(),
               body.at("total_steps").get<int>());
           return json{{"image_png_b64", protocol::encode_image(out)}};
         }));
  s.Post("/v1/depth", guarded([this](const json& body) {
           const ImageBuffer depth = backends_.depth->estimate_depth(rgb_field(body, "image_png_b64"));
           return json{{"depth_pfm_b64", protocol::encode_depth(depth)}};
         }));
  s.Post("/v1/embed_image", guarded([this](const json& body) {
           return json{{"vector", backends_.embedder->embed_image(rgb_field(body, "image_png_b64"))}};
         }));
  s.Post("/v1/embed_text", guarded([this](const json& body) {
           return json{{"vector", backends_.embedder->embed_text(body.at("text").get<std::string>())}};
         }));
}

int ProtocolServer::start(const std::string& host, int port) {
  host_ = host;
  port_ = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (port_ < 0) throw BackendError(fmt::format("cannot bind {}:{}", host, port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void ProtocolServer::run(const std::string& host, int port) {
  host_ = host;
  port_ = port;
  if (!server_->listen(host, port)) throw BackendError(fmt::format("cannot listen on {}:{}", host, port));
}

void ProtocolServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::string ProtocolServer::url() const { return fmt::format("http://{}:{}", host_, port_); }

namespace {

ImageBuffer quantized_test_image(int w, int h, int salt) {
  ImageBuffer img(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = ((x * 7 + y * 13 + c * 29 + salt) % 256) / 255.0;
  return img;
}

ConditionMap test_condition(int w, int h) {
  ImageBuffer d(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) d.at(x, y) = 1.0 + 0.05 * x + 0.02 * y;
  return make_condition(ConditionKind::Depth, d);
}

GenerationMask half_mask(int w, int h) {
  GenerationMask m(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(x, y) = x >= w / 2 ? 1.0 : 0.0;
  return m;
}

bool preserved(const ImageBuffer& out, const ImageBuffer& original, const GenerationMask& mask) {
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      if (mask.at(x, y) == 0.0)
        for (int c = 0; c < 3; ++c)
          if (out.at(x, y, c) != original.at(x, y, c)) return false;
  return true;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

std::vector<ConformanceCheck> run_conformance(const std::string& base_url) {
  std::vector<ConformanceCheck> checks;
  RemoteSession session(RemoteOptions{base_url, 4, 120});
  const auto check = [&](const std::string& name, auto&& body) {
    ConformanceCheck c{name, false, ""};
    try {
      c.detail = body();
      c.passed = c.detail.empty();
      if (c.passed) c.detail = "ok";
    } catch (const std::exception& e) {
      c.detail = e.what();
    }
    checks.push_back(std::move(c));
  };
  constexpr int kW = 40;
  constexpr int kH = 32;
  const ImageBuffer image = quantized_test_image(kW, kH, 3);
  const ImageBuffer init = quantized_test_image(kW, kH, 101);
  const ConditionMap cond = test_condition(kW, kH);
  const GenerationMask mask = half_mask(kW, kH);
  const GenerationMask none(kW, kH, 1, 0.0);

  check("healthz capabilities", [&]() -> std::string {
    const json a = session.get("/healthz");
    const json b = session.get("/healthz");
    if (a != b) return "healthz is not idempotent";
    if (!a.value("ok", false)) return "ok is not true";
    for (const char* cap : {"generate", "depth", "embed"}) {
      const auto& caps = a.at("capabilities");
      if (std::find(caps.begin(), caps.end(), cap) == caps.end()) return fmt::format("missing capability {}", cap);
    }
    return "";
  });
  check("denoise_step dimensions", [&]() -> std::string {
    const DiffusionState state{image, 5, 10, "a wooden cabin", 7};
    const ImageBuffer out = protocol::image_field(
        session.post("/v1/denoise_step", protocol::denoise_request(state, cond, nullptr)), "image_png_b64");
    if (out.width() != kW || out.height() != kH || out.channels() != 3) return "wrong dimensions";
    return "";
  });
  check("denoise_step mask preservation", [&]() -> std::string {
    const DiffusionState state{image, 3, 10, "a wooden cabin", 7};
    const ImageBuffer out = protocol::image_field(
        session.post("/v1/denoise_step", protocol::denoise_request(state, cond, &mask)), "image_png_b64");
    return preserved(out, image, mask) ? "" : "mask=0 pixels changed";
  });
  check("generate all-zero mask returns init", [&]() -> std::string {
    const ImageBuffer out = protocol::image_field(
        session.post("/v1/generate", protocol::generate_request("a cabin", cond, &none, &init, 3, 4)),
        "image_png_b64");
    return out == init ? "" : "output differs from init";
  });
  check("generate mask preservation and determinism", [&]() -> std::string {
    const json req = protocol::generate_request("a cabin", cond, &mask, &init, 3, 4);
    const ImageBuffer a = protocol::image_field(session.post("/v1/generate", req), "image_png_b64");
    const ImageBuffer b = protocol::image_field(session.post("/v1/generate", req), "image_png_b64");
    if (a.width() != kW || a.height() != kH || a.channels() != 3) return "wrong dimensions";
    if (!preserved(a, init, mask)) return "mask=0 pixels changed";
    return a == b ? "" : "same seed gave different images";
  });
  check("depth dimensions and positivity", [&]() -> std::string {
    const ImageBuffer d = protocol::depth_field(
        session.post("/v1/depth", json{{"image_png_b64", protocol::encode_image(image)}}));
    if (d.width() != kW || d.height() != kH || d.channels() != 1) return "wrong dimensions";
    for (double v : d.samples())
      if (!(v > 0.0) || !std::isfinite(v)) return "non-positive depth";
    return "";
  });
  check("embeddings unit norm and repeatable", [&]() -> std::string {
    const auto t1 = protocol::vector_field(session.post("/v1/embed_text", json{{"text", "a cozy cabin"}}));
    const auto t2 = protocol::vector_field(session.post("/v1/embed_text", json{{"text", "a cozy cabin"}}));
    const auto im = protocol::vector_field(
        session.post("/v1/embed_image", json{{"image_png_b64", protocol::encode_image(image)}}));
    if (t1 != t2) return "embed_text is not repeatable";
    if (std::abs(norm(t1) - 1.0) > 1e-6) return fmt::format("text norm {}", norm(t1));
    if (std::abs(norm(im) - 1.0) > 1e-6) return fmt::format("image norm {}", norm(im));
    if (t1.size() != im.size()) return "text and image dimensions differ";
    return "";
  });
  check("malformed request is rejected with 4xx", [&]() -> std::string {
    try {
      (void)session.post("/v1/depth", json{{"image_png_b64", "not base64 png"}});
    } catch (const BackendError& e) {
      return std::string(e.what()).find("HTTP 4") != std::string::npos ? "" : e.what();
    }
    return "malformed request was accepted";
  });
  return checks;
}

}  // namespace restyle
