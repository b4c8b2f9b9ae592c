#pragma once

#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "restyle/backends.hpp"

namespace httplib {
class Server;
}

namespace restyle {

/// Pseudo-monocular depth for service stubs with no registered geometry:
/// depth = 1 + 2 * (1 - luma), so brighter reads as nearer.
class LuminanceDepthEstimator final : public DepthEstimator {
 public:
  [[nodiscard]] std::string name() const override { return "luminance"; }
  ImageBuffer estimate_depth(const ImageBuffer& image) override;
};

/// Serves the wire protocol over HTTP from in-process backends.
class ProtocolServer {
 public:
  explicit ProtocolServer(Backends backends);
  ~ProtocolServer();
  ProtocolServer(const ProtocolServer&) = delete;
  ProtocolServer& operator=(const ProtocolServer&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  /// Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();
  [[nodiscard]] int port() const { return port_; }
  [[nodiscard]] std::string url() const;

 private:
  void install_routes();

  Backends backends_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::string host_ = "127.0.0.1";
  int port_ = -1;
};

Backends make_service_stub_backends(int steps = 20);

struct ConformanceCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Schema-level protocol contracts: /healthz, response dimensions, bit-exact
/// mask preservation through denoise_step and generate, positive depth,
/// unit-norm and repeatable embeddings.
std::vector<ConformanceCheck> run_conformance(const std::string& base_url);

}  // namespace restyle
