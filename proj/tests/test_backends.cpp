#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <random>
#include <thread>

#include "restyle/backends.hpp"
#include "restyle/remote.hpp"
#include "restyle/stub_server.hpp"
#include "support/scenes.hpp"

using namespace restyle;

namespace {

ImageBuffer random_image(std::mt19937_64& rng, int w, int h, int ch = 3) {
  ImageBuffer img(w, h, ch);
  for (double& v : img.samples()) v = testing::uniform(rng, 0.0, 1.0);
  return img;
}

ConditionMap ramp_condition(int w, int h, ConditionKind kind = ConditionKind::Depth) {
  ImageBuffer d(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) d.at(x, y) = 1.0 + 0.1 * x + 0.03 * y;
  return make_condition(kind, d);
}

GenerationMask random_mask(std::mt19937_64& rng, int w, int h) {
  GenerationMask m(w, h, 1);
  for (double& v : m.samples()) v = rng() % 3 == 0 ? 0.0 : 1.0;
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

double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("condition normalization") {
  ImageBuffer d(100, 1, 1);
  for (int x = 0; x < 100; ++x) d.at(x, 0) = 1.0 + x;
  const ImageBuffer* maps[] = {&d};
  const NormalizationRange r = percentile_range(maps);
  CHECK(r.near == 1.0 + 0);   // floor(0.01 * 99) = 0
  CHECK(r.far == 1.0 + 98);   // floor(0.99 * 99) = 98
  const ImageBuffer n = normalize_condition(d, r);
  CHECK(n.at(0, 0) == 1.0);
  CHECK(n.at(98, 0) == 0.0);
  CHECK(n.at(99, 0) == 0.0);
  for (int x = 1; x < 100; ++x) CHECK(n.at(x, 0) <= n.at(x - 1, 0));
  SUBCASE("non-positive samples map to zero and are ignored by the window") {
    ImageBuffer holes = d;
    holes.at(5, 0) = 0.0;
    const ImageBuffer nh = normalize_condition(holes, r);
    CHECK(nh.at(5, 0) == 0.0);
  }
  SUBCASE("collapsed window") {
    const ImageBuffer flat(4, 4, 1, 2.0);
    const ConditionMap c = make_condition(ConditionKind::Distance, flat);
    for (double v : c.normalized.samples()) CHECK(v == 1.0);
  }
  const ImageBuffer empty(3, 3, 1, 0.0);
  const ImageBuffer* none[] = {&empty};
  CHECK_THROWS_AS(percentile_range(none), std::invalid_argument);
}

TEST_CASE("stub denoise_step") {
  std::mt19937_64 rng(21);
  const int w = 24;
  const int h = 18;
  const ConditionMap cond = ramp_condition(w, h);
  StubDenoiser stub;
  SUBCASE("all-zero mask returns the input exactly") {
    const DiffusionState s{random_image(rng, w, h), 7, 20, "marble hall", 4};
    const GenerationMask zero(w, h, 1, 0.0);
    CHECK(stub.denoise_step(s, cond, &zero) == s.image);
  }
  SUBCASE("telescoping from any X_T reaches psi exactly") {
    const ImageBuffer psi = stub_target(cond.normalized, "marble hall", 4);
    DiffusionState s{random_image(rng, w, h), 20, 20, "marble hall", 4};
    for (int t = 20; t >= 1; --t) {
      s.step = t;
      s.image = stub.denoise_step(s, cond, nullptr);
    }
    CHECK(s.image == psi);
  }
  SUBCASE("affine in X_t") {
    const ImageBuffer a = random_image(rng, w, h);
    const ImageBuffer b = random_image(rng, w, h);
    const double alpha = 0.35;
    const double beta = 0.65;
    ImageBuffer mix(w, h, 3);
    for (std::size_t i = 0; i < mix.samples().size(); ++i)
      mix.samples()[i] = alpha * a.samples()[i] + beta * b.samples()[i];
    const ImageBuffer fa = stub.denoise_step({a, 6, 20, "p", 1}, cond, nullptr);
    const ImageBuffer fb = stub.denoise_step({b, 6, 20, "p", 1}, cond, nullptr);
    const ImageBuffer fm = stub.denoise_step({mix, 6, 20, "p", 1}, cond, nullptr);
    for (std::size_t i = 0; i < fm.samples().size(); ++i)
      CHECK(std::abs(fm.samples()[i] - (alpha * fa.samples()[i] + beta * fb.samples()[i])) < 1e-14);
  }
  SUBCASE("random masks preserve mask=0 pixels bit-exactly") {
    for (int trial = 0; trial < 20; ++trial) {
      const DiffusionState s{random_image(rng, w, h), 1 + trial % 20, 20, "p", 9};
      const GenerationMask m = random_mask(rng, w, h);
      CHECK(preserved(stub.denoise_step(s, cond, &m), s.image, m));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS(stub.denoise_step({random_image(rng, w, h), 0, 20, "p", 1}, cond, nullptr));
    CHECK_THROWS(stub.denoise_step({random_image(rng, w + 1, h), 3, 20, "p", 1}, cond, nullptr));
    GenerationMask bad(w, h, 1, 0.5);
    CHECK_THROWS(stub.denoise_step({random_image(rng, w, h), 3, 20, "p", 1}, cond, &bad));
  }
}

TEST_CASE("stub target depends on prompt, seed, and condition") {
  const ConditionMap cond = ramp_condition(16, 16);
  const ImageBuffer a = stub_target(cond.normalized, "oak", 1);
  CHECK(a == stub_target(cond.normalized, "oak", 1));
  CHECK_FALSE(a == stub_target(cond.normalized, "oak", 2));
  CHECK_FALSE(a == stub_target(cond.normalized, "brick", 1));
  const ImageBuffer flat(16, 16, 1, 0.5);
  CHECK_FALSE(a == stub_target(flat, "oak", 1));
  for (double v : a.samples()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("stub generate") {
  std::mt19937_64 rng(5);
  const int w = 20;
  const int h = 12;
  const ConditionMap cond = ramp_condition(w, h);
  StubDenoiser stub(20);
  const ImageBuffer psi = stub_target(cond.normalized, "loft", 11);
  CHECK(stub.generate("loft", cond, nullptr, nullptr, 11, 20) == psi);
  CHECK(stub.generate("loft", cond, nullptr, nullptr, 11, 20) ==
        stub.generate("loft", cond, nullptr, nullptr, 11, 20));
  const ImageBuffer init = random_image(rng, w, h);
  const GenerationMask m = random_mask(rng, w, h);
  const ImageBuffer out = stub.generate("loft", cond, &m, &init, 11, 20);
  CHECK(preserved(out, init, m));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (m.at(x, y) == 1.0) CHECK(out.at(x, y, 1) == psi.at(x, y, 1));
  CHECK_THROWS(stub.generate("loft", cond, nullptr, nullptr, 11, 0));
}

TEST_CASE("stub depth estimator") {
  std::mt19937_64 rng(8);
  const ImageBuffer image = random_image(rng, 10, 8);
  ImageBuffer depth(10, 8, 1);
  for (double& v : depth.samples()) v = testing::uniform(rng, 1.0, 4.0);
  SUBCASE("identity returns the registered depth exactly") {
    StubDepthEstimator est;
    est.register_depth(image, depth);
    CHECK(est.estimate_depth(image) == depth);
  }
  SUBCASE("affine transform") {
    StubDepthEstimator est({2.0, 1.0});
    est.register_depth(image, depth);
    const ImageBuffer out = est.estimate_depth(image);
    for (std::size_t i = 0; i < out.samples().size(); ++i)
      CHECK(out.samples()[i] == 2.0 * depth.samples()[i] + 1.0);
  }
  SUBCASE("unregistered image is an error") {
    StubDepthEstimator est;
    CHECK_THROWS_AS(est.estimate_depth(image), BackendError);
  }
  SUBCASE("holes are filled with the far value") {
    ImageBuffer holed = depth;
    holed.at(0, 0) = 0.0;
    StubDepthEstimator est;
    est.register_depth(image, holed);
    const ImageBuffer out = est.estimate_depth(image);
    for (double v : out.samples()) CHECK(v > 0.0);
  }
}

TEST_CASE("stub embedder") {
  std::mt19937_64 rng(99);
  StubEmbedder emb;
  const ImageBuffer img = random_image(rng, 64, 48);
  const auto v = emb.embed_image(img);
  CHECK(v.size() == 512);
  CHECK(std::abs(l2(v) - 1.0) < 1e-6);
  CHECK(v == emb.embed_image(img));
  const auto t = emb.embed_text("A cozy Wooden cabin");
  CHECK(std::abs(l2(t) - 1.0) < 1e-6);
  CHECK(t == emb.embed_text("a cozy wooden   cabin!"));
  CHECK_FALSE(t == emb.embed_text("a marble palace"));
  CHECK(std::abs(l2(emb.embed_text("")) - 1.0) < 1e-6);
  int differing = 0;
  for (int pair = 0; pair < 100; ++pair) {
    const ImageBuffer a = random_image(rng, 32, 32);
    ImageBuffer b = a;
    const int x = static_cast<int>(rng() % 32);
    const int y = static_cast<int>(rng() % 32);
    const int c = static_cast<int>(rng() % 3);
    b.at(x, y, c) = b.at(x, y, c) > 0.5 ? b.at(x, y, c) - 0.25 : b.at(x, y, c) + 0.25;
    if (emb.embed_image(a) != emb.embed_image(b)) ++differing;
  }
  CHECK(differing == 100);
}

TEST_CASE("wire protocol against the in-process service stub") {
  ProtocolServer server(make_service_stub_backends(8));
  server.start();
  const std::string url = server.url();

  SUBCASE("conformance suite passes") {
    for (const ConformanceCheck& c : run_conformance(url)) {
      INFO(c.name << ": " << c.detail);
      CHECK(c.passed);
    }
  }
  SUBCASE("remote clients preserve mask=0 pixels of arbitrary doubles") {
    std::mt19937_64 rng(4);
    Backends remote = make_remote_backends(RemoteOptions{url, 2});
    CHECK(remote.denoiser->default_steps() == 8);
    const ConditionMap cond = ramp_condition(30, 20);
    const DiffusionState s{random_image(rng, 30, 20), 4, 8, "attic", 2};
    const GenerationMask m = random_mask(rng, 30, 20);
    const ImageBuffer out = remote.denoiser->denoise_step(s, cond, &m);
    CHECK(out.width() == 30);
    CHECK(preserved(out, s.image, m));
    const ImageBuffer init = random_image(rng, 30, 20);
    CHECK(preserved(remote.denoiser->generate("attic", cond, &m, &init, 2, 8), init, m));
    const ImageBuffer depth = remote.depth->estimate_depth(init);
    CHECK(depth.same_size(init));
    for (double v : depth.samples()) CHECK(v > 0.0);
    CHECK(std::abs(l2(remote.embedder->embed_text("attic")) - 1.0) < 1e-6);
  }
  SUBCASE("remote stub step matches the local stub up to 8-bit quantization") {
    std::mt19937_64 rng(6);
    Backends remote = make_remote_backends(RemoteOptions{url, 2}, 8);
    StubDenoiser local(8);
    ImageBuffer img(16, 16, 3);
    for (double& v : img.samples()) v = static_cast<double>(rng() % 256) / 255.0;
    const ConditionMap cond = ramp_condition(16, 16);
    const DiffusionState s{img, 3, 8, "den", 1};
    const ImageBuffer a = remote.denoiser->denoise_step(s, cond, nullptr);
    const ImageBuffer b = local.denoise_step(s, cond, nullptr);
    for (std::size_t i = 0; i < a.samples().size(); ++i)
      CHECK(std::abs(a.samples()[i] - b.samples()[i]) <= 1.0 / 255.0);
  }
  server.stop();
}

namespace {

class SlowDenoiser final : public Denoiser {
 public:
  [[nodiscard]] std::string name() const override { return "slow"; }
  [[nodiscard]] int default_steps() const override { return 1; }
  ImageBuffer denoise_step(const DiffusionState& state, const ConditionMap&,
                           const GenerationMask*) override {
    const int now = ++active;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
    --active;
    return state.image;
  }
  std::atomic<int> active{0};
  std::atomic<int> peak{0};
};

}  // namespace

TEST_CASE("remote clients bound in-flight requests") {
  Backends backends = make_service_stub_backends();
  auto slow = std::make_shared<SlowDenoiser>();
  backends.denoiser = slow;
  ProtocolServer server(backends);
  server.start();
  Backends remote = make_remote_backends(RemoteOptions{server.url(), 2}, 1);
  const ConditionMap cond = ramp_condition(8, 8);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&] {
      (void)remote.denoiser->denoise_step({ImageBuffer(8, 8, 3, 0.5), 1, 1, "p", 0}, cond, nullptr);
    });
  }
  for (auto& t : threads) t.join();
  CHECK(slow->peak.load() <= 2);
  CHECK(slow->peak.load() >= 1);
  server.stop();
}

TEST_CASE("remote errors") {
  CHECK_THROWS_AS(RemoteSession(RemoteOptions{"ftp://x"}), BackendError);
  CHECK_THROWS_AS(RemoteSession(RemoteOptions{"https://secure.example"}), BackendError);
  // Grab a free port, then close it so nothing listens there.
  int port = 0;
  {
    ProtocolServer probe(make_service_stub_backends());
    port = probe.start();
    probe.stop();
  }
  Backends remote = make_remote_backends(RemoteOptions{"http://127.0.0.1:" + std::to_string(port), 1, 2}, 4);
  CHECK_THROWS_AS(remote.embedder->embed_text("x"), BackendError);
  CHECK(make_backends("stub").depth_registry != nullptr);
}
