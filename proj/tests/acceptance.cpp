#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

#include "restyle/backends.hpp"
#include "restyle/coverage.hpp"
#include "restyle/cubemap.hpp"
#include "restyle/gradcheck.hpp"
#include "restyle/metrics.hpp"
#include "restyle/optimizer.hpp"
#include "restyle/raster.hpp"
#include "restyle/remote.hpp"
#include "restyle/stub_server.hpp"
#include "support/scenes.hpp"

using namespace restyle;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

const Vec3 kRoomCenter(0.0, 1.25, 0.0);
const Vec3 kRoomHalf(2.0, 1.25, 3.0);

TriangleMesh room() { return testing::make_cube_room(kRoomCenter, kRoomHalf, 6); }

ImageBuffer random_image(std::mt19937_64& rng, int w, int h) {
  ImageBuffer img(w, h, 3);
  for (double& v : img.samples()) v = testing::uniform(rng, 0.0, 1.0);
  return img;
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

Outcome a1_rasterizer() {
  std::mt19937_64 rng(1001);
  double worst_rel = 0.0;
  long pixels = 0;
  long agree = 0;
  long disagree = 0;
  long ties = 0;
  double oracle_rel = 0.0;
  for (int scene = 0; scene < 50; ++scene) {
    const TriangleMesh mesh = scene % 2 ? testing::random_triangle_scene(rng, 10, 0.5, 6.0, 2.0)
                                        : testing::random_surface_scene(rng, 6, 3);
    const Camera cam = testing::random_forward_camera(rng, 48, 40);
    const RenderOutput out = render(mesh, cam);
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        if (!out.visible(x, y)) continue;
        const Vec3 ray = cam.pixel_ray(x + 0.5, y + 0.5);
        const double expect = out.depth.at(x, y) * ray.norm() / ray.z();
        worst_rel = std::max(worst_rel, std::abs(out.distance.at(x, y) - expect) / expect);
        ++pixels;
      }
    }
    for (int i = 0; i < 200; ++i) {
      const int x = static_cast<int>(rng() % 48);
      const int y = static_cast<int>(rng() % 40);
      const testing::PixelOracle o = testing::nearest_hit_oracle(mesh, cam, x, y, kDefaultZNear);
      if (o.tie) {
        ++ties;
        continue;
      }
      const bool same = out.face_id[out.index(x, y)] == o.face &&
                        (o.face < 0 || std::abs(out.depth.at(x, y) - o.depth) <= 1e-9 * o.depth);
      (same ? agree : disagree) += 1;
      if (same && o.face >= 0) {
        const double ray_distance = o.depth * cam.pixel_ray(x + 0.5, y + 0.5).norm();
        oracle_rel = std::max(oracle_rel, std::abs(out.distance.at(x, y) - ray_distance) / ray_distance);
      }
    }
  }
  return {worst_rel <= 1e-5 && oracle_rel <= 1e-5 && disagree == 0 && agree + ties == 10000,
          fmt::format("distance vs depth*|ray|/ray_z rel err {:.2e} over {} pixels, vs ray-cast hit {:.2e}; z-buffer "
                      "oracle {}/{} agree, {} ties",
                      worst_rel, pixels, oracle_rel, agree, agree + disagree, ties)};
}

Outcome a2_gradients() {
  std::mt19937_64 rng(1002);
  double color = 0.0;
  double depth = 0.0;
  for (int scene = 0; scene < 20; ++scene) {
    const TriangleMesh mesh = testing::random_triangle_scene(rng, 4, 1.5, 4.0, 1.0);
    const Camera cam = Camera::look_along(intrinsics_from_fov(40, 40, 70.0), Vec3(0.05, 0.02, 0.0),
                                          Vec3(0.02, -0.03, 1.0), Vec3::UnitY());
    GradCheckOptions opts;
    opts.max_vertices = 0;
    opts.seed = static_cast<std::uint64_t>(scene);
    const GradCheckReport r = check_gradients(mesh, cam, opts);
    color = std::max(color, r.color_max_abs);
    depth = std::max(depth, r.depth_rel);
  }
  return {color <= 1e-5 && depth <= 0.02,
          fmt::format("color max abs err {:.2e} (tol 1e-5); depth max rel err {:.2e} (tol 2e-2) over 20 scenes",
                      color, depth)};
}

Outcome a3_cubemap_continuity() {
  const TriangleMesh mesh = room();
  const CubemapRig rig = make_cubemap_rig(kRoomCenter, 64);
  bool pass = true;
  double dist_rel = 0.0;
  double jump_ratio = std::numeric_limits<double>::infinity();
  int rows = 0;
  for (int k = 0; k < 4; ++k) {
    const testing::SeamStats st = testing::seam_continuity(mesh, rig, k);
    rows += st.rows;
    dist_rel = std::max(dist_rel, st.max_distance_rel);
    const double ratio = st.max_depth_within > 0.0 ? st.min_depth_jump / st.max_depth_within
                                                   : (st.min_depth_jump > 0.0 ? 1e300 : 0.0);
    jump_ratio = std::min(jump_ratio, ratio);
    pass = pass && st.rows > 0 && st.max_distance_rel <= 1e-4 && st.min_depth_jump >= 10.0 * st.max_depth_within &&
           st.min_depth_jump > 0.0;
  }
  return {pass, fmt::format("4 seams, {} rows: distance rel mismatch {:.2e} (tol 1e-4); depth jump / within {} (need >= 10)",
                            rows, dist_rel, jump_ratio > 1e299 ? std::string("inf") : fmt::format("{:.3g}", jump_ratio))};
}

Outcome a4_blending() {
  const TriangleMesh mesh = room();
  const CubemapRig rig = make_cubemap_rig(kRoomCenter, 32);
  std::array<ImageBuffer, 6> depth_maps;
  std::array<ImageBuffer, 6> dist_maps;
  std::array<const ImageBuffer*, 6> dp{};
  std::array<const ImageBuffer*, 6> hp{};
  for (int f = 0; f < 6; ++f) {
    const RenderOutput r = render(mesh, rig.faces[f]);
    depth_maps[f] = r.depth;
    dist_maps[f] = r.distance;
    dp[f] = &depth_maps[f];
    hp[f] = &dist_maps[f];
  }
  const NormalizationRange dr = percentile_range(dp);
  const NormalizationRange hr = percentile_range(hp);
  FaceConditions depth;
  FaceConditions distance;
  FaceImages current;
  for (int f = 0; f < 6; ++f) {
    depth[f] = make_condition(ConditionKind::Depth, depth_maps[f], dr);
    distance[f] = make_condition(ConditionKind::Distance, dist_maps[f], hr);
    current[f] = seeded_noise(32, 32, 500 + f);
  }
  const auto perturbed = [](FaceConditions c) {
    for (auto& m : c)
      for (double& v : m.normalized.samples()) v = 1.0 - v;
    return c;
  };
  StubDenoiser stub;
  const auto blended = [&](const PatchDescriptor& p, const FaceConditions& d, const FaceConditions& h) {
    const DiffusionState s{gather_patch(current, p), 9, 20, "a quiet library", 3};
    return blended_patch_step(s, gather_condition(d, p), gather_condition(h, p), p.lambda, stub);
  };
  const auto single = [&](const PatchDescriptor& p, const FaceConditions& c) {
    const DiffusionState s{gather_patch(current, p), 9, 20, "a quiet library", 3};
    return stub.denoise_step(s, gather_condition(c, p), nullptr);
  };
  const PatchDescriptor p1 = make_strip_patch(32, 0, 0, 32);
  const PatchDescriptor p0 = make_strip_patch(32, 16, 0, 32);
  const PatchDescriptor ph = make_strip_patch(32, 8, 0, 32);
  const bool lambdas = p1.lambda == 1.0 && p0.lambda == 0.0 && ph.lambda == 0.5;
  const ImageBuffer o1 = blended(p1, depth, distance);
  const ImageBuffer o0 = blended(p0, depth, distance);
  const bool exact1 = o1 == single(p1, depth);
  const bool exact0 = o0 == single(p0, distance);
  const bool blind1 = o1 == blended(p1, depth, perturbed(distance));
  const bool blind0 = o0 == blended(p0, perturbed(depth), distance);
  const ImageBuffer oh = blended(ph, depth, distance);
  const ImageBuffer a = single(ph, depth);
  const ImageBuffer b = single(ph, distance);
  double mean_err = 0.0;
  for (std::size_t i = 0; i < oh.samples().size(); ++i)
    mean_err = std::max(mean_err, std::abs(oh.samples()[i] - 0.5 * (a.samples()[i] + b.samples()[i])));
  return {lambdas && exact1 && exact0 && blind1 && blind0 && mean_err <= 1e-6,
          fmt::format("lambda=1 exact {}, lambda=0 exact {}, unused condition bit-invisible {}/{}, lambda=0.5 "
                      "max err {:.1e} (tol 1e-6)",
                      exact1, exact0, blind1, blind0, mean_err)};
}

Outcome a5_mask_preservation() {
  std::mt19937_64 rng(1005);
  int checked = 0;
  int failed = 0;
  const auto run_backend = [&](Denoiser& d, int trials) {
    for (int t = 0; t < trials; ++t) {
      const int w = 16 + static_cast<int>(rng() % 24);
      const int h = 12 + static_cast<int>(rng() % 20);
      ImageBuffer dmap(w, h, 1);
      for (double& v : dmap.samples()) v = testing::uniform(rng, 0.5, 5.0);
      const ConditionMap cond = make_condition(ConditionKind::Depth, dmap);
      const int total = d.default_steps();
      const DiffusionState s{random_image(rng, w, h), 1 + t % total, total, "tiled atrium", rng()};
      const GenerationMask m = random_mask(rng, w, h);
      const ImageBuffer init = random_image(rng, w, h);
      checked += 2;
      failed += preserved(d.denoise_step(s, cond, &m), s.image, m) ? 0 : 1;
      failed += preserved(d.generate("tiled atrium", cond, &m, &init, rng(), total), init, m) ? 0 : 1;
    }
  };
  StubDenoiser stub;
  run_backend(stub, 50);
  ProtocolServer server(make_service_stub_backends(6));
  server.start();
  Backends remote = make_remote_backends(RemoteOptions{server.url(), 2});
  run_backend(*remote.denoiser, 10);
  server.stop();
  return {failed == 0, fmt::format("{} masked calls over the stub and the wire-protocol stub, {} altered a mask=0 pixel",
                                   checked, failed)};
}

Outcome a6_coverage() {
  std::mt19937_64 rng(2024);
  long agree = 0;
  long disagree = 0;
  long ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const TriangleMesh mesh = trial % 2 == 0 ? testing::random_surface_scene(rng, 5 + trial % 4, 1 + trial % 4)
                                             : testing::random_triangle_scene(rng, 6 + trial % 5, 1.0, 5.0, 1.5);
    const Camera cam = testing::random_forward_camera(rng, 40, 30);
    const double eps = default_occlusion_epsilon(mesh);
    CoverageOptions opts;
    opts.lookup_radius = trial % 3;
    const CoverageState s = mark_covered(make_coverage(mesh), mesh, cam, render(mesh, cam).depth, opts);
    for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
      const int expect = testing::coverage_oracle(mesh, cam, mesh.vertices()[i], eps, trial % 3);
      if (expect < 0) {
        ++ties;
      } else {
        (expect == s.covered[i] ? agree : disagree) += 1;
      }
    }
  }
  bool monotone = true;
  bool invariant = true;
  for (int trial = 0; trial < 20; ++trial) {
    const TriangleMesh mesh = testing::random_surface_scene(rng, 8, 3);
    std::vector<Camera> cams;
    for (int c = 0; c < 6; ++c) cams.push_back(testing::random_forward_camera(rng, 32, 24));
    std::vector<int> order(cams.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::uint8_t> reference;
    for (int perm = 0; perm < 5; ++perm) {
      std::shuffle(order.begin(), order.end(), rng);
      CoverageState s = make_coverage(mesh);
      for (int idx : order) {
        const CoverageState next = mark_covered(s, mesh, cams[idx], render(mesh, cams[idx]).depth);
        for (std::size_t i = 0; i < s.covered.size(); ++i) monotone = monotone && next.covered[i] >= s.covered[i];
        s = next;
      }
      if (reference.empty()) {
        reference = s.covered;
      } else {
        invariant = invariant && s.covered == reference;
      }
    }
  }
  return {disagree == 0 && monotone && invariant,
          fmt::format("1000 configs: {}/{} vertices agree, {} ties excluded; monotone {}, order invariant {}", agree,
                      agree + disagree, ties, monotone, invariant)};
}

Outcome a7_geometry() {
  const auto plane = [](double sigma) {
    TriangleMesh g = testing::make_grid(40, 40, Vec3(-0.5, -0.5, 1.5), Vec3(1, 0, 0), Vec3(0, 1, 0));
    std::mt19937_64 rng(3);
    std::normal_distribution<double> noise(0.0, sigma);
    std::vector<Vec3> v = g.vertices();
    for (Vec3& p : v) p.z() += noise(rng);
    return g.with_vertices(std::move(v));
  };
  const Camera cam = testing::identity_camera(160, 160, 30.0);
  const RenderOutput clean = render(plane(0.0), cam);
  const SupervisionView view = make_supervision(cam, clean.color, clean.depth, 0.01);
  const TriangleMesh noisy = plane(0.05);
  const double before = mean_abs_laplacian(noisy, view);
  OptimizerConfig cfg;
  const auto t0 = std::chrono::steady_clock::now();
  const OptimizeResult r = optimize(noisy, {view}, cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double after = mean_abs_laplacian(r.mesh, view);
  return {before / after >= 10.0 && secs < 120.0,
          fmt::format("mean |inverse-depth Laplacian| over P {:.3e} -> {:.3e} ({:.0f}x, need >= 10x) in {:.1f} s, "
                      "N={} lr={}",
                      before, after, before / after, secs, cfg.steps, cfg.learning_rate)};
}

Outcome a8_texture() {
  const Camera front = testing::identity_camera(48, 40, 60.0);
  std::mt19937_64 rng(8);
  const auto random_color = [&](int, int) {
    return Vec3(testing::uniform(rng, 0, 1), testing::uniform(rng, 0, 1), testing::uniform(rng, 0, 1));
  };
  const TriangleMesh target =
      testing::make_grid(8, 8, Vec3(-0.8, -0.8, 2.0), Vec3(1.6, 0, 0), Vec3(0, 1.6, 0), random_color);
  const TriangleMesh start = target.with_colors(std::vector<Vec3>(target.vertex_count(), Vec3(0.5, 0.5, 0.5)));
  OptimizerConfig cfg;
  cfg.update_positions = false;
  const OptimizeResult fit = optimize(start, {SupervisionView{front, render(target, front).color, {}, {}}}, cfg);
  double s = 0.0;
  for (std::size_t i = 0; i < target.vertex_count(); ++i) s += (fit.mesh.colors()[i] - target.colors()[i]).squaredNorm();
  const double rmse = std::sqrt(s / (3.0 * static_cast<double>(target.vertex_count())));

  const TriangleMesh plane = testing::make_grid(6, 6, Vec3(-3, -3, 2.0), Vec3(6, 0, 1.0), Vec3(0, 6, 0.5),
                                                [](int i, int j) { return Vec3(0.1 + 0.1 * i, 0.9 - 0.1 * j, 0.5); });
  const Camera side = Camera::look_along(intrinsics_from_fov(40, 40, 60.0), Vec3(0.4, 0.2, -0.3),
                                         Vec3(-0.1, 0.0, 1.0), Vec3(0, -1, 0));
  SupervisionSet sup;
  for (const Camera& c : {front, side}) {
    const RenderOutput out = render(plane, c);
    sup.push_back(make_supervision(c, out.color, out.depth, 0.01));
  }
  const OptimizeResult fixed = optimize(plane, sup, OptimizerConfig{});
  double drift = 0.0;
  for (std::size_t i = 0; i < plane.vertex_count(); ++i) {
    drift = std::max(drift, (fixed.mesh.vertices()[i] - plane.vertices()[i]).cwiseAbs().maxCoeff());
    drift = std::max(drift, (fixed.mesh.colors()[i] - plane.colors()[i]).cwiseAbs().maxCoeff());
  }
  return {rmse < 0.01 && drift <= 1e-4,
          fmt::format("color RMSE {:.4f} (need < 0.01); self-supervised drift {:.1e} (tol 1e-4)", rmse, drift)};
}

std::vector<double> random_unit(std::mt19937_64& rng, int d) {
  std::normal_distribution<double> g;
  std::vector<double> v(static_cast<std::size_t>(d));
  double n = 0.0;
  for (double& x : v) {
    x = g(rng);
    n += x * x;
  }
  for (double& x : v) x /= std::sqrt(n);
  return v;
}

Outcome a9_metrics() {
  const std::vector<double> o_a{0, 1, 0, 0};
  const std::vector<double> o_b{0, 0, 1, 0};
  const std::vector<double> e1{1, 0, 0, 0};
  const std::vector<double> e2{0, 0, 0, 1};
  const std::vector<double> m1{-1, 0, 0, 0};
  const double par = direction_consistency(EvalPair{o_a, o_a, e1, e1});
  const double anti = direction_consistency(EvalPair{o_a, e1, e1, o_a});
  const double orth = direction_consistency(EvalPair{e1, o_a, m1, e2});
  const bool fixtures = par == 1.0 && anti == -1.0 && orth == 0.0;

  std::mt19937_64 rng(1009);
  std::normal_distribution<double> g;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int d = 16;
    Eigen::MatrixXd m(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) m(i, j) = g(rng);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
    const auto rot = [&](const std::vector<double>& v) {
      const Eigen::VectorXd r = q * Eigen::Map<const Eigen::VectorXd>(v.data(), d);
      return std::vector<double>(r.data(), r.data() + r.size());
    };
    const EvalPair p{random_unit(rng, d), random_unit(rng, d), random_unit(rng, d), random_unit(rng, d)};
    const EvalPair r{rot(p.o_a), rot(p.o_b), rot(p.g_a), rot(p.g_b)};
    worst = std::max(worst, std::abs(direction_consistency(p) - direction_consistency(r)));
    worst = std::max(worst, std::abs(text_image_similarity(p.o_a, p.g_b) - text_image_similarity(r.o_a, r.g_b)));
  }
  return {fixtures && worst <= 1e-6,
          fmt::format("parallel {}, antiparallel {}, orthogonal {}; max change under 50 random rotations {:.1e} "
                      "(tol 1e-6)",
                      par, anti, orth, worst)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome a10_determinism(const std::string& restyle_bin) {
  const fs::path dir = fs::temp_directory_path() / "restyle_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path mesh = dir / "room.ply";
  save_mesh(room(), mesh);
  const auto run = [&](const std::string& name, const std::string& extra) {
    const std::string cmd = fmt::format(
        "\"{}\" \"{}\" --prompt \"a sunlit greenhouse\" --seed 7 --set cubemap.resolution=64 "
        "--set cubemap.patch_size=32 --set cubemap.stride=16 --set cubemap.diffusion_steps=8 "
        "--set outpaint.cameras=12 --set outpaint.width=64 --set outpaint.height=48 "
        "--set optimize.texture_init_steps=50 --set optimize.steps=100 --set optimize.checkpoint_every=50 "
        "--out \"{}\" {} > \"{}\" 2>&1",
        restyle_bin, mesh.string(), (dir / name).string(), extra, (dir / (name + ".log")).string());
    return std::system(cmd.c_str()) == 0;
  };
  const bool ok = run("a", "--threads 1") && run("b", "--threads 1") && run("c", "--threads 4") &&
                  run("base", "--threads 2 --mode outpaint-baseline");
  if (!ok) return {false, fmt::format("a restyle run failed; logs in {}", dir.string())};
  const std::string ma = slurp(dir / "a" / "mesh.ply");
  const bool runs = ma == slurp(dir / "b" / "mesh.ply") && slurp(dir / "a" / "report.json") == slurp(dir / "b" / "report.json");
  const bool threads = ma == slurp(dir / "c" / "mesh.ply");
  const auto ra = nlohmann::json::parse(slurp(dir / "a" / "report.json"));
  const auto rc = nlohmann::json::parse(slurp(dir / "c" / "report.json"));
  const auto rb = nlohmann::json::parse(slurp(dir / "base" / "report.json"));
  const bool faces = ra["cubemap_checksums"].size() == 6 && ra["cubemap_checksums"] == rc["cubemap_checksums"];
  const bool baseline = rb["mode"] == "outpaint-baseline" && rb.contains("ablation") && !rb.contains("cubemap_checksums") &&
                        fs::exists(dir / "base" / "mesh.ply");
  return {runs && threads && faces && baseline,
          fmt::format("mesh+report identical across runs {}, mesh identical across 1/4 threads {}, cubemap face checksums "
                      "match {}, outpaint-baseline flagged {} (mesh checksum {})",
                      runs, threads, faces, baseline, ra["output"]["checksum"].get<std::string>())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string restyle_bin = argc > 1 ? argv[1] : RESTYLE_BIN;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"A1", a1_rasterizer},
      {"A2", a2_gradients},
      {"A3", a3_cubemap_continuity},
      {"A4", a4_blending},
      {"A5", a5_mask_preservation},
      {"A6", a6_coverage},
      {"A7", a7_geometry},
      {"A8", a8_texture},
      {"A9", a9_metrics},
      {"A10", [&] { return a10_determinism(restyle_bin); }},
  };
  int failures = 0;
  for (const auto& [id, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, fmt::format("exception: {}", e.what())};
    }
    failures += o.pass ? 0 : 1;
    std::cout << fmt::format("{} {} {}", id, o.pass ? "PASS" : "FAIL", o.detail) << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
