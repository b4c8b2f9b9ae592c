#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>

#include "restyle/coverage.hpp"
#include "restyle/raster.hpp"
#include "support/scenes.hpp"

using namespace restyle;

namespace {

struct OracleStats {
  long agree = 0;
  long disagree = 0;
  long ties = 0;
  long covered = 0;
};

TriangleMesh random_scene(std::mt19937_64& rng, int trial) {
  if (trial % 2 == 0) return testing::random_surface_scene(rng, 5 + trial % 4, 1 + trial % 4);
  return testing::random_triangle_scene(rng, 6 + trial % 5, 1.0, 5.0, 1.5);
}

}  // namespace

TEST_CASE("mark_covered basics") {
  const Camera cam = testing::identity_camera(32, 32, 90.0);
  const TriangleMesh tri({Vec3(-0.5, -0.5, 2), Vec3(0.5, -0.5, 2), Vec3(0, 0.5, 2)}, {{0, 1, 2}},
                         std::vector<Vec3>(3, Vec3(0.5, 0.5, 0.5)));
  SUBCASE("fronto triangle fully in frame") {
    const CoverageState s = mark_covered(make_coverage(tri), tri, cam, render(tri, cam).depth);
    CHECK(s.count() == 3);
    CHECK(s.cameras.size() == 1);
  }
  SUBCASE("triangle behind a plane") {
    const TriangleMesh scene = testing::concat({testing::make_square(1.0, 3.0, Vec3(0, 0, 0)), tri});
    const CoverageState s = mark_covered(make_coverage(scene), scene, cam, render(scene, cam).depth);
    CHECK(s.covered[4] == 0);
    CHECK(s.covered[5] == 0);
    CHECK(s.covered[6] == 0);
  }
  SUBCASE("dimension mismatches") {
    CHECK_THROWS_AS(mark_covered(CoverageState{}, tri, cam, render(tri, cam).depth), std::invalid_argument);
    CHECK_THROWS_AS(mark_covered(make_coverage(tri), tri, cam, ImageBuffer(3, 3, 1)), std::invalid_argument);
  }
}

TEST_CASE("mark_covered agrees with brute-force ray casting") {
  std::mt19937_64 rng(2024);
  OracleStats stats;
  for (int trial = 0; trial < 1000; ++trial) {
    const TriangleMesh mesh = random_scene(rng, trial);
    const Camera cam = testing::random_forward_camera(rng, 40, 30);
    const double eps = default_occlusion_epsilon(mesh);
    CoverageOptions opts;
    opts.lookup_radius = trial % 3;
    const CoverageState s = mark_covered(make_coverage(mesh), mesh, cam, render(mesh, cam).depth, opts);
    for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
      const int expect = testing::coverage_oracle(mesh, cam, mesh.vertices()[i], eps, trial % 3);
      if (expect < 0) {
        ++stats.ties;
        continue;
      }
      stats.covered += expect;
      if (expect == s.covered[i]) {
        ++stats.agree;
      } else {
        ++stats.disagree;
      }
    }
  }
  MESSAGE("coverage oracle: agree " << stats.agree << ", disagree " << stats.disagree << ", ties "
                                    << stats.ties << ", covered " << stats.covered);
  CHECK(stats.disagree == 0);
  CHECK(stats.agree > 20000);
  CHECK(stats.covered > 5000);
  CHECK(stats.agree - stats.covered > 5000);
}

TEST_CASE("coverage is monotone and order independent") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const TriangleMesh mesh = testing::random_surface_scene(rng, 8, 3);
    std::vector<Camera> cams;
    for (int c = 0; c < 6; ++c) cams.push_back(testing::random_forward_camera(rng, 32, 24));
    std::vector<ImageBuffer> depths;
    for (const Camera& c : cams) depths.push_back(render(mesh, c).depth);
    std::vector<int> order(cams.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::uint8_t> reference;
    for (int perm = 0; perm < 5; ++perm) {
      std::shuffle(order.begin(), order.end(), rng);
      CoverageState s = make_coverage(mesh);
      for (int idx : order) {
        const CoverageState next = mark_covered(s, mesh, cams[idx], depths[idx]);
        for (std::size_t i = 0; i < s.covered.size(); ++i) CHECK(next.covered[i] >= s.covered[i]);
        s = next;
      }
      if (reference.empty()) {
        reference = s.covered;
      } else {
        CHECK(s.covered == reference);
      }
    }
  }
}

TEST_CASE("outpaint_mask") {
  const Camera cam = testing::identity_camera(48, 40, 80.0);
  const TriangleMesh wall = testing::make_grid(12, 12, Vec3(-1.2, -1.2, 2.0), Vec3(2.4, 0, 0), Vec3(0, 2.4, 0));
  const RenderOutput out = render(wall, cam);
  SUBCASE("fully covered view gives an empty mask") {
    CoverageState s = make_coverage(wall);
    std::fill(s.covered.begin(), s.covered.end(), 1);
    CHECK(mask_empty(outpaint_mask(s, wall, cam)));
  }
  SUBCASE("uncovered view gives the visibility buffer") {
    CHECK(outpaint_mask(make_coverage(wall), wall, cam) == out.visibility);
    const TriangleMesh small = testing::make_square(2.0, 0.4, Vec3(0.5, 0.5, 0.5));
    CHECK(outpaint_mask(make_coverage(small), small, cam) == render(small, cam).visibility);
  }
  SUBCASE("half-covered wall matches the per-pixel classification up to the dilation radius") {
    CoverageState s = make_coverage(wall);
    for (std::size_t i = 0; i < wall.vertex_count(); ++i) s.covered[i] = wall.vertices()[i].x() < 0.05 ? 1 : 0;
    for (int r : {0, 3, 8}) {
      const GenerationMask m = outpaint_mask(s, wall, cam, r);
      std::vector<std::pair<int, int>> uncovered;
      for (int y = 0; y < 40; ++y) {
        for (int x = 0; x < 48; ++x) {
          const Vec3 dir = cam.pixel_ray(x + 0.5, y + 0.5);
          const auto hits = testing::all_hits(wall, Vec3::Zero(), dir, 0.0);
          if (hits.empty()) continue;
          const Face& f = wall.faces()[hits[0].face];
          double flag = 0.0;
          for (int k = 0; k < 3; ++k) flag += hits[0].bary[k] * s.covered[f[k]];
          if (std::abs(flag - 0.5) < 1e-9) continue;
          if (flag < 0.5) {
            uncovered.emplace_back(x, y);
            CHECK(m.at(x, y) == 1.0);
          }
        }
      }
      CHECK(uncovered.size() > 100);
      for (int y = 0; y < 40; ++y) {
        for (int x = 0; x < 48; ++x) {
          if (m.at(x, y) == 0.0) continue;
          CHECK(out.visible(x, y));
          bool near = false;
          for (const auto& [ux, uy] : uncovered) near = near || std::max(std::abs(ux - x), std::abs(uy - y)) <= r;
          CHECK(near);
        }
      }
    }
  }
}

TEST_CASE("dilate") {
  ImageBuffer m(9, 7, 1);
  m.at(4, 3) = 1.0;
  const ImageBuffer d = dilate(m, 2);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x) CHECK(d.at(x, y) == (std::abs(x - 4) <= 2 && std::abs(y - 3) <= 2 ? 1.0 : 0.0));
  CHECK(dilate(m, 0) == m);
}

TEST_CASE("coverage ply dump") {
  const TriangleMesh wall = testing::make_grid(2, 2, Vec3(0, 0, 2), Vec3(1, 0, 0), Vec3(0, 1, 0));
  CoverageState s = make_coverage(wall);
  s.covered[0] = 1;
  const auto path = std::filesystem::temp_directory_path() / "restyle_coverage.ply";
  save_coverage_ply(s, wall, path);
  const TriangleMesh back = load_mesh(path);
  CHECK(back.colors()[0] == Vec3(0, 1, 0));
  CHECK(back.colors()[1].y() < 0.5);
}
