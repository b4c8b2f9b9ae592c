#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "restyle/image_io.hpp"
#include "restyle/pipeline.hpp"
#include "support/scenes.hpp"

using namespace restyle;
namespace fs = std::filesystem;

namespace {

TriangleMesh room() { return testing::make_cube_room(Vec3(0, 1.25, 0), Vec3(2, 1.25, 3), 6); }

PipelineConfig small_config(const fs::path& out) {
  PipelineConfig c;
  c.prompt = "a sunlit greenhouse";
  c.seed = 7;
  c.output_dir = out;
  c.cubemap_resolution = 32;
  c.patch_size = 16;
  c.stride = 8;
  c.diffusion_steps = 4;
  c.outpaint_cameras = 6;
  c.view_width = 48;
  c.view_height = 40;
  c.texture_init_steps = 20;
  c.optimizer_steps = 30;
  c.checkpoint_every = 10;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("restyle_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class FailingDepth : public DepthEstimator {
 public:
  [[nodiscard]] std::string name() const override { return "failing"; }
  ImageBuffer estimate_depth(const ImageBuffer&) override { throw BackendError("depth service unavailable"); }
};

}  // namespace

TEST_CASE("pipeline on the cube room") {
  const TriangleMesh mesh = room();
  Backends b1 = make_stub_backends();
  const PipelineResult a = run_pipeline(mesh, small_config(temp_dir("a")), b1);

  SUBCASE("outputs and report") {
    CHECK(validate_mesh(a.mesh.vertices(), a.mesh.faces(), a.mesh.colors()).empty());
    CHECK(a.mesh.faces() == mesh.faces());
    CHECK(fs::exists(a.mesh_path));
    CHECK(load_mesh(a.mesh_path).vertex_count() == mesh.vertex_count());
    const fs::path out = a.mesh_path.parent_path();
    for (const char* f : kCubeFaceNames) CHECK(fs::exists(out / "01_cubemap" / (std::string(f) + ".png")));
    CHECK(fs::exists(out / "01_cubemap" / "coverage.ply"));
    CHECK(fs::exists(out / "03_optimize" / "loss.csv"));
    CHECK(fs::exists(out / "03_optimize" / "checkpoints" / "step_00030.ply"));
    CHECK(fs::exists(out / "timings.json"));
    const auto& r = a.report;
    CHECK(r["mode"] == "cubemap");
    CHECK(!r.contains("ablation"));
    CHECK(r["config"]["optimize"]["steps"] == 30);
    CHECK(r["cubemap_checksums"].size() == 6);
    std::multiset<int> lines;
    for (const auto& s : r["stages"]) {
      for (int l : s["algorithm_lines"]) lines.insert(l);
    }
    for (int l = 1; l <= 16; ++l) CHECK(lines.count(l) == 1);
    CHECK(r["stages"][0]["stage"] == "cubemap_rig");
  }
  SUBCASE("golden cubemap checksums") {
    const auto& c = a.report["cubemap_checksums"];
    CHECK(c["px"] == "0b5502d7acb4079a");
    CHECK(c["nz"] == "e242a5fce8a4a459");
  }
  SUBCASE("deterministic across runs and thread counts") {
    Backends b2 = make_stub_backends();
    const PipelineResult b = run_pipeline(mesh, small_config(temp_dir("b")), b2);
    CHECK(slurp(a.mesh_path) == slurp(b.mesh_path));
    CHECK(a.report.dump() == b.report.dump());
    CHECK(slurp(a.report_path) == slurp(b.report_path));
    PipelineConfig threaded = small_config(temp_dir("c"));
    threaded.threads = 4;
    Backends b3 = make_stub_backends();
    const PipelineResult c = run_pipeline(mesh, threaded, b3);
    CHECK(slurp(a.mesh_path) == slurp(c.mesh_path));
    CHECK(a.report["cubemap_checksums"] == c.report["cubemap_checksums"]);
    CHECK(a.report["output"] == c.report["output"]);
  }
}

TEST_CASE("outpaint baseline mode") {
  PipelineConfig c = small_config(temp_dir("baseline"));
  c.mode = PipelineMode::OutpaintBaseline;
  Backends b = make_stub_backends();
  const PipelineResult r = run_pipeline(room(), c, b);
  CHECK(r.report["mode"] == "outpaint-baseline");
  CHECK(r.report["ablation"].get<std::string>().find("w/o Cubemap") != std::string::npos);
  CHECK(!r.report.contains("cubemap_checksums"));
  CHECK(!fs::exists(c.output_dir / "01_cubemap"));
  CHECK(r.report["outpaint_views"].size() >= 1);
}

TEST_CASE("pipeline failures are stage tagged") {
  PipelineConfig c = small_config(temp_dir("fail"));
  Backends b = make_stub_backends();
  b.depth = std::make_shared<FailingDepth>();
  b.depth_registry = nullptr;
  try {
    run_pipeline(room(), c, b);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.stage() == "depth_estimation");
    CHECK(std::string(e.what()).find("depth service unavailable") != std::string::npos);
  }
  CHECK(fs::exists(c.output_dir / "01_cubemap" / "px.png"));

  CHECK_THROWS_AS(run_pipeline(fs::path("/nonexistent/room.ply"), c), PipelineError);
  c.prompt.clear();
  try {
    run_pipeline(room(), c, b);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.stage() == "config");
  }
}

TEST_CASE("pipeline config files") {
  const fs::path dir = temp_dir("config");
  fs::create_directories(dir);
  const fs::path ini = dir / "run.ini";
  {
    std::ofstream f(ini);
    f << "prompt = a stone cottage\nseed = 12\nmode = outpaint-baseline\n"
      << "[cubemap]\nresolution = 64\n[optimize]\nsteps = 5\nlearning_rate = 0.002\ninverse_depth = false\n";
  }
  const PipelineConfig c = load_pipeline_config(ini);
  CHECK(c.prompt == "a stone cottage");
  CHECK(c.seed == 12);
  CHECK(c.mode == PipelineMode::OutpaintBaseline);
  CHECK(c.cubemap_resolution == 64);
  CHECK(c.optimizer_steps == 5);
  CHECK(c.learning_rate == 0.002);
  CHECK(!c.inverse_depth);
  CHECK(c.outpaint_cameras == 100);

  const PipelineConfig d;
  CHECK(d.outpaint_cameras == 100);
  CHECK(d.optimizer_steps == 1000);
  CHECK(d.learning_rate == 0.001);
  CHECK(d.cubemap_resolution == 512);

  PipelineConfig e;
  CHECK_THROWS_WITH_AS(set_pipeline_option(e, "optimize.stepz", "3"), doctest::Contains("optimize.stepz"),
                       std::invalid_argument);
  CHECK_THROWS_AS(set_pipeline_option(e, "seed", "abc"), std::invalid_argument);
  CHECK_THROWS_AS(set_pipeline_option(e, "mode", "panorama"), std::invalid_argument);
  CHECK_THROWS_AS(set_pipeline_option(e, "optimize.inverse_depth", "maybe"), std::invalid_argument);
  {
    std::ofstream f(dir / "bad.ini");
    f << "[outpaint]\nbogus = 1\n";
  }
  CHECK_THROWS_AS(load_pipeline_config(dir / "bad.ini"), std::invalid_argument);
}
