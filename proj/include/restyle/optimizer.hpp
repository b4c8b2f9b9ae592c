#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "restyle/camera.hpp"
#include "restyle/image.hpp"
#include "restyle/mesh.hpp"
#include "restyle/raster.hpp"

namespace restyle {

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One generated view: target colors, estimated depth and the smooth
/// region P derived from that depth. An empty depth_gen disables the
/// geometry term for the view.
struct SupervisionView {
  Camera camera;
  ImageBuffer image;
  ImageBuffer depth_gen;
  std::vector<std::uint8_t> smooth;
};
using SupervisionSet = std::vector<SupervisionView>;

struct OptimizerConfig {
  double learning_rate = 1e-3;
  int steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double tau = 0.01;
  double geometry_weight = 1.0;
  int cameras_per_step = 4;
  bool inverse_depth = true;  // false: raw-depth Laplacian
  bool update_colors = true;
  bool update_positions = true;
  std::uint64_t seed = 0;
  int threads = 1;
  std::optional<std::filesystem::path> loss_csv;
  std::optional<std::filesystem::path> checkpoint_dir;
  int checkpoint_every = 0;

  /// Throws std::invalid_argument naming the first bad field.
  void validate() const;
};

/// |Laplacian| < tau on min-max normalized (inverse) depth. Pixels with
/// depth <= 0, the 1-pixel border and stencils touching invalid pixels are
/// excluded. A constant map yields every interior valid pixel.
std::vector<std::uint8_t> smooth_region_mask(const ImageBuffer& depth_gen, double tau,
                                             bool inverse_depth = true);

SupervisionView make_supervision(const Camera& camera, ImageBuffer image, ImageBuffer depth_gen,
                                 double tau, bool inverse_depth = true);

/// Throws std::invalid_argument when a view's buffers disagree with its camera.
void validate_supervision(const SupervisionView& view);

struct LossGrad {
  double loss = 0.0;
  std::vector<Vec3> grad;
};

/// Sum of squared color residuals over visible pixels; gradient w.r.t.
/// vertex colors.
LossGrad texture_loss(const TriangleMesh& mesh, const SupervisionView& view, const RenderOutput& out);
LossGrad texture_loss(const TriangleMesh& mesh, std::span<const SupervisionView> views);

/// L1 of the rendered (inverse) depth Laplacian over P; gradient w.r.t.
/// vertex positions at fixed coverage. Laplacians within 1e-9 of the local
/// field magnitude count as zero.
LossGrad geometry_loss(const TriangleMesh& mesh, const SupervisionView& view, const RenderOutput& out,
                       bool inverse_depth = true);
LossGrad geometry_loss(const TriangleMesh& mesh, std::span<const SupervisionView> views,
                       bool inverse_depth = true);

/// Mean |Laplacian| of the rendered field over P, for reporting.
double mean_abs_laplacian(const TriangleMesh& mesh, const SupervisionView& view,
                          bool inverse_depth = true);

/// Plain Adam over a flat parameter vector.
class Adam {
 public:
  Adam(std::size_t size, double learning_rate, double beta1, double beta2, double epsilon);

  void step(std::span<double> params, std::span<const double> grad);
  [[nodiscard]] int iteration() const { return t_; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  int t_ = 0;
  std::vector<double> m_;
  std::vector<double> v_;
};

/// Largest possible |update| of one coordinate at Adam iteration t, from
/// Cauchy-Schwarz on the moment sums. Requires beta1^2 < beta2.
double adam_step_bound(double learning_rate, double beta1, double beta2, int t);

struct StepRecord {
  int step = 0;
  double texture = 0.0;
  double geometry = 0.0;
  std::vector<int> cameras;
};

struct OptimizeResult {
  TriangleMesh mesh;
  std::vector<StepRecord> history;
  double max_position_step = 0.0;
  double max_step_bound_ratio = 0.0;  // max over steps of displacement / adam_step_bound
};

/// N Adam steps on colors (texture loss) and positions (geometry loss) over
/// camera minibatches drawn without replacement per epoch. Faces are fixed.
OptimizeResult optimize(const TriangleMesh& mesh, const SupervisionSet& supervision,
                        const OptimizerConfig& config,
                        const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace restyle
