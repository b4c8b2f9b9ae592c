#include "restyle/optimizer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <thread>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "restyle/hashing.hpp"

namespace restyle {

namespace {

std::span<double> flat(std::vector<Vec3>& v) { return {v.data()->data(), 3 * v.size()}; }

struct Field {
  ImageBuffer value;
  std::vector<std::uint8_t> defined;
};

Field depth_field(const ImageBuffer& depth, bool inverse_depth) {
  Field f{ImageBuffer(depth.width(), depth.height(), 1), std::vector<std::uint8_t>(depth.pixel_count(), 0)};
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      const double d = depth.at(x, y);
      if (!(d > 0.0)) continue;
      f.value.at(x, y) = inverse_depth ? 1.0 / d : d;
      f.defined[static_cast<std::size_t>(y) * depth.width() + x] = 1;
    }
  }
  return f;
}

double stencil_scale(const ImageBuffer& f, int x, int y) {
  return std::max({std::abs(f.at(x, y)), std::abs(f.at(x - 1, y)), std::abs(f.at(x + 1, y)),
                   std::abs(f.at(x, y - 1)), std::abs(f.at(x, y + 1))});
}

bool in_region(const SupervisionView& view, std::size_t i) { return view.smooth[i] != 0; }

struct CameraTerms {
  LossGrad texture;
  LossGrad geometry;
};

/// Random permutation from a counter-based stream so it is identical on
/// every platform.
std::vector<int> epoch_order(int n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const double r = unit_double(mix64(mix64(seed ^ mix64(epoch)) + static_cast<std::uint64_t>(i)));
    const int j = static_cast<int>(r * (i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("optimizer: learning_rate must be > 0");
  if (steps < 1) throw std::invalid_argument("optimizer: steps must be >= 1");
  if (!(tau > 0.0)) throw std::invalid_argument("optimizer: tau must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("optimizer: betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("optimizer: epsilon must be > 0");
  if (!(geometry_weight >= 0.0)) throw std::invalid_argument("optimizer: geometry_weight must be >= 0");
  if (cameras_per_step < 1) throw std::invalid_argument("optimizer: cameras_per_step must be >= 1");
  if (checkpoint_every < 0) throw std::invalid_argument("optimizer: checkpoint_every must be >= 0");
}

std::vector<std::uint8_t> smooth_region_mask(const ImageBuffer& depth_gen, double tau, bool inverse_depth) {
  if (depth_gen.channels() != 1) throw std::invalid_argument("smooth_region_mask: depth must be 1 channel");
  if (!(tau > 0.0)) throw std::invalid_argument("smooth_region_mask: tau must be > 0");
  Field f = depth_field(depth_gen, inverse_depth);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t i = 0; i < f.defined.size(); ++i) {
    if (!f.defined[i]) continue;
    lo = std::min(lo, f.value.samples()[i]);
    hi = std::max(hi, f.value.samples()[i]);
  }
  const bool constant = !(hi > lo);
  if (!constant) {
    for (std::size_t i = 0; i < f.defined.size(); ++i) {
      if (f.defined[i]) f.value.samples()[i] = (f.value.samples()[i] - lo) / (hi - lo);
    }
  }
  const Laplacian lap = laplacian5(f.value, f.defined);
  std::vector<std::uint8_t> mask(lap.valid.size(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = lap.valid[i] && (constant || std::abs(lap.value.samples()[i]) < tau) ? 1 : 0;
  }
  return mask;
}

SupervisionView make_supervision(const Camera& camera, ImageBuffer image, ImageBuffer depth_gen,
                                 double tau, bool inverse_depth) {
  SupervisionView view{camera, std::move(image), std::move(depth_gen), {}};
  if (!view.depth_gen.empty()) view.smooth = smooth_region_mask(view.depth_gen, tau, inverse_depth);
  validate_supervision(view);
  return view;
}

void validate_supervision(const SupervisionView& view) {
  const int w = view.camera.width();
  const int h = view.camera.height();
  if (view.image.width() != w || view.image.height() != h || view.image.channels() != 3) {
    throw std::invalid_argument(fmt::format("supervision image is {}x{}x{}, camera is {}x{}",
                                            view.image.width(), view.image.height(),
                                            view.image.channels(), w, h));
  }
  if (view.depth_gen.empty()) return;
  if (view.depth_gen.width() != w || view.depth_gen.height() != h || view.depth_gen.channels() != 1) {
    throw std::invalid_argument("supervision depth does not match the camera");
  }
  if (view.smooth.size() != view.depth_gen.pixel_count()) {
    throw std::invalid_argument("supervision smooth mask does not match the depth");
  }
}

LossGrad texture_loss(const TriangleMesh& mesh, const SupervisionView& view, const RenderOutput& out) {
  ImageBuffer g(out.width, out.height, 3);
  double loss = 0.0;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      if (!out.visible(x, y)) continue;
      for (int c = 0; c < 3; ++c) {
        const double r = out.color.at(x, y, c) - view.image.at(x, y, c);
        loss += r * r;
        g.at(x, y, c) = 2.0 * r;
      }
    }
  }
  return {loss, grad_vertex_colors(out, mesh, g)};
}

LossGrad texture_loss(const TriangleMesh& mesh, std::span<const SupervisionView> views) {
  LossGrad total{0.0, std::vector<Vec3>(mesh.vertex_count(), Vec3::Zero())};
  for (const SupervisionView& v : views) {
    validate_supervision(v);
    const LossGrad lg = texture_loss(mesh, v, render(mesh, v.camera));
    total.loss += lg.loss;
    for (std::size_t i = 0; i < total.grad.size(); ++i) total.grad[i] += lg.grad[i];
  }
  return total;
}

LossGrad geometry_loss(const TriangleMesh& mesh, const SupervisionView& view, const RenderOutput& out,
                       bool inverse_depth) {
  LossGrad result{0.0, std::vector<Vec3>(mesh.vertex_count(), Vec3::Zero())};
  if (view.depth_gen.empty()) return result;
  const Field f = depth_field(out.depth, inverse_depth);
  const Laplacian lap = laplacian5(f.value, f.defined);
  ImageBuffer gf(out.width, out.height, 1);
  bool any = false;
  for (int y = 1; y + 1 < out.height; ++y) {
    for (int x = 1; x + 1 < out.width; ++x) {
      const std::size_t i = out.index(x, y);
      if (!lap.valid[i] || !in_region(view, i)) continue;
      const double d = lap.value.at(x, y);
      if (std::abs(d) <= 1e-9 * stencil_scale(f.value, x, y)) continue;
      const double s = d > 0.0 ? 1.0 : -1.0;
      result.loss += std::abs(d);
      gf.at(x, y) -= 4.0 * s;
      gf.at(x - 1, y) += s;
      gf.at(x + 1, y) += s;
      gf.at(x, y - 1) += s;
      gf.at(x, y + 1) += s;
      any = true;
    }
  }
  if (!any) return result;
  if (inverse_depth) {
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        const double d = out.depth.at(x, y);
        gf.at(x, y) = d > 0.0 ? -gf.at(x, y) / (d * d) : 0.0;
      }
    }
  }
  result.grad = grad_vertex_positions_depth(out, mesh, view.camera, gf);
  return result;
}

LossGrad geometry_loss(const TriangleMesh& mesh, std::span<const SupervisionView> views, bool inverse_depth) {
  LossGrad total{0.0, std::vector<Vec3>(mesh.vertex_count(), Vec3::Zero())};
  for (const SupervisionView& v : views) {
    validate_supervision(v);
    const LossGrad lg = geometry_loss(mesh, v, render(mesh, v.camera), inverse_depth);
    total.loss += lg.loss;
    for (std::size_t i = 0; i < total.grad.size(); ++i) total.grad[i] += lg.grad[i];
  }
  return total;
}

double mean_abs_laplacian(const TriangleMesh& mesh, const SupervisionView& view, bool inverse_depth) {
  const RenderOutput out = render(mesh, view.camera);
  const Field f = depth_field(out.depth, inverse_depth);
  const Laplacian lap = laplacian5(f.value, f.defined);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < lap.valid.size(); ++i) {
    if (!lap.valid[i] || !in_region(view, i)) continue;
    sum += std::abs(lap.value.samples()[i]);
    ++n;
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

Adam::Adam(std::size_t size, double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw std::invalid_argument("Adam::step: size mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

double adam_step_bound(double learning_rate, double beta1, double beta2, int t) {
  const double q = beta1 * beta1 / beta2;
  if (!(q < 1.0)) throw std::invalid_argument("adam_step_bound: needs beta1^2 < beta2");
  const double geometric = (1.0 - std::pow(q, t)) / (1.0 - q);
  return learning_rate * (1.0 - beta1) / (1.0 - std::pow(beta1, t)) *
         std::sqrt((1.0 - std::pow(beta2, t)) / (1.0 - beta2)) * std::sqrt(geometric);
}

OptimizeResult optimize(const TriangleMesh& mesh, const SupervisionSet& supervision,
                        const OptimizerConfig& config,
                        const std::function<void(const StepRecord&)>& on_step) {
  config.validate();
  if (supervision.empty()) throw std::invalid_argument("optimize: supervision is empty");
  for (const SupervisionView& v : supervision) validate_supervision(v);

  std::vector<Vec3> positions = mesh.vertices();
  std::vector<Vec3> colors = mesh.colors();
  const std::size_t n = positions.size();
  Adam adam_pos(3 * n, config.learning_rate, config.beta1, config.beta2, config.epsilon);
  Adam adam_col(3 * n, config.learning_rate, config.beta1, config.beta2, config.epsilon);

  std::ofstream csv;
  if (config.loss_csv) {
    if (config.loss_csv->has_parent_path()) std::filesystem::create_directories(config.loss_csv->parent_path());
    csv.open(*config.loss_csv);
    if (!csv) throw std::runtime_error(fmt::format("cannot write {}", config.loss_csv->string()));
    csv << "step,texture,geometry,cameras\n";
  }
  if (config.checkpoint_dir && config.checkpoint_every > 0) {
    std::filesystem::create_directories(*config.checkpoint_dir);
  }

  OptimizeResult result;
  const int cams = static_cast<int>(supervision.size());
  const int batch = std::min(config.cameras_per_step, cams);
  std::uint64_t epoch = 0;
  std::vector<int> order = epoch_order(cams, config.seed, epoch);
  std::size_t cursor = 0;
  RenderOptions render_opts;
  if (config.threads > 1) render_opts.threads = 1;

  for (int step = 1; step <= config.steps; ++step) {
    if (cursor >= order.size()) {
      order = epoch_order(cams, config.seed, ++epoch);
      cursor = 0;
    }
    StepRecord rec;
    rec.step = step;
    while (static_cast<int>(rec.cameras.size()) < batch && cursor < order.size()) {
      rec.cameras.push_back(order[cursor++]);
    }

    const TriangleMesh current(positions, mesh.faces(), colors);
    std::vector<CameraTerms> terms(rec.cameras.size());
    std::vector<std::exception_ptr> errors(rec.cameras.size());
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
      for (std::size_t i = next++; i < rec.cameras.size(); i = next++) {
        try {
          const SupervisionView& view = supervision[static_cast<std::size_t>(rec.cameras[i])];
          const RenderOutput out = render(current, view.camera, render_opts);
          if (config.update_colors) terms[i].texture = texture_loss(current, view, out);
          if (config.update_positions && config.geometry_weight > 0.0) {
            terms[i].geometry = geometry_loss(current, view, out, config.inverse_depth);
          }
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    const int threads = std::max(1, std::min<int>(config.threads, static_cast<int>(rec.cameras.size())));
    if (threads == 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);

    std::vector<Vec3> g_col(n, Vec3::Zero());
    std::vector<Vec3> g_pos(n, Vec3::Zero());
    for (std::size_t i = 0; i < terms.size(); ++i) {
      const auto check = [&](const LossGrad& lg, const char* what) {
        bool ok = std::isfinite(lg.loss);
        for (const Vec3& g : lg.grad) ok = ok && g.allFinite();
        if (!ok) {
          throw OptimizerError(fmt::format("non-finite {} loss at step {} camera {}", what, step,
                                           rec.cameras[i]));
        }
      };
      check(terms[i].texture, "texture");
      check(terms[i].geometry, "geometry");
      rec.texture += terms[i].texture.loss;
      rec.geometry += terms[i].geometry.loss;
      if (!terms[i].texture.grad.empty())
        for (std::size_t v = 0; v < n; ++v) g_col[v] += terms[i].texture.grad[v];
      if (!terms[i].geometry.grad.empty())
        for (std::size_t v = 0; v < n; ++v) g_pos[v] += config.geometry_weight * terms[i].geometry.grad[v];
    }

    if (config.update_colors) {
      adam_col.step(flat(colors), flat(g_col));
      for (Vec3& c : colors) c = c.cwiseMax(0.0).cwiseMin(1.0);
    }
    if (config.update_positions) {
      const std::vector<Vec3> before = positions;
      adam_pos.step(flat(positions), flat(g_pos));
      double moved = 0.0;
      for (std::size_t v = 0; v < n; ++v) moved = std::max(moved, (positions[v] - before[v]).cwiseAbs().maxCoeff());
      result.max_position_step = std::max(result.max_position_step, moved);
      const double bound = adam_step_bound(config.learning_rate, config.beta1, config.beta2, adam_pos.iteration());
      result.max_step_bound_ratio = std::max(result.max_step_bound_ratio, moved / bound);
    }

    if (csv.is_open()) {
      csv << fmt::format("{},{:.17g},{:.17g},{}\n", step, rec.texture, rec.geometry,
                         fmt::join(rec.cameras, " "));
    }
    if (config.checkpoint_dir && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      save_mesh(TriangleMesh(positions, mesh.faces(), colors),
                *config.checkpoint_dir / fmt::format("step_{:05d}.ply", step));
    }
    if (on_step) on_step(rec);
    result.history.push_back(std::move(rec));
  }
  result.mesh = TriangleMesh(std::move(positions), mesh.faces(), std::move(colors));
  return result;
}

}  // namespace restyle
