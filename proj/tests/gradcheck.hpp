#pragma once

// Central finite-difference probe of diffusion_loss gradients on a small model.

#include "medit/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace medit::testing {

struct GradCheckReport {
  int parameter_probes = 0;
  int embedding_probes = 0;
  double max_relative_error = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic));
}

// Five-point central stencil. Its O(h^4) truncation allows a step large
// enough that roundoff in the loss (~1e-16 * loss / h) stays far below
// gradients of order 1e-8, which a two-point stencil at h = 1e-6 cannot resolve.
template <class F>
double central_difference(const F& f, double h) {
  return (f(-2 * h) - 8 * f(-h) + 8 * f(h) - f(2 * h)) / (12 * h);
}

// J=2 layout (D=23), N=4, H1=H2=16. Parameters are randomized beyond the
// initializer (biases included) so no probed gradient is structurally zero.
inline GradCheckReport run_gradient_check(int parameter_probes, int embedding_probes, std::uint64_t seed,
                                          double h = 1e-3) {
  DenoiserDims dims{4, 23, 8, 16, 16, 10};
  DenoiserModel model = DenoiserModel::initialized(dims, seed);
  Rng rng(seed + 1);
  std::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < model.parameters().size(); ++i) {
    model.mutable_parameters()(i) += 0.1 * normal(rng);
  }
  const NoiseSchedule schedule = make_schedule(dims.diffusion_steps, 1e-3, 0.2);

  std::vector<DiffusionSample> batch(3);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    DiffusionSample& s = batch[k];
    s.x0 = standard_normal(dims.frames, dims.frame_dim, rng);
    s.embedding = standard_normal(dims.embed_dim, 1, rng).col(0);
    s.scale = 1.0 / 3.0;
    if (k == 1) {
      Frames w = standard_normal(dims.frames, dims.frame_dim, rng).cwiseAbs();
      w.row(0).setZero();
      s.weight = w;
    }
    draw_noise(s, schedule, rng);
  }

  const LossAndGrads analytic = diffusion_loss(model, batch, schedule, {true, true});
  GradCheckReport report;

  std::uniform_int_distribution<Eigen::Index> pick(0, model.parameters().size() - 1);
  for (int p = 0; p < parameter_probes; ++p) {
    const Eigen::Index i = pick(rng);
    const double numeric = central_difference(
        [&](double delta) {
          DenoiserModel moved = model;
          moved.mutable_parameters()(i) += delta;
          return diffusion_loss(moved, batch, schedule, {false, false}).loss;
        },
        h);
    report.max_relative_error =
        std::max(report.max_relative_error, relative_error(analytic.parameter_grads(i), numeric));
    ++report.parameter_probes;
  }

  std::uniform_int_distribution<int> pick_sample(0, static_cast<int>(batch.size()) - 1);
  std::uniform_int_distribution<int> pick_coord(0, dims.embed_dim - 1);
  for (int p = 0; p < embedding_probes; ++p) {
    const int k = pick_sample(rng);
    const int c = pick_coord(rng);
    const double numeric = central_difference(
        [&](double delta) {
          std::vector<DiffusionSample> moved = batch;
          moved[k].embedding(c) += delta;
          return diffusion_loss(model, moved, schedule, {false, false}).loss;
        },
        h);
    report.max_relative_error =
        std::max(report.max_relative_error, relative_error(analytic.embedding_grads[k](c), numeric));
    ++report.embedding_probes;
  }
  return report;
}

}  // namespace medit::testing
