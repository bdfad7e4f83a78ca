#include "medit/schedule.hpp"

#include "medit/error.hpp"

#include <cmath>

namespace medit {

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end)
    : steps_(steps), beta_start_(beta_start), beta_end_(beta_end) {
  if (steps < 1) throw Error(ErrorCode::OutOfRange, "schedule needs T >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw Error(ErrorCode::OutOfRange, "schedule needs 0 < beta_start <= beta_end < 1");
  }
  betas_.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  alpha_bars_.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  posterior_variance_.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    betas_[t] = beta_start + frac * (beta_end - beta_start);
    alpha_bars_[t] = alpha_bars_[t - 1] * (1.0 - betas_[t]);
    posterior_variance_[t] = (1.0 - alpha_bars_[t - 1]) / (1.0 - alpha_bars_[t]) * betas_[t];
  }
}

void NoiseSchedule::require_step(int t) const { check(t); }

int NoiseSchedule::check(int t) const {
  if (t < 1 || t > steps_) {
    throw Error(ErrorCode::OutOfRange,
                "step " + std::to_string(t) + " outside [1, " + std::to_string(steps_) + "]");
  }
  return t;
}

int NoiseSchedule::check_prev(int t) const {
  if (t < 0 || t > steps_) {
    throw Error(ErrorCode::OutOfRange,
                "step " + std::to_string(t) + " outside [0, " + std::to_string(steps_) + "]");
  }
  return t;
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  return NoiseSchedule(steps, beta_start, beta_end);
}

Frames standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Frames out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = normal(rng);
  return out;
}

namespace {

void require_same_shape(const Frames& a, const Frames& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "array shapes differ");
  }
}

}  // namespace

Frames q_sample(const Frames& x0, int t, const Frames& eps, const NoiseSchedule& schedule) {
  require_same_shape(x0, eps);
  schedule.require_step(t);
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

Frames posterior_mean(const Frames& x0_hat, const Frames& x_t, int t, const NoiseSchedule& schedule) {
  require_same_shape(x0_hat, x_t);
  schedule.require_step(t);
  // alpha_bar_0 = 1: the x0 coefficient is exactly one and the x_t term vanishes.
  if (t == 1) return x0_hat;
  const double beta = schedule.beta(t);
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar_prev(t);
  const double coef_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double coef_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
  return coef_x0 * x0_hat + coef_xt * x_t;
}

Frames p_sample_step(const Frames& x_t, int t, const Frames& x0_hat, const NoiseSchedule& schedule,
                     Rng& rng) {
  Frames mean = posterior_mean(x0_hat, x_t, t, schedule);
  if (t == 1) return mean;
  const double sigma = std::sqrt(schedule.posterior_variance(t));
  return mean + sigma * standard_normal(mean.rows(), mean.cols(), rng);
}

Frames sample_loop(const X0Predictor& predict, Eigen::Index frames, Eigen::Index dim,
                   const NoiseSchedule& schedule, Rng& rng) {
  Frames x = standard_normal(frames, dim, rng);
  for (int t = schedule.steps(); t >= 1; --t) {
    Frames x0_hat = predict(x, t);
    if (x0_hat.rows() != frames || x0_hat.cols() != dim) {
      throw Error(ErrorCode::ShapeMismatch, "predictor returned the wrong shape");
    }
    x = p_sample_step(x, t, x0_hat, schedule, rng);
  }
  return x;
}

}  // namespace medit
