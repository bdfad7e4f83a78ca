#pragma once

#include "medit/motion.hpp"

#include <functional>
#include <random>
#include <vector>

namespace medit {

using Rng = std::mt19937_64;

inline constexpr int kDefaultSteps = 100;
// DDPM's 1e-4..0.02 at T=1000, rescaled by 1000/T so alpha_bar_T stays near zero.
inline constexpr double kDefaultBetaStart = 1e-3;
inline constexpr double kDefaultBetaEnd = 0.2;

/// Linear-beta DDPM schedule. Tables are indexed by step t in [0, T]; entry 0
/// holds the t = 0 convention (alpha_bar = 1, beta = 0) so step t reads
/// index t directly.
class NoiseSchedule {
 public:
  NoiseSchedule(int steps, double beta_start, double beta_end);

  int steps() const { return steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return betas_.at(check(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return alpha_bars_.at(check_prev(t)); }
  double alpha_bar_prev(int t) const { return alpha_bars_.at(check(t) - 1); }
  double posterior_variance(int t) const { return posterior_variance_.at(check(t)); }

  // Throws OutOfRange unless 1 <= t <= T.
  void require_step(int t) const;

 private:
  int check(int t) const;
  int check_prev(int t) const;

  int steps_;
  double beta_start_;
  double beta_end_;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  std::vector<double> posterior_variance_;
};

NoiseSchedule make_schedule(int steps = kDefaultSteps, double beta_start = kDefaultBetaStart,
                            double beta_end = kDefaultBetaEnd);

Frames standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng);

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
Frames q_sample(const Frames& x0, int t, const Frames& eps, const NoiseSchedule& schedule);

/// Mean of q(x_{t-1} | x_t, x0) evaluated at a predicted x0.
Frames posterior_mean(const Frames& x0_hat, const Frames& x_t, int t, const NoiseSchedule& schedule);

/// One ancestral step. No noise is added at t = 1.
Frames p_sample_step(const Frames& x_t, int t, const Frames& x0_hat, const NoiseSchedule& schedule,
                     Rng& rng);

// f(x_t, t) -> x0_hat, conditioning already bound.
using X0Predictor = std::function<Frames(const Frames& x_t, int t)>;

/// Runs t = T..1 from x_T ~ N(0, I) and returns x_0.
Frames sample_loop(const X0Predictor& predict, Eigen::Index frames, Eigen::Index dim,
                   const NoiseSchedule& schedule, Rng& rng);

}  // namespace medit
