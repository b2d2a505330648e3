#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "extradiff/random.hpp"

namespace extradiff {

enum class SigmaMode {
  beta,       // sigma_t^2 = beta_t
  posterior,  // sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)
};

/// Per-timestep tables, 1-based: index t in [1, T] maps to element t-1.
struct NoiseSchedule {
  int T = 0;
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  Eigen::VectorXd alpha_bar;
  Eigen::VectorXd sigma;

  double beta_at(int t) const { return beta[t - 1]; }
  double alpha_at(int t) const { return alpha[t - 1]; }
  double alpha_bar_at(int t) const { return alpha_bar[t - 1]; }
  double sigma_at(int t) const { return sigma[t - 1]; }

  void check_timestep(int t) const;
};

/// Linear beta from beta_min to beta_max over T steps.
NoiseSchedule build_schedule(int T, double beta_min, double beta_max, SigmaMode sigma_mode = SigmaMode::beta);

/// Latents are token x channel matrices.
using Latent = Eigen::MatrixXd;

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Latent forward_noise(const Latent& x0, int t, const Latent& eps, const NoiseSchedule& sched);

/// One training pair: clean latent and its text condition.
struct TrainingPair {
  Latent x0;
  Eigen::VectorXd cond;
};

/// The per-element randomness of one loss evaluation.
struct NoiseDraw {
  int t = 1;
  Latent eps;
};

/// Any epsilon predictor eps_theta(x_t, t, cond).
using EpsilonModel = std::function<Latent(const Latent& x_t, int t, const Eigen::VectorXd& cond)>;

/// t uniform in {1..T} then eps standard normal, per batch element in order.
std::vector<NoiseDraw> draw_noise(const std::vector<TrainingPair>& batch, const NoiseSchedule& sched, Rng& rng);

/// Mean over the batch of |eps - eps_theta(x_t, t, cond)|^2 for given draws.
double ddpm_loss(const std::vector<TrainingPair>& batch, const std::vector<NoiseDraw>& draws,
                 const EpsilonModel& model, const NoiseSchedule& sched);

/// Same, drawing (t, eps) from rng.
double ddpm_loss(const std::vector<TrainingPair>& batch, const EpsilonModel& model, const NoiseSchedule& sched,
                 Rng& rng);

}  // namespace extradiff
