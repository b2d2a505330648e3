#include "extradiff/diffusion.hpp"

#include <cmath>

#include "extradiff/error.hpp"

namespace extradiff {

void NoiseSchedule::check_timestep(int t) const {
  if (t < 1 || t > T)
    throw InputError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
}

NoiseSchedule build_schedule(int T, double beta_min, double beta_max, SigmaMode sigma_mode) {
  if (T < 1) throw ConfigError("build_schedule: T must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw ConfigError("build_schedule: need 0 < beta_min <= beta_max < 1");

  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma.resize(T);
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.beta[i] = beta_min + frac * (beta_max - beta_min);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = i == 0 ? s.alpha[i] : s.alpha_bar[i - 1] * s.alpha[i];
  }
  for (int i = 0; i < T; ++i) {
    if (sigma_mode == SigmaMode::beta || i == 0) {
      // At t=1 the posterior variance is 0; sampling uses z=0 there anyway.
      s.sigma[i] = sigma_mode == SigmaMode::beta ? std::sqrt(s.beta[i]) : 0.0;
    } else {
      s.sigma[i] = std::sqrt(s.beta[i] * (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]));
    }
  }
  return s;
}

Latent forward_noise(const Latent& x0, int t, const Latent& eps, const NoiseSchedule& sched) {
  sched.check_timestep(t);
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols())
    throw InputError("forward_noise: x0 and eps shapes differ");
  const double ab = sched.alpha_bar_at(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

std::vector<NoiseDraw> draw_noise(const std::vector<TrainingPair>& batch, const NoiseSchedule& sched, Rng& rng) {
  std::uniform_int_distribution<int> pick_t(1, sched.T);
  std::vector<NoiseDraw> draws;
  draws.reserve(batch.size());
  for (const auto& p : batch) {
    NoiseDraw d;
    d.t = pick_t(rng);
    d.eps = standard_normal(rng, p.x0.rows(), p.x0.cols());
    draws.push_back(std::move(d));
  }
  return draws;
}

double ddpm_loss(const std::vector<TrainingPair>& batch, const std::vector<NoiseDraw>& draws,
                 const EpsilonModel& model, const NoiseSchedule& sched) {
  if (batch.empty()) throw InputError("ddpm_loss: empty batch");
  if (draws.size() != batch.size()) throw InputError("ddpm_loss: one draw per batch element required");
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Latent x_t = forward_noise(batch[i].x0, draws[i].t, draws[i].eps, sched);
    const Latent eps_hat = model(x_t, draws[i].t, batch[i].cond);
    total += (draws[i].eps - eps_hat).squaredNorm();
  }
  return total / static_cast<double>(batch.size());
}

double ddpm_loss(const std::vector<TrainingPair>& batch, const EpsilonModel& model, const NoiseSchedule& sched,
                 Rng& rng) {
  if (batch.empty()) throw InputError("ddpm_loss: empty batch");
  return ddpm_loss(batch, draw_noise(batch, sched, rng), model, sched);
}

}  // namespace extradiff
