#include "extradiff/sample.hpp"

#include <cmath>

#include "extradiff/error.hpp"
#include "extradiff/parallel.hpp"

namespace extradiff {

NullMode null_mode_from_string(const std::string& text) {
  if (text == "mean_text") return NullMode::mean_text;
  if (text == "zero") return NullMode::zero;
  if (text == "explicit") return NullMode::explicit_vector;
  throw ConfigError("unknown null_mode '" + text + "' (mean_text, zero, explicit)");
}

std::string to_string(NullMode mode) {
  switch (mode) {
    case NullMode::mean_text: return "mean_text";
    case NullMode::zero: return "zero";
    case NullMode::explicit_vector: return "explicit";
  }
  return "?";
}

Eigen::VectorXd make_null_condition(const Corpus& corpus, NullMode mode, const Eigen::VectorXd& explicit_null) {
  switch (mode) {
    case NullMode::zero:
      return Eigen::VectorXd::Zero(corpus.dim_text);
    case NullMode::explicit_vector:
      if (explicit_null.size() != corpus.dim_text)
        throw InputError("explicit null condition has length " + std::to_string(explicit_null.size()) +
                         ", expected " + std::to_string(corpus.dim_text));
      return explicit_null;
    case NullMode::mean_text: {
      bool has_dataset = false;
      for (const auto& r : corpus.records) has_dataset = has_dataset || r.split == Split::dataset;
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(corpus.dim_text);
      long count = 0;
      for (const auto& r : corpus.records) {
        if (has_dataset && r.split != Split::dataset) continue;
        if (r.text_vecs.empty()) continue;
        sum += r.canonical_text();
        ++count;
      }
      if (count == 0) throw InputError("mean_text null condition needs a corpus with text features");
      return sum / static_cast<double>(count);
    }
  }
  throw ConfigError("unknown null mode");
}

Eigen::VectorXd make_null_condition(const Corpus& corpus, const GuidanceConfig& guidance) {
  return make_null_condition(corpus, guidance.null_mode, guidance.explicit_null);
}

Latent guided_epsilon(const Latent& eps_text, const Latent& eps_null, double eta) {
  if (eps_text.rows() != eps_null.rows() || eps_text.cols() != eps_null.cols())
    throw InputError("guided_epsilon: shape mismatch");
  return eta * eps_text + (1.0 - eta) * eps_null;
}

Latent reverse_step(const Latent& x_t, int t, const Latent& eps_hat, const NoiseSchedule& sched, const Latent& z) {
  sched.check_timestep(t);
  if (x_t.rows() != eps_hat.rows() || x_t.cols() != eps_hat.cols() || x_t.rows() != z.rows() || x_t.cols() != z.cols())
    throw InputError("reverse_step: shape mismatch");
  const double a = sched.alpha_at(t);
  const double coef = (1.0 - a) / std::sqrt(1.0 - sched.alpha_bar_at(t));
  return (x_t - coef * eps_hat) / std::sqrt(a) + sched.sigma_at(t) * z;
}

namespace {

template <class Mix>
std::vector<Latent> run_chains(const std::vector<Eigen::VectorXd>& conds, int steps, const NoiseSchedule& sched,
                               const SamplerOptions& options, Mix&& epsilon) {
  if (steps == 0) steps = sched.T;
  if (steps < 1 || steps > sched.T)
    throw ConfigError("sampler: steps must lie in [1, " + std::to_string(sched.T) + "]");
  std::vector<Latent> out(conds.size());
  parallel_for(conds.size(), options.threads, [&](std::size_t i) {
    Rng rng(derive_seed(options.seed, i));
    Latent x = standard_normal(rng, options.n_tokens, options.d_latent);
    for (int t = steps; t >= 1; --t) {
      const Latent eps = epsilon(x, t, conds[i]);
      const Latent z = t > 1 ? standard_normal(rng, options.n_tokens, options.d_latent)
                             : Latent::Zero(options.n_tokens, options.d_latent);
      x = reverse_step(x, t, eps, sched, z);
    }
    out[i] = std::move(x);
  });
  return out;
}

}  // namespace

std::vector<Latent> sample_guided(const EpsilonModel& model, const std::vector<Eigen::VectorXd>& conds,
                                  const Eigen::VectorXd& null_cond, const GuidanceConfig& guidance,
                                  const NoiseSchedule& sched, const SamplerOptions& options) {
  return run_chains(conds, guidance.steps, sched, options, [&](const Latent& x, int t, const Eigen::VectorXd& cond) {
    const Latent eps_text = model(x, t, cond);
    const Latent eps_null = model(x, t, null_cond);
    return guided_epsilon(eps_text, eps_null, guidance.eta);
  });
}

std::vector<Latent> sample_unguided(const EpsilonModel& model, const std::vector<Eigen::VectorXd>& conds, int steps,
                                    const NoiseSchedule& sched, const SamplerOptions& options) {
  return run_chains(conds, steps, sched, options,
                    [&](const Latent& x, int t, const Eigen::VectorXd& cond) { return model(x, t, cond); });
}

std::vector<Latent> sample(const DenoiserParams& params, const Eigen::VectorXd& cond, const Eigen::VectorXd& null_cond,
                           const GuidanceConfig& guidance, const NoiseSchedule& sched, int n, std::uint64_t seed,
                           unsigned threads) {
  if (n < 0) throw ConfigError("sample: n must be >= 0");
  const std::vector<Eigen::VectorXd> conds(static_cast<std::size_t>(n), cond);
  SamplerOptions options{seed, threads, params.config.n_tokens, params.config.d_latent};
  return sample_guided(as_epsilon_model(params), conds, null_cond, guidance, sched, options);
}

}  // namespace extradiff
