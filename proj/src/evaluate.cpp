#include "extradiff/evaluate.hpp"

#include <cmath>

#include "extradiff/error.hpp"

namespace extradiff {

namespace {
constexpr double kClamp = 1e-9;
}

GaussianStats fit_gaussian(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw InputError("fit_gaussian: need at least 2 samples");
  GaussianStats s;
  s.count = features.rows();
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  return s;
}

GaussianStats fit_gaussian(const std::vector<Eigen::VectorXd>& features) {
  if (features.size() < 2) throw InputError("fit_gaussian: need at least 2 samples");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(features.size()), features.front().size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != m.cols()) throw InputError("fit_gaussian: inconsistent feature lengths");
    m.row(static_cast<Eigen::Index>(i)) = features[i].transpose();
  }
  return fit_gaussian(m);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.info() != Eigen::Success) throw Error("psd_sqrt: eigendecomposition failed");
  Eigen::VectorXd values = eig.eigenvalues();
  const double floor = -kClamp * std::max(1.0, values.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values[i] < floor) throw InputError("psd_sqrt: matrix is not positive semidefinite");
    values[i] = std::sqrt(std::max(values[i], 0.0));
  }
  return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim()) throw InputError("frechet_distance: dimension mismatch");
  const Eigen::MatrixXd root_a = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = root_a * b.cov * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw Error("frechet_distance: eigendecomposition failed");
  double trace_root = 0.0;
  const double floor = -kClamp * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
    const double v = eig.eigenvalues()[i];
    if (v < floor) throw InputError("frechet_distance: covariance product is not positive semidefinite");
    trace_root += std::sqrt(std::max(v, 0.0));
  }
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_root;
  // Rounding can push identical inputs a hair below zero.
  return std::max(d, 0.0);
}

double inception_score(const Eigen::MatrixXd& posteriors) {
  if (posteriors.rows() == 0) throw InputError("inception_score: no samples");
  const Eigen::VectorXd marginal = posteriors.colwise().mean().transpose();
  double kl_sum = 0.0;
  for (Eigen::Index i = 0; i < posteriors.rows(); ++i) {
    for (Eigen::Index c = 0; c < posteriors.cols(); ++c) {
      const double p = posteriors(i, c);
      if (p > 0.0) kl_sum += p * (std::log(p) - std::log(marginal[c]));
    }
  }
  return std::exp(kl_sum / static_cast<double>(posteriors.rows()));
}

double inception_score(const std::vector<Eigen::VectorXd>& samples, const SoftmaxClassifier& clf) {
  if (samples.empty()) throw InputError("inception_score: no samples");
  Eigen::MatrixXd post(static_cast<Eigen::Index>(samples.size()), clf.n_classes());
  for (std::size_t i = 0; i < samples.size(); ++i)
    post.row(static_cast<Eigen::Index>(i)) = clf.probabilities(samples[i]).transpose();
  return inception_score(post);
}

EarlyStopDecision early_stop_monitor(const std::vector<double>& history, int patience) {
  if (patience < 1) throw ConfigError("early_stop_monitor: patience must be >= 1");
  EarlyStopDecision d;
  int above = 0;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (d.best_index < 0 || history[i] < history[static_cast<std::size_t>(d.best_index)]) {
      d.best_index = static_cast<int>(i);
      above = 0;
    } else if (history[i] > history[static_cast<std::size_t>(d.best_index)]) {
      if (++above >= patience) {
        d.stop = true;
        d.stop_index = static_cast<int>(i);
        return d;
      }
    } else {
      above = 0;
    }
  }
  return d;
}

}  // namespace extradiff
