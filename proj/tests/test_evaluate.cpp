#include <doctest.h>

#include <cmath>

#include <Eigen/Eigenvalues>

#include "extradiff/error.hpp"
#include "extradiff/evaluate.hpp"
#include "extradiff/random.hpp"
#include "test_util.hpp"

using namespace extradiff;

namespace {

GaussianStats stats(Eigen::VectorXd mean, Eigen::MatrixXd cov) { return {std::move(mean), std::move(cov), 100}; }

Eigen::MatrixXd random_spd(Rng& rng, int d) {
  const Eigen::MatrixXd a = standard_normal(rng, d, d);
  return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

/// Tr(sqrt(Sa Sb)) from the (real, nonnegative) eigenvalues of the
/// non-symmetric product.
double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(a * b);
  double tr = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
  return tr;
}

}  // namespace

TEST_CASE("fit_gaussian: hand cases") {
  Eigen::MatrixXd two(2, 2);
  two << 0, 0, 2, 0;
  const auto g = fit_gaussian(two);
  CHECK(g.mean == Eigen::Vector2d(1, 0));
  Eigen::Matrix2d expect;
  expect << 2, 0, 0, 0;
  CHECK(g.cov == expect);
  CHECK(g.count == 2);

  const auto same = fit_gaussian(std::vector<Eigen::VectorXd>(5, Eigen::Vector3d(1, 2, 3)));
  CHECK(same.cov.norm() == 0.0);
  CHECK_THROWS_AS(fit_gaussian(Eigen::MatrixXd(1, 3)), InputError);
}

TEST_CASE("fit_gaussian matches a two-pass moment oracle") {
  Rng rng(1);
  Eigen::MatrixXd x = standard_normal(rng, 1000, 4);
  x.col(2) = 3.0 * x.col(2).array() + 5.0;
  const auto g = fit_gaussian(x);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
  for (int i = 0; i < 1000; ++i)
    for (int j = 0; j < 4; ++j) mean[j] += x(i, j);
  mean /= 1000.0;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(4, 4);
  for (int i = 0; i < 1000; ++i)
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) cov(a, b) += (x(i, a) - mean[a]) * (x(i, b) - mean[b]);
  cov /= 999.0;
  CHECK((g.mean - mean).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((g.cov - cov).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((g.cov - g.cov.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("frechet_distance: closed forms") {
  const auto a = stats(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
  const auto b = stats(Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Identity(1, 1));
  CHECK(std::abs(frechet_distance(a, b) - 1.0) <= 1e-9);
  CHECK(std::abs(frechet_distance(a, a)) <= 1e-9);
  // 1-D variances 1 and 4: (1 - 2)^2.
  const auto c = stats(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 4.0));
  CHECK(frechet_distance(a, c) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(frechet_distance(a, stats(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2))), InputError);
}

TEST_CASE("frechet_distance matches an eigen-decomposition oracle, symmetric, rotation invariant") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto sa = random_spd(rng, 3), sb = random_spd(rng, 3);
    const Eigen::VectorXd ma = standard_normal(rng, 3), mb = standard_normal(rng, 3);
    const auto a = stats(ma, sa), b = stats(mb, sb);
    const double oracle = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2 * trace_sqrt_product(sa, sb);
    const double d = frechet_distance(a, b);
    CHECK(testing::relative_error(d, oracle) < 1e-8);
    CHECK(frechet_distance(b, a) == doctest::Approx(d).epsilon(1e-10));

    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(standard_normal(rng, 3, 3)).householderQ();
    const auto ra = stats(q * ma, q * sa * q.transpose()), rb = stats(q * mb, q * sb * q.transpose());
    CHECK(std::abs(frechet_distance(ra, rb) - d) <= 1e-8 * std::max(1.0, d));
  }
}

TEST_CASE("frechet_distance: singular covariances are fine") {
  Eigen::Matrix2d s;
  s << 1, 0, 0, 0;
  const auto a = stats(Eigen::Vector2d::Zero(), s);
  CHECK(std::abs(frechet_distance(a, a)) <= 1e-9);
  const auto z = stats(Eigen::Vector2d::Zero(), Eigen::Matrix2d::Zero());
  CHECK(frechet_distance(a, z) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("psd_sqrt squares back and rejects negative matrices") {
  Rng rng(2);
  const auto m = random_spd(rng, 5);
  const auto r = psd_sqrt(m);
  CHECK((r * r - m).norm() < 1e-10 * m.norm());
  CHECK_THROWS_AS(psd_sqrt(-Eigen::MatrixXd::Identity(2, 2)), InputError);
}

TEST_CASE("inception_score: uniform, balanced one-hot, summation oracle") {
  CHECK(inception_score(Eigen::MatrixXd::Constant(7, 4, 0.25)) == 1.0);
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(8, 4);
  for (int i = 0; i < 8; ++i) onehot(i, i % 4) = 1.0;
  CHECK(inception_score(onehot) == doctest::Approx(4.0).epsilon(1e-15));

  Rng rng(5);
  Eigen::MatrixXd p = standard_normal(rng, 10, 3).array().exp();
  for (int i = 0; i < 10; ++i) p.row(i) /= p.row(i).sum();
  double marg[3] = {0, 0, 0};
  for (int i = 0; i < 10; ++i)
    for (int c = 0; c < 3; ++c) marg[c] += p(i, c) / 10;
  double kl = 0;
  for (int i = 0; i < 10; ++i)
    for (int c = 0; c < 3; ++c) kl += p(i, c) * std::log(p(i, c) / marg[c]);
  const double oracle = std::exp(kl / 10);
  CHECK(std::abs(inception_score(p) - oracle) < 1e-10);

  Eigen::MatrixXd reversed = p.colwise().reverse();
  CHECK(inception_score(reversed) == doctest::Approx(inception_score(p)).epsilon(1e-13));
  CHECK_THROWS_AS(inception_score(Eigen::MatrixXd(0, 3)), InputError);
}

TEST_CASE("inception_score stays within [1, C]") {
  Rng rng(8);
  Eigen::MatrixXd p = (3.0 * standard_normal(rng, 100000, 5)).array().exp();
  for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) /= p.row(i).sum();
  const double is = inception_score(p);
  CHECK(is >= 1.0);
  CHECK(is <= 5.0);
}

TEST_CASE("early_stop_monitor: contract sequences") {
  auto d = early_stop_monitor({10, 8, 7, 7.5}, 1);
  CHECK(d.stop);
  CHECK(d.best_index == 2);
  CHECK(d.stop_index == 3);

  d = early_stop_monitor({10, 9, 8, 7}, 1);
  CHECK_FALSE(d.stop);
  CHECK(d.best_index == 3);

  d = early_stop_monitor({5, 6, 6, 4}, 2);
  CHECK(d.stop);
  CHECK(d.stop_index == 2);
  CHECK(d.best_index == 0);

  d = early_stop_monitor({5, 5, 5}, 1);
  CHECK_FALSE(d.stop);
  CHECK(d.best_index == 0);

  d = early_stop_monitor({3, 4, 2, 5, 6}, 2);
  CHECK(d.stop);
  CHECK(d.stop_index == 4);
  CHECK(d.best_index == 2);

  d = early_stop_monitor({}, 1);
  CHECK_FALSE(d.stop);
  CHECK(d.best_index == -1);
  CHECK_THROWS_AS(early_stop_monitor({1}, 0), ConfigError);
}
