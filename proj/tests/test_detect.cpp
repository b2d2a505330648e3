#include <doctest.h>

#include <algorithm>
#include <limits>
#include <set>

#include "extradiff/detect.hpp"
#include "extradiff/error.hpp"
#include "extradiff/random.hpp"

using namespace extradiff;

namespace {

/// Independent Lloyd oracle: plain loops, returns the objective after every
/// assignment step starting from the given centroids.
std::vector<double> lloyd_oracle(const Eigen::MatrixXd& pts, Eigen::MatrixXd cents, int max_iter) {
  const int n = static_cast<int>(pts.rows());
  const int k = static_cast<int>(cents.rows());
  const int d = static_cast<int>(pts.cols());
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  std::vector<double> trace;
  auto assign_all = [&](std::vector<int>& a) {
    double obj = 0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += (pts(i, j) - cents(c, j)) * (pts(i, j) - cents(c, j));
        if (s < best) {
          best = s;
          a[static_cast<std::size_t>(i)] = c;
        }
      }
      obj += best;
    }
    return obj;
  };
  trace.push_back(assign_all(assign));
  for (int it = 0; it < max_iter; ++it) {
    for (int c = 0; c < k; ++c) {
      std::vector<double> sum(static_cast<std::size_t>(d), 0.0);
      int cnt = 0;
      for (int i = 0; i < n; ++i)
        if (assign[static_cast<std::size_t>(i)] == c) {
          for (int j = 0; j < d; ++j) sum[static_cast<std::size_t>(j)] += pts(i, j);
          ++cnt;
        }
      if (cnt > 0)
        for (int j = 0; j < d; ++j) cents(c, j) = sum[static_cast<std::size_t>(j)] / cnt;
    }
    std::vector<int> next(static_cast<std::size_t>(n));
    trace.push_back(assign_all(next));
    if (next == assign) break;
    assign = next;
  }
  return trace;
}

EmbeddingRecord rec(const std::string& id, const std::string& label, Split split, Eigen::VectorXd v) {
  EmbeddingRecord r;
  r.id = id;
  r.label = label;
  r.split = split;
  r.image_vec = std::move(v);
  if (split == Split::dataset) r.text_vecs.push_back(Eigen::VectorXd::Zero(1));
  return r;
}

Corpus separable_two_class(int per_class, std::uint64_t seed) {
  Rng rng(seed);
  Corpus c{2, 1, false, {}};
  for (int i = 0; i < per_class; ++i) {
    c.records.push_back(rec("a" + std::to_string(i), "A", Split::dataset,
                            Eigen::Vector2d(3, 0) + 0.5 * standard_normal(rng, 2)));
    c.records.push_back(rec("b" + std::to_string(i), "B", Split::dataset,
                            Eigen::Vector2d(-3, 0) + 0.5 * standard_normal(rng, 2)));
  }
  return c;
}

struct Rates {
  double recall;
  double false_removal;
};

Rates score(const FilterReport& report, const Corpus& web) {
  std::set<std::string> removed;
  for (const auto& id : report.removed_ids()) removed.insert(id);
  int tp = 0, pos = 0, fp = 0, neg = 0;
  for (const auto& r : web.records) {
    const bool truth = r.outlier_truth.value_or(false);
    const bool rm = removed.contains(r.id);
    if (truth) {
      ++pos;
      tp += rm;
    } else {
      ++neg;
      fp += rm;
    }
  }
  return {pos ? double(tp) / pos : 1.0, neg ? double(fp) / neg : 0.0};
}

void check_partition(const FilterReport& report, const Corpus& web) {
  std::set<std::string> kept, removed, input;
  for (const auto& id : report.kept_ids()) kept.insert(id);
  for (const auto& id : report.removed_ids()) removed.insert(id);
  for (const auto& r : web.records) input.insert(r.id);
  std::set<std::string> both;
  std::set_intersection(kept.begin(), kept.end(), removed.begin(), removed.end(), std::inserter(both, both.end()));
  CHECK(both.empty());
  std::set<std::string> all = kept;
  all.insert(removed.begin(), removed.end());
  CHECK(all == input);
}

}  // namespace

TEST_CASE("kmeans: symmetric two-cluster case") {
  Eigen::MatrixXd pts(4, 2);
  pts << 0, 0, 0.1, 0, 10, 10, 10.1, 10;
  for (std::uint64_t seed : {0, 1, 2, 3, 4}) {
    const auto m = kmeans_fit(pts, 2, seed);
    Eigen::MatrixXd sorted = m.centroids;
    if (sorted(0, 0) > sorted(1, 0)) sorted.row(0).swap(sorted.row(1));
    CHECK(sorted(0, 0) == doctest::Approx(0.05));
    CHECK(sorted(0, 1) == doctest::Approx(0.0));
    CHECK(sorted(1, 0) == doctest::Approx(10.05));
    CHECK(sorted(1, 1) == doctest::Approx(10.0));
  }
}

TEST_CASE("kmeans: K = n puts every point on its own centroid") {
  Rng rng(1);
  const Eigen::MatrixXd pts = standard_normal(rng, 12, 3);
  const auto m = kmeans_fit(pts, 12, 9);
  CHECK(m.objective == 0.0);
  std::set<int> used(m.assignments.begin(), m.assignments.end());
  CHECK(used.size() == 12);
}

TEST_CASE("kmeans: matches an independent Lloyd oracle step for step") {
  Rng rng(42);
  Eigen::MatrixXd pts = standard_normal(rng, 200, 3);
  for (int i = 0; i < 200; ++i) pts.row(i) += Eigen::RowVector3d(4.0 * (i % 4), 2.0 * (i % 3), 0);
  const auto m = kmeans_fit(pts, 4, 17);
  const auto oracle = lloyd_oracle(pts, m.initial_centroids, 300);
  REQUIRE(m.objective_trace.size() == oracle.size());
  for (std::size_t i = 0; i < oracle.size(); ++i)
    CHECK(m.objective_trace[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
  CHECK(m.converged);
}

TEST_CASE("kmeans: objective is non-increasing and consistent with assignments") {
  Rng rng(7);
  const Eigen::MatrixXd pts = standard_normal(rng, 150, 4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = kmeans_fit(pts, 5, seed);
    for (std::size_t i = 1; i < m.objective_trace.size(); ++i)
      CHECK(m.objective_trace[i] <= m.objective_trace[i - 1] * (1 + 1e-15));
    double recomputed = 0.0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      const int a = m.assignments[static_cast<std::size_t>(i)];
      const double d = (pts.row(i) - m.centroids.row(a)).squaredNorm();
      recomputed += d;
      for (int c = 0; c < m.k; ++c) CHECK(d <= (pts.row(i) - m.centroids.row(c)).squaredNorm());
    }
    CHECK(m.objective == doctest::Approx(recomputed).epsilon(1e-9));
    const auto again = kmeans_fit(pts, 5, seed);
    CHECK(again.centroids == m.centroids);
    CHECK(again.assignments == m.assignments);
  }
}

TEST_CASE("kmeans: errors") {
  Eigen::MatrixXd pts(3, 2);
  pts.setRandom();
  CHECK_THROWS_AS(kmeans_fit(pts, 4, 0), ConfigError);
  CHECK_THROWS_AS(kmeans_fit(pts, 0, 0), ConfigError);
  CHECK_THROWS_AS(kmeans_fit(Eigen::MatrixXd(0, 2), 1, 0), ConfigError);
}

TEST_CASE("cluster_filter: cluster on the class centroid is kept, one at 10 s_c is removed") {
  Corpus dataset{2, 1, false, {}};
  // Class centroid (0,0); members at distance 1, so s_c = 1.
  dataset.records = {rec("d0", "k", Split::dataset, Eigen::Vector2d(1, 0)),
                     rec("d1", "k", Split::dataset, Eigen::Vector2d(-1, 0)),
                     rec("d2", "k", Split::dataset, Eigen::Vector2d(0, 1)),
                     rec("d3", "k", Split::dataset, Eigen::Vector2d(0, -1))};
  Corpus web{2, 1, false, {}};
  web.records = {rec("w0", "k", Split::web, Eigen::Vector2d(0.1, 0)),
                 rec("w1", "k", Split::web, Eigen::Vector2d(-0.1, 0)),
                 rec("w2", "k", Split::web, Eigen::Vector2d(10.1, 0)),
                 rec("w3", "k", Split::web, Eigen::Vector2d(9.9, 0))};
  const auto report = cluster_filter(web, dataset, {.k = 2, .tau_sigma = 3.0, .seed = 0});
  CHECK(report.kept_ids() == std::vector<std::string>{"w0", "w1"});
  CHECK(report.removed_ids() == std::vector<std::string>{"w2", "w3"});
  for (const auto& d : report.decisions) CHECK(d.threshold == doctest::Approx(3.0));
  check_partition(report, web);
}

TEST_CASE("cluster_filter: keyword without dataset records is left unfiltered with a warning") {
  Corpus dataset{1, 1, false, {rec("d0", "a", Split::dataset, Eigen::VectorXd::Ones(1))}};
  Corpus web{1, 1, false, {rec("w0", "zzz", Split::web, Eigen::VectorXd::Constant(1, 100.0))}};
  const auto report = cluster_filter(web, dataset, {});
  REQUIRE(report.decisions.size() == 1);
  CHECK(report.decisions[0].kept);
  CHECK(report.decisions[0].unfiltered);
  CHECK(report.warnings.size() == 1);
}

TEST_CASE("cluster_filter on a synthetic corpus agrees with a brute-force distance oracle") {
  SynthConfig cfg;
  cfg.n_classes = 4;
  cfg.dataset_per_class = 60;
  cfg.web_per_class = 200;
  cfg.outlier_fraction = 0.2;
  cfg.separation = 6.0;
  cfg.seed = 2024;
  const auto world = generate_synthetic(cfg);
  const ClusterFilterOptions opts{.k = 5, .tau_sigma = 3.0, .seed = 1};
  const auto report = cluster_filter(world.web, world.dataset, opts);
  check_partition(report, world.web);

  // Oracle: every record judged by its own distance to the class centroid.
  FilterReport oracle;
  for (const auto& r : world.web.records) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(cfg.dim_image);
    int n = 0;
    for (const auto& d : world.dataset.records)
      if (d.label == r.label) {
        mu += d.image_vec;
        ++n;
      }
    mu /= n;
    double s = 0;
    for (const auto& d : world.dataset.records)
      if (d.label == r.label) s += (d.image_vec - mu).norm();
    s /= n;
    FilterDecision dec;
    dec.id = r.id;
    dec.kept = (r.image_vec - mu).norm() <= opts.tau_sigma * s;
    oracle.decisions.push_back(dec);
  }
  const auto got = score(report, world.web);
  const auto want = score(oracle, world.web);
  CHECK(got.recall >= 0.99);
  CHECK(got.false_removal <= 0.05);
  CHECK(want.recall >= 0.99);
  CHECK(std::abs(got.recall - want.recall) <= 0.01);
  CHECK(std::abs(got.false_removal - want.false_removal) <= 0.05);
}

TEST_CASE("cluster_filter: partition invariant to common rescaling, deterministic across threads") {
  SynthConfig cfg;
  cfg.web_per_class = 80;
  cfg.seed = 99;
  auto world = generate_synthetic(cfg);
  const auto base = cluster_filter(world.web, world.dataset, {.seed = 4});
  const auto threaded = cluster_filter(world.web, world.dataset, {.seed = 4, .threads = 4});
  CHECK(base.kept_ids() == threaded.kept_ids());
  for (auto* c : {&world.web, &world.dataset})
    for (auto& r : c->records) r.image_vec *= 8.0;  // power of two keeps every distance ratio exact
  const auto scaled = cluster_filter(world.web, world.dataset, {.seed = 4});
  CHECK(base.kept_ids() == scaled.kept_ids());
  CHECK(base.removed_ids() == scaled.removed_ids());
}

TEST_CASE("train_classifier: separable data reaches training accuracy 1") {
  const Corpus c = separable_two_class(40, 3);
  const auto clf = train_classifier(c, {.learning_rate = 0.5, .epochs = 200, .seed = 1});
  int correct = 0;
  for (const auto& r : c.records) correct += clf.labels[static_cast<std::size_t>(clf.predict(r.image_vec))] == r.label;
  CHECK(correct == static_cast<int>(c.size()));
  for (const auto& r : c.records) CHECK(clf.probabilities(r.image_vec).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cross-entropy gradient matches central finite differences") {
  Rng rng(8);
  SoftmaxClassifier clf;
  clf.labels = {"a", "b", "c"};
  clf.weights = standard_normal(rng, 3, 4);
  clf.bias = standard_normal(rng, 3);
  const Eigen::MatrixXd x = standard_normal(rng, 10, 4);
  std::vector<int> y = {0, 1, 2, 0, 1, 2, 0, 0, 1, 2};
  const auto g = cross_entropy_gradient(clf, x, y);
  const double h = 1e-5;
  double worst = 0.0;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); };
  for (Eigen::Index i = 0; i < clf.weights.size(); ++i) {
    SoftmaxClassifier p = clf, m = clf;
    p.weights.data()[i] += h;
    m.weights.data()[i] -= h;
    const double fd = (cross_entropy_gradient(p, x, y).loss - cross_entropy_gradient(m, x, y).loss) / (2 * h);
    worst = std::max(worst, rel(fd, g.grad_weights.data()[i]));
  }
  for (Eigen::Index i = 0; i < clf.bias.size(); ++i) {
    SoftmaxClassifier p = clf, m = clf;
    p.bias[i] += h;
    m.bias[i] -= h;
    const double fd = (cross_entropy_gradient(p, x, y).loss - cross_entropy_gradient(m, x, y).loss) / (2 * h);
    worst = std::max(worst, rel(fd, g.grad_bias[i]));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("train_classifier: record order does not change the weights") {
  Corpus c = separable_two_class(15, 4);
  const auto a = train_classifier(c, {.epochs = 50, .seed = 2});
  std::reverse(c.records.begin(), c.records.end());
  std::rotate(c.records.begin(), c.records.begin() + 7, c.records.end());
  const auto b = train_classifier(c, {.epochs = 50, .seed = 2});
  CHECK(a.weights == b.weights);
  CHECK(a.bias == b.bias);
}

TEST_CASE("train_classifier: single-class corpus is rejected") {
  Corpus c{1, 1, false, {rec("a", "x", Split::dataset, Eigen::VectorXd::Ones(1)),
                         rec("b", "x", Split::dataset, Eigen::VectorXd::Zero(1))}};
  CHECK_THROWS_AS(train_classifier(c, {}), InputError);
}

TEST_CASE("classifier_filter: keeps matches, removes label swaps, rejects unknown labels") {
  const Corpus ds = separable_two_class(30, 5);
  const auto clf = train_classifier(ds, {.epochs = 200, .seed = 0});
  Corpus web{2, 1, false, {}};
  web.records = {rec("w0", "A", Split::web, Eigen::Vector2d(3.1, 0.2)),
                 rec("w1", "A", Split::web, Eigen::Vector2d(-3.0, 0.1))};
  const auto report = classifier_filter(web, clf);
  CHECK(report.kept_ids() == std::vector<std::string>{"w0"});
  CHECK(report.removed_ids() == std::vector<std::string>{"w1"});
  CHECK(report.decisions[1].predicted_label == "B");
  web.records.push_back(rec("w2", "C", Split::web, Eigen::Vector2d(0, 0)));
  CHECK_THROWS_AS(classifier_filter(web, clf), InputError);
}

TEST_CASE("classifier_filter decisions are invariant to a constant logit shift") {
  const Corpus ds = separable_two_class(30, 6);
  auto clf = train_classifier(ds, {.epochs = 100, .seed = 0});
  SynthConfig cfg;
  cfg.n_classes = 2;
  cfg.dim_image = 2;
  Corpus web{2, 1, false, {}};
  Rng rng(3);
  for (int i = 0; i < 50; ++i)
    web.records.push_back(rec("w" + std::to_string(i), i % 2 ? "A" : "B", Split::web, 4.0 * standard_normal(rng, 2)));
  const auto before = classifier_filter(web, clf);
  clf.bias.array() += 123.0;
  const auto after = classifier_filter(web, clf);
  CHECK(before.kept_ids() == after.kept_ids());
}

TEST_CASE("classifier_filter recall on synthetic similar outliers") {
  SynthConfig cfg;
  cfg.n_classes = 5;
  cfg.dataset_per_class = 40;
  cfg.web_per_class = 100;
  cfg.outlier_fraction = 0.0;
  cfg.similar_fraction = 0.2;
  cfg.seed = 77;
  const auto world = generate_synthetic(cfg);
  const auto clf = train_classifier(world.dataset, {.learning_rate = 0.1, .epochs = 300, .seed = 1});
  const auto report = classifier_filter(world.web, clf, 3);
  check_partition(report, world.web);
  const auto rates = score(report, world.web);
  CHECK(rates.recall >= 0.95);
  CHECK(rates.false_removal <= 0.05);
}
