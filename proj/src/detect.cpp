#include "extradiff/detect.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "extradiff/error.hpp"
#include "extradiff/parallel.hpp"
#include "extradiff/random.hpp"

namespace extradiff {

// ---------------------------------------------------------------------------
// K-means

Eigen::MatrixXd kmeans_plus_plus_init(const Eigen::MatrixXd& points, int k, std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  if (n == 0) throw ConfigError("kmeans: empty input");
  if (k < 1) throw ConfigError("kmeans: K must be >= 1");
  if (k > n) throw ConfigError("kmeans: K=" + std::to_string(k) + " exceeds point count " + std::to_string(n));

  Rng rng(seed);
  Eigen::MatrixXd centroids(k, points.cols());
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  Eigen::Index pick = first(rng);
  centroids.row(0) = points.row(pick);
  chosen[static_cast<std::size_t>(pick)] = true;

  Eigen::VectorXd nearest = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = nearest.sum();
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      pick = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (nearest[i] <= 0.0) continue;
        acc += nearest[i];
        pick = i;
        if (acc > target) break;
      }
    } else {
      // Every remaining point coincides with a centroid: take the first unused one.
      pick = 0;
      while (chosen[static_cast<std::size_t>(pick)]) ++pick;
    }
    centroids.row(c) = points.row(pick);
    chosen[static_cast<std::size_t>(pick)] = true;
    nearest = nearest.cwiseMin((points.rowwise() - centroids.row(c)).rowwise().squaredNorm());
  }
  return centroids;
}

namespace {

/// Assigns each point to its nearest centroid; returns the objective.
double assign_points(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids,
                     std::vector<int>& assignments) {
  double objective = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    assignments[static_cast<std::size_t>(i)] = best;
    objective += best_d;
  }
  return objective;
}

void update_centroids(const Eigen::MatrixXd& points, const std::vector<int>& assignments,
                      Eigen::MatrixXd& centroids) {
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(centroids.rows(), centroids.cols());
  std::vector<int> counts(static_cast<std::size_t>(centroids.rows()), 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int c = assignments[static_cast<std::size_t>(i)];
    sums.row(c) += points.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (Eigen::Index c = 0; c < centroids.rows(); ++c)
    if (counts[static_cast<std::size_t>(c)] > 0)
      centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
}

}  // namespace

KMeansModel kmeans_fit(const Eigen::MatrixXd& points, int k, std::uint64_t seed, KMeansOptions options) {
  KMeansModel model;
  model.k = k;
  model.initial_centroids = kmeans_plus_plus_init(points, k, seed);
  model.centroids = model.initial_centroids;
  model.assignments.assign(static_cast<std::size_t>(points.rows()), -1);

  std::vector<int> next(model.assignments.size());
  model.objective = assign_points(points, model.centroids, model.assignments);
  model.objective_trace.push_back(model.objective);
  for (int it = 0; it < options.max_iterations; ++it) {
    update_centroids(points, model.assignments, model.centroids);
    model.objective = assign_points(points, model.centroids, next);
    model.objective_trace.push_back(model.objective);
    ++model.iterations;
    if (next == model.assignments) {
      model.converged = true;
      break;
    }
    model.assignments.swap(next);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Softmax classifier

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

int SoftmaxClassifier::index_of(const std::string& label) const {
  auto it = std::find(labels.begin(), labels.end(), label);
  return it == labels.end() ? -1 : static_cast<int>(it - labels.begin());
}

Eigen::VectorXd SoftmaxClassifier::logits(const Eigen::VectorXd& x) const {
  if (x.size() != weights.cols())
    throw InputError("classifier input has length " + std::to_string(x.size()) + ", expected " +
                     std::to_string(weights.cols()));
  return weights * x + bias;
}

Eigen::VectorXd SoftmaxClassifier::probabilities(const Eigen::VectorXd& x) const {
  return softmax(logits(x));
}

int SoftmaxClassifier::predict(const Eigen::VectorXd& x) const {
  Eigen::Index best = 0;
  logits(x).maxCoeff(&best);
  return static_cast<int>(best);
}

LossAndGradient cross_entropy_gradient(const SoftmaxClassifier& clf, const Eigen::MatrixXd& features,
                                       const std::vector<int>& targets) {
  const Eigen::Index n = features.rows();
  LossAndGradient out;
  out.grad_weights = Eigen::MatrixXd::Zero(clf.weights.rows(), clf.weights.cols());
  out.grad_bias = Eigen::VectorXd::Zero(clf.bias.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd x = features.row(i).transpose();
    const Eigen::VectorXd z = clf.logits(x);
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    const int y = targets[static_cast<std::size_t>(i)];
    out.loss += lse - z[y];
    Eigen::VectorXd delta = (z.array() - lse).exp().matrix();
    delta[y] -= 1.0;
    out.grad_weights += delta * x.transpose();
    out.grad_bias += delta;
  }
  const double inv = 1.0 / static_cast<double>(n);
  out.loss *= inv;
  out.grad_weights *= inv;
  out.grad_bias *= inv;
  return out;
}

SoftmaxClassifier train_classifier(const Corpus& dataset, const ClassifierTraining& options) {
  std::vector<const EmbeddingRecord*> rows;
  for (const auto& r : dataset.records) rows.push_back(&r);
  if (rows.empty()) throw InputError("train_classifier: empty corpus");
  std::sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->id < b->id; });

  SoftmaxClassifier clf;
  clf.labels = dataset.labels();
  std::sort(clf.labels.begin(), clf.labels.end());
  if (clf.labels.size() < 2) throw InputError("train_classifier: need at least two distinct labels");

  Eigen::MatrixXd features(static_cast<Eigen::Index>(rows.size()), dataset.dim_image);
  std::vector<int> targets;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    features.row(static_cast<Eigen::Index>(i)) = rows[i]->image_vec.transpose();
    targets.push_back(clf.index_of(rows[i]->label));
  }

  Rng rng(options.seed);
  clf.weights = standard_normal(rng, clf.n_classes(), dataset.dim_image) * options.init_scale;
  clf.bias = Eigen::VectorXd::Zero(clf.n_classes());
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto g = cross_entropy_gradient(clf, features, targets);
    clf.weights -= options.learning_rate * g.grad_weights;
    clf.bias -= options.learning_rate * g.grad_bias;
  }
  return clf;
}

// ---------------------------------------------------------------------------
// Filters

std::vector<std::string> FilterReport::kept_ids() const {
  std::vector<std::string> out;
  for (const auto& d : decisions)
    if (d.kept) out.push_back(d.id);
  return out;
}

std::vector<std::string> FilterReport::removed_ids() const {
  std::vector<std::string> out;
  for (const auto& d : decisions)
    if (!d.kept) out.push_back(d.id);
  return out;
}

Corpus FilterReport::apply(const Corpus& web) const {
  std::unordered_set<std::string> removed;
  for (const auto& d : decisions)
    if (!d.kept) removed.insert(d.id);
  Corpus out{web.dim_image, web.dim_text, web.normalized, {}};
  for (const auto& r : web.records)
    if (!removed.contains(r.id)) out.records.push_back(r);
  return out;
}

namespace {

std::map<std::string, std::vector<const EmbeddingRecord*>> group_by_label(const Corpus& corpus) {
  std::map<std::string, std::vector<const EmbeddingRecord*>> groups;
  for (const auto& r : corpus.records) groups[r.label].push_back(&r);
  return groups;
}

void sort_decisions(std::vector<FilterDecision>& decisions) {
  std::sort(decisions.begin(), decisions.end(),
            [](const FilterDecision& a, const FilterDecision& b) { return a.id < b.id; });
}

}  // namespace

FilterReport cluster_filter(const Corpus& web, const Corpus& dataset, const ClusterFilterOptions& options) {
  if (options.k < 1) throw ConfigError("cluster_filter: K must be >= 1");
  if (!(options.tau_sigma > 0.0)) throw ConfigError("cluster_filter: tau_sigma must be > 0");
  if (web.dim_image != dataset.dim_image)
    throw InputError("cluster_filter: web and dataset image dimensions differ");

  const auto web_groups = group_by_label(web);
  const auto ds_groups = group_by_label(dataset);
  std::vector<std::string> keywords;
  for (const auto& [kw, _] : web_groups) keywords.push_back(kw);

  std::vector<std::vector<FilterDecision>> per_group(keywords.size());
  std::vector<std::string> group_warning(keywords.size());
  parallel_for(keywords.size(), options.threads, [&](std::size_t g) {
    const std::string& kw = keywords[g];
    const auto& members = web_groups.at(kw);
    auto& out = per_group[g];
    auto ds_it = ds_groups.find(kw);
    if (ds_it == ds_groups.end()) {
      group_warning[g] = "keyword '" + kw + "' has no dataset records; group left unfiltered";
      for (const auto* r : members) {
        FilterDecision d;
        d.id = r->id;
        d.label = r->label;
        d.unfiltered = true;
        out.push_back(std::move(d));
      }
      return;
    }

    Eigen::VectorXd center = Eigen::VectorXd::Zero(dataset.dim_image);
    for (const auto* r : ds_it->second) center += r->image_vec;
    center /= static_cast<double>(ds_it->second.size());
    double spread = 0.0;
    for (const auto* r : ds_it->second) spread += (r->image_vec - center).norm();
    spread /= static_cast<double>(ds_it->second.size());
    const double threshold = options.tau_sigma * spread;

    Eigen::MatrixXd points(static_cast<Eigen::Index>(members.size()), web.dim_image);
    for (std::size_t i = 0; i < members.size(); ++i)
      points.row(static_cast<Eigen::Index>(i)) = members[i]->image_vec.transpose();
    const int k = std::min<int>(options.k, static_cast<int>(members.size()));
    const auto model = kmeans_fit(points, k, derive_seed(options.seed, kw));

    std::vector<double> cluster_distance(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c)
      cluster_distance[static_cast<std::size_t>(c)] = (model.centroids.row(c).transpose() - center).norm();
    for (std::size_t i = 0; i < members.size(); ++i) {
      const int c = model.assignments[i];
      FilterDecision d;
      d.id = members[i]->id;
      d.label = members[i]->label;
      d.cluster = c;
      d.statistic = cluster_distance[static_cast<std::size_t>(c)];
      d.threshold = threshold;
      d.kept = d.statistic <= threshold;
      out.push_back(std::move(d));
    }
  });

  FilterReport report;
  report.detector = "cluster";
  for (std::size_t g = 0; g < keywords.size(); ++g) {
    for (auto& d : per_group[g]) report.decisions.push_back(std::move(d));
    if (!group_warning[g].empty()) report.warnings.push_back(group_warning[g]);
  }
  sort_decisions(report.decisions);
  return report;
}

FilterReport classifier_filter(const Corpus& web, const SoftmaxClassifier& clf, unsigned threads) {
  for (const auto& r : web.records)
    if (clf.index_of(r.label) < 0)
      throw InputError("classifier_filter: record '" + r.id + "' has unknown label '" + r.label + "'");

  FilterReport report;
  report.detector = "classifier";
  report.decisions.resize(web.records.size());
  parallel_for(web.records.size(), threads, [&](std::size_t i) {
    const auto& r = web.records[i];
    const Eigen::VectorXd p = clf.probabilities(r.image_vec);
    Eigen::Index best = 0;
    p.maxCoeff(&best);
    FilterDecision d;
    d.id = r.id;
    d.label = r.label;
    d.predicted_label = clf.labels[static_cast<std::size_t>(best)];
    d.statistic = p[best];
    d.kept = d.predicted_label == r.label;
    report.decisions[i] = std::move(d);
  });
  sort_decisions(report.decisions);
  return report;
}

std::string serialize_filter_report(const FilterReport& report) {
  using json = nlohmann::ordered_json;
  std::string out;
  for (const auto& w : report.warnings) {
    json j;
    j["detector"] = report.detector;
    j["warning"] = w;
    out += j.dump() + "\n";
  }
  for (const auto& d : report.decisions) {
    json j;
    j["detector"] = report.detector;
    j["id"] = d.id;
    j["label"] = d.label;
    j["kept"] = d.kept;
    if (report.detector == "cluster") {
      if (d.unfiltered) {
        j["unfiltered"] = true;
      } else {
        j["cluster"] = d.cluster;
        j["distance"] = d.statistic;
        j["threshold"] = d.threshold;
      }
    } else {
      j["predicted"] = d.predicted_label;
      j["probability"] = d.statistic;
    }
    out += j.dump() + "\n";
  }
  return out;
}

void save_filter_report(const FilterReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write filter report: " + path.string());
  out << serialize_filter_report(report);
}

}  // namespace extradiff
