#include "extradiff/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "extradiff/error.hpp"
#include "extradiff/random.hpp"

namespace extradiff {

using json = nlohmann::ordered_json;

std::string to_string(Split split) { return split == Split::dataset ? "dataset" : "web"; }

Split split_from_string(const std::string& text) {
  if (text == "dataset") return Split::dataset;
  if (text == "web") return Split::web;
  throw InputError("unknown split '" + text + "'");
}

Eigen::VectorXd EmbeddingRecord::canonical_text() const {
  if (text_vecs.empty()) throw InputError("record '" + id + "' has no text features");
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(text_vecs.front().size());
  for (const auto& t : text_vecs) mean += t;
  return mean / static_cast<double>(text_vecs.size());
}

bool operator==(const EmbeddingRecord& a, const EmbeddingRecord& b) {
  if (a.id != b.id || a.label != b.label || a.split != b.split) return false;
  if (a.outlier_truth != b.outlier_truth || a.extrapolated != b.extrapolated ||
      a.generated != b.generated)
    return false;
  if (a.image_vec.size() != b.image_vec.size() || a.image_vec != b.image_vec) return false;
  if (a.text_vecs.size() != b.text_vecs.size()) return false;
  for (std::size_t i = 0; i < a.text_vecs.size(); ++i) {
    if (a.text_vecs[i].size() != b.text_vecs[i].size() || a.text_vecs[i] != b.text_vecs[i])
      return false;
  }
  return true;
}

bool operator==(const Corpus& a, const Corpus& b) {
  return a.dim_image == b.dim_image && a.dim_text == b.dim_text && a.normalized == b.normalized &&
         a.records == b.records;
}

void Corpus::validate() const {
  if (dim_image <= 0 || dim_text <= 0)
    throw InputError("corpus dimensions must be positive");
  std::unordered_set<std::string> seen;
  seen.reserve(records.size());
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) throw InputError("duplicate id '" + r.id + "'");
    if (r.image_vec.size() != dim_image) {
      throw InputError("record '" + r.id + "': image_vec has length " +
                       std::to_string(r.image_vec.size()) + ", expected " +
                       std::to_string(dim_image));
    }
    for (const auto& t : r.text_vecs) {
      if (t.size() != dim_text) {
        throw InputError("record '" + r.id + "': text_vec has length " +
                         std::to_string(t.size()) + ", expected " + std::to_string(dim_text));
      }
    }
    if (r.split == Split::dataset && r.text_vecs.empty())
      throw InputError("record '" + r.id + "': dataset records need at least one text_vec");
  }
}

Corpus Corpus::filter_split(Split split) const {
  Corpus out{dim_image, dim_text, normalized, {}};
  for (const auto& r : records)
    if (r.split == split) out.records.push_back(r);
  return out;
}

std::vector<std::string> Corpus::labels() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& r : records)
    if (seen.insert(r.label).second) out.push_back(r.label);
  return out;
}

void normalize_in_place(Corpus& corpus) {
  auto unit = [](Eigen::VectorXd& v) {
    const double n = v.norm();
    if (n > 0.0) v /= n;
  };
  for (auto& r : corpus.records) {
    unit(r.image_vec);
    for (auto& t : r.text_vecs) unit(t);
  }
  corpus.normalized = true;
}

namespace {

Eigen::VectorXd vector_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw InputError(what + " is not an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw InputError(what + " contains a non-number");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

json vector_to_json(const Eigen::VectorXd& v, const std::string& id) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw InputError("record '" + id + "' has a non-finite value");
    arr.push_back(v[i]);
  }
  return arr;
}

EmbeddingRecord record_from_json(const json& j) {
  if (!j.is_object()) throw InputError("record is not an object");
  EmbeddingRecord r;
  if (!j.contains("id") || !j["id"].is_string()) throw InputError("record without string id");
  r.id = j["id"].get<std::string>();
  auto fail = [&](const std::string& msg) { throw InputError("record '" + r.id + "': " + msg); };
  if (!j.contains("label") || !j["label"].is_string()) fail("missing label");
  r.label = j["label"].get<std::string>();
  if (!j.contains("split") || !j["split"].is_string()) fail("missing split");
  try {
    r.split = split_from_string(j["split"].get<std::string>());
  } catch (const InputError& e) {
    fail(e.what());
  }
  if (!j.contains("image_vec")) fail("missing image_vec");
  r.image_vec = vector_from_json(j["image_vec"], "record '" + r.id + "' image_vec");
  if (j.contains("text_vecs")) {
    const auto& tv = j["text_vecs"];
    if (!tv.is_array()) fail("text_vecs is not an array");
    for (const auto& t : tv) r.text_vecs.push_back(vector_from_json(t, "record '" + r.id + "' text_vec"));
  }
  if (j.contains("outlier_truth")) {
    if (!j["outlier_truth"].is_boolean()) fail("outlier_truth is not a boolean");
    r.outlier_truth = j["outlier_truth"].get<bool>();
  }
  if (j.contains("extrapolated")) r.extrapolated = j["extrapolated"].get<bool>();
  if (j.contains("generated")) r.generated = j["generated"].get<bool>();
  return r;
}

json record_to_json(const EmbeddingRecord& r) {
  json j;
  j["id"] = r.id;
  j["label"] = r.label;
  j["split"] = to_string(r.split);
  j["image_vec"] = vector_to_json(r.image_vec, r.id);
  json texts = json::array();
  for (const auto& t : r.text_vecs) texts.push_back(vector_to_json(t, r.id));
  j["text_vecs"] = std::move(texts);
  if (r.outlier_truth) j["outlier_truth"] = *r.outlier_truth;
  if (r.extrapolated) j["extrapolated"] = true;
  if (r.generated) j["generated"] = true;
  return j;
}

}  // namespace

Corpus parse_corpus(const std::string& text, LoadOptions options) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_schema = false;
  Corpus corpus;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw InputError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!have_schema) {
      if (!j.is_object() || !j.contains("schema_version") || !j.contains("dim_image") ||
          !j.contains("dim_text"))
        throw InputError("line 1 is not a schema record");
      if (j["schema_version"].get<int>() != Corpus::kSchemaVersion)
        throw InputError("unsupported schema_version " + j["schema_version"].dump());
      corpus.dim_image = j["dim_image"].get<int>();
      corpus.dim_text = j["dim_text"].get<int>();
      corpus.normalized = j.value("normalized", false);
      if (corpus.dim_image <= 0 || corpus.dim_text <= 0)
        throw InputError("schema dimensions must be positive");
      have_schema = true;
      continue;
    }
    try {
      corpus.records.push_back(record_from_json(j));
    } catch (const InputError& e) {
      throw InputError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const json::exception& e) {
      throw InputError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_schema) throw InputError("schema line absent");
  corpus.validate();
  if (options.normalize && !corpus.normalized) normalize_in_place(corpus);
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, LoadOptions options) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_corpus(buf.str(), options);
}

std::string serialize_corpus(const Corpus& corpus) {
  corpus.validate();
  json schema;
  schema["schema_version"] = Corpus::kSchemaVersion;
  schema["dim_image"] = corpus.dim_image;
  schema["dim_text"] = corpus.dim_text;
  schema["normalized"] = corpus.normalized;
  std::string out = schema.dump();
  out.push_back('\n');
  for (const auto& r : corpus.records) {
    out += record_to_json(r).dump();
    out.push_back('\n');
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  const std::string text = serialize_corpus(corpus);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus file: " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void SynthConfig::validate() const {
  if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
  if (dataset_per_class < 1) throw ConfigError("dataset_per_class must be >= 1");
  if (web_per_class < 0) throw ConfigError("web_per_class must be >= 0");
  if (!(outlier_fraction >= 0.0 && outlier_fraction <= 1.0))
    throw ConfigError("outlier_fraction must lie in [0,1]");
  if (!(similar_fraction >= 0.0 && similar_fraction <= 1.0))
    throw ConfigError("similar_fraction must lie in [0,1]");
  if (outlier_fraction + similar_fraction > 1.0)
    throw ConfigError("outlier_fraction + similar_fraction exceeds 1");
  if (similar_fraction > 0.0 && n_classes < 2)
    throw ConfigError("similar outliers need at least two classes");
  if (!(separation > 0.0)) throw ConfigError("separation must be > 0");
  if (!(within_std > 0.0)) throw ConfigError("within_std must be > 0");
  if (dim_image < 1 || dim_text < 1) throw ConfigError("dimensions must be >= 1");
  if (texts_per_record < 1) throw ConfigError("texts_per_record must be >= 1");
  if (text_noise < 0.0) throw ConfigError("text_noise must be >= 0");
}

namespace {

std::string padded(int value, int width) {
  std::string s = std::to_string(value);
  if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
  return s;
}

/// `count` unit directions in R^dim; orthonormal whenever count <= dim.
std::vector<Eigen::VectorXd> unit_directions(int count, int dim, Rng& rng) {
  std::vector<Eigen::VectorXd> dirs;
  if (count <= dim) {
    Eigen::MatrixXd g = standard_normal(rng, dim, count);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(dim, count);
    for (int i = 0; i < count; ++i) dirs.emplace_back(q.col(i));
  } else {
    for (int i = 0; i < count; ++i) {
      Eigen::VectorXd v = standard_normal(rng, dim);
      dirs.push_back(v / v.norm());
    }
  }
  return dirs;
}

}  // namespace

SyntheticWorld generate_synthetic(const SynthConfig& config) {
  config.validate();
  const int D = config.dim_image;
  const int Ds = config.dim_text;
  const double radius = config.within_std * std::sqrt(static_cast<double>(D));
  const double spacing = config.separation * radius;

  Rng geometry_rng(derive_seed(config.seed, "geometry"));
  Rng dataset_rng(derive_seed(config.seed, "dataset"));
  Rng web_rng(derive_seed(config.seed, "web"));
  Rng quota_rng(derive_seed(config.seed, "quota"));

  auto dirs = unit_directions(config.n_classes + 1, D, geometry_rng);
  const Eigen::VectorXd outlier_dir = dirs.back();
  SyntheticWorld world;
  for (int c = 0; c < config.n_classes; ++c)
    world.class_centers.push_back(dirs[static_cast<std::size_t>(c)] * (spacing / std::sqrt(2.0)));

  world.text_map = standard_normal(geometry_rng, Ds, D) / std::sqrt(static_cast<double>(D));
  std::vector<Eigen::VectorXd> text_centers;
  for (int c = 0; c < config.n_classes; ++c)
    text_centers.push_back(standard_normal(geometry_rng, Ds) / std::sqrt(static_cast<double>(Ds)));

  auto keyword = [](int c) { return "class_" + padded(c, 3); };
  auto draw_image = [&](Rng& rng, const Eigen::VectorXd& center) -> Eigen::VectorXd {
    return center + config.within_std * standard_normal(rng, D);
  };

  world.dataset = Corpus{D, Ds, false, {}};
  for (int c = 0; c < config.n_classes; ++c) {
    for (int i = 0; i < config.dataset_per_class; ++i) {
      EmbeddingRecord r;
      r.id = "ds-" + padded(c, 3) + "-" + padded(i, 5);
      r.label = keyword(c);
      r.split = Split::dataset;
      r.image_vec = draw_image(dataset_rng, world.class_centers[static_cast<std::size_t>(c)]);
      for (int k = 0; k < config.texts_per_record; ++k) {
        if (config.joint_map) {
          r.text_vecs.push_back(world.text_map * r.image_vec);
        } else {
          r.text_vecs.push_back(text_centers[static_cast<std::size_t>(c)] +
                                config.text_noise * standard_normal(dataset_rng, Ds));
        }
      }
      world.dataset.records.push_back(std::move(r));
    }
  }

  // Exact quotas: shuffle all web slots once, the first n_irrelevant become
  // irrelevant outliers and the next n_similar become label-swapped ones.
  const int n_web = config.n_classes * config.web_per_class;
  const auto n_irrelevant = static_cast<int>(std::llround(config.outlier_fraction * n_web));
  const auto n_similar = static_cast<int>(std::llround(config.similar_fraction * n_web));
  std::vector<int> slots(static_cast<std::size_t>(n_web));
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), quota_rng);
  enum class Kind { inlier, irrelevant, similar };
  std::vector<Kind> kind(static_cast<std::size_t>(n_web), Kind::inlier);
  for (int i = 0; i < n_irrelevant; ++i) kind[static_cast<std::size_t>(slots[static_cast<std::size_t>(i)])] = Kind::irrelevant;
  for (int i = n_irrelevant; i < std::min(n_web, n_irrelevant + n_similar); ++i)
    kind[static_cast<std::size_t>(slots[static_cast<std::size_t>(i)])] = Kind::similar;

  world.web = Corpus{D, Ds, false, {}};
  for (int j = 0; j < n_web; ++j) {
    const int c = j / config.web_per_class;
    const auto cu = static_cast<std::size_t>(c);
    EmbeddingRecord r;
    r.id = "web-" + padded(c, 3) + "-" + padded(j % config.web_per_class, 5);
    r.label = keyword(c);
    r.split = Split::web;
    switch (kind[static_cast<std::size_t>(j)]) {
      case Kind::inlier:
        r.image_vec = draw_image(web_rng, world.class_centers[cu]);
        r.outlier_truth = false;
        break;
      case Kind::irrelevant:
        r.image_vec = draw_image(web_rng, world.class_centers[cu] + spacing * outlier_dir);
        r.outlier_truth = true;
        break;
      case Kind::similar: {
        std::uniform_int_distribution<int> pick(1, config.n_classes - 1);
        const int other = (c + pick(web_rng)) % config.n_classes;
        r.image_vec = draw_image(web_rng, world.class_centers[static_cast<std::size_t>(other)]);
        r.outlier_truth = true;
        break;
      }
    }
    world.web.records.push_back(std::move(r));
  }
  return world;
}

}  // namespace extradiff
