#include "encodenet/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "encodenet/model_spec.hpp"

namespace encodenet {

namespace fs = std::filesystem;

FeatureMatrix::FeatureMatrix(std::size_t n, std::size_t d, std::vector<float> v, std::string src)
    : rows(n), cols(d), values(std::move(v)), source(std::move(src)) {
  if (d == 0) throw ValidationError("feature dimension must be >= 1");
  if (values.size() != n * d) throw ShapeError("feature buffer does not hold " + std::to_string(n) + "x" + std::to_string(d));
  for (const float x : values) {
    if (!std::isfinite(x)) throw NumericError("non-finite feature value");
  }
}

FeatureMatrix FeatureMatrix::select(std::span<const std::size_t> indices) const {
  std::vector<float> out;
  out.reserve(indices.size() * cols);
  for (const auto i : indices) {
    const auto r = row(i);
    out.insert(out.end(), r.begin(), r.end());
  }
  FeatureMatrix m;
  m.rows = indices.size();
  m.cols = cols;
  m.values = std::move(out);
  m.source = source;
  return m;
}

FeatureMatrix embed_features(Network& model, const Tensor& images) {
  if (!model.trained()) throw StateError("feature embedding needs a trained model; '" + model.spec().name + "' is untrained");
  const auto split = split_model(model.spec());
  const Tensor maps = model.infer(images, 0, split.split_index);
  const std::size_t n = maps.dim(0), c = maps.dim(1), hw = maps.dim(2) * maps.dim(3);
  std::vector<float> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = maps.data().data() + (i * c + ch) * hw;
      double s = 0.0;
      for (std::size_t j = 0; j < hw; ++j) s += p[j];
      out[i * c + ch] = static_cast<float>(s / static_cast<double>(hw));
    }
  }
  return FeatureMatrix(n, c, std::move(out),
                       model.spec().name + " layers [0," + std::to_string(split.split_index) + ") + global average pool");
}

double squared_distance(std::span<const float> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

int nearest_centroid(const ClusterModel& model, std::span<const float> point) {
  int best = 0;
  double best_d = squared_distance(point, model.centroid(0));
  for (int c = 1; c < model.k; ++c) {
    const double d = squared_distance(point, model.centroid(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<std::size_t> kmeans_plus_plus(const FeatureMatrix& f, int k, std::uint64_t seed) {
  if (k < 1 || static_cast<std::size_t>(k) > f.rows) {
    throw ValidationError("k-means needs 1 <= k <= N, got k=" + std::to_string(k) + " with N=" + std::to_string(f.rows));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::size_t> chosen;
  chosen.push_back(static_cast<std::size_t>(unit(rng) * static_cast<double>(f.rows)) % f.rows);
  std::vector<double> d2(f.rows, std::numeric_limits<double>::infinity());
  std::vector<double> c(f.cols);
  while (chosen.size() < static_cast<std::size_t>(k)) {
    const auto last = f.row(chosen.back());
    std::copy(last.begin(), last.end(), c.begin());
    double total = 0.0;
    for (std::size_t i = 0; i < f.rows; ++i) {
      d2[i] = std::min(d2[i], squared_distance(f.row(i), c));
      total += d2[i];
    }
    std::size_t pick = f.rows;
    if (total > 0.0) {
      // Inverse-CDF draw proportional to squared distance.
      const double target = unit(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < f.rows; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (pick == f.rows) {
        for (std::size_t i = f.rows; i-- > 0;) {
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // Every point coincides with a centre; take the first unused index.
      for (std::size_t i = 0; i < f.rows; ++i) {
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) {
          pick = i;
          break;
        }
      }
    }
    chosen.push_back(pick);
  }
  return chosen;
}

ClusterModel kmeans(const FeatureMatrix& f, int k, std::uint64_t seed, std::size_t max_iters) {
  const auto init = kmeans_plus_plus(f, k, seed);
  std::vector<double> centroids;
  centroids.reserve(init.size() * f.cols);
  for (const auto i : init) {
    const auto r = f.row(i);
    centroids.insert(centroids.end(), r.begin(), r.end());
  }
  auto model = kmeans_from_centroids(f, std::move(centroids), k, max_iters);
  model.seed = seed;
  return model;
}

ClusterModel kmeans_from_centroids(const FeatureMatrix& f, std::vector<double> initial, int k, std::size_t max_iters) {
  if (k < 1 || static_cast<std::size_t>(k) > f.rows) {
    throw ValidationError("k-means needs 1 <= k <= N, got k=" + std::to_string(k) + " with N=" + std::to_string(f.rows));
  }
  if (initial.size() != static_cast<std::size_t>(k) * f.cols) throw ShapeError("initial centroids must be k x D");
  if (max_iters < 1) throw ValidationError("k-means needs max_iters >= 1");

  ClusterModel m;
  m.k = k;
  m.dims = f.cols;
  m.centroids = std::move(initial);
  m.assignments.assign(f.rows, -1);
  const std::size_t d = f.cols;
  std::vector<double> dist(f.rows);

  for (std::size_t it = 0; it < max_iters; ++it) {
    bool changed = false;
    double sse = 0.0;
    for (std::size_t i = 0; i < f.rows; ++i) {
      const int c = nearest_centroid(m, f.row(i));
      dist[i] = squared_distance(f.row(i), m.centroid(c));
      sse += dist[i];
      if (c != m.assignments[i]) {
        m.assignments[i] = c;
        changed = true;
      }
    }
    m.sse_trace.push_back(sse);
    m.iterations = it + 1;
    if (!changed) {
      m.converged = true;
      break;
    }

    std::vector<double> sums(static_cast<std::size_t>(k) * d, 0.0);
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < f.rows; ++i) {
      const auto c = static_cast<std::size_t>(m.assignments[i]);
      ++counts[c];
      const auto r = f.row(i);
      for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += r[j];
    }
    std::vector<bool> taken(f.rows, false);
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] > 0) {
        for (std::size_t j = 0; j < d; ++j) m.centroids[c * d + j] = sums[c * d + j] / static_cast<double>(counts[c]);
        continue;
      }
      // Empty cluster: jump to the worst-served point not already used.
      std::size_t far = f.rows;
      for (std::size_t i = 0; i < f.rows; ++i) {
        if (!taken[i] && (far == f.rows || dist[i] > dist[far])) far = i;
      }
      taken[far] = true;
      const auto r = f.row(far);
      for (std::size_t j = 0; j < d; ++j) m.centroids[c * d + j] = r[j];
    }
  }
  return m;
}

ElbowResult elbow_from_curve(std::span<const int> ks, std::span<const double> sse) {
  if (ks.size() != sse.size()) throw ValidationError("elbow: k and SSE lists differ in length");
  if (ks.size() < 3) throw ValidationError("elbow: needs at least 3 values of k");
  for (std::size_t i = 1; i < ks.size(); ++i) {
    if (ks[i] <= ks[i - 1]) throw ValidationError("elbow: k values must be strictly increasing");
  }
  ElbowResult r;
  r.ks.assign(ks.begin(), ks.end());
  r.sse.assign(sse.begin(), sse.end());
  r.chord_distance.assign(ks.size(), 0.0);

  // Both axes scaled to [0, 1]; the chord-distance argmax does not depend on
  // per-axis scale, and the unit square gives a scale-free degeneracy test.
  const auto [lo, hi] = std::minmax_element(sse.begin(), sse.end());
  const double span_y = *hi - *lo;
  const double span_x = static_cast<double>(ks.back() - ks.front());
  r.k = ks.front();
  if (!(span_y > 0.0)) {
    r.degenerate = true;
    return r;
  }
  auto px = [&](std::size_t i) { return static_cast<double>(ks[i] - ks.front()) / span_x; };
  auto py = [&](std::size_t i) { return (sse[i] - *lo) / span_y; };
  const double x0 = px(0), y0 = py(0), x1 = px(ks.size() - 1), y1 = py(ks.size() - 1);
  const double len = std::hypot(x1 - x0, y1 - y0);
  double best = 0.0;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const double cross = (x1 - x0) * (py(i) - y0) - (y1 - y0) * (px(i) - x0);
    r.chord_distance[i] = std::abs(cross) / len;
    if (r.chord_distance[i] > best) {
      best = r.chord_distance[i];
      r.k = ks[i];
    }
  }
  if (best < 1e-9) {
    r.degenerate = true;
    r.k = ks.front();
  }
  return r;
}

ElbowResult elbow_select(const FeatureMatrix& features, std::span<const int> k_range, std::uint64_t seed) {
  std::vector<double> sse;
  for (const int k : k_range) sse.push_back(kmeans(features, k, seed).sse());
  return elbow_from_curve(k_range, sse);
}

std::size_t DatasetClusters::cell_count() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += static_cast<std::size_t>(c.model.k);
  return n;
}

namespace {

std::uint64_t class_seed(std::uint64_t seed, int label) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(label)};
  std::mt19937_64 g(seq);
  return g();
}

// Drops clusters left empty at termination (possible only with duplicate
// points) so every cell of the result has members.
void compact_clusters(ClusterModel& m) {
  std::vector<int> remap(static_cast<std::size_t>(m.k), -1);
  for (const int a : m.assignments) remap[static_cast<std::size_t>(a)] = 0;
  int next = 0;
  std::vector<double> kept;
  for (int c = 0; c < m.k; ++c) {
    if (remap[static_cast<std::size_t>(c)] < 0) continue;
    remap[static_cast<std::size_t>(c)] = next++;
    const auto row = m.centroid(c);
    kept.insert(kept.end(), row.begin(), row.end());
  }
  if (next == m.k) return;
  for (int& a : m.assignments) a = remap[static_cast<std::size_t>(a)];
  m.centroids = std::move(kept);
  m.k = next;
}

}  // namespace

DatasetClusters cluster_all_classes(const FeatureMatrix& features, std::span<const int> labels, int num_classes,
                                    const KSelection& selection, std::uint64_t seed) {
  if (labels.size() != features.rows) throw ValidationError("one label per feature row is required");
  if (selection.mode == KMode::fixed && selection.k < 1) throw ConfigError("cluster count k must be >= 1");
  DatasetClusters out;
  out.source = features.source;
  out.cluster_of.assign(labels.size(), -1);
  for (int label = 0; label < num_classes; ++label) {
    ClassClusters cc;
    cc.label = label;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == label) cc.members.push_back(i);
    }
    if (cc.members.empty()) throw ValidationError("class " + std::to_string(label) + " has no images to cluster");
    const FeatureMatrix sub = features.select(cc.members);
    const auto population = static_cast<int>(cc.members.size());
    const std::uint64_t s = class_seed(seed, label);
    int k = selection.k;
    if (selection.mode == KMode::elbow) {
      std::vector<int> range;
      for (const int kk : selection.k_range) {
        if (kk <= population) range.push_back(kk);
      }
      if (range.size() >= 3) {
        cc.elbow = elbow_select(sub, range, s);
        k = cc.elbow->k;
      }
      cc.fallback = range.size() < selection.k_range.size();
    }
    if (k > population) {
      k = population;
      cc.fallback = true;
    }
    cc.model = kmeans(sub, k, s);
    compact_clusters(cc.model);
    for (std::size_t j = 0; j < cc.members.size(); ++j) out.cluster_of[cc.members[j]] = cc.model.assignments[j];
    out.classes.push_back(std::move(cc));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw ValidationError("label outside [0, num_classes)");
  }
  return out;
}

DatasetClusters cluster_all_classes(Network& model, const LabeledImageSet& data, const KSelection& selection,
                                    std::uint64_t seed) {
  const FeatureMatrix f = embed_features(model, data.images);
  return cluster_all_classes(f, data.labels, data.num_classes, selection, seed);
}

void write_assignments_csv(const fs::path& path, const DatasetClusters& clusters, std::span<const int> labels) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "image_index,class,cluster\n";
  for (std::size_t i = 0; i < clusters.cluster_of.size(); ++i) {
    out << i << ',' << labels[i] << ',' << clusters.cluster_of[i] << '\n';
  }
}

void write_elbow_csv(const fs::path& path, const ElbowResult& elbow) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "k,sse\n";
  out.precision(17);
  for (std::size_t i = 0; i < elbow.ks.size(); ++i) out << elbow.ks[i] << ',' << elbow.sse[i] << '\n';
}

ElbowResult read_elbow_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing elbow CSV '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != "k,sse") throw FormatError("'" + path.string() + "' lacks the k,sse header");
  std::vector<int> ks;
  std::vector<double> sse;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("no comma");
      ks.push_back(std::stoi(line.substr(0, comma)));
      sse.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw ParseError(lineno, "malformed elbow row '" + line + "' in '" + path.string() + "'");
    }
  }
  return elbow_from_curve(ks, sse);
}

}  // namespace encodenet
