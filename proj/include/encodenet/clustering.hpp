#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "encodenet/datasets.hpp"
#include "encodenet/network.hpp"

namespace encodenet {

// Row-major N x D embedding.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;
  std::string source;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t n, std::size_t d, std::vector<float> v, std::string src = {});

  std::span<const float> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
  FeatureMatrix select(std::span<const std::size_t> indices) const;
};

// Encoder prefix (up to the first flatten/globalavgpool) in eval mode,
// followed by global average pooling. Throws StateError for an untrained
// network.
FeatureMatrix embed_features(Network& model, const Tensor& images);

struct ClusterModel {
  int k = 0;
  std::size_t dims = 0;
  std::vector<double> centroids;  // k x dims
  std::vector<int> assignments;
  std::vector<double> sse_trace;  // SSE after each assignment step
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  bool converged = false;

  double sse() const { return sse_trace.empty() ? 0.0 : sse_trace.back(); }
  std::span<const double> centroid(int c) const {
    return {centroids.data() + static_cast<std::size_t>(c) * dims, dims};
  }
};

inline constexpr std::size_t kKMeansMaxIterations = 100;

// k-means++ seeding: indices of the chosen initial points.
std::vector<std::size_t> kmeans_plus_plus(const FeatureMatrix& features, int k, std::uint64_t seed);

// Lloyd iterations from k-means++ seeds until the assignment is a fixed
// point or max_iters is reached. Nearest-centroid ties go to the lowest
// centroid index; an empty cluster is moved onto the point farthest from
// its current centroid. Throws ValidationError unless 1 <= k <= N.
ClusterModel kmeans(const FeatureMatrix& features, int k, std::uint64_t seed,
                    std::size_t max_iters = kKMeansMaxIterations);

// Same iterations from explicit initial centroids (k x D, row-major).
ClusterModel kmeans_from_centroids(const FeatureMatrix& features, std::vector<double> initial, int k,
                                   std::size_t max_iters = kKMeansMaxIterations);

// Index of the nearest centroid, lowest index on ties.
int nearest_centroid(const ClusterModel& model, std::span<const float> point);
double squared_distance(std::span<const float> a, std::span<const double> b);

struct ElbowResult {
  int k = 0;
  std::vector<int> ks;
  std::vector<double> sse;
  std::vector<double> chord_distance;
  bool degenerate = false;
};

// Chooses the k whose (k, SSE) point lies farthest from the chord joining the
// curve's endpoints. A curve with no bend (every distance ~0) returns the
// smallest k with `degenerate` set. Needs >= 3 increasing ks.
ElbowResult elbow_from_curve(std::span<const int> ks, std::span<const double> sse);
ElbowResult elbow_select(const FeatureMatrix& features, std::span<const int> k_range, std::uint64_t seed);

enum class KMode { fixed, elbow };

struct KSelection {
  KMode mode = KMode::fixed;
  int k = 3;
  std::vector<int> k_range = {1, 2, 3, 4, 5, 6};
};

struct ClassClusters {
  int label = 0;
  std::vector<std::size_t> members;  // dataset indices, ascending
  ClusterModel model;
  bool fallback = false;             // fewer members than the requested k
  std::optional<ElbowResult> elbow;
};

struct DatasetClusters {
  std::vector<ClassClusters> classes;  // indexed by label
  std::vector<int> cluster_of;         // per dataset image
  std::string source;

  std::size_t cell_count() const;
};

// Independent k-means per class label.
DatasetClusters cluster_all_classes(const FeatureMatrix& features, std::span<const int> labels, int num_classes,
                                    const KSelection& selection, std::uint64_t seed);
DatasetClusters cluster_all_classes(Network& model, const LabeledImageSet& data, const KSelection& selection,
                                    std::uint64_t seed);

// image_index,class,cluster
void write_assignments_csv(const std::filesystem::path& path, const DatasetClusters& clusters,
                           std::span<const int> labels);
// k,sse
void write_elbow_csv(const std::filesystem::path& path, const ElbowResult& elbow);
ElbowResult read_elbow_csv(const std::filesystem::path& path);

}  // namespace encodenet
