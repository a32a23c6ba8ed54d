#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "encodenet/clustering.hpp"
#include "encodenet/datasets.hpp"
#include "encodenet/network.hpp"

namespace encodenet {

inline constexpr double kProbabilityTolerance = 1e-5;

// -sum p ln p in nats, with 0 ln 0 = 0. Throws ValidationError when an entry
// is negative or the sum is off by more than kProbabilityTolerance.
double prediction_entropy(std::span<const double> p);
double prediction_entropy(std::span<const float> p);

struct EntropyRecord {
  std::size_t image_index = 0;
  int label = 0;
  int cluster = 0;
  double entropy = 0.0;
  int predicted = 0;
  friend bool operator==(const EntropyRecord&, const EntropyRecord&) = default;
};

// One record per row of `probabilities` [N, C].
std::vector<EntropyRecord> score_probabilities(const Tensor& probabilities, std::span<const int> labels,
                                               std::span<const int> cluster_of);
// Eval-mode softmax of the trained baseline over `data`.
std::vector<EntropyRecord> score_dataset(Network& model, const LabeledImageSet& data, const DatasetClusters& clusters);

struct Representative {
  std::size_t image_index = 0;
  double entropy = 0.0;
};

using Cell = std::pair<int, int>;  // (class, cluster)

struct RepresentativeMap {
  std::map<Cell, Representative> cells;
  const Representative& at(int label, int cluster) const;
  nlohmann::json to_json() const;
};

// Lowest-entropy record per cell, lowest image index on ties. When
// `clusters` is given every one of its cells must be populated.
RepresentativeMap select_representatives(std::span<const EntropyRecord> records,
                                         const DatasetClusters* clusters = nullptr);

using ConversionPair = std::pair<std::size_t, std::size_t>;  // (input, target)

// One pair per image, targeting its cell's representative.
std::vector<ConversionPair> build_conversion_pairs(std::span<const int> labels, std::span<const int> cluster_of,
                                                   const RepresentativeMap& reps);

struct PairAudit {
  std::size_t pairs = 0;
  std::size_t class_preserved = 0;
  std::size_t cell_minimal = 0;  // target in the input's cell with minimal entropy there
  bool ok() const { return pairs > 0 && class_preserved == pairs && cell_minimal == pairs; }
};

// Exhaustive check against the scored records.
PairAudit audit_conversion_pairs(std::span<const ConversionPair> pairs, std::span<const EntropyRecord> records);

// image_index,class,cluster,entropy,predicted_class
void write_entropy_csv(const std::filesystem::path& path, std::span<const EntropyRecord> records);
std::vector<EntropyRecord> read_entropy_csv(const std::filesystem::path& path);

}  // namespace encodenet
