#include "encodenet/entropy_rank.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "encodenet/trainer.hpp"

namespace encodenet {

namespace fs = std::filesystem;

namespace {

template <typename T>
double entropy_impl(std::span<const T> p) {
  if (p.empty()) throw ValidationError("entropy of an empty distribution");
  double total = 0.0, h = 0.0;
  for (const T v : p) {
    const double x = static_cast<double>(v);
    if (!(x >= 0.0)) throw ValidationError("probability entries must be non-negative and finite");
    total += x;
    if (x > 0.0) h -= x * std::log(x);
  }
  if (std::abs(total - 1.0) > kProbabilityTolerance) {
    throw ValidationError("probabilities sum to " + std::to_string(total) + ", not 1");
  }
  // Rounding can leave a one-hot vector a hair below zero.
  return std::max(h, 0.0);
}

}  // namespace

double prediction_entropy(std::span<const double> p) { return entropy_impl(p); }
double prediction_entropy(std::span<const float> p) { return entropy_impl(p); }

std::vector<EntropyRecord> score_probabilities(const Tensor& probabilities, std::span<const int> labels,
                                               std::span<const int> cluster_of) {
  if (probabilities.rank() != 2) throw ShapeError("probabilities must be [N, C]");
  const std::size_t n = probabilities.dim(0), c = probabilities.dim(1);
  if (labels.size() != n || cluster_of.size() != n) throw ValidationError("labels and clusters must cover every image");
  const auto predicted = argmax_rows(probabilities);
  std::vector<EntropyRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (cluster_of[i] < 0) throw ValidationError("image " + std::to_string(i) + " has no cluster assignment");
    out[i] = {i, labels[i], cluster_of[i],
              prediction_entropy(std::span<const float>(probabilities.data().data() + i * c, c)), predicted[i]};
  }
  return out;
}

std::vector<EntropyRecord> score_dataset(Network& model, const LabeledImageSet& data, const DatasetClusters& clusters) {
  if (!model.trained()) throw StateError("entropy scoring needs a trained model");
  return score_probabilities(predict_probabilities(model, data.images), data.labels, clusters.cluster_of);
}

const Representative& RepresentativeMap::at(int label, int cluster) const {
  const auto it = cells.find({label, cluster});
  if (it == cells.end()) {
    throw ValidationError("no representative for class " + std::to_string(label) + " cluster " + std::to_string(cluster));
  }
  return it->second;
}

nlohmann::json RepresentativeMap::to_json() const {
  auto arr = nlohmann::json::array();
  for (const auto& [cell, rep] : cells) {
    arr.push_back({{"class", cell.first}, {"cluster", cell.second}, {"image_index", rep.image_index},
                   {"entropy", rep.entropy}});
  }
  return {{"representatives", arr}};
}

RepresentativeMap select_representatives(std::span<const EntropyRecord> records, const DatasetClusters* clusters) {
  RepresentativeMap map;
  for (const auto& r : records) {
    auto [it, inserted] = map.cells.try_emplace({r.label, r.cluster}, Representative{r.image_index, r.entropy});
    if (inserted) continue;
    auto& cur = it->second;
    if (r.entropy < cur.entropy || (r.entropy == cur.entropy && r.image_index < cur.image_index)) {
      cur = {r.image_index, r.entropy};
    }
  }
  if (clusters) {
    for (const auto& cc : clusters->classes) {
      for (int k = 0; k < cc.model.k; ++k) {
        if (!map.cells.contains({cc.label, k})) {
          throw ValidationError("cell (class " + std::to_string(cc.label) + ", cluster " + std::to_string(k) +
                                ") has no scored images");
        }
      }
    }
  }
  return map;
}

std::vector<ConversionPair> build_conversion_pairs(std::span<const int> labels, std::span<const int> cluster_of,
                                                   const RepresentativeMap& reps) {
  if (labels.size() != cluster_of.size()) throw ValidationError("labels and clusters must cover every image");
  std::vector<ConversionPair> pairs;
  pairs.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) pairs.emplace_back(i, reps.at(labels[i], cluster_of[i]).image_index);
  return pairs;
}

PairAudit audit_conversion_pairs(std::span<const ConversionPair> pairs, std::span<const EntropyRecord> records) {
  // Recomputed from the records rather than trusting the map.
  std::map<Cell, double> cell_min;
  for (const auto& r : records) {
    auto [it, inserted] = cell_min.try_emplace({r.label, r.cluster}, r.entropy);
    if (!inserted) it->second = std::min(it->second, r.entropy);
  }
  PairAudit audit;
  audit.pairs = pairs.size();
  for (const auto& [in, tg] : pairs) {
    if (in >= records.size() || tg >= records.size()) continue;
    const auto& a = records[in];
    const auto& b = records[tg];
    if (a.image_index != in || b.image_index != tg) throw ValidationError("records must be indexed by image");
    if (a.label == b.label) ++audit.class_preserved;
    if (a.label == b.label && a.cluster == b.cluster && b.entropy <= cell_min.at({a.label, a.cluster})) {
      ++audit.cell_minimal;
    }
  }
  return audit;
}

void write_entropy_csv(const fs::path& path, std::span<const EntropyRecord> records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "image_index,class,cluster,entropy,predicted_class\n";
  char buf[128];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%zu,%d,%d,%.17g,%d\n", r.image_index, r.label, r.cluster, r.entropy, r.predicted);
    out << buf;
  }
}

std::vector<EntropyRecord> read_entropy_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing entropy CSV '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != "image_index,class,cluster,entropy,predicted_class") {
    throw FormatError("'" + path.string() + "' lacks the entropy CSV header");
  }
  std::vector<EntropyRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    EntropyRecord r;
    if (std::sscanf(line.c_str(), "%zu,%d,%d,%lf,%d", &r.image_index, &r.label, &r.cluster, &r.entropy, &r.predicted) != 5) {
      throw ParseError(lineno, "malformed entropy row in '" + path.string() + "'");
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace encodenet
