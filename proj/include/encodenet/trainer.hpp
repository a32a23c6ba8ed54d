#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "encodenet/datasets.hpp"
#include "encodenet/network.hpp"
#include "encodenet/optim.hpp"

namespace encodenet {

enum class LrSchedule { constant, cosine };

LrSchedule parse_lr_schedule(std::string_view text);
std::string_view to_string(LrSchedule schedule);

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double learning_rate = 0.1;
  double weight_decay = 1e-4;
  double momentum = 0.0;
  LrSchedule schedule = LrSchedule::cosine;
  std::uint64_t seed = 0;
  // Leading layers excluded from updates (and run in eval mode).
  std::optional<std::size_t> frozen_prefix;
  bool hflip = false;
  // Autoencoder only: share of pairs held out for the reported loss. With 0
  // the loss is measured on the training pairs themselves.
  double holdout_fraction = 0.1;

  // Throws ConfigError. lr = 0 is accepted so that a no-op run can be
  // expressed; negative values are not.
  void validate(std::size_t layer_count) const;
};

struct RunRecord {
  std::string stage;
  std::string eval_metric_name;
  std::vector<double> train_loss;
  std::vector<double> eval_metric;
  double final_metric = 0.0;
  std::size_t parameter_count = 0;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
  // epoch,train_loss,eval_metric with round-trip precision.
  std::string to_csv() const;
  // Writes <stem>.json and <stem>.csv.
  void write(const std::filesystem::path& directory, const std::string& stem) const;
  static RunRecord read(const std::filesystem::path& json_path);

  // True when the loss and metric series match exactly.
  bool same_series(const RunRecord& other) const;
};

struct EpochReport {
  std::size_t epoch;  // 1-based
  std::size_t epochs;
  double train_loss;
  double eval_metric;
};
using EpochCallback = std::function<void(const EpochReport&)>;

// Cross-entropy training of a network ending in softmax (or logits). The
// eval metric is test accuracy after every epoch. With a frozen prefix and
// no augmentation, the prefix output is computed once and reused.
RunRecord train_classifier(Network& net, const DataSplit& data, const TrainConfig& cfg,
                           const EpochCallback& on_epoch = {});

// MSE training on (input index, target index) pairs into `images`. The
// eval metric is the held-out (or on-train, see holdout_fraction) loss.
RunRecord train_autoencoder(Network& net, const Tensor& images,
                            std::span<const std::pair<std::size_t, std::size_t>> pairs, const TrainConfig& cfg,
                            const EpochCallback& on_epoch = {});

// Mean eval-mode MSE of the network output against the targets.
double reconstruction_loss(Network& net, const Tensor& images,
                           std::span<const std::pair<std::size_t, std::size_t>> pairs);

// Deterministic held-out split of [0, n): returns (train, holdout) index
// lists, each ascending.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double fraction,
                                                                              std::uint64_t seed);

// Argmax of each row; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensor& scores);

// Fraction of correct argmax predictions in eval mode. Throws
// ValidationError for an empty set or an output width != num_classes.
double evaluate_accuracy(Network& net, const LabeledImageSet& set);

// Softmax probabilities [N, classes] in eval mode.
Tensor predict_probabilities(Network& net, const Tensor& images);

// Tunes glibc malloc so per-step tensor buffers are recycled rather than
// mapped and unmapped. Safe to call repeatedly.
void tune_allocator();

}  // namespace encodenet
