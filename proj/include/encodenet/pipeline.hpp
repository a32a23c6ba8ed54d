#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "encodenet/clustering.hpp"
#include "encodenet/config.hpp"
#include "encodenet/datasets.hpp"
#include "encodenet/entropy_rank.hpp"
#include "encodenet/model_spec.hpp"
#include "encodenet/network.hpp"
#include "encodenet/trainer.hpp"

namespace encodenet {

enum class TargetMode { representative_clustered, representative_unclustered, same_image };
enum class HeadInit { scratch, from_baseline };
enum class DataSource { synthetic, idx, cifar10 };

TargetMode parse_target_mode(std::string_view text);
std::string_view to_string(TargetMode mode);
HeadInit parse_head_init(std::string_view text);
std::string_view to_string(HeadInit init);

inline constexpr int kConfigVersion = 1;

// Keys and defaults every pipeline config starts from; a config file or
// --set override may only change keys listed here.
std::string_view default_config_text();

struct PipelineConfig {
  ConfigDocument document;  // resolved key/value view, used for hashing
  std::filesystem::path base_dir;

  DataSource source = DataSource::synthetic;
  SyntheticShapesConfig synthetic;
  std::uint64_t data_seed = 7;
  std::size_t subsample_per_class = 0;  // 0 keeps every training image
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::vector<std::filesystem::path> cifar_train, cifar_test;

  std::filesystem::path baseline_spec;
  std::vector<int> decoder_widths;

  KSelection clusters;
  TargetMode target_mode = TargetMode::representative_clustered;
  bool warm_start_encoder = true;
  HeadInit head_init = HeadInit::scratch;

  TrainConfig baseline;
  TrainConfig cae;
  TrainConfig head;
  std::vector<std::uint64_t> seeds;

  // Relative paths resolve against base_dir.
  static PipelineConfig from_document(ConfigDocument doc, std::filesystem::path base_dir);
  static PipelineConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
  void validate() const;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  // k actually used for a target mode (1 for the unclustered rows).
  KSelection selection_for(TargetMode mode) const;
};

DataSplit load_data(const PipelineConfig& cfg);

// Stage outputs live in content-addressed directories under <run>/stages,
// named <stage>-<first 16 hex of sha256(inputs)>. A stage whose directory
// holds a completion marker is reused unless `force` is set.
struct StageInfo {
  std::string stage;
  std::string hash;
  std::filesystem::path dir;
  bool reused = false;
};

struct BaselineOutput {
  StageInfo info;
  RunRecord record;
};

struct ClusterOutput {
  StageInfo info;
  std::vector<int> cluster_of;
  std::vector<int> k_per_class;
  std::vector<bool> fallback;
};

struct RankOutput {
  StageInfo info;
  std::vector<EntropyRecord> records;
  RepresentativeMap representatives;
  std::vector<ConversionPair> pairs;
  PairAudit audit;
};

struct CaeOutput {
  StageInfo info;
  RunRecord record;
  PairAudit audit;  // re-checked before training
};

struct AssembleOutput {
  StageInfo info;
  std::size_t baseline_parameters = 0;
  std::size_t encodenet_parameters = 0;
  std::size_t encoder_parameters = 0;
  std::size_t head_parameters = 0;
  std::size_t split_index = 0;
};

struct HeadOutput {
  StageInfo info;
  RunRecord record;
  bool encoder_unchanged = false;
};

struct AblationRow {
  std::string name;
  std::vector<std::optional<double>> accuracy;  // per seed; nullopt = failed
  std::vector<std::string> failures;
  std::optional<double> median;
};

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;  // baseline, same_image, unclustered, clustered
  // Held-out CAE loss per seed for k=1 and k=3 targets.
  std::vector<std::optional<double>> loss_unclustered, loss_clustered;
  std::optional<double> median_loss_unclustered, median_loss_clustered;
  std::string head_init;
  nlohmann::json checks;

  nlohmann::json to_json() const;
  static AblationResult from_json(const nlohmann::json& j);
};

std::optional<double> median(const std::vector<std::optional<double>>& values);

// Baseline architecture with the CAE's encoder layers copied in and frozen;
// the head is fresh (seeded) or copied from the baseline. Throws
// ValidationError when the CAE encoder differs from the baseline's.
Network assemble_model(const Network& baseline, const Network& cae, HeadInit init, std::uint64_t seed);

class Pipeline {
 public:
  using Logger = std::function<void(const std::string&)>;

  // With `auto_upstream` a stage runs its missing prerequisites; otherwise
  // a missing upstream artifact is a PrerequisiteError.
  Pipeline(PipelineConfig cfg, std::filesystem::path run_dir, bool force, bool auto_upstream, Logger log = {});

  const PipelineConfig& config() const noexcept { return cfg_; }
  const std::filesystem::path& run_dir() const noexcept { return run_dir_; }
  const DataSplit& data();

  BaselineOutput baseline(std::uint64_t seed);
  ClusterOutput cluster(std::uint64_t seed, TargetMode mode);
  RankOutput rank(std::uint64_t seed, TargetMode mode);
  CaeOutput cae(std::uint64_t seed, TargetMode mode);
  AssembleOutput assemble(std::uint64_t seed, TargetMode mode);
  HeadOutput head(std::uint64_t seed, TargetMode mode);
  AblationResult ablate(const std::vector<std::uint64_t>& seeds);

  // Stage directories for a seed/mode without running anything.
  StageInfo locate(std::string_view stage, std::uint64_t seed, TargetMode mode) const;

 private:
  std::string stage_hash(std::string_view stage, std::uint64_t seed, TargetMode mode) const;
  StageInfo prepare(std::string_view stage, std::uint64_t seed, TargetMode mode) const;
  bool complete(const StageInfo& info) const;
  void finish(const StageInfo& info, std::uint64_t seed, TargetMode mode, const std::vector<std::string>& artifacts);
  void require(std::string_view stage, std::uint64_t seed, TargetMode mode, const std::function<void()>& run);
  void note(const std::string& msg) const;

  PipelineConfig cfg_;
  std::filesystem::path run_dir_;
  bool force_;
  bool auto_upstream_;
  Logger log_;
  std::optional<DataSplit> data_;
  std::string spec_text_;
  std::set<std::string> produced_;  // stage hashes written by this process
};

// Manifest: <run>/manifest.json, updated under an exclusive flock on
// <run>/manifest.lock.
void update_manifest(const std::filesystem::path& run_dir, const std::string& key, const nlohmann::json& entry);
nlohmann::json read_manifest(const std::filesystem::path& run_dir);

}  // namespace encodenet
