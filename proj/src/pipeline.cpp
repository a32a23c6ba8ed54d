#include "encodenet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include "encodenet/checkpoint.hpp"
#include "encodenet/hashing.hpp"

namespace encodenet {

namespace fs = std::filesystem;
using json = nlohmann::json;

TargetMode parse_target_mode(std::string_view text) {
  if (text == "representative_clustered") return TargetMode::representative_clustered;
  if (text == "representative_unclustered") return TargetMode::representative_unclustered;
  if (text == "same_image") return TargetMode::same_image;
  throw ConfigError("unknown target mode '" + std::string(text) +
                    "' (expected representative_clustered, representative_unclustered or same_image)");
}

std::string_view to_string(TargetMode mode) {
  switch (mode) {
    case TargetMode::representative_clustered:
      return "representative_clustered";
    case TargetMode::representative_unclustered:
      return "representative_unclustered";
    case TargetMode::same_image:
      return "same_image";
  }
  return "?";
}

HeadInit parse_head_init(std::string_view text) {
  if (text == "scratch") return HeadInit::scratch;
  if (text == "from_baseline") return HeadInit::from_baseline;
  throw ConfigError("unknown head init '" + std::string(text) + "' (expected scratch or from_baseline)");
}

std::string_view to_string(HeadInit init) { return init == HeadInit::scratch ? "scratch" : "from_baseline"; }

std::string_view default_config_text() {
  return R"(version = 1

[data]
source = "synthetic"
seed = 7
image_size = 32
styles = 3
train_per_class = 200
test_per_class = 200
noise = 0.12
clutter = 0.5
max_rotation_deg = 20
min_scale = 0.45
max_scale = 0.75
max_shift = 0.15
subsample_per_class = 0
train_images = ""
train_labels = ""
test_images = ""
test_labels = ""
cifar_train = ""
cifar_test = ""

[model]
spec = "specs/vgg_mini.spec"
decoder_widths = ""

[cluster]
k_mode = "fixed"
k = 3
k_range = [1, 2, 3, 4, 5, 6]

[baseline]
epochs = 40
batch_size = 64
optimizer = "sgd"
learning_rate = 0.1
weight_decay = 1e-4
momentum = 0
schedule = "cosine"
hflip = false

[cae]
epochs = 60
batch_size = 64
optimizer = "adam"
learning_rate = 1e-3
weight_decay = 0
momentum = 0
schedule = "cosine"
hflip = false
holdout_fraction = 0.1
warm_start = true

[head]
epochs = 40
batch_size = 64
optimizer = "sgd"
learning_rate = 0.1
weight_decay = 1e-4
momentum = 0
schedule = "cosine"
hflip = false
init = "scratch"

[pipeline]
target_mode = "representative_clustered"
seeds = [1, 2, 3]
)";
}

namespace {

TrainConfig read_train(const ConfigDocument& d, const std::string& s) {
  TrainConfig t;
  const auto epochs = d.get_int(s + ".epochs");
  const auto batch = d.get_int(s + ".batch_size");
  if (epochs < 1) throw ConfigError("'" + s + ".epochs' must be >= 1");
  if (batch < 1) throw ConfigError("'" + s + ".batch_size' must be >= 1");
  t.epochs = static_cast<std::size_t>(epochs);
  t.batch_size = static_cast<std::size_t>(batch);
  try {
    t.optimizer = parse_optimizer_kind(d.get_string(s + ".optimizer"));
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  t.learning_rate = d.get_double(s + ".learning_rate");
  t.weight_decay = d.get_double(s + ".weight_decay");
  t.momentum = d.get_double(s + ".momentum");
  t.schedule = parse_lr_schedule(d.get_string(s + ".schedule"));
  t.hflip = d.get_bool(s + ".hflip");
  if (d.contains(s + ".holdout_fraction")) t.holdout_fraction = d.get_double(s + ".holdout_fraction");
  if (!(t.learning_rate > 0.0)) throw ConfigError("'" + s + ".learning_rate' must be > 0");
  return t;
}

std::vector<fs::path> split_paths(const std::string& text) {
  std::vector<fs::path> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    if (b == std::string::npos) continue;
    out.emplace_back(item.substr(b, item.find_last_not_of(' ') - b + 1));
  }
  return out;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("'" + p.string() + "': " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

PipelineConfig PipelineConfig::from_document(ConfigDocument doc, fs::path base_dir) {
  ConfigDocument merged = ConfigDocument::parse(default_config_text());
  for (const auto& [k, v] : doc.values()) {
    if (!merged.contains(k)) throw ConfigError("unknown config key '" + k + "'");
    merged.set(k, v);
  }
  PipelineConfig c;
  c.base_dir = std::move(base_dir);
  const auto& d = merged;
  if (d.get_int("version") != kConfigVersion) {
    throw ConfigError("config version " + d.get_string("version") + " is not supported (expected " +
                      std::to_string(kConfigVersion) + ")");
  }

  const std::string source = d.get_string("data.source");
  if (source == "synthetic") c.source = DataSource::synthetic;
  else if (source == "idx") c.source = DataSource::idx;
  else if (source == "cifar10") c.source = DataSource::cifar10;
  else throw ConfigError("unknown data source '" + source + "' (expected synthetic, idx or cifar10)");
  c.data_seed = static_cast<std::uint64_t>(d.get_int("data.seed"));
  c.synthetic.image_size = static_cast<int>(d.get_int("data.image_size"));
  c.synthetic.styles = static_cast<int>(d.get_int("data.styles"));
  c.synthetic.train_per_class = static_cast<std::size_t>(d.get_int("data.train_per_class"));
  c.synthetic.test_per_class = static_cast<std::size_t>(d.get_int("data.test_per_class"));
  c.synthetic.noise = d.get_double("data.noise");
  c.synthetic.clutter = d.get_double("data.clutter");
  c.synthetic.max_rotation_deg = d.get_double("data.max_rotation_deg");
  c.synthetic.min_scale = d.get_double("data.min_scale");
  c.synthetic.max_scale = d.get_double("data.max_scale");
  c.synthetic.max_shift = d.get_double("data.max_shift");
  const auto sub = d.get_int("data.subsample_per_class");
  if (sub < 0) throw ConfigError("'data.subsample_per_class' must be >= 0");
  c.subsample_per_class = static_cast<std::size_t>(sub);
  c.train_images = d.get_string("data.train_images");
  c.train_labels = d.get_string("data.train_labels");
  c.test_images = d.get_string("data.test_images");
  c.test_labels = d.get_string("data.test_labels");
  c.cifar_train = split_paths(d.get_string("data.cifar_train"));
  c.cifar_test = split_paths(d.get_string("data.cifar_test"));

  c.baseline_spec = d.get_string("model.spec");
  if (!d.get_string("model.decoder_widths").empty()) {
    for (const auto w : d.get_int_list("model.decoder_widths")) {
      if (w < 1) throw ConfigError("'model.decoder_widths' entries must be >= 1");
      c.decoder_widths.push_back(static_cast<int>(w));
    }
  }

  const std::string km = d.get_string("cluster.k_mode");
  if (km == "fixed") c.clusters.mode = KMode::fixed;
  else if (km == "elbow") c.clusters.mode = KMode::elbow;
  else throw ConfigError("unknown k_mode '" + km + "' (expected fixed or elbow)");
  c.clusters.k = static_cast<int>(d.get_int("cluster.k"));
  c.clusters.k_range.clear();
  for (const auto k : d.get_int_list("cluster.k_range")) c.clusters.k_range.push_back(static_cast<int>(k));

  c.baseline = read_train(d, "baseline");
  c.cae = read_train(d, "cae");
  c.head = read_train(d, "head");
  c.warm_start_encoder = d.get_bool("cae.warm_start");
  c.head_init = parse_head_init(d.get_string("head.init"));
  c.target_mode = parse_target_mode(d.get_string("pipeline.target_mode"));
  for (const auto s : d.get_int_list("pipeline.seeds")) {
    if (s < 0) throw ConfigError("seeds must be non-negative");
    c.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  c.document = std::move(merged);
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path, const std::vector<std::string>& overrides) {
  ConfigDocument doc = ConfigDocument::load(path);
  const ConfigDocument defaults = ConfigDocument::parse(default_config_text());
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const std::string key = o.substr(0, eq == std::string::npos ? o.size() : eq);
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    doc.apply_override(o, true);
  }
  return from_document(std::move(doc), path.parent_path());
}

void PipelineConfig::validate() const {
  if (seeds.empty()) throw ConfigError("'pipeline.seeds' must list at least one seed");
  if (clusters.mode == KMode::fixed && clusters.k < 1) throw ConfigError("'cluster.k' must be >= 1");
  if (clusters.mode == KMode::elbow) {
    if (clusters.k_range.size() < 3) throw ConfigError("'cluster.k_range' needs at least 3 values");
    for (std::size_t i = 1; i < clusters.k_range.size(); ++i) {
      if (clusters.k_range[i] <= clusters.k_range[i - 1]) throw ConfigError("'cluster.k_range' must be increasing");
    }
    if (clusters.k_range.front() < 1) throw ConfigError("'cluster.k_range' values must be >= 1");
  }
  if (source == DataSource::synthetic && (synthetic.train_per_class == 0 || synthetic.test_per_class == 0)) {
    throw ConfigError("synthetic data needs train_per_class and test_per_class >= 1");
  }
  if (source == DataSource::idx &&
      (train_images.empty() || train_labels.empty() || test_images.empty() || test_labels.empty())) {
    throw ConfigError("idx data needs train_images, train_labels, test_images and test_labels");
  }
  if (source == DataSource::cifar10 && (cifar_train.empty() || cifar_test.empty())) {
    throw ConfigError("cifar10 data needs cifar_train and cifar_test paths");
  }
  if (!(cae.holdout_fraction >= 0.0 && cae.holdout_fraction < 1.0)) {
    throw ConfigError("'cae.holdout_fraction' must be in [0, 1)");
  }
}

fs::path PipelineConfig::resolve(const fs::path& p) const { return p.is_absolute() ? p : base_dir / p; }

KSelection PipelineConfig::selection_for(TargetMode mode) const {
  KSelection s = clusters;
  if (mode == TargetMode::representative_unclustered) {
    s.mode = KMode::fixed;
    s.k = 1;
  }
  return s;
}

DataSplit load_data(const PipelineConfig& cfg) {
  DataSplit split;
  switch (cfg.source) {
    case DataSource::synthetic:
      split = make_synthetic_shapes(cfg.synthetic, cfg.data_seed);
      break;
    case DataSource::idx:
      split.train = load_idx(cfg.resolve(cfg.train_images), cfg.resolve(cfg.train_labels));
      split.test = load_idx(cfg.resolve(cfg.test_images), cfg.resolve(cfg.test_labels), split.train.num_classes);
      break;
    case DataSource::cifar10: {
      std::vector<fs::path> tr, te;
      for (const auto& p : cfg.cifar_train) tr.push_back(cfg.resolve(p));
      for (const auto& p : cfg.cifar_test) te.push_back(cfg.resolve(p));
      split.train = load_cifar_bin(tr);
      split.test = load_cifar_bin(te);
      break;
    }
  }
  if (cfg.subsample_per_class > 0) split.train = subsample(split.train, cfg.subsample_per_class, cfg.data_seed);
  split.seed = cfg.data_seed;
  split.train.validate();
  split.test.validate();
  return split;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

class FileLock {
 public:
  explicit FileLock(const fs::path& p) {
    fd_ = ::open(p.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file '" + p.string() + "'");
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw IoError("cannot lock '" + p.string() + "'");
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace

json read_manifest(const fs::path& run_dir) {
  const fs::path p = run_dir / "manifest.json";
  if (!fs::exists(p)) return json{{"version", kConfigVersion}, {"stages", json::object()}};
  return read_json(p);
}

void update_manifest(const fs::path& run_dir, const std::string& key, const json& entry) {
  fs::create_directories(run_dir);
  FileLock lock(run_dir / "manifest.lock");
  json m = read_manifest(run_dir);
  m["stages"][key] = entry;
  const fs::path tmp = run_dir / "manifest.json.tmp";
  write_json(tmp, m);
  fs::rename(tmp, run_dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// Ablation helpers

std::optional<double> median(const std::vector<std::optional<double>>& values) {
  std::vector<double> v;
  for (const auto& x : values) {
    if (x) v.push_back(*x);
  }
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

}  // namespace

json AblationResult::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    json acc = json::array();
    for (const auto& a : r.accuracy) acc.push_back(optional_json(a));
    rows_j.push_back({{"name", r.name}, {"accuracy", acc}, {"failures", r.failures}, {"median", optional_json(r.median)}});
  }
  json lu = json::array(), lc = json::array();
  for (const auto& v : loss_unclustered) lu.push_back(optional_json(v));
  for (const auto& v : loss_clustered) lc.push_back(optional_json(v));
  return {{"seeds", seeds},
          {"rows", rows_j},
          {"loss_unclustered", lu},
          {"loss_clustered", lc},
          {"median_loss_unclustered", optional_json(median_loss_unclustered)},
          {"median_loss_clustered", optional_json(median_loss_clustered)},
          {"head_init", head_init},
          {"checks", checks}};
}

AblationResult AblationResult::from_json(const json& j) {
  try {
    AblationResult r;
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& rj : j.at("rows")) {
      AblationRow row;
      row.name = rj.at("name").get<std::string>();
      for (const auto& a : rj.at("accuracy")) row.accuracy.push_back(optional_from(a));
      row.failures = rj.at("failures").get<std::vector<std::string>>();
      row.median = optional_from(rj.at("median"));
      r.rows.push_back(std::move(row));
    }
    for (const auto& v : j.at("loss_unclustered")) r.loss_unclustered.push_back(optional_from(v));
    for (const auto& v : j.at("loss_clustered")) r.loss_clustered.push_back(optional_from(v));
    r.median_loss_unclustered = optional_from(j.at("median_loss_unclustered"));
    r.median_loss_clustered = optional_from(j.at("median_loss_clustered"));
    r.head_init = j.at("head_init").get<std::string>();
    r.checks = j.at("checks");
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed ablation result: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(PipelineConfig cfg, fs::path run_dir, bool force, bool auto_upstream, Logger log)
    : cfg_(std::move(cfg)), run_dir_(std::move(run_dir)), force_(force), auto_upstream_(auto_upstream),
      log_(std::move(log)) {
  spec_text_ = read_text(cfg_.resolve(cfg_.baseline_spec));
}

void Pipeline::note(const std::string& msg) const {
  if (log_) log_(msg);
}

const DataSplit& Pipeline::data() {
  if (!data_) data_ = load_data(cfg_);
  return *data_;
}

std::string Pipeline::stage_hash(std::string_view stage, std::uint64_t seed, TargetMode mode) const {
  const auto& d = cfg_.document;
  std::string in = "encodenet-stage v1\n";
  in += "stage = " + std::string(stage) + "\n";
  if (stage == "baseline") {
    in += d.canonical("data.") + "spec_text = " + spec_text_ + "\n" + d.canonical("baseline.");
    in += "seed = " + std::to_string(seed) + "\n";
  } else if (stage == "cluster") {
    const auto sel = cfg_.selection_for(mode);
    in += "upstream = " + stage_hash("baseline", seed, mode) + "\n";
    in += "k_mode = " + std::string(sel.mode == KMode::fixed ? "fixed" : "elbow") + "\nk = " + std::to_string(sel.k) + "\n";
    in += "k_range = " + d.get_string("cluster.k_range") + "\n";
  } else if (stage == "rank") {
    in += "upstream = " + stage_hash("cluster", seed, mode) + "\n";
  } else if (stage == "cae") {
    in += "target_mode = " + std::string(to_string(mode)) + "\n";
    in += "upstream = " + stage_hash(mode == TargetMode::same_image ? "baseline" : "rank", seed, mode) + "\n";
    in += d.canonical("cae.") + "decoder_widths = " + d.get_string("model.decoder_widths") + "\n";
  } else if (stage == "assemble") {
    in += "upstream = " + stage_hash("cae", seed, mode) + "\n" + "head.init = " + d.get_string("head.init") + "\n";
  } else if (stage == "head") {
    in += "upstream = " + stage_hash("assemble", seed, mode) + "\n" + d.canonical("head.");
  } else {
    throw StateError("unknown stage '" + std::string(stage) + "'");
  }
  return sha256_hex(in);
}

StageInfo Pipeline::locate(std::string_view stage, std::uint64_t seed, TargetMode mode) const {
  StageInfo info;
  info.stage = std::string(stage);
  info.hash = stage_hash(stage, seed, mode);
  info.dir = run_dir_ / "stages" / (info.stage + "-" + info.hash.substr(0, 16));
  return info;
}

bool Pipeline::complete(const StageInfo& info) const {
  const fs::path marker = info.dir / "stage.json";
  if (!fs::exists(marker)) return false;
  try {
    return read_json(marker).value("hash", "") == info.hash;
  } catch (const Error&) {
    return false;
  }
}

StageInfo Pipeline::prepare(std::string_view stage, std::uint64_t seed, TargetMode mode) const {
  StageInfo info = locate(stage, seed, mode);
  info.reused = complete(info) && !(force_ && !produced_.contains(info.hash));
  if (!info.reused) {
    fs::remove_all(info.dir);
    fs::create_directories(info.dir);
  }
  return info;
}

void Pipeline::finish(const StageInfo& info, std::uint64_t seed, TargetMode mode,
                      const std::vector<std::string>& artifacts) {
  json arts = json::object();
  for (const auto& a : artifacts) arts[a] = sha256_file(info.dir / a);
  const json entry = {{"stage", info.stage},
                      {"hash", info.hash},
                      {"seed", seed},
                      {"target_mode", to_string(mode)},
                      {"dir", fs::relative(info.dir, run_dir_).string()},
                      {"artifacts", arts}};
  write_json(info.dir / "stage.json", entry);
  update_manifest(run_dir_, info.dir.filename().string(), entry);
  produced_.insert(info.hash);
}

void Pipeline::require(std::string_view stage, std::uint64_t seed, TargetMode mode, const std::function<void()>& run) {
  const StageInfo info = locate(stage, seed, mode);
  if (complete(info) && !(force_ && auto_upstream_ && !produced_.contains(info.hash))) return;
  if (!auto_upstream_) {
    throw PrerequisiteError("stage needs the '" + std::string(stage) + "' artifact for seed " + std::to_string(seed) +
                            " (" + std::string(to_string(mode)) + "); run that stage first");
  }
  run();
}

namespace {

std::vector<NamedTensor> layer_snapshot(const Network& net, std::size_t layers) {
  std::vector<NamedTensor> out;
  for (const auto& t : net.state()) {
    const auto dot = t.name.find('.');
    const std::size_t layer = std::stoul(t.name.substr(1, dot - 1));
    if (layer < layers) out.push_back(t);
  }
  return out;
}

void write_pairs_csv(const fs::path& p, const std::vector<ConversionPair>& pairs) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << "input_index,target_index\n";
  for (const auto& [a, b] : pairs) out << a << ',' << b << '\n';
}

std::vector<ConversionPair> read_pairs_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("missing pairs CSV '" + p.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<ConversionPair> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t a = 0, b = 0;
    if (std::sscanf(line.c_str(), "%zu,%zu", &a, &b) != 2) throw FormatError("malformed pair row in '" + p.string() + "'");
    out.emplace_back(a, b);
  }
  return out;
}

json audit_json(const PairAudit& a) {
  return {{"pairs", a.pairs}, {"class_preserved", a.class_preserved}, {"cell_minimal", a.cell_minimal}, {"ok", a.ok()}};
}

PairAudit audit_from(const json& j) {
  PairAudit a;
  a.pairs = j.at("pairs").get<std::size_t>();
  a.class_preserved = j.at("class_preserved").get<std::size_t>();
  a.cell_minimal = j.at("cell_minimal").get<std::size_t>();
  return a;
}

EpochCallback epoch_logger(const Pipeline::Logger& log, const std::string& tag, std::size_t every) {
  if (!log) return {};
  return [log, tag, every](const EpochReport& r) {
    if (r.epoch % every != 0 && r.epoch != r.epochs) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s epoch %zu/%zu train_loss %.6f eval %.6f", tag.c_str(), r.epoch, r.epochs,
                  r.train_loss, r.eval_metric);
    log(buf);
  };
}

}  // namespace

BaselineOutput Pipeline::baseline(std::uint64_t seed) {
  const TargetMode mode = TargetMode::representative_clustered;
  BaselineOutput out;
  out.info = prepare("baseline", seed, mode);
  if (out.info.reused) {
    out.record = RunRecord::read(out.info.dir / "record.json");
    return out;
  }
  const std::string tag = "[baseline seed " + std::to_string(seed) + "]";
  note(tag + " training " + cfg_.baseline_spec.string());
  ModelSpec spec = parse_model_spec(spec_text_);
  if (spec.name.empty()) spec.name = cfg_.baseline_spec.stem().string();
  Network net(spec, seed);
  TrainConfig tc = cfg_.baseline;
  tc.seed = seed;
  out.record = train_classifier(net, data(), tc, epoch_logger(log_, tag, 5));
  out.record.stage = "baseline";
  out.record.extra["model"] = spec.name;
  save_checkpoint(out.info.dir / "model.ckpt", net);
  out.record.write(out.info.dir, "record");
  finish(out.info, seed, mode, {"model.ckpt", "record.json", "record.csv"});
  return out;
}

ClusterOutput Pipeline::cluster(std::uint64_t seed, TargetMode mode) {
  if (mode == TargetMode::same_image) throw ConfigError("the same_image target mode does not use clustering");
  require("baseline", seed, mode, [&] { baseline(seed); });
  ClusterOutput out;
  out.info = prepare("cluster", seed, mode);
  if (!out.info.reused) {
    const auto sel = cfg_.selection_for(mode);
    note("[cluster seed " + std::to_string(seed) + "] k_mode " + (sel.mode == KMode::fixed ? "fixed" : "elbow") +
         ", k " + std::to_string(sel.k));
    Network base = load_checkpoint(locate("baseline", seed, mode).dir / "model.ckpt");
    const auto& train = data().train;
    const FeatureMatrix feats = embed_features(base, train.images);
    const DatasetClusters dc = cluster_all_classes(feats, train.labels, train.num_classes, sel, seed);
    write_assignments_csv(out.info.dir / "assignments.csv", dc, train.labels);

    json classes = json::array();
    std::vector<std::string> artifacts = {"assignments.csv", "clusters.json"};
    for (const auto& cc : dc.classes) {
      // The curve is always emitted for inspection, even with a fixed k.
      std::vector<int> range;
      for (const int k : cfg_.clusters.k_range) {
        if (k <= static_cast<int>(cc.members.size())) range.push_back(k);
      }
      std::optional<ElbowResult> curve = cc.elbow;
      if (!curve && range.size() >= 3) curve = elbow_select(feats.select(cc.members), range, seed + 7919u * static_cast<std::uint64_t>(cc.label));
      json cj = {{"class", cc.label},
                 {"k", cc.model.k},
                 {"members", cc.members.size()},
                 {"fallback", cc.fallback},
                 {"iterations", cc.model.iterations},
                 {"converged", cc.model.converged},
                 {"sse_trace", cc.model.sse_trace}};
      if (curve) {
        const std::string name = "elbow_class" + std::to_string(cc.label) + ".csv";
        write_elbow_csv(out.info.dir / name, *curve);
        artifacts.push_back(name);
        cj["elbow_k"] = curve->k;
        cj["elbow_degenerate"] = curve->degenerate;
      }
      classes.push_back(cj);
    }
    write_json(out.info.dir / "clusters.json",
               {{"source", dc.source}, {"k_mode", sel.mode == KMode::fixed ? "fixed" : "elbow"}, {"classes", classes}});
    finish(out.info, seed, mode, artifacts);
  }

  const json cj = read_json(out.info.dir / "clusters.json");
  for (const auto& c : cj.at("classes")) {
    out.k_per_class.push_back(c.at("k").get<int>());
    out.fallback.push_back(c.at("fallback").get<bool>());
  }
  std::ifstream in(out.info.dir / "assignments.csv");
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::size_t i = 0;
    int label = 0, cluster = 0;
    if (std::sscanf(line.c_str(), "%zu,%d,%d", &i, &label, &cluster) != 3) throw FormatError("malformed assignments row");
    out.cluster_of.push_back(cluster);
  }
  return out;
}

RankOutput Pipeline::rank(std::uint64_t seed, TargetMode mode) {
  if (mode == TargetMode::same_image) throw ConfigError("the same_image target mode does not rank representatives");
  require("cluster", seed, mode, [&] { cluster(seed, mode); });
  RankOutput out;
  out.info = prepare("rank", seed, mode);
  if (!out.info.reused) {
    note("[rank seed " + std::to_string(seed) + "] scoring entropies (" + std::string(to_string(mode)) + ")");
    const ClusterOutput co = cluster(seed, mode);
    Network base = load_checkpoint(locate("baseline", seed, mode).dir / "model.ckpt");
    const auto& train = data().train;
    DatasetClusters dc;
    dc.cluster_of = co.cluster_of;
    for (std::size_t c = 0; c < co.k_per_class.size(); ++c) {
      ClassClusters cc;
      cc.label = static_cast<int>(c);
      cc.model.k = co.k_per_class[c];
      dc.classes.push_back(std::move(cc));
    }
    const auto records = score_dataset(base, train, dc);
    const auto reps = select_representatives(records, &dc);
    const auto pairs = build_conversion_pairs(train.labels, dc.cluster_of, reps);
    const PairAudit audit = audit_conversion_pairs(pairs, records);
    if (!audit.ok()) throw ValidationError("conversion pairs failed the class/minimality audit");
    write_entropy_csv(out.info.dir / "entropy.csv", records);
    write_json(out.info.dir / "representatives.json", reps.to_json());
    write_pairs_csv(out.info.dir / "pairs.csv", pairs);
    write_json(out.info.dir / "audit.json", audit_json(audit));
    finish(out.info, seed, mode, {"entropy.csv", "representatives.json", "pairs.csv", "audit.json"});
  }
  out.records = read_entropy_csv(out.info.dir / "entropy.csv");
  out.representatives = select_representatives(out.records);
  out.pairs = read_pairs_csv(out.info.dir / "pairs.csv");
  out.audit = audit_from(read_json(out.info.dir / "audit.json"));
  return out;
}

CaeOutput Pipeline::cae(std::uint64_t seed, TargetMode mode) {
  if (mode == TargetMode::same_image) require("baseline", seed, mode, [&] { baseline(seed); });
  else require("rank", seed, mode, [&] { rank(seed, mode); });
  CaeOutput out;
  out.info = prepare("cae", seed, mode);
  if (out.info.reused) {
    out.record = RunRecord::read(out.info.dir / "record.json");
    out.audit = audit_from(read_json(out.info.dir / "audit.json"));
    return out;
  }
  const auto& train = data().train;
  std::vector<ConversionPair> pairs;
  if (mode == TargetMode::same_image) {
    for (std::size_t i = 0; i < train.size(); ++i) pairs.emplace_back(i, i);
    out.audit = {pairs.size(), pairs.size(), pairs.size()};
  } else {
    const RankOutput ro = rank(seed, mode);
    pairs = ro.pairs;
    out.audit = audit_conversion_pairs(pairs, ro.records);
    if (!out.audit.ok()) throw ValidationError("conversion pairs failed the audit before CAE training");
  }
  for (const auto& [a, b] : pairs) {
    if (train.labels.at(a) != train.labels.at(b)) throw ValidationError("conversion pair crosses classes");
  }

  const ModelSpec base_spec = load_checkpoint(locate("baseline", seed, mode).dir / "model.ckpt").spec();
  const SplitModel split = split_model(base_spec);
  const DecoderSpec dec = synthesize_decoder(split.encoder, base_spec.input, cfg_.decoder_widths);
  const ModelSpec ae = autoencoder_spec(split.encoder, dec);
  Network net(ae, seed + 1000003u);
  if (cfg_.warm_start_encoder) {
    const Network base = load_checkpoint(locate("baseline", seed, mode).dir / "model.ckpt");
    net.copy_prefix_from(base, split.split_index);
  }
  const std::string tag = "[cae seed " + std::to_string(seed) + " " + std::string(to_string(mode)) + "]";
  note(tag + " training " + std::to_string(net.parameter_count()) + " parameters on " + std::to_string(pairs.size()) +
       " pairs");
  TrainConfig tc = cfg_.cae;
  tc.seed = seed;
  out.record = train_autoencoder(net, train.images, pairs, tc, epoch_logger(log_, tag, 10));
  out.record.stage = "cae";
  out.record.extra["target_mode"] = to_string(mode);
  out.record.extra["warm_start"] = cfg_.warm_start_encoder;
  out.record.extra["split_index"] = split.split_index;
  save_checkpoint(out.info.dir / "model.ckpt", net);
  write_pairs_csv(out.info.dir / "pairs.csv", pairs);
  write_json(out.info.dir / "audit.json", audit_json(out.audit));
  out.record.write(out.info.dir, "record");
  finish(out.info, seed, mode, {"model.ckpt", "pairs.csv", "audit.json", "record.json", "record.csv"});
  return out;
}

Network assemble_model(const Network& baseline, const Network& cae, HeadInit init, std::uint64_t seed) {
  const SplitModel split = split_model(baseline.spec());
  for (std::size_t i = 0; i < split.split_index; ++i) {
    if (i >= cae.spec().layers.size() || !(cae.spec().layers[i] == split.encoder.layers[i]) ||
        cae.spec().input != baseline.spec().input) {
      throw ValidationError("assembly: the CAE encoder does not match the baseline feature extractor at layer " +
                            std::to_string(i));
    }
  }
  Network model(baseline.spec(), seed);
  model.copy_layers_from(cae, 0, 0, split.split_index);
  if (init == HeadInit::from_baseline) {
    model.copy_layers_from(baseline, split.split_index, split.split_index,
                           baseline.layer_count() - split.split_index);
  }
  model.freeze_prefix(split.split_index);
  return model;
}

AssembleOutput Pipeline::assemble(std::uint64_t seed, TargetMode mode) {
  require("cae", seed, mode, [&] { cae(seed, mode); });
  if (cfg_.head_init == HeadInit::from_baseline) require("baseline", seed, mode, [&] { baseline(seed); });
  AssembleOutput out;
  out.info = prepare("assemble", seed, mode);
  if (!out.info.reused) {
    const Network base = load_checkpoint(locate("baseline", seed, mode).dir / "model.ckpt");
    const Network cae_net = load_checkpoint(locate("cae", seed, mode).dir / "model.ckpt");
    const SplitModel split = split_model(base.spec());
    const Network model = assemble_model(base, cae_net, cfg_.head_init, seed + 2000003u);
    out.split_index = split.split_index;
    out.baseline_parameters = count_parameters(base.spec());
    out.encoder_parameters = count_parameters(split.encoder);
    out.head_parameters = count_parameters(split.head);
    out.encodenet_parameters = model.parameter_count();
    if (out.encodenet_parameters != out.baseline_parameters ||
        out.encoder_parameters + out.head_parameters != out.baseline_parameters) {
      throw ValidationError("assembly: parameter parity violated (" + std::to_string(out.encodenet_parameters) +
                            " vs baseline " + std::to_string(out.baseline_parameters) + ")");
    }
    note("[assemble seed " + std::to_string(seed) + "] " + std::to_string(out.encodenet_parameters) +
         " parameters, encoder layers [0," + std::to_string(out.split_index) + ") frozen, head " +
         std::string(to_string(cfg_.head_init)));
    save_checkpoint(out.info.dir / "model.ckpt", model);
    write_json(out.info.dir / "assembly.json", {{"split_index", out.split_index},
                                                {"baseline_parameters", out.baseline_parameters},
                                                {"encodenet_parameters", out.encodenet_parameters},
                                                {"encoder_parameters", out.encoder_parameters},
                                                {"head_parameters", out.head_parameters},
                                                {"head_init", to_string(cfg_.head_init)},
                                                {"cae_stage", locate("cae", seed, mode).hash}});
    finish(out.info, seed, mode, {"model.ckpt", "assembly.json"});
    return out;
  }
  const json a = read_json(out.info.dir / "assembly.json");
  out.split_index = a.at("split_index").get<std::size_t>();
  out.baseline_parameters = a.at("baseline_parameters").get<std::size_t>();
  out.encodenet_parameters = a.at("encodenet_parameters").get<std::size_t>();
  out.encoder_parameters = a.at("encoder_parameters").get<std::size_t>();
  out.head_parameters = a.at("head_parameters").get<std::size_t>();
  return out;
}

HeadOutput Pipeline::head(std::uint64_t seed, TargetMode mode) {
  require("assemble", seed, mode, [&] { assemble(seed, mode); });
  HeadOutput out;
  out.info = prepare("head", seed, mode);
  if (out.info.reused) {
    out.record = RunRecord::read(out.info.dir / "record.json");
    out.encoder_unchanged = out.record.extra.value("encoder_unchanged", false);
    return out;
  }
  const AssembleOutput asm_out = assemble(seed, mode);
  Network model = load_checkpoint(locate("assemble", seed, mode).dir / "model.ckpt");
  const auto before = layer_snapshot(model, asm_out.split_index);
  const std::string tag = "[head seed " + std::to_string(seed) + " " + std::string(to_string(mode)) + "]";
  TrainConfig tc = cfg_.head;
  tc.seed = seed;
  tc.frozen_prefix = asm_out.split_index;
  out.record = train_classifier(model, data(), tc, epoch_logger(log_, tag, 10));
  out.encoder_unchanged = layer_snapshot(model, asm_out.split_index) == before;
  if (!out.encoder_unchanged) throw StateError("frozen encoder parameters changed during head training");
  out.record.stage = "head";
  out.record.extra["target_mode"] = to_string(mode);
  out.record.extra["head_init"] = to_string(cfg_.head_init);
  out.record.extra["encoder_unchanged"] = true;
  out.record.extra["encoder_tensors_checked"] = before.size();
  save_checkpoint(out.info.dir / "model.ckpt", model);
  out.record.write(out.info.dir, "record");
  finish(out.info, seed, mode, {"model.ckpt", "record.json", "record.csv"});
  return out;
}

AblationResult Pipeline::ablate(const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  static constexpr TargetMode kModes[] = {TargetMode::same_image, TargetMode::representative_unclustered,
                                          TargetMode::representative_clustered};
  AblationResult res;
  res.seeds = seeds;
  res.head_init = std::string(to_string(cfg_.head_init));
  res.rows = {{"baseline", {}, {}, {}},
              {"same_image", {}, {}, {}},
              {"representative_unclustered", {}, {}, {}},
              {"representative_clustered", {}, {}, {}}};
  bool frozen_all = true, audits_ok = true, parity_all = true;
  json per_seed = json::array();

  for (const auto seed : seeds) {
    json sj = {{"seed", seed}};
    std::optional<double> base_acc;
    try {
      base_acc = baseline(seed).record.final_metric;
    } catch (const Error& e) {
      res.rows[0].failures.push_back("seed " + std::to_string(seed) + ": " + e.what());
    }
    res.rows[0].accuracy.push_back(base_acc);
    std::optional<double> lu, lc;
    for (std::size_t m = 0; m < 3; ++m) {
      const TargetMode mode = kModes[m];
      auto& row = res.rows[m + 1];
      if (!base_acc) {
        row.accuracy.push_back(std::nullopt);
        row.failures.push_back("seed " + std::to_string(seed) + ": baseline failed");
        continue;
      }
      try {
        const CaeOutput c = cae(seed, mode);
        const AssembleOutput a = assemble(seed, mode);
        const HeadOutput h = head(seed, mode);
        row.accuracy.push_back(h.record.final_metric);
        frozen_all = frozen_all && h.encoder_unchanged;
        audits_ok = audits_ok && c.audit.class_preserved == c.audit.pairs &&
                    (mode == TargetMode::same_image || c.audit.ok());
        parity_all = parity_all && a.encodenet_parameters == a.baseline_parameters;
        if (mode == TargetMode::representative_unclustered) lu = c.record.final_metric;
        if (mode == TargetMode::representative_clustered) lc = c.record.final_metric;
        sj[std::string(to_string(mode))] = {{"cae_stage", c.info.dir.filename().string()},
                                            {"head_stage", h.info.dir.filename().string()},
                                            {"cae_loss", c.record.final_metric},
                                            {"accuracy", h.record.final_metric}};
      } catch (const Error& e) {
        row.accuracy.push_back(std::nullopt);
        row.failures.push_back("seed " + std::to_string(seed) + ": " + e.kind() + ": " + e.what());
        note("[ablate] " + row.name + " seed " + std::to_string(seed) + " failed: " + e.what());
      }
    }
    res.loss_unclustered.push_back(lu);
    res.loss_clustered.push_back(lc);
    per_seed.push_back(sj);
  }
  for (auto& r : res.rows) r.median = median(r.accuracy);
  res.median_loss_unclustered = median(res.loss_unclustered);
  res.median_loss_clustered = median(res.loss_clustered);

  const auto& mb = res.rows[0].median;
  const auto& ms = res.rows[1].median;
  const auto& mu = res.rows[2].median;
  const auto& mc = res.rows[3].median;
  json checks;
  checks["same_image_below_baseline"] = mb && ms ? json(*ms < *mb) : json(nullptr);
  checks["clustered_above_baseline_by_0.5pp"] = mb && mc ? json(*mc - *mb >= 0.005) : json(nullptr);
  checks["full_ordering_holds"] = mb && ms && mu && mc ? json(*ms < *mb && *mb < *mu && *mu < *mc) : json(nullptr);
  if (res.median_loss_unclustered && res.median_loss_clustered && *res.median_loss_unclustered > 0.0) {
    const double drop = 1.0 - *res.median_loss_clustered / *res.median_loss_unclustered;
    checks["reconstruction_loss_drop"] = drop;
    checks["reconstruction_drop_at_least_20pct"] = drop >= 0.2;
  } else {
    checks["reconstruction_loss_drop"] = nullptr;
    checks["reconstruction_drop_at_least_20pct"] = nullptr;
  }
  checks["encoder_frozen_every_run"] = frozen_all;
  checks["pair_audits_ok"] = audits_ok;
  checks["parameter_parity_every_run"] = parity_all;
  checks["per_seed"] = per_seed;
  res.checks = checks;
  return res;
}

}  // namespace encodenet
