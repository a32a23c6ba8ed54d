// Acceptance run: one PASS/FAIL line per criterion. Exit status is 0 only when
// every criterion passes or is listed with --expect-fail. The desk-scale criteria share one run directory, so
// a second invocation reuses finished stages.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "encodenet/checkpoint.hpp"
#include "encodenet/clustering.hpp"
#include "encodenet/entropy_rank.hpp"
#include "encodenet/model_spec.hpp"
#include "encodenet/pipeline.hpp"
#include "support/gradcheck.hpp"
#include "support/kmeans_oracle.hpp"

using namespace encodenet;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTolerance = 1e-5;
constexpr double kGradStep = 1e-4;
constexpr int kGradTrials = 20;
constexpr double kGradBudget = 120.0;
constexpr double kLossDrop = 0.20;
constexpr double kLossBudget = 30 * 60.0;
constexpr double kAccuracyMargin = 0.005;
constexpr double kAblationBudget = 90 * 60.0;
constexpr double kCentroidTolerance = 1e-5;
constexpr double kKMeansBudget = 60.0;
constexpr std::size_t kOracleMaxPoints = 100;
constexpr int kKMeansInstances = 200;
constexpr double kEntropyTolerance = 1e-12;
constexpr int kEntropyDistributions = 1000;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Line {
  int id;
  std::string title;
  bool pass;
  std::string detail;
};

std::vector<Line> lines;

void report(int id, const std::string& title, bool pass, const std::string& detail) {
  lines.push_back({id, title, pass, detail});
  std::printf("[%s] C%d %s: %s\n", pass ? "PASS" : "FAIL", id, title.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v, const char* f = "%.4f") {
  return v ? fmt(f, *v) : std::string("n/a");
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  return json::parse(in);
}

// Own CSV readers so the audits do not share parsing code with the pipeline.
std::vector<std::pair<std::size_t, std::size_t>> read_pairs(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream s(line);
    std::string a, b;
    std::getline(s, a, ',');
    std::getline(s, b, ',');
    out.emplace_back(std::stoul(a), std::stoul(b));
  }
  return out;
}

struct Scored {
  int label = 0;
  int cluster = 0;
  double entropy = 0.0;
};

std::map<std::size_t, Scored> read_scores(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  std::string line;
  std::getline(in, line);
  std::map<std::size_t, Scored> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream s(line);
    std::string f[5];
    for (auto& x : f) std::getline(s, x, ',');
    out[std::stoul(f[0])] = {std::stoi(f[1]), std::stoi(f[2]), std::stod(f[3])};
  }
  return out;
}

// Bitwise comparison of every tensor in layers [0, layers).
bool prefix_bit_identical(const Network& a, const Network& b, std::size_t layers, std::size_t& compared) {
  auto prefix = [layers](const Network& n) {
    std::vector<NamedTensor> out;
    for (auto& t : n.state()) {
      const auto dot = t.name.find('.');
      if (std::stoul(t.name.substr(1, dot - 1)) < layers) out.push_back(std::move(t));
    }
    return out;
  };
  const auto pa = prefix(a), pb = prefix(b);
  if (pa.size() != pb.size()) return false;
  compared = pa.size();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || pa[i].value.shape() != pb[i].value.shape()) return false;
    if (std::memcmp(pa[i].value.data().data(), pb[i].value.data().data(), pa[i].value.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

void criterion_gradcheck() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240601);
  double worst = 0.0;
  std::string worst_op;
  std::size_t cases = 0, entries = 0;
  for (const auto& c : gradcheck::all_cases()) {
    for (int trial = 0; trial < kGradTrials; ++trial) {
      const auto r = gradcheck::check(c, rng, kGradStep);
      ++cases;
      entries += r.checked;
      if (r.max_relative_error >= worst) {
        worst = r.max_relative_error;
        worst_op = c.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  report(1, "gradient check", worst < kGradTolerance && secs < kGradBudget,
         std::to_string(cases) + " cases, " + std::to_string(entries) + " entries, max rel err " +
             fmt("%.3g", worst) + " (" + worst_op + ") < " + fmt("%g", kGradTolerance) + ", " + fmt("%.1f", secs) +
             " s < " + fmt("%.0f", kGradBudget) + " s");
}

bool parity_specs(std::string& detail) {
  bool ok = true;
  std::vector<fs::path> specs;
  for (const auto& e : fs::directory_iterator(fs::path(ENCODENET_SOURCE_DIR) / "configs" / "specs")) {
    if (e.path().extension() == ".spec") specs.push_back(e.path());
  }
  std::sort(specs.begin(), specs.end());
  for (const auto& p : specs) {
    const ModelSpec spec = load_model_spec(p);
    const SplitModel split = split_model(spec);
    const ModelSpec ae = autoencoder_spec(split.encoder, synthesize_decoder(split.encoder, spec.input));
    const Network base(spec, 1), cae(ae, 2);
    const std::size_t assembled = assemble_model(base, cae, HeadInit::scratch, 3).parameter_count();
    const std::size_t counted = count_parameters(spec);
    ok = ok && assembled == counted && base.parameter_count() == counted;
    detail += p.filename().string() + " " + std::to_string(assembled) + "/" + std::to_string(counted) + "; ";
  }
  return ok && !specs.empty();
}

bool kmeans_random(std::string& detail) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(99);
  int passed = 0;
  double worst = 0.0;
  for (int inst = 0; inst < kKMeansInstances; ++inst) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, kOracleMaxPoints)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const int k = std::uniform_int_distribution<int>(1, static_cast<int>(std::min<std::size_t>(n, 8)))(rng);
    const int blobs = std::uniform_int_distribution<int>(1, 5)(rng);
    std::normal_distribution<float> noise(0.f, 0.3f);
    std::uniform_real_distribution<float> centre(-3.f, 3.f);
    std::vector<float> centres(static_cast<std::size_t>(blobs) * d);
    for (auto& c : centres) c = centre(rng);
    std::vector<float> v(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t b = i % static_cast<std::size_t>(blobs);
      for (std::size_t j = 0; j < d; ++j) v[i * d + j] = centres[b * d + j] + noise(rng);
    }
    const FeatureMatrix f(n, d, std::move(v));
    const auto model = kmeans(f, k, rng());
    const auto verdict = kmeans_oracle::check(f, model);
    worst = std::max(worst, verdict.centroid_error);
    passed += verdict.ok(kCentroidTolerance) ? 1 : 0;
  }
  const double secs = seconds_since(t0);
  detail = std::to_string(passed) + "/" + std::to_string(kKMeansInstances) + " instances (<= " +
             std::to_string(kOracleMaxPoints) + " points) monotone, fixed point, centroid err " + fmt("%.2g", worst) +
             " <= " + fmt("%g", kCentroidTolerance) + ", " + fmt("%.2f", secs) + " s < 60 s";
  return passed == kKMeansInstances && secs < kKMeansBudget;
}

void criterion_elbow() {
  const std::vector<int> ks = {1, 2, 3, 4, 5, 6};
  const std::vector<double> curve = {100, 40, 15, 13, 12, 11};
  const std::vector<double> linear = {60, 50, 40, 30, 20, 10};
  const auto e = elbow_from_curve(ks, curve);
  const auto flat = elbow_from_curve(ks, linear);
  report(6, "elbow oracle", e.k == 3 && !e.degenerate && flat.k == 1 && flat.degenerate,
         "[100,40,15,13,12,11] -> k=" + std::to_string(e.k) + "; linear curve -> k=" + std::to_string(flat.k) +
             (flat.degenerate ? " flagged degenerate" : " NOT flagged"));
}

void criterion_entropy() {
  bool ok = true;
  double worst_uniform = 0.0;
  for (int c = 2; c <= 100; ++c) {
    for (int hot = 0; hot < c; hot += std::max(1, c / 4)) {
      std::vector<double> p(static_cast<std::size_t>(c), 0.0);
      p[static_cast<std::size_t>(hot)] = 1.0;
      ok = ok && prediction_entropy(p) == 0.0;
    }
    const std::vector<double> u(static_cast<std::size_t>(c), 1.0 / c);
    worst_uniform = std::max(worst_uniform, std::abs(prediction_entropy(u) - std::log(static_cast<double>(c))));
  }
  ok = ok && worst_uniform <= kEntropyTolerance;

  std::mt19937_64 rng(4242);
  std::gamma_distribution<double> gamma(0.5, 1.0);
  int bounded = 0, invariant = 0;
  for (int i = 0; i < kEntropyDistributions; ++i) {
    const int c = std::uniform_int_distribution<int>(2, 20)(rng);
    std::vector<double> p(static_cast<std::size_t>(c));
    for (auto& x : p) x = gamma(rng);
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& x : p) x /= s;
    const double h = prediction_entropy(p);
    bounded += (h >= 0.0 && h <= std::log(static_cast<double>(c)) + kEntropyTolerance) ? 1 : 0;
    std::shuffle(p.begin(), p.end(), rng);
    invariant += std::abs(prediction_entropy(p) - h) <= kEntropyTolerance ? 1 : 0;
  }
  ok = ok && bounded == kEntropyDistributions && invariant == kEntropyDistributions;
  report(7, "entropy exactness", ok,
         std::string("one-hot = 0 exactly, |H(uniform C) - ln C| max ") + fmt("%.2g", worst_uniform) + ", bounds " +
             std::to_string(bounded) + "/" + std::to_string(kEntropyDistributions) + ", permutation " +
             std::to_string(invariant) + "/" + std::to_string(kEntropyDistributions));
}

// Every rank stage: class preservation and cell minimality recomputed from
// the stage's own CSVs, plus one pair per training image.
bool audit_rank_stage(const fs::path& dir, std::size_t train_size, std::string& why) {
  const auto scores = read_scores(dir / "entropy.csv");
  const auto pairs = read_pairs(dir / "pairs.csv");
  std::map<std::pair<int, int>, std::pair<double, std::size_t>> best;
  for (const auto& [i, s] : scores) {
    auto [it, fresh] = best.try_emplace({s.label, s.cluster}, s.entropy, i);
    if (!fresh && (s.entropy < it->second.first || (s.entropy == it->second.first && i < it->second.second))) {
      it->second = {s.entropy, i};
    }
  }
  std::vector<int> seen(train_size, 0);
  for (const auto& [in, target] : pairs) {
    if (in >= train_size || !scores.contains(in) || !scores.contains(target)) {
      why = "pair index out of range";
      return false;
    }
    ++seen[in];
    const Scored& a = scores.at(in);
    const Scored& b = scores.at(target);
    if (a.label != b.label) {
      why = "class not preserved for input " + std::to_string(in);
      return false;
    }
    if (best.at({a.label, a.cluster}).second != target) {
      why = "target of input " + std::to_string(in) + " is not its cell's minimum";
      return false;
    }
  }
  for (std::size_t i = 0; i < train_size; ++i) {
    if (seen[i] != 1) {
      why = "image " + std::to_string(i) + " appears " + std::to_string(seen[i]) + " times as input";
      return false;
    }
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"encodenet acceptance run"};
  std::string config = std::string(ENCODENET_SOURCE_DIR) + "/configs/desk.toml";
  std::string run_dir;
  std::vector<std::string> overrides;
  bool quiet = false;
  std::vector<int> expected;
  app.add_option("--config", config, "pipeline config")->check(CLI::ExistingFile);
  app.add_option("--run-dir", run_dir, "directory for pipeline stages")->required();
  app.add_option("--set", overrides, "config override key=value");
  app.add_flag("--quiet", quiet, "no per-epoch progress");
  app.add_option("--expect-fail", expected, "criterion known to fail at this scale; still reported as FAIL")
      ->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  tune_allocator();
  const auto started = Clock::now();
  criterion_gradcheck();

  std::string parity_detail;
  const bool parity_ok = parity_specs(parity_detail);

  const PipelineConfig cfg = PipelineConfig::load(config, overrides);
  Pipeline::Logger log;
  if (!quiet) log = [](const std::string& m) { std::cerr << m << std::endl; };
  Pipeline p(cfg, run_dir, false, true, log);
  const auto& seeds = cfg.seeds;
  constexpr auto kU = TargetMode::representative_unclustered;
  constexpr auto kC = TargetMode::representative_clustered;
  constexpr auto kS = TargetMode::same_image;

  // Desk phase one: everything criterion 3 needs. Wall time is measured for
  // stages run here and taken from the records of reused stages.
  double loss_secs = 0.0;
  {
    const auto t0 = Clock::now();
    double reused = 0.0;
    for (const auto seed : seeds) {
      const auto b = p.baseline(seed);
      if (b.info.reused) reused += b.record.wall_seconds;
      for (const auto mode : {kU, kC}) {
        const auto c = p.cae(seed, mode);
        if (c.info.reused) reused += c.record.wall_seconds;
      }
    }
    loss_secs = seconds_since(t0) + reused;
  }

  // Phase two: the rest of the ablation.
  double ablation_secs = loss_secs;
  AblationResult ab;
  {
    const auto t0 = Clock::now();
    double reused = 0.0;
    for (const auto seed : seeds) {
      const auto c = p.locate("cae", seed, kS);
      if (fs::exists(c.dir / "stage.json")) reused += RunRecord::read(c.dir / "record.json").wall_seconds;
      for (const auto mode : {kS, kU, kC}) {
        const auto h = p.locate("head", seed, mode);
        if (fs::exists(h.dir / "stage.json")) reused += RunRecord::read(h.dir / "record.json").wall_seconds;
      }
    }
    ab = p.ablate(seeds);
    ablation_secs += seconds_since(t0) + reused;
  }
  std::ofstream(fs::path(run_dir) / "ablation.json") << ab.to_json().dump(2) << '\n';

  // 2: parity on the shipped specs and every assembled run.
  const bool run_parity = ab.checks.value("parameter_parity_every_run", false);
  report(2, "parameter parity", parity_ok && run_parity,
         parity_detail + "every pipeline run " + (run_parity ? "equal" : "NOT equal"));

  // 3: reconstruction loss drop.
  {
    std::string per_seed;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      per_seed += " seed " + std::to_string(seeds[i]) + " " + fmt_opt(ab.loss_unclustered[i], "%.5f") + "->" +
                  fmt_opt(ab.loss_clustered[i], "%.5f") + ";";
    }
    std::optional<double> drop;
    if (ab.median_loss_clustered && ab.median_loss_unclustered && *ab.median_loss_unclustered > 0) {
      drop = 1.0 - *ab.median_loss_clustered / *ab.median_loss_unclustered;
    }
    report(3, "clustering lowers held-out reconstruction loss",
           seeds.size() >= 3 && drop && *drop >= kLossDrop && loss_secs <= kLossBudget,
           "median k=1 " + fmt_opt(ab.median_loss_unclustered, "%.5f") + ", k=" + std::to_string(cfg.clusters.k) +
               " " + fmt_opt(ab.median_loss_clustered, "%.5f") + ", drop " + fmt_opt(drop, "%.3f") + " >= " +
               fmt("%.2f", kLossDrop) + " over " + std::to_string(seeds.size()) + " seeds," + per_seed + " " +
               fmt("%.1f", loss_secs / 60) + " min <= 30 min");
  }

  // 4: ablation direction, with the full ordering reported.
  {
    const auto& mb = ab.rows[0].median;
    const auto& ms = ab.rows[1].median;
    const auto& mu = ab.rows[2].median;
    const auto& mc = ab.rows[3].median;
    const bool below = mb && ms && *ms < *mb;
    const bool above = mb && mc && *mc - *mb >= kAccuracyMargin;
    const bool ordering = mb && ms && mu && mc && *ms < *mb && *mb < *mu && *mu < *mc;
    std::string failures;
    for (const auto& r : ab.rows) {
      for (const auto& f : r.failures) failures += " [" + r.name + " " + f + "]";
    }
    report(4, "ablation direction",
           seeds.size() >= 3 && below && above && ablation_secs <= kAblationBudget,
           "median acc baseline " + fmt_opt(mb) + ", same_image " + fmt_opt(ms) + ", unclustered " + fmt_opt(mu) +
               ", clustered " + fmt_opt(mc) + "; same_image < baseline " + (below ? "yes" : "NO") +
               ", clustered - baseline " + (mb && mc ? fmt("%+.4f", *mc - *mb) : "n/a") + " >= " +
               fmt("%.3f", kAccuracyMargin) + (above ? " yes" : " NO") + "; full ordering " +
               (ordering ? "holds" : "VIOLATED (flagged)") + "; " + fmt("%.1f", ablation_secs / 60) +
               " min <= 90 min" + failures);
  }

  // 5: the random-instance oracle, then every desk cluster model recomputed
  // from the stored baseline and matched against the stored assignments.
  {
    std::string random_detail;
    bool ok = kmeans_random(random_detail);
    std::size_t models = 0;
    double worst = 0.0;
    std::string why;
    for (const auto seed : seeds) {
      for (const auto mode : {kU, kC}) {
        const auto co = p.cluster(seed, mode);
        Network base = load_checkpoint(p.locate("baseline", seed, mode).dir / "model.ckpt");
        const auto& train = p.data().train;
        const FeatureMatrix feats = embed_features(base, train.images);
        const auto dc = cluster_all_classes(feats, train.labels, train.num_classes, cfg.selection_for(mode), seed);
        for (const auto& cc : dc.classes) {
          const auto v = kmeans_oracle::check(feats.select(cc.members), cc.model);
          worst = std::max(worst, v.centroid_error);
          ++models;
          if (!v.ok(kCentroidTolerance)) {
            ok = false;
            why += " seed " + std::to_string(seed) + " class " + std::to_string(cc.label) + " fails oracle;";
          }
        }
        if (dc.cluster_of != co.cluster_of) {
          ok = false;
          why += " seed " + std::to_string(seed) + " recomputed assignments differ from stored;";
        }
      }
    }
    report(5, "k-means oracle", ok,
           random_detail + "; desk runs: " + std::to_string(models) + " per-class models recomputed, centroid err " +
               fmt("%.2g", worst) + why);
  }

  criterion_elbow();
  criterion_entropy();

  // 8: encoder bits in every trained head equal the CAE that produced them.
  {
    bool ok = ab.checks.value("encoder_frozen_every_run", false);
    std::size_t runs = 0, tensors = 0;
    for (const auto seed : seeds) {
      for (const auto mode : {kS, kU, kC}) {
        const auto hd = p.locate("head", seed, mode);
        if (!fs::exists(hd.dir / "model.ckpt")) {
          ok = false;
          continue;
        }
        const Network head = load_checkpoint(hd.dir / "model.ckpt");
        const Network cae = load_checkpoint(p.locate("cae", seed, mode).dir / "model.ckpt");
        const Network assembled = load_checkpoint(p.locate("assemble", seed, mode).dir / "model.ckpt");
        const std::size_t split = split_model(head.spec()).split_index;
        std::size_t n1 = 0, n2 = 0;
        ok = ok && prefix_bit_identical(head, cae, split, n1) && prefix_bit_identical(head, assembled, split, n2);
        tensors += n1;
        ++runs;
      }
    }
    report(8, "frozen encoder", ok && runs == 3 * seeds.size(),
           std::to_string(runs) + " head runs, " + std::to_string(tensors) +
               " encoder tensors bit-identical to the CAE and the assembled model");
  }

  // 9: repeat each seed-1 stage from identical upstream artifacts in a copy
  // of the run directory and compare records and artifact bytes.
  {
    const std::uint64_t seed = seeds.front();
    const fs::path copy = fs::path(run_dir) / "rerun";
    fs::remove_all(copy);
    fs::create_directories(copy);
    fs::copy(fs::path(run_dir) / "stages", copy / "stages", fs::copy_options::recursive);
    Pipeline q(cfg, copy, false, true, log);
    bool ok = true;
    std::string detail;
    for (const char* stage : {"baseline", "cluster", "rank", "cae", "assemble", "head"}) {
      const auto where = q.locate(stage, seed, kC);
      const json before = read_json_file(where.dir / "stage.json");
      std::optional<RunRecord> rec_before;
      if (fs::exists(where.dir / "record.json")) rec_before = RunRecord::read(where.dir / "record.json");
      fs::remove_all(where.dir);
      const std::string s = stage;
      if (s == "baseline") q.baseline(seed);
      if (s == "cluster") q.cluster(seed, kC);
      if (s == "rank") q.rank(seed, kC);
      if (s == "cae") q.cae(seed, kC);
      if (s == "assemble") q.assemble(seed, kC);
      if (s == "head") q.head(seed, kC);
      const json after = read_json_file(where.dir / "stage.json");
      // record.json carries wall time; its series are compared below.
      json a = before.at("artifacts"), b = after.at("artifacts");
      a.erase("record.json");
      b.erase("record.json");
      bool same = a == b;
      if (rec_before) same = same && RunRecord::read(where.dir / "record.json").same_series(*rec_before);
      ok = ok && same;
      detail += std::string(detail.empty() ? "" : "; ") + s + (same ? " identical" : " DIFFERS");
    }
    report(9, "determinism", ok, "seed " + std::to_string(seed) + " rerun: " + detail);
  }

  // 10: pair soundness on every rank stage and every CAE's training pairs.
  {
    bool ok = ab.checks.value("pair_audits_ok", false);
    std::size_t stages = 0, pairs = 0;
    std::string why;
    const std::size_t n = p.data().train.size();
    for (const auto seed : seeds) {
      for (const auto mode : {kU, kC}) {
        const auto rk = p.locate("rank", seed, mode);
        std::string w;
        if (!audit_rank_stage(rk.dir, n, w)) {
          ok = false;
          why += " seed " + std::to_string(seed) + ": " + w + ";";
        }
        const auto used = read_pairs(p.locate("cae", seed, mode).dir / "pairs.csv");
        if (used != read_pairs(rk.dir / "pairs.csv")) {
          ok = false;
          why += " seed " + std::to_string(seed) + ": CAE trained on pairs other than the ranked ones;";
        }
        pairs += used.size();
        ++stages;
      }
      const auto same = read_pairs(p.locate("cae", seed, kS).dir / "pairs.csv");
      for (const auto& [a, b] : same) ok = ok && a == b;
      ok = ok && same.size() == n;
    }
    report(10, "conversion-pair soundness", ok,
           std::to_string(stages) + " rank stages, " + std::to_string(pairs) +
               " pairs class-preserving and cell-minimal, same_image pairs are identities" + why);
  }

  std::sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) { return a.id < b.id; });
  int failed = 0;
  int unexpected = 0;
  std::string known;
  json summary = json::array();
  for (const auto& l : lines) {
    const bool listed = std::find(expected.begin(), expected.end(), l.id) != expected.end();
    failed += l.pass ? 0 : 1;
    unexpected += l.pass || listed ? 0 : 1;
    if (!l.pass && listed) known += (known.empty() ? "C" : ", C") + std::to_string(l.id);
    summary.push_back({{"criterion", l.id},
                       {"title", l.title},
                       {"pass", l.pass},
                       {"expected_failure", listed},
                       {"detail", l.detail}});
  }
  std::ofstream(fs::path(run_dir) / "acceptance.json") << summary.dump(2) << '\n';
  std::printf("acceptance: %zu checks, %d failed", lines.size(), failed);
  if (!known.empty()) std::printf(" (expected: %s)", known.c_str());
  std::printf(", %.1f min\n", seconds_since(started) / 60);
  return unexpected == 0 ? 0 : 1;
}
