#include "encodenet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace encodenet {

namespace fs = std::filesystem;
using Pair = std::pair<std::size_t, std::size_t>;

LrSchedule parse_lr_schedule(std::string_view text) {
  if (text == "constant") return LrSchedule::constant;
  if (text == "cosine") return LrSchedule::cosine;
  throw ConfigError("unknown lr schedule '" + std::string(text) + "' (expected constant or cosine)");
}

std::string_view to_string(LrSchedule schedule) { return schedule == LrSchedule::constant ? "constant" : "cosine"; }

void TrainConfig::validate(std::size_t layer_count) const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout fraction must be in [0, 1)");
  if (frozen_prefix && *frozen_prefix > layer_count) {
    throw ConfigError("frozen prefix " + std::to_string(*frozen_prefix) + " exceeds the model's " +
                      std::to_string(layer_count) + " layers");
  }
}

// ---------------------------------------------------------------------------
// RunRecord

nlohmann::json RunRecord::to_json() const {
  return {{"stage", stage},
          {"eval_metric_name", eval_metric_name},
          {"train_loss", train_loss},
          {"eval_metric", eval_metric},
          {"final_metric", final_metric},
          {"parameter_count", parameter_count},
          {"seed", seed},
          {"wall_seconds", wall_seconds},
          {"extra", extra}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  try {
    RunRecord r;
    r.stage = j.at("stage").get<std::string>();
    r.eval_metric_name = j.at("eval_metric_name").get<std::string>();
    r.train_loss = j.at("train_loss").get<std::vector<double>>();
    r.eval_metric = j.at("eval_metric").get<std::vector<double>>();
    r.final_metric = j.at("final_metric").get<double>();
    r.parameter_count = j.at("parameter_count").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    if (j.contains("extra")) r.extra = j.at("extra");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed run record: ") + e.what());
  }
}

std::string RunRecord::to_csv() const {
  std::string out = "epoch,train_loss,eval_metric\n";
  char buf[96];
  for (std::size_t i = 0; i < train_loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i + 1, train_loss[i], i < eval_metric.size() ? eval_metric[i] : 0.0);
    out += buf;
  }
  return out;
}

void RunRecord::write(const fs::path& directory, const std::string& stem) const {
  fs::create_directories(directory);
  std::ofstream js(directory / (stem + ".json"));
  std::ofstream csv(directory / (stem + ".csv"));
  if (!js || !csv) throw IoError("cannot write run record under '" + directory.string() + "'");
  js << to_json().dump(2) << "\n";
  csv << to_csv();
}

RunRecord RunRecord::read(const fs::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open '" + json_path.string() + "'");
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("'" + json_path.string() + "': " + e.what());
  }
}

bool RunRecord::same_series(const RunRecord& other) const {
  return train_loss == other.train_loss && eval_metric == other.eval_metric && final_metric == other.final_metric;
}

// ---------------------------------------------------------------------------
// Helpers

void tune_allocator() {
#ifdef __GLIBC__
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    mallopt(M_TOP_PAD, 64 << 20);
  });
#endif
}

namespace {

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

OptimizerState make_optimizer(const TrainConfig& cfg) {
  OptimizerState st;
  st.kind = cfg.optimizer;
  st.learning_rate = cfg.learning_rate;
  st.weight_decay = cfg.weight_decay;
  st.momentum = cfg.momentum;
  return st;
}

// One optimizer update from the gradients recorded on `tape`.
void apply_update(Tape<float>& tape, const Network::ForwardResult& fr, OptimizerState& opt, const TrainConfig& cfg,
                  std::uint64_t step, std::uint64_t total_steps, std::vector<Tensor>& zero_grads) {
  if (fr.trainable.empty()) return;
  std::vector<Tensor*> params;
  std::vector<const Tensor*> grads;
  params.reserve(fr.trainable.size());
  grads.reserve(fr.trainable.size());
  zero_grads.clear();
  zero_grads.reserve(fr.trainable.size());
  for (const auto& b : fr.trainable) {
    params.push_back(&b.parameter->value);
    const Tensor* g = tape.grad(b.var);
    if (!g) {
      zero_grads.emplace_back(b.parameter->value.shape());
      g = &zero_grads.back();
    }
    grads.push_back(g);
  }
  opt.learning_rate = cfg.schedule == LrSchedule::cosine ? cosine_learning_rate(cfg.learning_rate, step, total_steps)
                                                         : cfg.learning_rate;
  optimizer_step(params, grads, opt);
}

std::uint64_t augment_seed(std::uint64_t seed, std::uint64_t epoch) { return seed * 0x2545F4914F6CDD1DULL + epoch + 1; }

}  // namespace

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double fraction,
                                                                              std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
  if (fraction > 0.0 && n >= 2) held = std::clamp<std::size_t>(held, 1, n - 1);
  else held = 0;
  std::mt19937_64 rng(seed ^ 0x5DEECE66DULL);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(hold.begin(), hold.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(hold)};
}

std::vector<int> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2) throw ShapeError("argmax expects [N, K], got " + shape_string(scores.shape()));
  const std::size_t n = scores.dim(0), k = scores.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (scores[i * k + j] > scores[i * k + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

double evaluate_accuracy(Network& net, const LabeledImageSet& set) {
  if (set.size() == 0) throw ValidationError("cannot evaluate accuracy on an empty set");
  const auto out = output_shape(net.spec());
  if (out.numel() != set.num_classes) {
    throw ValidationError("model emits " + std::to_string(out.numel()) + " scores but the set has " +
                          std::to_string(set.num_classes) + " classes");
  }
  const auto pred = argmax_rows(net.infer(set.images, 0, Network::npos, true).reshaped(Shape{set.size(), static_cast<std::size_t>(out.numel())}));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == set.labels[i];
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

Tensor predict_probabilities(Network& net, const Tensor& images) {
  Tensor logits = net.infer(images, 0, Network::npos, true);
  const std::size_t n = logits.dim(0), k = logits.size() / n;
  Tape<float> tape;
  const Var p = ops::softmax(tape, tape.constant(logits.reshaped(Shape{n, k})));
  return tape.value(p);
}

// ---------------------------------------------------------------------------
// Classifier

RunRecord train_classifier(Network& net, const DataSplit& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  tune_allocator();
  cfg.validate(net.layer_count());
  data.train.validate();
  if (data.train.size() == 0) throw ValidationError("training set is empty");
  const auto start = std::chrono::steady_clock::now();
  const auto out = output_shape(net.spec());
  if (out.numel() != data.train.num_classes) {
    throw ValidationError("model emits " + std::to_string(out.numel()) + " scores but the data has " +
                          std::to_string(data.train.num_classes) + " classes");
  }

  const std::size_t frozen = cfg.frozen_prefix.value_or(0);
  net.freeze_prefix(frozen);
  const bool cache = frozen > 0 && !cfg.hflip;
  const std::size_t begin = cache ? frozen : 0;
  // With a frozen prefix the prefix output never changes, so it is computed
  // once. When every layer is frozen the cache holds the logits.
  const Tensor inputs = cache ? net.infer(data.train.images, 0, frozen, frozen == net.layer_count()) : data.train.images;

  const std::size_t n = data.train.size();
  const auto batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total_steps = cfg.epochs * batches_per_epoch;
  OptimizerState opt = make_optimizer(cfg);
  std::vector<Tensor> zero_grads;
  Tape<float> tape;

  RunRecord rec;
  rec.stage = "classifier";
  rec.eval_metric_name = "test_accuracy";
  rec.seed = cfg.seed;
  rec.parameter_count = net.parameter_count();

  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 aug(augment_seed(cfg.seed, epoch));
    double loss_sum = 0.0;
    for (const auto& idx : make_batches(n, cfg.batch_size, cfg.seed, epoch)) {
      Tensor xb = gather_rows(inputs, idx);
      if (cfg.hflip) random_hflip(xb, aug);
      std::vector<int> yb(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = data.train.labels[idx[i]];

      tape.reset();
      const Var x = tape.constant(std::move(xb));
      Network::ForwardOptions fo;
      fo.mode = Mode::train;
      fo.begin = begin;
      fo.logits = true;
      const auto fr = net.forward(tape, x, fo);
      Var logits = fr.output;
      if (tape.value(logits).rank() != 2) logits = ops::flatten(tape, logits);
      const Var loss = ops::softmax_cross_entropy(tape, logits, yb);
      loss_sum += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(idx.size());
      tape.backward(loss);
      apply_update(tape, fr, opt, cfg, step++, total_steps, zero_grads);
    }
    rec.train_loss.push_back(loss_sum / static_cast<double>(n));
    net.mark_trained();
    rec.eval_metric.push_back(data.test.size() > 0 ? evaluate_accuracy(net, data.test) : 0.0);
    if (on_epoch) on_epoch({epoch + 1, cfg.epochs, rec.train_loss.back(), rec.eval_metric.back()});
  }
  rec.final_metric = rec.eval_metric.back();
  rec.wall_seconds = elapsed_seconds(start);
  return rec;
}

// ---------------------------------------------------------------------------
// Autoencoder

double reconstruction_loss(Network& net, const Tensor& images, std::span<const Pair> pairs) {
  if (pairs.empty()) throw ValidationError("reconstruction loss over zero pairs");
  constexpr std::size_t kChunk = 256;
  double total = 0.0;
  std::size_t count = 0;
  Tape<float> tape;
  for (std::size_t s = 0; s < pairs.size(); s += kChunk) {
    const std::size_t e = std::min(pairs.size(), s + kChunk);
    std::vector<std::size_t> in, tg;
    for (std::size_t i = s; i < e; ++i) {
      in.push_back(pairs[i].first);
      tg.push_back(pairs[i].second);
    }
    const Tensor pred = net.infer(gather_rows(images, in));
    const Tensor target = gather_rows(images, tg);
    if (pred.shape() != target.shape()) {
      throw ShapeError("autoencoder output " + shape_string(pred.shape()) + " does not match target " +
                       shape_string(target.shape()));
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
      total += d * d;
    }
    count += pred.size();
  }
  const double mse = total / static_cast<double>(count);
  if (!std::isfinite(mse)) throw NumericError("reconstruction loss is not finite");
  return mse;
}

RunRecord train_autoencoder(Network& net, const Tensor& images, std::span<const Pair> pairs, const TrainConfig& cfg,
                            const EpochCallback& on_epoch) {
  tune_allocator();
  cfg.validate(net.layer_count());
  if (pairs.empty()) throw ValidationError("autoencoder training needs at least one pair");
  for (const auto& [a, b] : pairs) {
    if (a >= images.dim(0) || b >= images.dim(0)) throw ValidationError("pair index outside the image set");
  }
  const auto start = std::chrono::steady_clock::now();
  net.freeze_prefix(cfg.frozen_prefix.value_or(0));

  auto [train_idx, hold_idx] = holdout_split(pairs.size(), cfg.holdout_fraction, cfg.seed);
  std::vector<Pair> train_pairs, hold_pairs;
  for (const auto i : train_idx) train_pairs.push_back(pairs[i]);
  for (const auto i : hold_idx) hold_pairs.push_back(pairs[i]);
  const std::vector<Pair>& eval_pairs = hold_pairs.empty() ? train_pairs : hold_pairs;

  const std::size_t n = train_pairs.size();
  const auto batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total_steps = cfg.epochs * batches_per_epoch;
  OptimizerState opt = make_optimizer(cfg);
  std::vector<Tensor> zero_grads;
  Tape<float> tape;

  RunRecord rec;
  rec.stage = "autoencoder";
  rec.eval_metric_name = hold_pairs.empty() ? "train_mse" : "heldout_mse";
  rec.seed = cfg.seed;
  rec.parameter_count = net.parameter_count();
  rec.extra["train_pairs"] = train_pairs.size();
  rec.extra["heldout_pairs"] = hold_pairs.size();

  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (const auto& idx : make_batches(n, cfg.batch_size, cfg.seed, epoch)) {
      std::vector<std::size_t> in(idx.size()), tg(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        in[i] = train_pairs[idx[i]].first;
        tg[i] = train_pairs[idx[i]].second;
      }
      tape.reset();
      const Var x = tape.constant(gather_rows(images, in));
      const Var y = tape.constant(gather_rows(images, tg));
      Network::ForwardOptions fo;
      fo.mode = Mode::train;
      const auto fr = net.forward(tape, x, fo);
      const Var loss = ops::mse_loss(tape, fr.output, y);
      loss_sum += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(idx.size());
      tape.backward(loss);
      apply_update(tape, fr, opt, cfg, step++, total_steps, zero_grads);
    }
    rec.train_loss.push_back(loss_sum / static_cast<double>(n));
    net.mark_trained();
    rec.eval_metric.push_back(reconstruction_loss(net, images, eval_pairs));
    if (on_epoch) on_epoch({epoch + 1, cfg.epochs, rec.train_loss.back(), rec.eval_metric.back()});
  }
  rec.final_metric = rec.eval_metric.back();
  rec.wall_seconds = elapsed_seconds(start);
  return rec;
}

}  // namespace encodenet
