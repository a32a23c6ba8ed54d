#include "encodenet/network.hpp"

#include <cmath>
#include <random>

namespace encodenet {

namespace {

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
  return Tensor::uniform(std::move(shape), -bound, bound, rng);
}

std::string param_name(std::size_t layer, LayerKind kind, const std::string& leaf) {
  return "L" + std::to_string(layer) + "." + std::string(to_string(kind)) + "." + leaf;
}

void add_conv(std::vector<Parameter>& params, std::size_t layer, LayerKind kind, const std::string& prefix,
              std::size_t filters, std::size_t channels, std::size_t kernel, std::mt19937_64& rng) {
  params.push_back({param_name(layer, kind, prefix + "weight"),
                    kaiming_uniform(Shape{filters, channels, kernel, kernel}, channels * kernel * kernel, rng), true});
  params.push_back({param_name(layer, kind, prefix + "bias"), Tensor(Shape{filters}), true});
}

void add_norm(std::vector<Parameter>& params, std::vector<BatchNormStats<float>>& norms, std::size_t layer,
              LayerKind kind, const std::string& prefix, std::size_t channels) {
  params.push_back({param_name(layer, kind, prefix + "gamma"), Tensor(Shape{channels}, 1.0f), true});
  params.push_back({param_name(layer, kind, prefix + "beta"), Tensor(Shape{channels}), true});
  norms.emplace_back(channels);
}

bool has_projection(const LayerSpec& l, FeatureShape in) { return l.stride != 1 || in.channels != l.filters; }

}  // namespace

Network::Network(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  validate_model_spec(spec_);
  shapes_ = infer_shapes(spec_);
  layers_.resize(spec_.layers.size());
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    const FeatureShape in = input_shape_of(i);
    auto& st = layers_[i];
    const auto c = static_cast<std::size_t>(in.channels);
    switch (l.kind) {
      case LayerKind::conv:
        add_conv(st.params, i, l.kind, "", static_cast<std::size_t>(l.filters), c, static_cast<std::size_t>(l.kernel), rng);
        break;
      case LayerKind::batchnorm:
        add_norm(st.params, st.norms, i, l.kind, "", c);
        break;
      case LayerKind::dense: {
        const auto d = static_cast<std::size_t>(in.numel());
        const auto u = static_cast<std::size_t>(l.units);
        st.params.push_back({param_name(i, l.kind, "weight"), kaiming_uniform(Shape{d, u}, d, rng), true});
        st.params.push_back({param_name(i, l.kind, "bias"), Tensor(Shape{u}), true});
        break;
      }
      case LayerKind::resblock: {
        const auto f = static_cast<std::size_t>(l.filters);
        add_conv(st.params, i, l.kind, "conv1.", f, c, 3, rng);
        add_norm(st.params, st.norms, i, l.kind, "bn1.", f);
        add_conv(st.params, i, l.kind, "conv2.", f, f, 3, rng);
        add_norm(st.params, st.norms, i, l.kind, "bn2.", f);
        if (has_projection(l, in)) {
          add_conv(st.params, i, l.kind, "proj.", f, c, 1, rng);
          add_norm(st.params, st.norms, i, l.kind, "projbn.", f);
        }
        break;
      }
      default:
        break;
    }
  }
}

FeatureShape Network::input_shape_of(std::size_t layer) const {
  return layer == 0 ? spec_.input : shapes_.at(layer - 1);
}

Var Network::run_layer(Tape<float>& tape, std::size_t index, Var x, Mode mode, std::vector<Binding>& bound) {
  const auto& l = spec_.layers[index];
  auto& st = layers_[index];
  const bool frozen = index < frozen_;
  const Mode m = frozen ? Mode::eval : mode;

  std::vector<Var> p;
  p.reserve(st.params.size());
  for (auto& param : st.params) {
    if (!frozen && param.trainable && mode == Mode::train) {
      const Var v = tape.parameter(param.value);
      bound.push_back({&param, v});
      p.push_back(v);
    } else {
      p.push_back(tape.constant(param.value));
    }
  }

  switch (l.kind) {
    case LayerKind::conv:
      return ops::conv2d(tape, x, p[0], p[1], static_cast<std::size_t>(l.stride), l.padding);
    case LayerKind::batchnorm:
      return ops::batchnorm2d(tape, x, p[0], p[1], st.norms[0], m);
    case LayerKind::relu:
      return ops::relu(tape, x);
    case LayerKind::sigmoid:
      return ops::sigmoid(tape, x);
    case LayerKind::maxpool:
      return ops::maxpool2x2(tape, x);
    case LayerKind::globalavgpool:
      return ops::global_avg_pool(tape, x);
    case LayerKind::upsample:
      return ops::upsample_nearest2x(tape, x);
    case LayerKind::flatten:
      return ops::flatten(tape, x);
    case LayerKind::dense: {
      Var in = x;
      if (tape.value(x).rank() != 2) in = ops::flatten(tape, x);
      return ops::dense(tape, in, p[0], p[1]);
    }
    case LayerKind::softmax: {
      Var in = x;
      if (tape.value(x).rank() != 2) in = ops::flatten(tape, x);
      return ops::softmax(tape, in);
    }
    case LayerKind::resblock: {
      const auto s = static_cast<std::size_t>(l.stride);
      Var h = ops::conv2d(tape, x, p[0], p[1], s, Padding::same);
      h = ops::batchnorm2d(tape, h, p[2], p[3], st.norms[0], m);
      h = ops::relu(tape, h);
      h = ops::conv2d(tape, h, p[4], p[5], 1, Padding::same);
      h = ops::batchnorm2d(tape, h, p[6], p[7], st.norms[1], m);
      Var shortcut = x;
      if (st.params.size() > 8) {
        shortcut = ops::conv2d(tape, x, p[8], p[9], s, Padding::same);
        shortcut = ops::batchnorm2d(tape, shortcut, p[10], p[11], st.norms[2], m);
      }
      return ops::relu(tape, ops::add(tape, h, shortcut));
    }
  }
  throw StateError("unhandled layer kind");
}

Network::ForwardResult Network::forward(Tape<float>& tape, Var input, const ForwardOptions& options) {
  std::size_t end = options.end == npos ? layers_.size() : options.end;
  if (options.begin > end || end > layers_.size()) throw ValidationError("forward: invalid layer range");
  if (options.logits && end == layers_.size() && end > options.begin &&
      spec_.layers[end - 1].kind == LayerKind::softmax) {
    --end;
  }
  ForwardResult result;
  Var x = input;
  for (std::size_t i = options.begin; i < end; ++i) x = run_layer(tape, i, x, options.mode, result.trainable);
  result.output = x;
  return result;
}

Tensor Network::infer(const Tensor& input, std::size_t begin, std::size_t end, bool logits, std::size_t batch_size) {
  const std::size_t n = input.dim(0);
  std::vector<float> out;
  Shape out_shape;
  Tape<float> tape;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min(batch_size, n - start);
    tape.reset();
    const Var x = tape.constant(slice_rows(input, start, count));
    ForwardOptions opt;
    opt.mode = Mode::eval;
    opt.begin = begin;
    opt.end = end;
    opt.logits = logits;
    const auto r = forward(tape, x, opt);
    const auto& y = tape.value(r.output);
    if (out_shape.empty()) {
      out_shape = y.shape();
      out.reserve(n * (y.size() / count));
    }
    out.insert(out.end(), y.data().begin(), y.data().end());
  }
  out_shape[0] = n;
  return Tensor(std::move(out_shape), std::move(out));
}

std::vector<Parameter*> Network::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_) {
    for (auto& p : l.params) out.push_back(&p);
  }
  return out;
}

std::vector<const Parameter*> Network::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& l : layers_) {
    for (const auto& p : l.params) out.push_back(&p);
  }
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

void Network::freeze_prefix(std::size_t layers) {
  if (layers > layers_.size()) {
    throw ValidationError("cannot freeze " + std::to_string(layers) + " layers of a " +
                          std::to_string(layers_.size()) + "-layer network");
  }
  frozen_ = layers;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto& p : layers_[i].params) p.trainable = i >= layers;
  }
}

void Network::copy_prefix_from(const Network& source, std::size_t count) {
  if (source.spec_.input != spec_.input) {
    throw ValidationError("copy: input shape " + to_string(source.spec_.input) + " != " + to_string(spec_.input));
  }
  copy_layers_from(source, 0, 0, count);
}

void Network::copy_layers_from(const Network& source, std::size_t source_begin, std::size_t dest_begin,
                               std::size_t count) {
  if (source_begin + count > source.layers_.size() || dest_begin + count > layers_.size()) {
    throw ValidationError("copy: layer range out of bounds");
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t s = source_begin + i, d = dest_begin + i;
    if (!(source.spec_.layers[s] == spec_.layers[d]) || source.input_shape_of(s) != input_shape_of(d)) {
      throw ValidationError("copy: layer " + std::to_string(s) + " of '" + source.spec_.name + "' does not match layer " +
                            std::to_string(d) + " of '" + spec_.name + "'");
    }
    auto& dst = layers_[d];
    const auto& src = source.layers_[s];
    for (std::size_t j = 0; j < dst.params.size(); ++j) dst.params[j].value = src.params[j].value;
    dst.norms = src.norms;
  }
}

std::vector<NamedTensor> Network::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (const auto& p : layers_[i].params) out.push_back({p.name, p.value});
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (std::size_t j = 0; j < layers_[i].norms.size(); ++j) {
      const std::string base = "L" + std::to_string(i) + ".stats" + std::to_string(j) + ".";
      out.push_back({base + "running_mean", layers_[i].norms[j].running_mean});
      out.push_back({base + "running_var", layers_[i].norms[j].running_var});
    }
  }
  return out;
}

void Network::load_state(const std::vector<NamedTensor>& tensors) {
  const auto expected = state();
  if (tensors.size() != expected.size()) {
    throw ValidationError("state has " + std::to_string(tensors.size()) + " tensors, network expects " +
                          std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != expected[i].name || tensors[i].value.shape() != expected[i].value.shape()) {
      throw ValidationError("state tensor '" + tensors[i].name + "' " + shape_string(tensors[i].value.shape()) +
                            " does not match '" + expected[i].name + "' " + shape_string(expected[i].value.shape()));
    }
  }
  std::size_t k = 0;
  for (auto& l : layers_) {
    for (auto& p : l.params) p.value = tensors[k++].value;
  }
  for (auto& l : layers_) {
    for (auto& s : l.norms) {
      s.running_mean = tensors[k++].value;
      s.running_var = tensors[k++].value;
    }
  }
}

}  // namespace encodenet
