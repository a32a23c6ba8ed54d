#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "encodenet/autodiff.hpp"
#include "encodenet/model_spec.hpp"

namespace encodenet {

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Executable instance of a ModelSpec: parameters, batchnorm running
// statistics, and a forward pass that records onto a Tape.
//
// Layers marked frozen (a leading prefix) are bound as constants and always
// run in eval mode, so their parameters and running statistics never change.
class Network {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  struct ForwardOptions {
    Mode mode = Mode::train;
    std::size_t begin = 0;
    std::size_t end = npos;
    // Stop before a trailing softmax so callers get logits.
    bool logits = false;
  };

  struct Binding {
    Parameter* parameter;
    Var var;
  };

  struct ForwardResult {
    Var output;
    std::vector<Binding> trainable;  // parameters bound as tape parameters
  };

  // Kaiming-uniform weights, zero biases, gamma=1 and beta=0, all drawn
  // from `seed` in layer order.
  Network(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t layer_count() const noexcept { return spec_.layers.size(); }
  FeatureShape input_shape_of(std::size_t layer) const;
  FeatureShape output_shape_of(std::size_t layer) const { return shapes_.at(layer); }

  ForwardResult forward(Tape<float>& tape, Var input, const ForwardOptions& options);

  // Batched eval-mode inference through layers [begin, end); no gradients.
  Tensor infer(const Tensor& input, std::size_t begin = 0, std::size_t end = npos, bool logits = false,
               std::size_t batch_size = 256);

  std::vector<Parameter>& layer_parameters(std::size_t layer) { return layers_.at(layer).params; }
  const std::vector<Parameter>& layer_parameters(std::size_t layer) const { return layers_.at(layer).params; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

  void freeze_prefix(std::size_t layers);
  std::size_t frozen_prefix() const noexcept { return frozen_; }

  // Copies parameters and running statistics of layers [0, count) from
  // `source`. Both networks must agree on those layers and the input shape.
  void copy_prefix_from(const Network& source, std::size_t count);
  // Copies layers [source_begin, source_begin + count) of `source` into
  // [dest_begin, ...) of this network; layer specs and input shapes must agree.
  void copy_layers_from(const Network& source, std::size_t source_begin, std::size_t dest_begin, std::size_t count);

  // Parameters followed by running statistics, in a fixed order.
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& tensors);

  bool trained() const noexcept { return trained_; }
  void mark_trained() noexcept { trained_ = true; }

 private:
  struct LayerState {
    std::vector<Parameter> params;
    std::vector<BatchNormStats<float>> norms;
  };

  Var run_layer(Tape<float>& tape, std::size_t index, Var x, Mode mode, std::vector<Binding>& bound);

  ModelSpec spec_;
  std::vector<FeatureShape> shapes_;
  std::vector<LayerState> layers_;
  std::size_t frozen_ = 0;
  bool trained_ = false;
};

}  // namespace encodenet
