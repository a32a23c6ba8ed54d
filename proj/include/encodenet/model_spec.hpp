#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "encodenet/autodiff.hpp"

namespace encodenet {

enum class LayerKind {
  conv,
  batchnorm,
  relu,
  sigmoid,
  maxpool,
  globalavgpool,
  upsample,
  flatten,
  dense,
  softmax,
  resblock,
};

std::string_view to_string(LayerKind kind);

// One layer of a sequential network. Only the attributes meaningful for the
// kind are non-zero: conv uses filters/kernel/stride/padding, resblock uses
// filters/stride, dense uses units.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int filters = 0;
  int kernel = 0;
  int stride = 0;
  Padding padding = Padding::same;
  int units = 0;

  static LayerSpec conv(int filters, int kernel, int stride, Padding padding = Padding::same);
  static LayerSpec dense(int units);
  static LayerSpec resblock(int filters, int stride);
  static LayerSpec simple(LayerKind kind);

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Channels x height x width. Vectors after flatten are D x 1 x 1.
struct FeatureShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  int numel() const { return channels * height * width; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

std::string to_string(const FeatureShape& shape);

struct ModelSpec {
  std::string name;
  FeatureShape input;
  std::vector<LayerSpec> layers;
  // Optional decoder channel schedule used by synthesize_decoder.
  std::vector<int> decoder_widths;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Parses the line-oriented model grammar (docs/model_spec_grammar.md) and
// validates the result. Errors carry the offending line number.
ModelSpec parse_model_spec(std::string_view text);
ModelSpec load_model_spec(const std::string& path);
std::string serialize_model_spec(const ModelSpec& spec);

// Structural checks plus shape inference; throws ValidationError/ShapeError.
void validate_model_spec(const ModelSpec& spec);

// Output shape after every layer (same length as spec.layers).
std::vector<FeatureShape> infer_shapes(const ModelSpec& spec);
FeatureShape output_shape(const ModelSpec& spec);

struct SplitModel {
  ModelSpec encoder;  // feature extractor
  ModelSpec head;     // classifier, input = encoder output shape
  std::size_t split_index = 0;
};

// Splits at the first flatten/globalavgpool layer. That layer and everything
// after it form the head.
SplitModel split_model(const ModelSpec& spec);
ModelSpec join_split(const SplitModel& split);

struct DecoderSpec {
  std::vector<LayerSpec> layers;
  FeatureShape output_shape;
};

// Mirrors the encoder's spatial reductions with upsample+conv+batchnorm+relu
// blocks and finishes with conv-to-C + sigmoid. Width overrides (one per
// block) take precedence over encoder.decoder_widths, which takes precedence
// over the halving schedule.
DecoderSpec synthesize_decoder(const ModelSpec& encoder, FeatureShape target, std::span<const int> widths = {});

// encoder layers followed by decoder layers, same input shape.
ModelSpec autoencoder_spec(const ModelSpec& encoder, const DecoderSpec& decoder);

std::size_t count_parameters(const ModelSpec& spec);
std::size_t count_layer_parameters(const LayerSpec& layer, FeatureShape input);

inline constexpr int kDecoderWidthFloor = 16;

}  // namespace encodenet
