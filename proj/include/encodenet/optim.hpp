#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "encodenet/tensor.hpp"

namespace encodenet {

enum class OptimizerKind { sgd, adam };

OptimizerKind parse_optimizer_kind(std::string_view text);
std::string_view to_string(OptimizerKind kind);

// Update rule state. Moment buffers are created lazily on the first step and
// are matched to parameters by position.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.1;
  double weight_decay = 0.0;
  double momentum = 0.0;  // sgd only; 0 disables the velocity buffer
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Tensor> first_moment;   // adam m, or sgd velocity
  std::vector<Tensor> second_moment;  // adam v
  std::uint64_t step = 0;
};

// One update of every parameter. The effective gradient is g + wd * w for
// both rules; Adam applies bias correction with the incremented step count.
void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, OptimizerState& state);

// Cosine decay from base_lr at step 0 to 0 at total_steps.
double cosine_learning_rate(double base_lr, std::uint64_t step, std::uint64_t total_steps);

}  // namespace encodenet
