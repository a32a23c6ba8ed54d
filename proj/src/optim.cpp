#include "encodenet/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace encodenet {

OptimizerKind parse_optimizer_kind(std::string_view text) {
  if (text == "sgd") return OptimizerKind::sgd;
  if (text == "adam") return OptimizerKind::adam;
  throw ValidationError("unknown optimizer '" + std::string(text) + "' (expected sgd or adam)");
}

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, OptimizerState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape()) {
      throw ShapeError("optimizer: parameter " + std::to_string(i) + " has shape " + shape_string(params[i]->shape()) +
                       " but gradient " + shape_string(grads[i]->shape()));
    }
  }
  const bool needs_first = state.kind == OptimizerKind::adam || state.momentum != 0.0;
  if (needs_first && state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    for (const auto* p : params) state.first_moment.emplace_back(p->shape());
  }
  if (state.kind == OptimizerKind::adam && state.second_moment.size() != params.size()) {
    state.second_moment.clear();
    for (const auto* p : params) state.second_moment.emplace_back(p->shape());
  }

  ++state.step;
  const double lr = state.learning_rate;
  const double wd = state.weight_decay;

  if (state.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i]->data();
      const auto g = grads[i]->data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        double d = static_cast<double>(g[j]) + wd * w[j];
        if (state.momentum != 0.0) {
          auto& v = state.first_moment[i][j];
          v = static_cast<float>(state.momentum * v + d);
          d = v;
        }
        w[j] = static_cast<float>(w[j] - lr * d);
      }
    }
    return;
  }

  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->data();
    const auto g = grads[i]->data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double d = static_cast<double>(g[j]) + wd * w[j];
      m[j] = static_cast<float>(state.beta1 * m[j] + (1.0 - state.beta1) * d);
      v[j] = static_cast<float>(state.beta2 * v[j] + (1.0 - state.beta2) * d * d);
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      w[j] = static_cast<float>(w[j] - lr * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  }
}

double cosine_learning_rate(double base_lr, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps == 0 || step >= total_steps) return step >= total_steps && total_steps > 0 ? 0.0 : base_lr;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

}  // namespace encodenet
