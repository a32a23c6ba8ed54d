#pragma once

// Central finite-difference checks for every differentiable op, in double
// precision. The scalar probed is sum(op(x) * R) with a fixed random R, so
// every output element contributes to the checked gradient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "encodenet/autodiff.hpp"

namespace gradcheck {

using encodenet::Shape;
using encodenet::Tape;
using encodenet::Tensor64;
using encodenet::Var;

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor64>(std::mt19937_64&)> inputs;
  // Builds the op from input vars; may keep per-case state (batchnorm stats).
  std::function<Var(Tape<double>&, const std::vector<Var>&)> build;
  std::vector<bool> differentiable;  // per input; empty = all
};

inline Tensor64 random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor64::uniform(std::move(s), lo, hi, rng);
}

// Values bounded away from 0 (for relu kinks).
inline Tensor64 away_from_zero(Shape s, std::mt19937_64& rng) {
  Tensor64 t = random_tensor(std::move(s), rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data()) v = sign(rng) ? v : -v;
  return t;
}

// A permutation of well-separated values (for max-pool ties).
inline Tensor64 distinct_values(Shape s, std::mt19937_64& rng) {
  Tensor64 t(std::move(s));
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 0.05 * static_cast<double>(i);
  std::shuffle(v.begin(), v.end(), rng);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

struct Result {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries
// whose true gradient is ~0 from dividing noise by noise.
inline constexpr double kRelativeFloor = 1e-3;

inline Result check(const OpCase& c, std::mt19937_64& rng, double h = 1e-4) {
  std::vector<Tensor64> xs = c.inputs(rng);
  auto differentiable = [&](std::size_t i) { return c.differentiable.empty() || c.differentiable[i]; };

  auto forward = [&](const std::vector<Tensor64>& in, Tape<double>& tape, std::vector<Var>& vars) {
    vars.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      vars.push_back(differentiable(i) ? tape.parameter(in[i]) : tape.constant(in[i]));
    }
    return c.build(tape, vars);
  };

  Tape<double> tape;
  std::vector<Var> vars;
  const Var y = forward(xs, tape, vars);
  const Tensor64 r = random_tensor(tape.value(y).shape(), rng);
  const Var loss = encodenet::ops::sum(tape, encodenet::ops::mul(tape, y, tape.constant(r)));
  tape.backward(loss);

  auto probe = [&](const std::vector<Tensor64>& in) {
    Tape<double> t;
    std::vector<Var> v;
    const Var out = forward(in, t, v);
    const auto& yv = t.value(out);
    double s = 0.0;
    for (std::size_t i = 0; i < yv.size(); ++i) s += yv[i] * r[i];
    return s;
  };

  Result res;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!differentiable(i)) continue;
    const Tensor64* g = tape.grad(vars[i]);
    for (std::size_t j = 0; j < xs[i].size(); ++j) {
      const double orig = xs[i][j];
      xs[i][j] = orig + h;
      const double up = probe(xs);
      xs[i][j] = orig - h;
      const double down = probe(xs);
      xs[i][j] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = g ? (*g)[j] : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelativeFloor});
      res.max_relative_error = std::max(res.max_relative_error, std::abs(analytic - numeric) / denom);
      ++res.checked;
    }
  }
  return res;
}

inline std::vector<OpCase> all_cases() {
  namespace ops = encodenet::ops;
  using encodenet::Mode;
  using encodenet::Padding;
  std::vector<OpCase> cases;

  auto conv_case = [&](std::string name, std::size_t stride, Padding pad, std::size_t k) {
    cases.push_back({std::move(name),
                     [k](std::mt19937_64& rng) {
                       return std::vector<Tensor64>{random_tensor({1, 2, 5, 5}, rng), random_tensor({2, 2, k, k}, rng),
                                                    random_tensor({2}, rng)};
                     },
                     [stride, pad](Tape<double>& t, const std::vector<Var>& v) {
                       return ops::conv2d(t, v[0], v[1], v[2], stride, pad);
                     },
                     {}});
  };
  conv_case("conv2d 3x3 same s1", 1, Padding::same, 3);
  conv_case("conv2d 3x3 same s2", 2, Padding::same, 3);
  conv_case("conv2d 3x3 valid s1", 1, Padding::valid, 3);
  conv_case("conv2d 1x1 valid s2", 2, Padding::valid, 1);

  cases.push_back({"upsample_nearest2x",
                   [](std::mt19937_64& rng) { return std::vector<Tensor64>{random_tensor({2, 2, 2, 3}, rng)}; },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::upsample_nearest2x(t, v[0]); },
                   {}});
  cases.push_back({"relu", [](std::mt19937_64& rng) { return std::vector<Tensor64>{away_from_zero({4, 16}, rng)}; },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::relu(t, v[0]); }, {}});
  cases.push_back({"sigmoid",
                   [](std::mt19937_64& rng) { return std::vector<Tensor64>{random_tensor({4, 16}, rng, -3.0, 3.0)}; },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::sigmoid(t, v[0]); }, {}});

  auto bn_case = [&](std::string name, Mode mode) {
    auto stats = std::make_shared<encodenet::BatchNormStats<double>>(3);
    cases.push_back({std::move(name),
                     [stats, mode](std::mt19937_64& rng) {
                       if (mode == Mode::eval) {
                         stats->running_mean = random_tensor({3}, rng);
                         stats->running_var = random_tensor({3}, rng, 0.5, 2.0);
                       }
                       return std::vector<Tensor64>{random_tensor({2, 3, 3, 3}, rng, -2.0, 2.0),
                                                    random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)};
                     },
                     [stats, mode](Tape<double>& t, const std::vector<Var>& v) {
                       return ops::batchnorm2d(t, v[0], v[1], v[2], *stats, mode);
                     },
                     {}});
  };
  bn_case("batchnorm2d train", Mode::train);
  bn_case("batchnorm2d eval", Mode::eval);

  cases.push_back({"maxpool2x2",
                   [](std::mt19937_64& rng) { return std::vector<Tensor64>{distinct_values({2, 2, 4, 4}, rng)}; },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::maxpool2x2(t, v[0]); }, {}});
  cases.push_back({"global_avg_pool",
                   [](std::mt19937_64& rng) { return std::vector<Tensor64>{random_tensor({2, 3, 3, 3}, rng)}; },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::global_avg_pool(t, v[0]); }, {}});
  cases.push_back({"reshape",
                   [](std::mt19937_64& rng) { return std::vector<Tensor64>{random_tensor({2, 3, 4}, rng)}; },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::reshape(t, v[0], Shape{4, 6}); }, {}});
  cases.push_back({"flatten",
                   [](std::mt19937_64& rng) { return std::vector<Tensor64>{random_tensor({2, 2, 2, 3}, rng)}; },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::flatten(t, v[0]); }, {}});
  cases.push_back({"dense",
                   [](std::mt19937_64& rng) {
                     return std::vector<Tensor64>{random_tensor({3, 5}, rng), random_tensor({5, 4}, rng),
                                                  random_tensor({4}, rng)};
                   },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::dense(t, v[0], v[1], v[2]); }, {}});
  cases.push_back({"add",
                   [](std::mt19937_64& rng) {
                     return std::vector<Tensor64>{random_tensor({3, 7}, rng), random_tensor({3, 7}, rng)};
                   },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::add(t, v[0], v[1]); }, {}});
  cases.push_back({"mul",
                   [](std::mt19937_64& rng) {
                     return std::vector<Tensor64>{random_tensor({3, 7}, rng), random_tensor({3, 7}, rng)};
                   },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::mul(t, v[0], v[1]); }, {}});
  cases.push_back({"sum", [](std::mt19937_64& rng) { return std::vector<Tensor64>{random_tensor({4, 9}, rng)}; },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::sum(t, v[0]); }, {}});
  cases.push_back({"softmax",
                   [](std::mt19937_64& rng) { return std::vector<Tensor64>{random_tensor({4, 6}, rng, -2.0, 2.0)}; },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::softmax(t, v[0]); }, {}});
  cases.push_back({"mse_loss",
                   [](std::mt19937_64& rng) {
                     return std::vector<Tensor64>{random_tensor({2, 1, 3, 3}, rng), random_tensor({2, 1, 3, 3}, rng)};
                   },
                   [](Tape<double>& t, const std::vector<Var>& v) { return ops::mse_loss(t, v[0], v[1]); }, {}});
  auto labels = std::make_shared<std::vector<int>>();
  cases.push_back({"softmax_cross_entropy",
                   [labels](std::mt19937_64& rng) {
                     std::uniform_int_distribution<int> cls(0, 5);
                     labels->resize(4);
                     for (auto& l : *labels) l = cls(rng);
                     return std::vector<Tensor64>{random_tensor({4, 6}, rng, -2.0, 2.0)};
                   },
                   [labels](Tape<double>& t, const std::vector<Var>& v) {
                     return ops::softmax_cross_entropy(t, v[0], *labels);
                   },
                   {}});
  return cases;
}

}  // namespace gradcheck
