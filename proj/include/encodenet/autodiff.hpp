#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "encodenet/tensor.hpp"

namespace encodenet {

// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

// Reverse-mode tape. Values are appended in execution order, so every
// operation's inputs precede it; backward() walks the records once, last to
// first. A tape supports a single backward pass until reset().
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  // Receives the node itself and the gradient of its output; accumulates
  // into the inputs through Tape::accumulate or Tape::grad_buffer.
  using BackwardFn = std::function<void(Tape&, Var self, const TensorT& grad_out)>;

  Var constant(TensorT value) { return push(std::move(value), false, {}); }
  Var parameter(TensorT value) { return push(std::move(value), true, {}); }

  // Records an operation result. The node requires a gradient iff any input
  // does; the closure is dropped otherwise.
  Var record(TensorT value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var v : inputs) needs = needs || node(v).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }
  Var record(TensorT value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  const TensorT& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).value.shape(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Gradient after backward(); nullptr when the value was unreachable from
  // the loss or does not require a gradient.
  const TensorT* grad(Var v) const {
    const Node& n = node(v);
    return n.grad ? &*n.grad : nullptr;
  }

  // Adds `g` into the gradient buffer of `v` (no-op if `v` needs no grad).
  void accumulate(Var v, const TensorT& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (!n.grad) {
      n.grad = g;
      return;
    }
    auto dst = n.grad->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  // Returns a writable zero-initialised gradient buffer for `v`, or nullptr
  // when `v` needs no gradient. Lets kernels scatter directly.
  TensorT* grad_buffer(Var v) {
    Node& n = node(v);
    if (!n.requires_grad) return nullptr;
    if (!n.grad) n.grad = TensorT(n.value.shape());
    return &*n.grad;
  }

  void backward(Var loss) {
    if (backward_done_) throw StateError("backward already ran on this tape; call reset() first");
    const Node& out = node(loss);
    if (out.value.size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + shape_string(out.value.shape()));
    }
    backward_done_ = true;
    if (!out.requires_grad) return;
    node(loss).grad = TensorT(out.value.shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.grad) continue;
      // Inputs always precede node i, so accumulation never touches n.
      n.backward(*this, Var{i}, *n.grad);
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    TensorT value;
    bool requires_grad = false;
    BackwardFn backward;
    std::optional<TensorT> grad;
  };

  Var push(TensorT value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(fn), std::nullopt});
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw StateError("variable is not on this tape");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw StateError("variable is not on this tape");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

enum class Padding { same, valid };
enum class Mode { train, eval };

// Running statistics owned by a batchnorm layer.
template <typename T>
struct BatchNormStats {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace ops {

// Output spatial extent of a convolution; throws ShapeError when the kernel
// does not fit a valid convolution.
std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride, Padding padding);

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, Var bias, std::size_t stride, Padding padding);

template <typename T>
Var upsample_nearest2x(Tape<T>& tape, Var input);

template <typename T>
Var relu(Tape<T>& tape, Var input);

template <typename T>
Var sigmoid(Tape<T>& tape, Var input);

template <typename T>
Var batchnorm2d(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormStats<T>& stats, Mode mode,
                double momentum = kBatchNormMomentum, double epsilon = kBatchNormEpsilon);

template <typename T>
Var maxpool2x2(Tape<T>& tape, Var input);

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var input);

template <typename T>
Var reshape(Tape<T>& tape, Var input, Shape shape);

// [N, ...] -> [N, prod(...)]
template <typename T>
Var flatten(Tape<T>& tape, Var input);

// input [N, D] x weight [D, K] + bias [K]
template <typename T>
Var dense(Tape<T>& tape, Var input, Var weight, Var bias);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);

template <typename T>
Var sum(Tape<T>& tape, Var input);

// Row-wise softmax of a [N, K] tensor.
template <typename T>
Var softmax(Tape<T>& tape, Var logits);

template <typename T>
Var mse_loss(Tape<T>& tape, Var prediction, Var target);

// Mean cross-entropy of softmax(logits) against class indices.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels);

}  // namespace ops

}  // namespace encodenet
