#include "encodenet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <utility>

#include "gemm.hpp"

namespace encodenet {

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace ops {

namespace {

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename T>
void require_finite(const BasicTensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value in input");
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// Eight fixed lanes: vectorizes, yet the summation order does not depend on
// the buffer's alignment the way Eigen's reductions do.
template <typename T, typename F>
double lane_sum(std::size_t n, F term) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += term(i + l);
  }
  double s = 0;
  for (; i < n; ++i) s += static_cast<double>(term(i));
  for (const T a : acc) s += static_cast<double>(a);
  return s;
}

struct ConvGeometry {
  std::size_t n, c, h, w;      // input
  std::size_t f, k;            // filters, kernel
  std::size_t stride;
  std::size_t oh, ow;          // output
  std::ptrdiff_t pad_top, pad_left;

  std::size_t patch() const { return c * k * k; }
  std::size_t plane() const { return oh * ow; }
};

std::size_t same_padding_before(std::size_t extent, std::size_t out, std::size_t kernel, std::size_t stride) {
  const std::ptrdiff_t total = static_cast<std::ptrdiff_t>((out - 1) * stride + kernel) -
                               static_cast<std::ptrdiff_t>(extent);
  return total > 0 ? static_cast<std::size_t>(total / 2) : 0;
}

// Output columns [x0, x1) whose kernel tap kj lands inside the input row.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kj) {
  std::size_t x0 = 0, x1 = g.ow;
  while (x0 < x1 && static_cast<std::ptrdiff_t>(x0 * g.stride + kj) < g.pad_left) ++x0;
  while (x1 > x0 && static_cast<std::ptrdiff_t>((x1 - 1) * g.stride + kj) - g.pad_left >= static_cast<std::ptrdiff_t>(g.w)) --x1;
  return {x0, x1};
}

// One image at a time: col is [c*k*k, oh*ow], small enough to stay in cache.
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* src = image + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * g.plane();
        for (std::size_t y = 0; y < g.oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ki) - g.pad_top;
          T* out = row + y * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.ow, T{0});
            continue;
          }
          const T* line = src + static_cast<std::size_t>(iy) * g.w;
          const auto [x0, x1] = valid_columns(g, kj);
          std::fill(out, out + x0, T{0});
          std::fill(out + x1, out + g.ow, T{0});
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - g.pad_left;
          if (g.stride == 1) {
            std::copy(line + (static_cast<std::ptrdiff_t>(x0) + shift), line + (static_cast<std::ptrdiff_t>(x1) + shift),
                      out + x0);
          } else {
            for (std::size_t x = x0; x < x1; ++x) out[x] = line[static_cast<std::ptrdiff_t>(x * g.stride) + shift];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* grad_image) {
  for (std::size_t c = 0; c < g.c; ++c) {
    T* dst = grad_image + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * g.plane();
        for (std::size_t y = 0; y < g.oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ki) - g.pad_top;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* line = dst + static_cast<std::size_t>(iy) * g.w;
          const T* in = row + y * g.ow;
          const auto [x0, x1] = valid_columns(g, kj);
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - g.pad_left;
          for (std::size_t x = x0; x < x1; ++x) line[static_cast<std::ptrdiff_t>(x * g.stride) + shift] += in[x];
        }
      }
    }
  }
}

}  // namespace

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride, Padding padding) {
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (padding == Padding::same) return (extent + stride - 1) / stride;
  if (extent < kernel) {
    throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " larger than input extent " +
                     std::to_string(extent) + " with valid padding");
  }
  return (extent - kernel) / stride + 1;
}

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, Var bias, std::size_t stride, Padding padding) {
  const auto& x = tape.value(input);
  const auto& wt = tape.value(weight);
  const auto& b = tape.value(bias);
  require_rank(x, 4, "conv2d", "input");
  require_rank(wt, 4, "conv2d", "weight");
  if (wt.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                     std::to_string(wt.dim(1)));
  }
  if (wt.dim(2) != wt.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + shape_string(wt.shape()));
  if (b.shape() != Shape{wt.dim(0)}) {
    throw ShapeError("conv2d: bias shape " + shape_string(b.shape()) + " does not match " +
                     std::to_string(wt.dim(0)) + " filters");
  }
  require_finite(x, "conv2d");

  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.f = wt.dim(0);
  g.k = wt.dim(2);
  g.stride = stride;
  g.oh = conv_output_extent(g.h, g.k, stride, padding);
  g.ow = conv_output_extent(g.w, g.k, stride, padding);
  g.pad_top = padding == Padding::same ? static_cast<std::ptrdiff_t>(same_padding_before(g.h, g.oh, g.k, stride)) : 0;
  g.pad_left = padding == Padding::same ? static_cast<std::ptrdiff_t>(same_padding_before(g.w, g.ow, g.k, stride)) : 0;

  // Output of image n is W[f, patch] * col_n[patch, plane], already NCHW.
  BasicTensor<T> out(Shape{g.n, g.f, g.oh, g.ow});
  auto o = out.data();
  std::vector<T> col(g.patch() * g.plane());
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, x.data().data() + n * g.c * g.h * g.w, col.data());
    T* dst = o.data() + n * g.f * g.plane();
    detail::gemm_nn(g.f, g.plane(), g.patch(), wt.data().data(), col.data(), dst, false);
    for (std::size_t f = 0; f < g.f; ++f) {
      const T bf = b[f];
      for (std::size_t i = 0; i < g.plane(); ++i) dst[f * g.plane() + i] += bf;
    }
  }

  // The backward pass rebuilds col per image rather than keeping it alive.
  return tape.record(std::move(out), {input, weight, bias},
                     [g, input, weight, bias](Tape<T>& t, Var, const BasicTensor<T>& gy) {
                       const std::size_t in_size = g.c * g.h * g.w, out_size = g.f * g.plane();
                       if (auto* gb = t.grad_buffer(bias)) {
                         for (std::size_t f = 0; f < g.f; ++f) {
                           T acc{0};
                           for (std::size_t n = 0; n < g.n; ++n) {
                             const T* row = gy.data().data() + n * out_size + f * g.plane();
                             for (std::size_t i = 0; i < g.plane(); ++i) acc += row[i];
                           }
                           (*gb)[f] += acc;
                         }
                       }
                       auto* gw = t.grad_buffer(weight);
                       auto* gx = t.requires_grad(input) ? t.grad_buffer(input) : nullptr;
                       if (!gw && !gx) return;
                       const T* xv = t.value(input).data().data();
                       const T* wv = t.value(weight).data().data();
                       // With stride 1 the input gradient is itself a convolution of dy
                       // with the flipped, channel-transposed kernel.
                       const bool direct = g.stride == 1;
                       ConvGeometry back = g;
                       std::vector<T> flipped;
                       if (gx && direct) {
                         back.c = g.f;
                         back.f = g.c;
                         back.h = g.oh;
                         back.w = g.ow;
                         back.oh = g.h;
                         back.ow = g.w;
                         back.pad_top = static_cast<std::ptrdiff_t>(g.k) - 1 - g.pad_top;
                         back.pad_left = static_cast<std::ptrdiff_t>(g.k) - 1 - g.pad_left;
                         flipped.resize(g.f * g.patch());
                         for (std::size_t f = 0; f < g.f; ++f) {
                           for (std::size_t c = 0; c < g.c; ++c) {
                             for (std::size_t i = 0; i < g.k * g.k; ++i) {
                               flipped[(c * g.f + f) * g.k * g.k + (g.k * g.k - 1 - i)] = wv[(f * g.c + c) * g.k * g.k + i];
                             }
                           }
                         }
                       }
                       std::vector<T> col(std::max(g.patch() * g.plane(), back.patch() * back.plane()));
                       for (std::size_t n = 0; n < g.n; ++n) {
                         const T* dy = gy.data().data() + n * out_size;
                         if (gw) {
                           im2col(g, xv + n * in_size, col.data());
                           detail::gemm_nt(g.f, g.patch(), g.plane(), dy, col.data(), gw->data().data(), true);
                         }
                         if (gx && direct) {
                           im2col(back, dy, col.data());
                           detail::gemm_nn(g.c, back.plane(), back.patch(), flipped.data(), col.data(),
                                           gx->data().data() + n * in_size, true);
                         } else if (gx) {
                           detail::gemm_tn(g.patch(), g.plane(), g.f, wv, dy, col.data(), false);
                           col2im(g, col.data(), gx->data().data() + n * in_size);
                         }
                       }
                     });
}

template <typename T>
Var upsample_nearest2x(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  require_rank(x, 4, "upsample", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  BasicTensor<T> out(Shape{n, c, 2 * h, 2 * w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.data().data() + p * h * w;
    T* dst = out.data().data() + p * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  return tape.record(std::move(out), {input}, [=](Tape<T>& t, Var, const BasicTensor<T>& gy) {
    auto* gx = t.grad_buffer(input);
    for (std::size_t p = 0; p < n * c; ++p) {
      const T* src = gy.data().data() + p * 4 * h * w;
      T* dst = gx->data().data() + p * h * w;
      for (std::size_t y = 0; y < 2 * h; ++y) {
        for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
      }
    }
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  BasicTensor<T> out = tape.value(input);
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return tape.record(std::move(out), {input}, [input](Tape<T>& t, Var self, const BasicTensor<T>& gy) {
    auto* gx = t.grad_buffer(input);
    const auto y = t.value(self).data();
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] > T{0}) (*gx)[i] += gy[i];
    }
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var input) {
  BasicTensor<T> out = tape.value(input);
  for (auto& v : out.data()) v = T{1} / (T{1} + std::exp(-v));
  return tape.record(std::move(out), {input}, [input](Tape<T>& t, Var self, const BasicTensor<T>& gy) {
    auto* gx = t.grad_buffer(input);
    const auto y = t.value(self).data();
    for (std::size_t i = 0; i < y.size(); ++i) (*gx)[i] += gy[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var batchnorm2d(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormStats<T>& stats, Mode mode,
                double momentum, double epsilon) {
  const auto& x = tape.value(input);
  require_rank(x, 4, "batchnorm", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto& gm = tape.value(gamma);
  const auto& bt = tape.value(beta);
  if (gm.shape() != Shape{c} || bt.shape() != Shape{c} || stats.running_mean.shape() != Shape{c}) {
    throw ShapeError("batchnorm: affine/statistics shape does not match " + std::to_string(c) + " channels");
  }
  const std::size_t count = n * plane;
  if (mode == Mode::train && count < 2) {
    throw ShapeError("batchnorm: train mode needs at least 2 values per channel, got " + std::to_string(count));
  }

  std::vector<T> mean(c), inv_std(c);
  if (mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      // Per-plane partial sums in T, accumulated across planes in double.
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data().data() + (i * c + ch) * plane;
        s += lane_sum<T>(plane, [p](std::size_t j) { return p[j]; });
      }
      const double mu = s / static_cast<double>(count);
      const T m = static_cast<T>(mu);
      double sq = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data().data() + (i * c + ch) * plane;
        sq += lane_sum<T>(plane, [p, m](std::size_t j) { return (p[j] - m) * (p[j] - m); });
      }
      const double var = sq / static_cast<double>(count);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + epsilon));
      const double unbiased = sq / static_cast<double>(count - 1);
      stats.running_mean[ch] = static_cast<T>((1 - momentum) * stats.running_mean[ch] + momentum * mu);
      stats.running_var[ch] = static_cast<T>((1 - momentum) * stats.running_var[ch] + momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.running_var[ch]) + epsilon));
    }
  }

  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = x.data().data() + (i * c + ch) * plane;
      T* o = out.data().data() + (i * c + ch) * plane;
      const T scale = gm[ch] * inv_std[ch];
      ArrayMap<T>(o, static_cast<Eigen::Index>(plane)) =
          (ConstArrayMap<T>(p, static_cast<Eigen::Index>(plane)) - mean[ch]) * scale + bt[ch];
    }
  }

  const bool batch_stats = mode == Mode::train;
  return tape.record(
      std::move(out), {input, gamma, beta},
      [=, mean = std::move(mean), inv_std = std::move(inv_std)](Tape<T>& t, Var, const BasicTensor<T>& gy) {
        const auto& xv = t.value(input);
        const auto& gv = t.value(gamma);
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T* p = xv.data().data() + (i * c + ch) * plane;
            const T* d = gy.data().data() + (i * c + ch) * plane;
            const T mu = mean[ch];
            sum_dy[ch] += lane_sum<T>(plane, [d](std::size_t j) { return d[j]; });
            sum_dy_xhat[ch] += lane_sum<T>(plane, [d, p, mu](std::size_t j) { return d[j] * (p[j] - mu); }) * inv_std[ch];
          }
        }
        if (auto* gg = t.grad_buffer(gamma)) {
          for (std::size_t ch = 0; ch < c; ++ch) (*gg)[ch] += static_cast<T>(sum_dy_xhat[ch]);
        }
        if (auto* gb = t.grad_buffer(beta)) {
          for (std::size_t ch = 0; ch < c; ++ch) (*gb)[ch] += static_cast<T>(sum_dy[ch]);
        }
        if (auto* gx = t.grad_buffer(input)) {
          const double m = static_cast<double>(n * plane);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const T* p = xv.data().data() + (i * c + ch) * plane;
              const T* d = gy.data().data() + (i * c + ch) * plane;
              T* o = gx->data().data() + (i * c + ch) * plane;
              const double k = static_cast<double>(gv[ch]) * inv_std[ch];
              const auto np = static_cast<Eigen::Index>(plane);
              auto ov = ArrayMap<T>(o, np);
              const auto dv = ConstArrayMap<T>(d, np);
              if (!batch_stats) {
                ov += static_cast<T>(k) * dv;
                continue;
              }
              const T mean_dy = static_cast<T>(sum_dy[ch] / m);
              const T coeff = static_cast<T>(sum_dy_xhat[ch] / m) * inv_std[ch];
              ov += static_cast<T>(k) * (dv - mean_dy - (ConstArrayMap<T>(p, np) - mean[ch]) * coeff);
            }
          }
        }
      });
}

template <typename T>
Var maxpool2x2(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  require_rank(x, 4, "maxpool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool: spatial dims must be even, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  BasicTensor<T> out(Shape{n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.data().data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = (2 * y) * w + 2 * xx;
        for (const std::size_t cand : {(2 * y) * w + 2 * xx + 1, (2 * y + 1) * w + 2 * xx, (2 * y + 1) * w + 2 * xx + 1}) {
          if (src[cand] > src[best]) best = cand;
        }
        const std::size_t o = p * oh * ow + y * ow + xx;
        out[o] = src[best];
        (*argmax)[o] = static_cast<std::uint32_t>(p * h * w + best);
      }
    }
  }
  return tape.record(std::move(out), {input}, [input, argmax](Tape<T>& t, Var, const BasicTensor<T>& gy) {
    auto* gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < argmax->size(); ++i) (*gx)[(*argmax)[i]] += gy[i];
  });
}

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  require_rank(x, 4, "globalavgpool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  BasicTensor<T> out(Shape{n, c, 1, 1});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.data().data() + p * plane;
    double s = 0;
    for (std::size_t j = 0; j < plane; ++j) s += src[j];
    out[p] = static_cast<T>(s / static_cast<double>(plane));
  }
  return tape.record(std::move(out), {input}, [=](Tape<T>& t, Var, const BasicTensor<T>& gy) {
    auto* gx = t.grad_buffer(input);
    const T scale = T{1} / static_cast<T>(plane);
    for (std::size_t p = 0; p < n * c; ++p) {
      T* dst = gx->data().data() + p * plane;
      for (std::size_t j = 0; j < plane; ++j) dst[j] += gy[p] * scale;
    }
  });
}

template <typename T>
Var reshape(Tape<T>& tape, Var input, Shape shape) {
  BasicTensor<T> out = tape.value(input).reshaped(std::move(shape));
  return tape.record(std::move(out), {input}, [input](Tape<T>& t, Var, const BasicTensor<T>& gy) {
    auto* gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
  });
}

template <typename T>
Var flatten(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  if (x.rank() < 1) throw ShapeError("flatten: empty input");
  return reshape(tape, input, Shape{x.dim(0), x.size() / x.dim(0)});
}

template <typename T>
Var dense(Tape<T>& tape, Var input, Var weight, Var bias) {
  const auto& x = tape.value(input);
  const auto& wt = tape.value(weight);
  const auto& b = tape.value(bias);
  require_rank(x, 2, "dense", "input");
  require_rank(wt, 2, "dense", "weight");
  if (x.dim(1) != wt.dim(0)) {
    throw ShapeError("dense: input width " + std::to_string(x.dim(1)) + " does not match weight rows " +
                     std::to_string(wt.dim(0)));
  }
  if (b.shape() != Shape{wt.dim(1)}) throw ShapeError("dense: bias shape " + shape_string(b.shape()) + " mismatched");
  const std::size_t n = x.dim(0), d = x.dim(1), k = wt.dim(1);
  BasicTensor<T> out(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) std::copy(b.data().begin(), b.data().end(), out.data().begin() + i * k);
  detail::gemm_nn(n, k, d, x.data().data(), wt.data().data(), out.data().data(), true);
  return tape.record(std::move(out), {input, weight, bias},
                     [=](Tape<T>& t, Var, const BasicTensor<T>& gy) {
                       if (auto* gb = t.grad_buffer(bias)) {
                         for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < k; ++j) (*gb)[j] += gy[i * k + j];
                         }
                       }
                       if (auto* gw = t.grad_buffer(weight)) {
                         detail::gemm_tn(d, k, n, t.value(input).data().data(), gy.data().data(),
                                         gw->data().data(), true);
                       }
                       if (auto* gx = t.grad_buffer(input)) {
                         detail::gemm_nt(n, d, k, gy.data().data(), t.value(weight).data().data(),
                                         gx->data().data(), true);
                       }
                     });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  require_same_shape(tape.value(a), tape.value(b), "add");
  BasicTensor<T> out = tape.value(a);
  const auto bv = tape.value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var, const BasicTensor<T>& gy) {
    t.accumulate(a, gy);
    t.accumulate(b, gy);
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  require_same_shape(tape.value(a), tape.value(b), "mul");
  BasicTensor<T> out = tape.value(a);
  const auto bv = tape.value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var, const BasicTensor<T>& gy) {
    if (auto* ga = t.grad_buffer(a)) {
      const auto bv = t.value(b).data();
      for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * bv[i];
    }
    if (auto* gb = t.grad_buffer(b)) {
      const auto av = t.value(a).data();
      for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i] += gy[i] * av[i];
    }
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var input) {
  double s = 0;
  for (const T v : tape.value(input).data()) s += v;
  BasicTensor<T> out(Shape{1}, static_cast<T>(s));
  return tape.record(std::move(out), {input}, [input](Tape<T>& t, Var, const BasicTensor<T>& gy) {
    auto* gx = t.grad_buffer(input);
    for (auto& v : gx->data()) v += gy[0];
  });
}

template <typename T>
Var softmax(Tape<T>& tape, Var logits) {
  const auto& z = tape.value(logits);
  require_rank(z, 2, "softmax", "logits");
  const std::size_t n = z.dim(0), k = z.dim(1);
  BasicTensor<T> out(z.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data().data() + i * k;
    T* o = out.data().data() + i * k;
    const T mx = *std::max_element(row, row + k);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) o[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / s);
  }
  return tape.record(std::move(out), {logits}, [=](Tape<T>& t, Var self, const BasicTensor<T>& gy) {
    auto* gz = t.grad_buffer(logits);
    const auto& y = t.value(self);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += gy[i * k + j] * y[i * k + j];
      for (std::size_t j = 0; j < k; ++j) (*gz)[i * k + j] += static_cast<T>(y[i * k + j] * (gy[i * k + j] - dot));
    }
  });
}

template <typename T>
Var mse_loss(Tape<T>& tape, Var prediction, Var target) {
  const auto& p = tape.value(prediction);
  const auto& q = tape.value(target);
  require_same_shape(p, q, "mse");
  if (p.empty()) throw ShapeError("mse: empty batch");
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(q[i]);
    s += d * d;
  }
  const double loss = s / static_cast<double>(p.size());
  if (!std::isfinite(loss)) throw NumericError("mse: non-finite loss");
  BasicTensor<T> out(Shape{1}, static_cast<T>(loss));
  return tape.record(std::move(out), {prediction, target},
                     [prediction, target](Tape<T>& t, Var, const BasicTensor<T>& gy) {
                       const auto& pv = t.value(prediction);
                       const auto& qv = t.value(target);
                       const T scale = T{2} * gy[0] / static_cast<T>(pv.size());
                       if (auto* gp = t.grad_buffer(prediction)) {
                         for (std::size_t i = 0; i < pv.size(); ++i) (*gp)[i] += scale * (pv[i] - qv[i]);
                       }
                       if (auto* gq = t.grad_buffer(target)) {
                         for (std::size_t i = 0; i < pv.size(); ++i) (*gq)[i] -= scale * (pv[i] - qv[i]);
                       }
                     });
}

template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
  const auto& z = tape.value(logits);
  require_rank(z, 2, "cross_entropy", "logits");
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (n == 0 || labels.empty()) throw ShapeError("cross_entropy: empty batch");
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  auto probs = std::make_shared<std::vector<T>>(n * k);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ValidationError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
    }
    const T* row = z.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[label];
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = static_cast<T>(std::exp(row[j] - lse));
  }
  const double loss = total / static_cast<double>(n);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  std::vector<int> owned(labels.begin(), labels.end());
  return tape.record(BasicTensor<T>(Shape{1}, static_cast<T>(loss)), {logits},
                     [=, owned = std::move(owned)](Tape<T>& t, Var, const BasicTensor<T>& gy) {
                       auto* gz = t.grad_buffer(logits);
                       const T scale = gy[0] / static_cast<T>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < k; ++j) {
                           const T onehot = static_cast<int>(j) == owned[i] ? T{1} : T{0};
                           (*gz)[i * k + j] += scale * ((*probs)[i * k + j] - onehot);
                         }
                       }
                     });
}

#define ENCODENET_INSTANTIATE_OPS(T)                                                                  \
  template Var conv2d<T>(Tape<T>&, Var, Var, Var, std::size_t, Padding);                              \
  template Var upsample_nearest2x<T>(Tape<T>&, Var);                                                  \
  template Var relu<T>(Tape<T>&, Var);                                                                \
  template Var sigmoid<T>(Tape<T>&, Var);                                                             \
  template Var batchnorm2d<T>(Tape<T>&, Var, Var, Var, BatchNormStats<T>&, Mode, double, double);     \
  template Var maxpool2x2<T>(Tape<T>&, Var);                                                          \
  template Var global_avg_pool<T>(Tape<T>&, Var);                                                     \
  template Var reshape<T>(Tape<T>&, Var, Shape);                                                      \
  template Var flatten<T>(Tape<T>&, Var);                                                             \
  template Var dense<T>(Tape<T>&, Var, Var, Var);                                                     \
  template Var add<T>(Tape<T>&, Var, Var);                                                            \
  template Var mul<T>(Tape<T>&, Var, Var);                                                            \
  template Var sum<T>(Tape<T>&, Var);                                                                 \
  template Var softmax<T>(Tape<T>&, Var);                                                             \
  template Var mse_loss<T>(Tape<T>&, Var, Var);                                                       \
  template Var softmax_cross_entropy<T>(Tape<T>&, Var, std::span<const int>);

ENCODENET_INSTANTIATE_OPS(float)
ENCODENET_INSTANTIATE_OPS(double)

#undef ENCODENET_INSTANTIATE_OPS

}  // namespace ops
}  // namespace encodenet
