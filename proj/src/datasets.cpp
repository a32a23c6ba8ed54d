#include "encodenet/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace encodenet {

namespace fs = std::filesystem;

Shape LabeledImageSet::image_shape() const {
  if (images.rank() != 4) return {};
  return {images.dim(1), images.dim(2), images.dim(3)};
}

void LabeledImageSet::validate() const {
  if (labels.empty()) {
    if (!images.empty()) throw ValidationError("image set has images but no labels");
    return;
  }
  if (images.rank() != 4) throw ValidationError("images must be [N, C, H, W], got " + shape_string(images.shape()));
  if (images.dim(0) != labels.size()) {
    throw ValidationError("image set has " + std::to_string(images.dim(0)) + " images but " +
                          std::to_string(labels.size()) + " labels");
  }
  for (const int l : labels) {
    if (l < 0 || l >= num_classes) {
      throw ValidationError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  for (const float v : images.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("pixel value outside [0, 1]");
  }
}

LabeledImageSet LabeledImageSet::subset(std::span<const std::size_t> indices) const {
  LabeledImageSet out;
  out.num_classes = num_classes;
  out.class_names = class_names;
  if (indices.empty()) return out;
  out.images = gather_rows(images, indices);
  out.labels.reserve(indices.size());
  for (const auto i : indices) out.labels.push_back(labels.at(i));
  return out;
}

std::vector<std::size_t> LabeledImageSet::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (const int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

namespace {

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

LabeledImageSet load_idx(const fs::path& images_path, const fs::path& labels_path, int num_classes) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16) throw FormatError("'" + images_path.string() + "' is truncated (no IDX header)");
  if (lab.size() < 8) throw FormatError("'" + labels_path.string() + "' is truncated (no IDX header)");
  if (read_be32(img, 0) != kIdxImageMagic) {
    throw FormatError("'" + images_path.string() + "' has IDX magic " + std::to_string(read_be32(img, 0)) +
                      ", expected 0x00000803");
  }
  if (read_be32(lab, 0) != kIdxLabelMagic) {
    throw FormatError("'" + labels_path.string() + "' has IDX magic " + std::to_string(read_be32(lab, 0)) +
                      ", expected 0x00000801");
  }
  const std::size_t n = read_be32(img, 4);
  const std::size_t h = read_be32(img, 8);
  const std::size_t w = read_be32(img, 12);
  const std::size_t nl = read_be32(lab, 4);
  if (n != nl) {
    throw FormatError("count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  }
  if (n == 0 || h == 0 || w == 0) throw FormatError("'" + images_path.string() + "' declares an empty set");
  if (img.size() != 16 + n * h * w) {
    throw FormatError("'" + images_path.string() + "' is " + std::to_string(img.size()) + " bytes, header implies " +
                      std::to_string(16 + n * h * w));
  }
  if (lab.size() != 8 + n) {
    throw FormatError("'" + labels_path.string() + "' is " + std::to_string(lab.size()) + " bytes, header implies " +
                      std::to_string(8 + n));
  }

  LabeledImageSet set;
  std::vector<float> pixels(n * h * w);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<float>(img[16 + i]) / 255.0f;
  set.images = Tensor(Shape{n, 1, h, w}, std::move(pixels));
  set.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    set.labels[i] = lab[8 + i];
    max_label = std::max(max_label, set.labels[i]);
  }
  set.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  if (max_label >= set.num_classes) {
    throw FormatError("label " + std::to_string(max_label) + " outside [0, " + std::to_string(set.num_classes) + ")");
  }
  return set;
}

void write_idx(const LabeledImageSet& set, const fs::path& images_path, const fs::path& labels_path) {
  set.validate();
  if (set.images.dim(1) != 1) throw ValidationError("IDX export supports single-channel images only");
  const auto n = static_cast<std::uint32_t>(set.size());
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IoError("cannot write IDX files at '" + images_path.string() + "'");
  put_be32(img, kIdxImageMagic);
  put_be32(img, n);
  put_be32(img, static_cast<std::uint32_t>(set.images.dim(2)));
  put_be32(img, static_cast<std::uint32_t>(set.images.dim(3)));
  std::vector<char> bytes(set.images.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(set.images[i] * 255.0f)));
  }
  img.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  put_be32(lab, kIdxLabelMagic);
  put_be32(lab, n);
  for (const int l : set.labels) lab.put(static_cast<char>(l));
}

LabeledImageSet load_cifar_bin(std::span<const fs::path> paths, CifarVariant variant) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t record = label_bytes + kPixels;
  const int classes = variant == CifarVariant::cifar10 ? 10 : 100;

  std::vector<float> pixels;
  std::vector<int> labels;
  for (const auto& path : paths) {
    const auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % record != 0) {
      throw FormatError("'" + path.string() + "' size " + std::to_string(bytes.size()) +
                        " is not a multiple of the " + std::to_string(record) + "-byte record");
    }
    for (std::size_t off = 0; off < bytes.size(); off += record) {
      const int label = bytes[off + label_bytes - 1];
      if (label >= classes) {
        throw FormatError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ") in '" +
                          path.string() + "'");
      }
      labels.push_back(label);
      for (std::size_t i = 0; i < kPixels; ++i) pixels.push_back(static_cast<float>(bytes[off + label_bytes + i]) / 255.0f);
    }
  }
  if (labels.empty()) throw FormatError("no CIFAR records found");
  LabeledImageSet set;
  set.images = Tensor(Shape{labels.size(), 3, 32, 32}, std::move(pixels));
  set.labels = std::move(labels);
  set.num_classes = classes;
  if (variant == CifarVariant::cifar10) {
    set.class_names = {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
  }
  return set;
}

std::vector<std::size_t> subsample_indices(const LabeledImageSet& set, std::size_t per_class, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(set.num_classes));
  for (std::size_t i = 0; i < set.size(); ++i) by_class[static_cast<std::size_t>(set.labels[i])].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.size() < per_class) {
      throw ValidationError("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                            " images, fewer than the requested " + std::to_string(per_class));
    }
    std::shuffle(members.begin(), members.end(), rng);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  std::sort(out.begin(), out.end());
  return out;
}

LabeledImageSet subsample(const LabeledImageSet& set, std::size_t per_class, std::uint64_t seed) {
  const auto idx = subsample_indices(set, per_class, seed);
  return set.subset(idx);
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   std::optional<std::uint64_t> shuffle_seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ValidationError("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    std::seed_seq seq{static_cast<std::uint32_t>(*shuffle_seed), static_cast<std::uint32_t>(*shuffle_seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

void random_hflip(Tensor& images, std::mt19937_64& rng) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  std::bernoulli_distribution flip(0.5);
  for (std::size_t i = 0; i < n; ++i) {
    if (!flip(rng)) continue;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        float* row = &images.at(i, ch, y, 0);
        std::reverse(row, row + w);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace {

struct Vec2 {
  double x, y;
};

double length(Vec2 p) { return std::hypot(p.x, p.y); }

double box_sdf(Vec2 p, double bx, double by) {
  const double qx = std::abs(p.x) - bx, qy = std::abs(p.y) - by;
  return std::hypot(std::max(qx, 0.0), std::max(qy, 0.0)) + std::min(std::max(qx, qy), 0.0);
}

Vec2 rotate(Vec2 p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * p.x - s * p.y, s * p.x + c * p.y};
}

double triangle_sdf(Vec2 p, double r) {
  const double k = std::sqrt(3.0);
  p.x = std::abs(p.x) - r;
  p.y = p.y + r / k;
  if (p.x + k * p.y > 0.0) p = {(p.x - k * p.y) / 2.0, (-k * p.x - p.y) / 2.0};
  p.x -= std::clamp(p.x, -2.0 * r, 0.0);
  return -length(p) * (p.y < 0 ? -1.0 : 1.0);
}

double hexagon_sdf(Vec2 p, double r) {
  const double kx = -0.866025404, ky = 0.5, kz = 0.577350269;
  p = {std::abs(p.x), std::abs(p.y)};
  const double d = 2.0 * std::min(kx * p.x + ky * p.y, 0.0);
  p.x -= d * kx;
  p.y -= d * ky;
  p.x -= std::clamp(p.x, -kz * r, kz * r);
  p.y -= r;
  return length(p) * (p.y < 0 ? -1.0 : 1.0);
}

// Signed distance in shape-local units (shape radius ~0.8).
double shape_sdf(int shape_class, Vec2 p) {
  switch (shape_class) {
    case 0:  // disk
      return length(p) - 0.8;
    case 1:  // square
      return box_sdf(p, 0.65, 0.65);
    case 2:  // triangle
      return triangle_sdf({p.x, -p.y}, 0.75);
    case 3:  // plus
      return std::min(box_sdf(p, 0.8, 0.22), box_sdf(p, 0.22, 0.8));
    case 4:  // ring
      return std::abs(length(p) - 0.6) - 0.2;
    case 5:  // diamond
      return (std::abs(p.x) + std::abs(p.y) - 0.9) / std::numbers::sqrt2;
    case 6: {  // x-cross
      const Vec2 q = rotate(p, std::numbers::pi / 4.0);
      return std::min(box_sdf(q, 0.85, 0.2), box_sdf(q, 0.2, 0.85));
    }
    case 7:  // tee
      return std::min(box_sdf({p.x, p.y + 0.55}, 0.8, 0.22), box_sdf({p.x, p.y - 0.15}, 0.22, 0.7));
    case 8:  // two bars
      return std::min(box_sdf({p.x, p.y + 0.4}, 0.8, 0.18), box_sdf({p.x, p.y - 0.4}, 0.8, 0.18));
    case 9:  // hexagon
      return hexagon_sdf(p, 0.72);
    default:
      throw ValidationError("shape class must be in [0, 10), got " + std::to_string(shape_class));
  }
}

constexpr std::array<const char*, 10> kShapeNames = {"disk",  "square", "triangle", "plus", "ring",
                                                     "diamond", "xcross", "tee",     "bars", "hexagon"};

double smooth_coverage(double sdf, double pixel) {
  // Linear ramp one pixel wide centred on the boundary.
  return std::clamp(0.5 - sdf / pixel, 0.0, 1.0);
}

}  // namespace

Tensor render_shape(int shape_class, int style, int image_size, double rotation_rad, double scale, double shift_x,
                    double shift_y, double foreground, double background) {
  const auto n = static_cast<std::size_t>(image_size);
  Tensor img(Shape{1, 1, n, n});
  const double half = image_size / 2.0;
  const double radius = scale * half;  // local unit 1 == radius pixels
  const double pixel = 1.0 / radius;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      Vec2 p{(static_cast<double>(x) + 0.5 - half - shift_x * image_size) / radius,
             (static_cast<double>(y) + 0.5 - half - shift_y * image_size) / radius};
      p = rotate(p, -rotation_rad);
      const double d = shape_sdf(shape_class, p);
      double bg = background;
      double cover;
      if (style == 2) {
        // Outline stroke over a vertical shading gradient.
        cover = smooth_coverage(std::abs(d) - 0.09, pixel);
        bg = background + 0.2 * (static_cast<double>(y) / image_size - 0.5);
      } else {
        cover = smooth_coverage(d, pixel);
      }
      img.at(0, 0, y, x) = static_cast<float>(cover * foreground + (1.0 - cover) * bg);
    }
  }
  return img.reshaped(Shape{1, n, n});
}

DataSplit make_synthetic_shapes(const SyntheticShapesConfig& config, std::uint64_t seed) {
  if (config.styles < 1 || config.styles > 3) throw ValidationError("synthetic shapes support 1 to 3 styles");
  if (config.image_size < 8) throw ValidationError("synthetic image size must be >= 8");
  const auto side = static_cast<std::size_t>(config.image_size);
  const std::size_t plane = side * side;

  auto generate = [&](std::size_t per_class, std::uint64_t stream) {
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + stream);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t total = per_class * kShapeNames.size();
    std::vector<float> pixels(total * plane);
    std::vector<int> labels(total);
    for (std::size_t i = 0; i < total; ++i) {
      const int cls = static_cast<int>(i % kShapeNames.size());
      const int style = static_cast<int>(unit(rng) * config.styles) % config.styles;
      const double rot = (2.0 * unit(rng) - 1.0) * config.max_rotation_deg * std::numbers::pi / 180.0;
      const double scale = config.min_scale + unit(rng) * (config.max_scale - config.min_scale);
      const double sx = (2.0 * unit(rng) - 1.0) * config.max_shift;
      const double sy = (2.0 * unit(rng) - 1.0) * config.max_shift;
      double fg, bg;
      switch (style) {
        case 0:
          bg = 0.05 + 0.15 * unit(rng);
          fg = 0.75 + 0.25 * unit(rng);
          break;
        case 1:
          bg = 0.8 + 0.2 * unit(rng);
          fg = 0.25 * unit(rng);
          break;
        default:
          bg = 0.4 + 0.15 * unit(rng);
          fg = 0.9 + 0.1 * unit(rng);
          break;
      }
      Tensor img = render_shape(cls, style, config.image_size, rot, scale, sx, sy, fg, bg);
      if (unit(rng) < config.clutter) {
        // Small distractor disk somewhere in the frame.
        const double cx = unit(rng) * config.image_size, cy = unit(rng) * config.image_size;
        const double r = 1.5 + 2.0 * unit(rng);
        const double level = unit(rng);
        for (std::size_t y = 0; y < side; ++y) {
          for (std::size_t x = 0; x < side; ++x) {
            const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy) - r;
            const double c = std::clamp(0.5 - d, 0.0, 1.0);
            float& v = img[y * side + x];
            v = static_cast<float>(c * level + (1.0 - c) * v);
          }
        }
      }
      float* dst = pixels.data() + i * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        dst[j] = static_cast<float>(std::clamp(img[j] + config.noise * gauss(rng), 0.0, 1.0));
      }
      labels[i] = cls;
    }
    LabeledImageSet set;
    set.images = Tensor(Shape{total, 1, side, side}, std::move(pixels));
    set.labels = std::move(labels);
    set.num_classes = static_cast<int>(kShapeNames.size());
    set.class_names.assign(kShapeNames.begin(), kShapeNames.end());
    return set;
  };

  DataSplit split;
  split.seed = seed;
  split.train = generate(config.train_per_class, 1);
  split.test = generate(config.test_per_class, 2);
  return split;
}

DataSplit make_blob_images(std::size_t train_per_class, std::size_t test_per_class, int side, double noise,
                           std::uint64_t seed) {
  const auto s = static_cast<std::size_t>(side);
  auto generate = [&](std::size_t per_class, std::uint64_t stream) {
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + stream);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t total = 2 * per_class;
    std::vector<float> pixels(total * s * s);
    std::vector<int> labels(total);
    for (std::size_t i = 0; i < total; ++i) {
      const int cls = static_cast<int>(i % 2);
      const double cx = (cls == 0 ? 0.25 : 0.75) * side + gauss(rng) * 0.6;
      const double cy = 0.5 * side + gauss(rng) * 0.6;
      const double sigma = side / 6.0;
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double d2 = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
          const double v = std::exp(-d2 / (2 * sigma * sigma)) + noise * gauss(rng);
          pixels[(i * s + y) * s + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
      labels[i] = cls;
    }
    LabeledImageSet set;
    set.images = Tensor(Shape{total, 1, s, s}, std::move(pixels));
    set.labels = std::move(labels);
    set.num_classes = 2;
    set.class_names = {"left", "right"};
    return set;
  };
  DataSplit split;
  split.seed = seed;
  split.train = generate(train_per_class, 1);
  split.test = generate(test_per_class, 2);
  return split;
}

}  // namespace encodenet
