#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "encodenet/tensor.hpp"

namespace encodenet {

// Images [N, C, H, W] with values in [0, 1] and one class index per image.
struct LabeledImageSet {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const noexcept { return labels.size(); }
  Shape image_shape() const;  // [C, H, W]

  // Throws ValidationError when any invariant is broken.
  void validate() const;

  LabeledImageSet subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;
};

struct DataSplit {
  LabeledImageSet train;
  LabeledImageSet test;
  std::uint64_t seed = 0;
};

// IDX container (big-endian dims). Images: magic 0x00000803 (N, H, W);
// labels: magic 0x00000801 (N). Pixels are scaled by 1/255. When
// num_classes is 0 it is taken as max label + 1.
LabeledImageSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                         int num_classes = 0);
// Writes a single-channel set in the same layout, quantising to bytes.
void write_idx(const LabeledImageSet& set, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

enum class CifarVariant { cifar10, cifar100 };

// CIFAR binary batches: cifar10 records are 1 label byte + 3072 pixel bytes;
// cifar100 records carry coarse and fine label bytes, the fine label is used.
LabeledImageSet load_cifar_bin(std::span<const std::filesystem::path> paths,
                               CifarVariant variant = CifarVariant::cifar10);

// Exactly per_class images of every class, chosen by a seeded shuffle and
// returned in ascending index order.
std::vector<std::size_t> subsample_indices(const LabeledImageSet& set, std::size_t per_class, std::uint64_t seed);
LabeledImageSet subsample(const LabeledImageSet& set, std::size_t per_class, std::uint64_t seed);

// Index batches covering [0, n) once. Without a seed the order is the
// identity; with one, the permutation is derived from (seed, epoch).
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   std::optional<std::uint64_t> shuffle_seed, std::uint64_t epoch);

// Mirrors each image left-right with probability 1/2 (in place).
void random_hflip(Tensor& images, std::mt19937_64& rng);

// Procedural grayscale shapes: ten shape classes, each drawn in one of
// `styles` rendering styles (filled-on-dark, filled-on-light, outline on a
// shaded background), with random pose, size, noise, and clutter.
struct SyntheticShapesConfig {
  int image_size = 32;
  int styles = 3;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 200;
  double noise = 0.12;           // stddev of additive pixel noise
  double clutter = 0.5;          // probability of a distractor blob
  double max_rotation_deg = 20.0;
  double min_scale = 0.45;       // shape radius as a fraction of half the image
  double max_scale = 0.75;
  double max_shift = 0.15;       // fraction of the image size
};

DataSplit make_synthetic_shapes(const SyntheticShapesConfig& config, std::uint64_t seed);

// Renders one shape (class 0..9) in the given style; exposed for tests and
// the report's legend.
Tensor render_shape(int shape_class, int style, int image_size, double rotation_rad, double scale, double shift_x,
                    double shift_y, double foreground, double background);

// Two Gaussian blobs rendered as side x side single-channel images: class 0
// is bright on the left half, class 1 on the right half.
DataSplit make_blob_images(std::size_t train_per_class, std::size_t test_per_class, int side, double noise,
                           std::uint64_t seed);

}  // namespace encodenet
