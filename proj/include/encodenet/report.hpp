#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "encodenet/clustering.hpp"
#include "encodenet/entropy_rank.hpp"
#include "encodenet/pipeline.hpp"
#include "encodenet/trainer.hpp"

namespace encodenet {

// 8-bit raster, row-major, 1 (gray) or 3 (RGB) channels.
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;
};

void write_png(const std::filesystem::path& path, const Raster& image);

// Clamps to [0, 1] and rounds to 0..255.
std::uint8_t quantize_pixel(float v);

// One row per sample: input | CAE output | target, each image scaled by
// `zoom` with a `gap`-pixel white border.
struct ConversionGrid {
  Raster raster;
  std::size_t rows = 0;
  std::size_t columns = 3;
  std::vector<double> row_mse;  // output vs target, per row
};
ConversionGrid render_conversion_grid(Network& cae, const Tensor& images, std::span<const ConversionPair> samples,
                                      std::size_t zoom = 2, std::size_t gap = 2);

std::string render_elbow_svg(const ElbowResult& elbow, const std::string& title);
std::string render_loss_svg(const RunRecord& record, const std::string& title);
// Sorted-entropy strips, one per (class, cluster) cell.
std::string render_entropy_svg(std::span<const EntropyRecord> records, const std::string& title);

// ablation/ablation.{json,csv,md}
void write_ablation(const std::filesystem::path& run_dir, const AblationResult& result);

struct ReportSummary {
  std::vector<std::filesystem::path> files;
};

// Renders tables, plots and conversion grids for everything present in the
// run directory. Throws PrerequisiteError when there is nothing to render.
ReportSummary render_report(Pipeline& pipeline);

}  // namespace encodenet
