#include "encodenet/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <zlib.h>

#include "encodenet/checkpoint.hpp"

namespace encodenet {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// PNG

namespace {

void put_u32be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void put_chunk(std::vector<unsigned char>& out, const char type[4], const std::vector<unsigned char>& data) {
  put_u32be(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong c = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32be(out, static_cast<std::uint32_t>(c));
}

}  // namespace

void write_png(const fs::path& path, const Raster& img) {
  if (img.width == 0 || img.height == 0) throw ValidationError("cannot write an empty image");
  if (img.channels != 1 && img.channels != 3) throw ValidationError("PNG writer supports 1 or 3 channels");
  if (img.pixels.size() != img.width * img.height * img.channels) throw ShapeError("raster buffer size mismatch");

  std::vector<unsigned char> raw;
  const std::size_t stride = img.width * img.channels;
  raw.reserve((stride + 1) * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(y * stride),
               img.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * stride));
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw IoError("zlib compression failed");
  }
  z.resize(zlen);

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<unsigned char> ihdr;
  put_u32be(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);
  ihdr.push_back(img.channels == 1 ? 0 : 2);
  ihdr.insert(ihdr.end(), {0, 0, 0});
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", z);
  put_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

std::uint8_t quantize_pixel(float v) {
  if (!(v > 0.0f)) return 0;
  if (v >= 1.0f) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0f));
}

ConversionGrid render_conversion_grid(Network& cae, const Tensor& images, std::span<const ConversionPair> samples,
                                      std::size_t zoom, std::size_t gap) {
  if (samples.empty()) throw ValidationError("conversion grid needs at least one sample");
  if (zoom == 0) throw ValidationError("zoom must be >= 1");
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (c != 1 && c != 3) throw ShapeError("conversion grid supports 1 or 3 channel images");

  std::vector<std::size_t> in_idx, tg_idx;
  for (const auto& [a, b] : samples) {
    in_idx.push_back(a);
    tg_idx.push_back(b);
  }
  const Tensor inputs = gather_rows(images, in_idx);
  const Tensor targets = gather_rows(images, tg_idx);
  const Tensor outputs = cae.infer(inputs);
  if (outputs.shape() != inputs.shape()) throw ShapeError("CAE output shape differs from its input");

  ConversionGrid g;
  g.rows = samples.size();
  const std::size_t cw = w * zoom, ch = h * zoom;
  Raster& r = g.raster;
  r.channels = c;
  r.width = 3 * cw + 4 * gap;
  r.height = g.rows * ch + (g.rows + 1) * gap;
  r.pixels.assign(r.width * r.height * c, 255);

  const Tensor* cols[3] = {&inputs, &outputs, &targets};
  for (std::size_t row = 0; row < g.rows; ++row) {
    double se = 0.0;
    for (std::size_t i = 0; i < c * h * w; ++i) {
      const double d = static_cast<double>(outputs[row * c * h * w + i]) - targets[row * c * h * w + i];
      se += d * d;
    }
    g.row_mse.push_back(se / static_cast<double>(c * h * w));
    for (std::size_t col = 0; col < 3; ++col) {
      const std::size_t x0 = gap + col * (cw + gap), y0 = gap + row * (ch + gap);
      for (std::size_t y = 0; y < ch; ++y) {
        for (std::size_t x = 0; x < cw; ++x) {
          for (std::size_t k = 0; k < c; ++k) {
            const float v = cols[col]->at(row, k, y / zoom, x / zoom);
            r.pixels[((y0 + y) * r.width + (x0 + x)) * c + k] = quantize_pixel(v);
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label(double v) {
  char buf[32];
  if (v != 0.0 && (std::abs(v) < 1e-2 || std::abs(v) >= 1e4)) std::snprintf(buf, sizeof buf, "%.2e", v);
  else std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (const char ch : s) {
    switch (ch) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

struct Axes {
  double x0, x1, y0, y1;
  double left = 70, top = 40, width = 460, height = 280;
  double px(double x) const { return left + (x1 == x0 ? 0.5 : (x - x0) / (x1 - x0)) * width; }
  double py(double y) const { return top + height - (y1 == y0 ? 0.5 : (y - y0) / (y1 - y0)) * height; }
};

std::string svg_open(double w, double h, const std::string& title) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(w) + "\" height=\"" + fmt(h) + "\" viewBox=\"0 0 " +
         fmt(w) + " " + fmt(h) + "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"" +
         fmt(w / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" + escape(title) + "</text>\n";
}

std::string frame(const Axes& a, const std::string& xlabel, const std::string& ylabel) {
  std::string s = "<rect x=\"" + fmt(a.left) + "\" y=\"" + fmt(a.top) + "\" width=\"" + fmt(a.width) + "\" height=\"" +
                  fmt(a.height) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = a.y0 + (a.y1 - a.y0) * i / 4.0;
    s += "<text x=\"" + fmt(a.left - 6) + "\" y=\"" + fmt(a.py(yv) + 4) + "\" text-anchor=\"end\">" + label(yv) + "</text>\n";
  }
  s += "<text x=\"" + fmt(a.left + a.width / 2) + "\" y=\"" + fmt(a.top + a.height + 34) + "\" text-anchor=\"middle\">" +
       escape(xlabel) + "</text>\n";
  s += "<text x=\"16\" y=\"" + fmt(a.top + a.height / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       fmt(a.top + a.height / 2) + ")\">" + escape(ylabel) + "</text>\n";
  return s;
}

std::string polyline(const Axes& a, std::span<const double> xs, std::span<const double> ys, const std::string& color) {
  std::string pts;
  for (std::size_t i = 0; i < xs.size(); ++i) pts += (i ? " " : "") + fmt(a.px(xs[i])) + "," + fmt(a.py(ys[i]));
  return "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
}

std::pair<double, double> padded_range(std::span<const double> v) {
  double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
  if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

}  // namespace

std::string render_elbow_svg(const ElbowResult& e, const std::string& title) {
  if (e.ks.empty()) throw ValidationError("elbow curve is empty");
  std::vector<double> xs(e.ks.begin(), e.ks.end());
  const auto [lo, hi] = padded_range(e.sse);
  Axes a{xs.front(), xs.back(), lo, hi};
  std::string s = svg_open(600, 380, title) + frame(a, "k", "sum of squared distances");
  for (const double x : xs) {
    s += "<text x=\"" + fmt(a.px(x)) + "\" y=\"" + fmt(a.top + a.height + 16) + "\" text-anchor=\"middle\">" + label(x) +
         "</text>\n";
  }
  s += polyline(a, xs, e.sse, "#1f77b4");
  for (std::size_t i = 0; i < xs.size(); ++i) {
    s += "<circle class=\"point\" cx=\"" + fmt(a.px(xs[i])) + "\" cy=\"" + fmt(a.py(e.sse[i])) +
         "\" r=\"3.5\" fill=\"#1f77b4\"/>\n";
    if (e.ks[i] == e.k) {
      s += "<circle class=\"chosen\" cx=\"" + fmt(a.px(xs[i])) + "\" cy=\"" + fmt(a.py(e.sse[i])) +
           "\" r=\"8\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"/>\n";
      s += "<text x=\"" + fmt(a.px(xs[i]) + 10) + "\" y=\"" + fmt(a.py(e.sse[i]) - 10) + "\" fill=\"#d62728\">k = " +
           std::to_string(e.k) + (e.degenerate ? " (degenerate)" : "") + "</text>\n";
    }
  }
  return s + "</svg>\n";
}

std::string render_loss_svg(const RunRecord& r, const std::string& title) {
  if (r.train_loss.empty()) throw ValidationError("run record has no epochs");
  std::vector<double> xs(r.train_loss.size());
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = static_cast<double>(i + 1);
  const double xmax = std::max(2.0, xs.back());
  const auto [lo, hi] = padded_range(r.train_loss);
  Axes a{1.0, xmax, lo, hi};
  std::string s = svg_open(600, 380, title) + frame(a, "epoch", "train loss");
  s += polyline(a, xs, r.train_loss, "#1f77b4");
  if (!r.eval_metric.empty()) {
    // Secondary series on its own scale, labelled on the right.
    const auto [elo, ehi] = padded_range(r.eval_metric);
    Axes b{1.0, xmax, elo, ehi};
    s += polyline(b, xs, r.eval_metric, "#ff7f0e");
    for (int i = 0; i <= 4; ++i) {
      const double yv = elo + (ehi - elo) * i / 4.0;
      s += "<text x=\"" + fmt(b.left + b.width + 6) + "\" y=\"" + fmt(b.py(yv) + 4) + "\" fill=\"#ff7f0e\">" + label(yv) +
           "</text>\n";
    }
    s += "<text x=\"" + fmt(a.left + a.width) + "\" y=\"" + fmt(a.top - 6) + "\" text-anchor=\"end\" fill=\"#ff7f0e\">" +
         escape(r.eval_metric_name) + "</text>\n";
  }
  s += "<text x=\"" + fmt(a.left) + "\" y=\"" + fmt(a.top - 6) + "\" fill=\"#1f77b4\">train loss</text>\n";
  return s + "</svg>\n";
}

std::string render_entropy_svg(std::span<const EntropyRecord> records, const std::string& title) {
  if (records.empty()) throw ValidationError("no entropy records to plot");
  std::map<Cell, std::vector<double>> cells;
  double hmax = 0.0;
  for (const auto& r : records) {
    cells[{r.label, r.cluster}].push_back(r.entropy);
    hmax = std::max(hmax, r.entropy);
  }
  if (hmax <= 0.0) hmax = 1.0;
  const double strip_w = 300, strip_h = 14, row_gap = 4, left = 110;
  const double height = 50 + static_cast<double>(cells.size()) * (strip_h + row_gap) + 30;
  std::string s = svg_open(left + strip_w + 80, height, title);
  double y = 40;
  for (auto& [cell, hs] : cells) {
    std::sort(hs.begin(), hs.end());
    s += "<text x=\"" + fmt(left - 6) + "\" y=\"" + fmt(y + 11) + "\" text-anchor=\"end\">class " +
         std::to_string(cell.first) + " / cluster " + std::to_string(cell.second) + "</text>\n";
    const double cw = strip_w / static_cast<double>(hs.size());
    for (std::size_t i = 0; i < hs.size(); ++i) {
      // Darker = more certain.
      const int shade = static_cast<int>(std::lround(255.0 * std::clamp(hs[i] / hmax, 0.0, 1.0)));
      char color[16];
      std::snprintf(color, sizeof color, "#%02x%02x%02x", shade, shade, 255);
      s += "<rect x=\"" + fmt(left + cw * static_cast<double>(i)) + "\" y=\"" + fmt(y) + "\" width=\"" + fmt(cw + 0.01) +
           "\" height=\"" + fmt(strip_h) + "\" fill=\"" + color + "\"/>\n";
    }
    s += "<text x=\"" + fmt(left + strip_w + 6) + "\" y=\"" + fmt(y + 11) + "\">n=" + std::to_string(hs.size()) +
         "</text>\n";
    y += strip_h + row_gap;
  }
  s += "<text x=\"" + fmt(left) + "\" y=\"" + fmt(y + 18) + "\">sorted entropy, 0 (dark) to " + label(hmax) +
       " nats (light)</text>\n";
  return s + "</svg>\n";
}

// ---------------------------------------------------------------------------
// Tables

namespace {

std::string pct(const std::optional<double>& v) {
  if (!v) return "failed";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
  return buf;
}

std::string num(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

std::string exact(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

std::string check_text(const json& v) {
  if (v.is_null()) return "not evaluated";
  if (v.is_boolean()) return v.get<bool>() ? "yes" : "NO";
  return v.dump();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << text;
}

std::string ablation_markdown(const AblationResult& r) {
  std::string md = "## Ablation (test accuracy, %)\n\n| row |";
  for (const auto s : r.seeds) md += " seed " + std::to_string(s) + " |";
  md += " median |\n|---|";
  for (std::size_t i = 0; i < r.seeds.size(); ++i) md += "---|";
  md += "---|\n";
  for (const auto& row : r.rows) {
    md += "| " + row.name + " |";
    for (const auto& a : row.accuracy) md += " " + pct(a) + " |";
    md += " " + pct(row.median) + " |\n";
  }
  md += "\nHead initialisation: " + r.head_init + "\n\n";
  md += "## Reconstruction loss (held-out MSE)\n\n| targets |";
  for (const auto s : r.seeds) md += " seed " + std::to_string(s) + " |";
  md += " median |\n|---|";
  for (std::size_t i = 0; i < r.seeds.size(); ++i) md += "---|";
  md += "---|\n| without clustering (k=1) |";
  for (const auto& v : r.loss_unclustered) md += " " + num(v) + " |";
  md += " " + num(r.median_loss_unclustered) + " |\n| with clustering |";
  for (const auto& v : r.loss_clustered) md += " " + num(v) + " |";
  md += " " + num(r.median_loss_clustered) + " |\n\n## Checks\n\n";
  for (const auto& [k, v] : r.checks.items()) {
    if (k == "per_seed") continue;
    md += "- " + k + ": " + check_text(v) + "\n";
  }
  for (const auto& row : r.rows) {
    for (const auto& f : row.failures) md += "- failure (" + row.name + "): " + f + "\n";
  }
  return md;
}

std::string ablation_csv(const AblationResult& r) {
  std::string csv = "row,seed,value\n";
  for (const auto& row : r.rows) {
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
      csv += row.name + "," + std::to_string(r.seeds[i]) + "," + exact(row.accuracy[i]) + "\n";
    }
    csv += row.name + ",median," + exact(row.median) + "\n";
  }
  for (std::size_t i = 0; i < r.seeds.size(); ++i) {
    csv += "cae_loss_unclustered," + std::to_string(r.seeds[i]) + "," + exact(r.loss_unclustered[i]) + "\n";
    csv += "cae_loss_clustered," + std::to_string(r.seeds[i]) + "," + exact(r.loss_clustered[i]) + "\n";
  }
  csv += "cae_loss_unclustered,median," + exact(r.median_loss_unclustered) + "\n";
  csv += "cae_loss_clustered,median," + exact(r.median_loss_clustered) + "\n";
  return csv;
}

}  // namespace

void write_ablation(const fs::path& run_dir, const AblationResult& result) {
  const fs::path dir = run_dir / "ablation";
  fs::create_directories(dir);
  {
    std::ofstream js(dir / "ablation.json");
    if (!js) throw IoError("cannot write ablation results under '" + dir.string() + "'");
    js << result.to_json().dump(2) << "\n";
  }
  write_text(dir / "ablation.csv", ablation_csv(result));
  write_text(dir / "ablation.md", "# EncodeNet ablation\n\n" + ablation_markdown(result));
}

// ---------------------------------------------------------------------------
// Report

ReportSummary render_report(Pipeline& pipeline) {
  const fs::path run = pipeline.run_dir();
  const fs::path out = run / "report";
  const json manifest = read_manifest(run);
  const auto& stages = manifest.at("stages");
  if (stages.empty()) {
    throw PrerequisiteError("no stage outputs (CSV files) under '" + run.string() + "'; run a stage first");
  }
  fs::create_directories(out);
  ReportSummary summary;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(out / name, text);
    summary.files.push_back(out / name);
  };

  std::string md = "# EncodeNet report\n\nRun directory: `" + run.string() + "`\n\n";
  std::string parity_md;
  std::string records_csv = "stage_dir,stage,seed,target_mode,eval_metric,final_metric,parameter_count\n";

  for (const auto& [dir_name, entry] : stages.items()) {
    const fs::path dir = run / entry.at("dir").get<std::string>();
    const std::string stage = entry.at("stage").get<std::string>();
    if (!fs::exists(dir / "stage.json")) {
      throw PrerequisiteError("stage directory '" + dir.string() + "' listed in the manifest is missing");
    }
    if (fs::exists(dir / "record.json")) {
      const RunRecord rec = RunRecord::read(dir / "record.json");
      if (!fs::exists(dir / "record.csv")) throw PrerequisiteError("missing CSV '" + (dir / "record.csv").string() + "'");
      emit("loss_" + dir_name + ".svg", render_loss_svg(rec, stage + " seed " + std::to_string(rec.seed)));
      records_csv += dir_name + "," + stage + "," + std::to_string(rec.seed) + "," +
                     entry.at("target_mode").get<std::string>() + "," + rec.eval_metric_name + "," +
                     exact(rec.final_metric) + "," + std::to_string(rec.parameter_count) + "\n";
    }
    if (stage == "cluster") {
      for (const auto& f : fs::directory_iterator(dir)) {
        const std::string name = f.path().filename().string();
        if (!name.starts_with("elbow_class")) continue;
        const ElbowResult e = read_elbow_csv(f.path());
        const std::string cls = name.substr(11, name.size() - 15);
        emit("elbow_" + dir_name + "_class" + cls + ".svg", render_elbow_svg(e, "elbow, class " + cls));
      }
    }
    if (stage == "rank") {
      const auto recs = read_entropy_csv(dir / "entropy.csv");
      emit("entropy_" + dir_name + ".svg", render_entropy_svg(recs, "sorted prediction entropy per cell"));
    }
    if (stage == "assemble") {
      std::ifstream in(dir / "assembly.json");
      const json a = json::parse(in);
      parity_md += "| " + dir_name + " | " + std::to_string(a.at("baseline_parameters").get<std::size_t>()) + " | " +
                   std::to_string(a.at("encoder_parameters").get<std::size_t>()) + " | " +
                   std::to_string(a.at("head_parameters").get<std::size_t>()) + " | " +
                   std::to_string(a.at("encodenet_parameters").get<std::size_t>()) + " |\n";
    }
    if (stage == "cae" && entry.at("target_mode").get<std::string>() != "same_image") {
      Network cae = load_checkpoint(dir / "model.ckpt");
      std::ifstream in(dir / "pairs.csv");
      std::string line;
      std::getline(in, line);
      std::vector<ConversionPair> pairs;
      while (std::getline(in, line)) {
        std::size_t a = 0, b = 0;
        if (std::sscanf(line.c_str(), "%zu,%zu", &a, &b) == 2) pairs.emplace_back(a, b);
      }
      const auto& train = pipeline.data().train;
      // First member of each class, then the first representative (a pair
      // whose input is its own target).
      std::vector<ConversionPair> sample;
      std::set<int> seen;
      for (const auto& p : pairs) {
        if (seen.insert(train.labels.at(p.first)).second) sample.push_back(p);
      }
      for (const auto& p : pairs) {
        if (p.first == p.second) {
          sample.push_back(p);
          break;
        }
      }
      const ConversionGrid grid = render_conversion_grid(cae, train.images, sample);
      write_png(out / ("conversion_" + dir_name + ".png"), grid.raster);
      summary.files.push_back(out / ("conversion_" + dir_name + ".png"));
    }
  }

  if (fs::exists(run / "ablation" / "ablation.json")) {
    std::ifstream in(run / "ablation" / "ablation.json");
    const AblationResult r = AblationResult::from_json(json::parse(in));
    md += ablation_markdown(r) + "\n";
    emit("ablation.csv", ablation_csv(r));
  }
  if (!parity_md.empty()) {
    md += "## Parameter parity\n\n| assembly | baseline | encoder | head | EncodeNet |\n|---|---|---|---|---|\n" + parity_md +
          "\n";
  }
  md += "## Files\n\n";
  for (const auto& f : summary.files) md += "- `" + f.filename().string() + "`\n";
  emit("stage_records.csv", records_csv);
  emit("report.md", md);
  return summary;
}

}  // namespace encodenet
