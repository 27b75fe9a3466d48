// CSV, JSON and SVG report rendering.
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace spectral_forge {

inline constexpr const char* kToolVersion = SPECTRAL_FORGE_VERSION;

/// Six significant digits, "%.6g"; NaN renders as "nan".
std::string format_g6(double value);
/// "0.9000 ± 0.0000"
std::string format_mean_std(double mean, double std);

/// Identifies the tool and its inputs; every report file carries one.
struct Provenance {
  std::map<std::string, std::string> input_hashes;  // role -> sha256 of file bytes

  std::string csv_comment() const;  // "# ..." lines
  std::string svg_comment() const;
};

std::string file_sha256(const std::filesystem::path& path);

enum class Palette {
  kDiverging,   // blue - white - red, centered on `center`
  kSequential,  // white - dark
};

struct HeatmapStyle {
  std::string title;
  double lo = 0.0;
  double hi = 1.0;
  double center = 0.5;
  Palette palette = Palette::kSequential;
  int cell = 8;  // pixels per cell
};

/// Values are clamped to [lo, hi] for colour; NaN cells are grey.
std::string svg_heatmap(const Eigen::MatrixXd& values, const HeatmapStyle& style,
                        const Provenance& provenance);

struct Series {
  std::string name;
  std::vector<double> values;
};

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           const Provenance& provenance);

void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace spectral_forge
