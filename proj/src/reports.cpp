#include "spectral_forge/reports.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "spectral_forge/spectra.hpp"

namespace spectral_forge {

std::string format_g6(double value) {
  if (std::isnan(value)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", value);
  return buf;
}

std::string format_mean_std(double mean, double std) {
  char buf[64];
  // Avoid "-0.0000" for tiny negative rounding noise.
  if (std::abs(mean) < 5e-5) mean = 0.0;
  if (std::abs(std) < 5e-5) std = 0.0;
  std::snprintf(buf, sizeof buf, "%.4f ± %.4f", mean, std);
  return buf;
}

std::string Provenance::csv_comment() const {
  std::string out = "# spectral_forge " + std::string(kToolVersion) + "\n";
  for (const auto& [role, hash] : input_hashes) out += "# " + role + " sha256:" + hash + "\n";
  return out;
}

std::string Provenance::svg_comment() const {
  std::string out = "<!-- spectral_forge " + std::string(kToolVersion);
  for (const auto& [role, hash] : input_hashes) out += " " + role + "=sha256:" + hash;
  return out + " -->\n";
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes_sha256(std::as_bytes(std::span(bytes.data(), bytes.size())));
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb lerp(Rgb a, Rgb b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

std::string hex(Rgb c) {
  char buf[8];
  auto to8 = [](double x) { return static_cast<int>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", to8(c.r), to8(c.g), to8(c.b));
  return buf;
}

std::string colour(double v, const HeatmapStyle& s) {
  if (std::isnan(v)) return "#bbbbbb";
  v = std::clamp(v, s.lo, s.hi);
  if (s.palette == Palette::kSequential) {
    const double t = s.hi > s.lo ? (v - s.lo) / (s.hi - s.lo) : 0.0;
    return hex(lerp({1, 1, 1}, {0.05, 0.15, 0.45}, t));
  }
  const Rgb blue{0.13, 0.40, 0.67}, white{0.97, 0.97, 0.97}, red{0.70, 0.09, 0.17};
  if (v <= s.center) {
    const double t = s.center > s.lo ? (s.center - v) / (s.center - s.lo) : 0.0;
    return hex(lerp(white, blue, t));
  }
  const double t = s.hi > s.center ? (v - s.center) / (s.hi - s.center) : 0.0;
  return hex(lerp(white, red, t));
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string svg_heatmap(const Eigen::MatrixXd& values, const HeatmapStyle& style,
                        const Provenance& provenance) {
  const int cell = style.cell;
  const int margin_top = 30, margin_left = 10, legend = 60;
  const auto rows = values.rows(), cols = values.cols();
  const long width = margin_left + cols * cell + legend;
  const long height = margin_top + rows * cell + 10;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" shape-rendering=\"crispEdges\">\n";
  out << provenance.svg_comment();
  out << "<text x=\"" << margin_left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">"
      << xml_escape(style.title) << "</text>\n";
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      out << "<rect x=\"" << margin_left + j * cell << "\" y=\"" << margin_top + i * cell
          << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"" << colour(values(i, j), style)
          << "\"/>\n";
    }
  }
  const long lx = margin_left + cols * cell + 15;
  const int steps = 20;
  const long bar_h = std::max<long>(rows * cell, 40);
  for (int s = 0; s < steps; ++s) {
    const double v = style.hi - (style.hi - style.lo) * (s + 0.5) / steps;
    out << "<rect x=\"" << lx << "\" y=\"" << margin_top + bar_h * s / steps << "\" width=\"10\" height=\""
        << bar_h / steps + 1 << "\" fill=\"" << colour(v, style) << "\"/>\n";
  }
  out << "<text x=\"" << lx + 13 << "\" y=\"" << margin_top + 8
      << "\" font-family=\"sans-serif\" font-size=\"9\">" << format_g6(style.hi) << "</text>\n";
  out << "<text x=\"" << lx + 13 << "\" y=\"" << margin_top + bar_h
      << "\" font-family=\"sans-serif\" font-size=\"9\">" << format_g6(style.lo) << "</text>\n";
  out << "</svg>\n";
  return out.str();
}

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           const Provenance& provenance) {
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  const double w = 480, h = 300, ml = 60, mr = 120, mt = 30, mb = 40;
  double lo = 0.0, hi = 0.0;
  std::size_t n = 0;
  bool first = true;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values) {
      if (std::isnan(v)) continue;
      if (first) lo = hi = v, first = false;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  auto px = [&](std::size_t i) { return ml + (n > 1 ? (w - ml - mr) * i / (n - 1.0) : (w - ml - mr) / 2); };
  auto py = [&](double v) { return mt + (h - mt - mb) * (hi - v) / (hi - lo); };

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << provenance.svg_comment();
  out << "<text x=\"" << ml << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" << xml_escape(title)
      << "</text>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 8
      << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << xml_escape(x_label)
      << "</text>\n";
  out << "<text x=\"12\" y=\"" << (mt + h - mb) / 2
      << "\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 12 " << (mt + h - mb) / 2
      << ")\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";
  out << "<text x=\"" << ml - 4 << "\" y=\"" << mt + 4
      << "\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"end\">" << format_g6(hi) << "</text>\n";
  out << "<text x=\"" << ml - 4 << "\" y=\"" << h - mb
      << "\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"end\">" << format_g6(lo) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* c = colours[s % 8];
    std::ostringstream pts;
    for (std::size_t i = 0; i < series[s].values.size(); ++i) {
      const double v = series[s].values[i];
      if (std::isnan(v)) continue;
      pts << format_g6(px(i)) << "," << format_g6(py(v)) << " ";
    }
    out << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"" << pts.str()
        << "\"/>\n";
    out << "<text x=\"" << w - mr + 8 << "\" y=\"" << mt + 14 * (s + 1) << "\" font-family=\"sans-serif\" "
        << "font-size=\"10\" fill=\"" << c << "\">" << xml_escape(series[s].name) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

}  // namespace spectral_forge
