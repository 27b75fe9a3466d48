#include <doctest.h>

#include "spectral_forge/reports.hpp"
#include "test_util.hpp"

using namespace spectral_forge;

TEST_CASE("six significant digits") {
  CHECK(format_g6(0.9) == "0.9");
  CHECK(format_g6(1.0 / 3.0) == "0.333333");
  CHECK(format_g6(123456789.0) == "1.23457e+08");
  CHECK(format_g6(std::nan("")) == "nan");
}

TEST_CASE("mean and std summary") {
  CHECK(format_mean_std(0.9, 0.0) == "0.9000 ± 0.0000");
  CHECK(format_mean_std(0.90712, 0.00461) == "0.9071 ± 0.0046");
  CHECK(format_mean_std(-1e-9, -1e-12) == "0.0000 ± 0.0000");
}

TEST_CASE("provenance lines") {
  Provenance p;
  p.input_hashes["base"] = "abc";
  const auto csv = p.csv_comment();
  CHECK(csv.rfind("# spectral_forge ", 0) == 0);
  CHECK(csv.find("# base sha256:abc\n") != std::string::npos);
  CHECK(p.svg_comment().find("base=sha256:abc") != std::string::npos);
}

TEST_CASE("file hashing") {
  test_util::TempDir dir;
  write_text_file(dir / "f.txt", "abc");
  CHECK(file_sha256(dir / "f.txt") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK_THROWS(file_sha256(dir / "missing"));
}

TEST_CASE("heatmap SVG") {
  Eigen::MatrixXd m(2, 3);
  m << 0.0, 1.0, 2.0, 5.0, -1.0, std::nan("");
  HeatmapStyle s{"t<1>", 0.0, 2.0, 1.0, Palette::kDiverging, 5};
  const auto svg = svg_heatmap(m, s, {});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("t&lt;1&gt;") != std::string::npos);
  CHECK(svg.find("#bbbbbb") != std::string::npos);  // NaN cell
  // Clamped: 5.0 renders like 2.0, and -1.0 like 0.0.
  const auto cells = [&](const Eigen::MatrixXd& one) { return svg_heatmap(one, s, {}); };
  CHECK(cells(Eigen::MatrixXd::Constant(1, 1, 5.0)) == cells(Eigen::MatrixXd::Constant(1, 1, 2.0)));
  CHECK(cells(Eigen::MatrixXd::Constant(1, 1, -1.0)) == cells(Eigen::MatrixXd::Constant(1, 1, 0.0)));
  CHECK(cells(Eigen::MatrixXd::Constant(1, 1, 1.0)).find("#f7f7f7") != std::string::npos);  // centre is white
  CHECK(svg == svg_heatmap(m, s, {}));
}

TEST_CASE("line chart SVG") {
  const auto svg = svg_line_chart("nf", "layer", "NF", {{"Q", {0.1, 0.2, std::nan("")}}, {"K", {0.0, 0.0, 0.0}}}, {});
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find(">Q</text>") != std::string::npos);
  CHECK(svg_line_chart("flat", "x", "y", {{"a", {1.0, 1.0}}}, {}).find("<polyline") != std::string::npos);
}
