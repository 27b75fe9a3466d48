// Spectral diagnostics for a pair of checkpoints: singular-value scaling,
// singular-vector similarity, orthogonal consistency and lineage verdicts.
#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spectral_forge/checkpoint.hpp"
#include "spectral_forge/spectra.hpp"

namespace spectral_forge {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-matrix ratios σ_B,j / σ_A,j. Entries whose base singular value is
/// below 1e-8·σ_A,1 are undefined (nullopt) and excluded from statistics.
struct ScalingProfile {
  MatrixKey key;
  std::vector<std::optional<double>> div;
  double top_fraction = 0.9;
  std::size_t top_count = 0;  // ⌈top_fraction·r⌉
  double mean_top = 0.0;
  double std_top = 0.0;
};

ScalingProfile scaling_profile(const SpectralDecomposition& da, const SpectralDecomposition& db,
                               double top_fraction = 0.9, const MatrixKey& key = {});

/// Number of leading entries covered by `top_fraction` of `r`.
std::size_t top_count(std::size_t r, double top_fraction);

/// Mean and (population) standard deviation of the top-fraction ratios,
/// pooled over all layers of one matrix type.
struct ScalingStats {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

std::map<MatrixType, ScalingStats> scaling_stats(std::span<const ScalingProfile> profiles);

/// Singular Value Scaling Matrix per type: r rows × layers columns, column
/// i being the div vector of layer i. Undefined ratios are NaN.
std::map<MatrixType, Eigen::MatrixXd> svsm(std::span<const ScalingProfile> profiles);

/// round(mean / quantum) · quantum, snapped to the decimal grid of quantum.
double quantize_alpha(double mean, double quantum = 0.1);
std::map<MatrixType, double> alpha_assign(const std::map<MatrixType, double>& means,
                                          double quantum = 0.1);

struct OrthogonalConsistency {
  MatrixKey key;
  Eigen::MatrixXd sim_u;   // |U_A^T U_B|
  Eigen::MatrixXd sim_v;   // |V_A^T V_B|
  Eigen::MatrixXd i_orth;  // (U_A^T U_B)^T (V_A^T V_B), signed
  double nf = 0.0;         // ‖i_orth − I‖_F / r
  bool degenerate_flag = false;
  /// ‖Q^T Q − I‖_F / r for Q_U = U_A^T U_B and Q_V = V_A^T V_B. Zero up to
  /// rounding for square matrices; measures how far the rectangular case
  /// is from an orthogonal change of basis.
  double q_u_defect = 0.0;
  double q_v_defect = 0.0;

  Eigen::MatrixXd abs_i_orth() const { return i_orth.cwiseAbs(); }
};

OrthogonalConsistency orthogonal_consistency(const SpectralDecomposition& da,
                                             const SpectralDecomposition& db,
                                             const MatrixKey& key = {});

/// ‖QᵀQ − I‖_F / r.
double orthogonality_defect(const Eigen::MatrixXd& q);

enum class Verdict { SHARED_LINEAGE, INDEPENDENT, INCONCLUSIVE };
std::string_view verdict_name(Verdict v);

struct FingerprintReport {
  std::map<MatrixKey, double> nf;
  std::map<MatrixType, double> mean_nf_by_type;
  double mean_nf = 0.0;
  double threshold = 0.0;
  Verdict verdict = Verdict::INCONCLUSIVE;
  std::string explanation;
};

/// SHARED_LINEAGE iff mean < threshold, INDEPENDENT iff mean > 2·threshold.
Verdict verdict_for(double mean_nf, double threshold);

FingerprintReport fingerprint_from(const std::map<MatrixKey, OrthogonalConsistency>& per_key,
                                   double threshold);

/// Decomposes both checkpoints and compares every shared key. A key-set
/// mismatch yields INCONCLUSIVE with an explanation instead of throwing.
FingerprintReport fingerprint(const CheckpointStore& a, const CheckpointStore& b,
                              const NamingSchema& schema, double threshold,
                              const DecomposeOptions& options = {});

/// Threshold separating two observed nf populations. Picks the geometric
/// midpoint of the interval (max shared, min independent / 2), so that every
/// calibration pair gets its correct verdict under verdict_for. Throws when
/// that interval is empty.
double calibrate_threshold(std::span<const double> shared_nf,
                           std::span<const double> independent_nf);

}  // namespace spectral_forge
