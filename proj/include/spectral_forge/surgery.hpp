// Weight surgeries that recombine singular factors of two checkpoints.
#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "spectral_forge/checkpoint.hpp"
#include "spectral_forge/metrics.hpp"
#include "spectral_forge/spectra.hpp"

namespace spectral_forge {

class SurgeryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// With recipient factors (U_p, Σ_p, V_p) and donor factors (U_d, Σ_d, V_d):
///   REPLACE_SIGMA  U_p (α′Σ_d) V_pᵀ
///   ABLATE_OUT     U_p Σ_p V_dᵀ
///   RESTORE_OUT    U_p Σ_p (V_d U_dᵀ U_p)ᵀ
///   ABLATE_IN      U_d Σ_p V_pᵀ
///   RESTORE_IN     (U_d V_dᵀ V_p) Σ_p V_pᵀ
///   RESTORE_CROSS  as RESTORE_OUT, with a second post model as donor
/// Factors are those of the canonical decomposition (transposed internally
/// when the stored matrix is wide).
enum class ConstructionKind { REPLACE_SIGMA, ABLATE_OUT, RESTORE_OUT, ABLATE_IN, RESTORE_IN, RESTORE_CROSS };

std::string_view construction_name(ConstructionKind kind);
std::optional<ConstructionKind> parse_construction(std::string_view name);

struct Construction {
  ConstructionKind kind = ConstructionKind::REPLACE_SIGMA;
  std::optional<std::map<MatrixType, double>> alpha_prime;

  void validate() const;
};

enum class DonorRole { BASE, POST };

struct SurgeryPlan {
  Construction construction;
  std::set<MatrixKey> selector;
  DonorRole donor = DonorRole::BASE;
  /// Selector as written in a plan file ("sa", "ffn", key list); kept for
  /// provenance.
  std::vector<std::string> selector_spec;
  std::string donor_path, recipient_path, output_path;

  /// {construction, alpha_prime?, selector, donor_path, recipient_path,
  /// output_path}; `available` resolves the "sa"/"ffn" presets.
  static SurgeryPlan from_json(std::string_view json_text, const std::set<MatrixKey>& available);
  /// Canonical JSON (sorted keys, compact).
  std::string canonical_json() const;
};

std::set<MatrixKey> select_module(const std::set<MatrixKey>& keys, ModuleKind module);

/// Applies one construction to a single matrix pair, returning a matrix in
/// the source orientation of `recipient`.
Eigen::MatrixXf apply_construction(const Construction& construction, MatrixType type,
                                   const SpectralDecomposition& recipient,
                                   const SpectralDecomposition& donor);

struct SurgeryKeyReport {
  MatrixKey key;
  double relative_change = 0.0;  // ‖W_out − W_recipient‖_F / ‖W_recipient‖_F
  bool degenerate_flag = false;
  /// ‖QᵀQ − I‖_F / r of the donor-derived rotation used by restorations.
  double rotation_defect = 0.0;
};

struct SurgeryResult {
  CheckpointStore store;
  std::vector<SurgeryKeyReport> report;
};

/// Selected matrices are rebuilt as F32; all other tensors are shared
/// verbatim. The plan's canonical JSON is stored under metadata key
/// "surgery_plan".
SurgeryResult apply(const SurgeryPlan& plan, const CheckpointStore& recipient,
                    const CheckpointStore& donor,
                    const NamingSchema& schema = NamingSchema::standard(),
                    const DecomposeOptions& options = {});

/// Rounds per-type means into a REPLACE_SIGMA α′ map; every type in
/// `required` must have a statistic.
std::map<MatrixType, double> alpha_from_metrics(const std::map<MatrixType, ScalingStats>& stats,
                                                double quantum,
                                                const std::set<MatrixType>& required = {});

}  // namespace spectral_forge
