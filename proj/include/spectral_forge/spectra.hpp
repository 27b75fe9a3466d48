// Canonical reduced SVD of weight matrices.
#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "spectral_forge/checkpoint.hpp"

namespace spectral_forge {

class SpectralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// W = u * diag(sigma) * v^T with r = min(m, n) columns.
///
/// When the source matrix has fewer rows than columns its transpose is
/// decomposed instead and `transposed` is set, so u always has at least as
/// many rows as v. Signs are canonical: in every column of u the entry of
/// largest magnitude (lowest row on ties) is non-negative.
struct SpectralDecomposition {
  Eigen::MatrixXf u;
  Eigen::VectorXf sigma;
  Eigen::MatrixXf v;
  bool transposed = false;

  Eigen::Index rank() const { return sigma.size(); }
  /// Shape of the source matrix in its original orientation.
  Eigen::Index source_rows() const { return transposed ? v.rows() : u.rows(); }
  Eigen::Index source_cols() const { return transposed ? u.rows() : v.rows(); }
};

/// `label` only decorates error messages.
SpectralDecomposition reduced_svd(const Eigen::MatrixXf& w, const std::string& label = "matrix");

/// Flips (u_j, v_j) pairs into the canonical sign convention.
void canonicalize_signs(SpectralDecomposition& d);

/// U'·diag(σ')·V'^T in the source orientation. Overrides default to the
/// decomposition's own factors.
Eigen::MatrixXf reconstruct(const SpectralDecomposition& d,
                            const std::optional<Eigen::VectorXf>& sigma_override = std::nullopt,
                            const std::optional<Eigen::MatrixXf>& u_override = std::nullopt,
                            const std::optional<Eigen::MatrixXf>& v_override = std::nullopt);

/// True when two consecutive singular values are closer than
/// `relative_gap`·σ₁, i.e. the singular vectors are not uniquely defined.
bool has_degenerate_cluster(const Eigen::VectorXf& sigma, double relative_gap = 1e-3);

using DecompositionMap = std::map<MatrixKey, SpectralDecomposition>;
using ProgressFn = std::function<void(const MatrixKey&, std::size_t done, std::size_t total)>;

struct DecomposeOptions {
  NamingSchema schema = NamingSchema::standard();
  /// Directory holding sidecar caches; empty disables caching.
  std::filesystem::path cache_dir;
  ProgressFn progress;
};

/// Decomposes every classified matrix. Jobs may run concurrently; the
/// result is a keyed map and independent of scheduling.
DecompositionMap decompose_all(const CheckpointStore& store,
                               const std::map<MatrixKey, std::string>& keys,
                               const DecomposeOptions& options = {});

/// Hex SHA-256 of a tensor's raw bytes plus dtype and shape.
std::string tensor_content_hash(const TensorRecord& record);
std::string bytes_sha256(std::span<const std::byte> bytes);

/// Cache sidecar: one safetensors file with `{key}.u`, `{key}.sigma`,
/// `{key}.v` per entry and metadata `{key}.hash` / `{key}.transposed`.
CheckpointStore decompositions_to_store(const DecompositionMap& decomps,
                                        const std::map<MatrixKey, std::string>& hashes);
/// Returns decompositions whose recorded hash matches `hashes`.
DecompositionMap decompositions_from_store(const CheckpointStore& store,
                                           const std::map<MatrixKey, std::string>& hashes);

}  // namespace spectral_forge
