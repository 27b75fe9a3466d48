// Synthetic (base, post) checkpoint pairs with known ground truth.
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <Eigen/Dense>

#include "spectral_forge/checkpoint.hpp"
#include "spectral_forge/microformer.hpp"

namespace spectral_forge {

/// Haar-distributed n×n orthogonal matrix (QR of a Gaussian matrix with the
/// R diagonal signs folded into Q).
Eigen::MatrixXd random_orthogonal(int n, std::uint64_t seed);

/// exp(ε·A) for a random skew-symmetric A with ‖A‖_F = 1. ε = 0 gives I.
Eigen::MatrixXd small_rotation(int n, double epsilon, std::uint64_t seed);

/// Deterministic stream seed for (seed, parts...).
std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts);

enum class FixtureMode { EXACT, PERTURBED, INDEPENDENT };
std::string_view fixture_mode_name(FixtureMode mode);
std::optional<FixtureMode> parse_fixture_mode(std::string_view name);

struct FixtureSpec {
  ModelConfig config;
  std::uint64_t seed = 0;
  /// True α per matrix type; types not listed use 1.0.
  std::map<MatrixType, double> alpha_map;
  /// ε of the ΔQ₁, ΔQ₂ small rotations (PERTURBED only).
  double perturbation = 0.0;
  /// Relative Gaussian noise on the bottom 10% of each post spectrum
  /// (PERTURBED only).
  double tail_noise = 0.0;
  FixtureMode mode = FixtureMode::EXACT;
  /// Selects the post-model stream; posts with different variants share
  /// the same base, giving two post models of one ancestor.
  std::uint64_t variant = 0;
  /// Largest base singular value; spectra are log-spaced down to
  /// sigma_max / condition.
  double sigma_max = 1.0;
  double condition = 100.0;
  /// Standard deviation of embedding entries.
  double embedding_scale = 1.0;

  double alpha(MatrixType type) const;
  void validate() const;

  static FixtureSpec from_json(std::string_view json_text);
};

struct MatrixTruth {
  double alpha = 1.0;
  Eigen::MatrixXd q;    // r×r shared rotation
  Eigen::MatrixXd dq1;  // left-side deviation (identity unless PERTURBED)
  Eigen::MatrixXd dq2;  // right-side deviation
  double epsilon = 0.0;

  double q_frobenius_to_identity() const;
};

struct FixtureTruth {
  FixtureMode mode = FixtureMode::EXACT;
  std::map<MatrixKey, MatrixTruth> matrices;

  std::string to_json() const;
};

struct FixturePair {
  CheckpointStore base;
  CheckpointStore post;
  FixtureTruth truth;
};

/// Base matrices have log-spaced spectra and Haar factors; the post side
/// follows `spec.mode`. Both stores carry embedding and norm tensors so the
/// microformer can run them.
FixturePair generate_pair(const FixtureSpec& spec);

/// Random token sequences for toy-model experiments.
std::vector<std::vector<int>> random_token_inputs(int count, int length, int vocab,
                                                  std::uint64_t seed);

/// nf samples for matrix pairs of shape rows×cols: shared-lineage pairs
/// use a PERTURBED rotation with `epsilon`, independent pairs are sampled
/// separately. Used to place a fingerprint threshold.
struct NfCalibration {
  std::vector<double> shared;
  std::vector<double> independent;
  double threshold = 0.0;
};

NfCalibration calibrate_nf(std::int64_t rows, std::int64_t cols, int samples, double epsilon,
                           std::uint64_t seed);

}  // namespace spectral_forge
