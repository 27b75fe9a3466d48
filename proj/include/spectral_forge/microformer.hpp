// Minimal decoder-only forward engine for desk-scale checkpoints, with
// attention-entropy and CKA analyses over its traces.
#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spectral_forge/checkpoint.hpp"

namespace spectral_forge {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int n_kv_heads = 2;
  int d_mlp = 64;
  int vocab = 64;
  bool rope_enabled = true;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  int head_dim() const { return d_model / n_heads; }
  int kv_dim() const { return n_kv_heads * head_dim(); }
  void validate() const;

  static ModelConfig from_json(std::string_view json_text);
  std::string to_json() const;
};

/// Tensor names of the non-matrix weights. Matrices go through NamingSchema.
struct AuxiliaryNames {
  std::string embedding = "model.embed_tokens.weight";
  std::string input_norm = "model.layers.{layer}.input_layernorm.weight";
  std::string post_attention_norm = "model.layers.{layer}.post_attention_layernorm.weight";
  std::string final_norm = "model.norm.weight";
  std::string lm_head = "lm_head.weight";

  std::string layer_name(const std::string& tmpl, int layer) const;
};

/// Expected stored shape ([out, in]) of a matrix type under `config`.
std::pair<std::int64_t, std::int64_t> matrix_shape(const ModelConfig& config, MatrixType type);

struct ForwardOptions {
  /// Overrides config.rope_enabled when set.
  std::optional<bool> rope;
  /// Multiplies pre-softmax logits; 1/T for attention temperature T.
  float logit_scale = 1.0f;
  bool compute_logits = false;
};

struct ForwardTrace {
  /// Post-block residual stream per layer, [seq × d_model].
  std::vector<Eigen::MatrixXf> hidden;
  /// attn[layer][head] is [seq × seq], row-stochastic and causal.
  std::vector<std::vector<Eigen::MatrixXf>> attn;
  std::optional<Eigen::MatrixXf> logits;
};

/// Weights resolved once from a checkpoint and ready to run.
class Microformer {
 public:
  Microformer(ModelConfig config, const CheckpointStore& weights,
              const NamingSchema& schema = NamingSchema::standard(),
              const AuxiliaryNames& names = {});

  const ModelConfig& config() const { return config_; }
  ForwardTrace forward(std::span<const int> tokens, const ForwardOptions& options = {}) const;

  /// Multiplies W_Q and W_K of every layer by `alpha`.
  Microformer with_scaled_qk(float alpha) const;

 private:
  struct Layer {
    Eigen::MatrixXf wq, wk, wv, wo, wup, wgate, wdown;  // [out, in]
    Eigen::VectorXf input_norm, post_norm;
  };

  Eigen::MatrixXf rms_norm(const Eigen::MatrixXf& x, const Eigen::VectorXf& weight) const;
  void apply_rope(Eigen::MatrixXf& x, int heads) const;

  ModelConfig config_;
  Eigen::MatrixXf embedding_;  // [vocab, d_model]
  std::vector<Layer> layers_;
  Eigen::VectorXf final_norm_;
  Eigen::MatrixXf lm_head_;  // [vocab, d_model]
};

ForwardTrace forward(const ModelConfig& config, const CheckpointStore& weights,
                     std::span<const int> tokens, const ForwardOptions& options = {});

/// Trace tensors as a store: `hidden.{layer}`, `attn.{layer}.{head}`, `logits`.
CheckpointStore trace_to_store(const ForwardTrace& trace);

// ---------------------------------------------------------------------------
// Attention entropy

/// −Σ p ln p in nats, with 0·ln 0 = 0.
double entropy(std::span<const float> distribution);

enum class EntropyRow {
  kFinal,     // last query position
  kAveraged,  // mean of all query rows' distributions
};

struct EntropyProfile {
  std::vector<std::vector<double>> per_head;  // [layer][head]
  std::vector<double> layer_mean;

  double mean() const;
};

EntropyProfile attention_entropy(const ForwardTrace& trace, EntropyRow row = EntropyRow::kFinal);

/// Per-row entropies for every layer/head: [layer][head][row].
std::vector<std::vector<std::vector<double>>> attention_entropy_rows(const ForwardTrace& trace);

struct TemperatureReport {
  double alpha = 1.0;
  /// max |A(αW_Q, αW_K) − A(logits · α²)| over all layers, heads, entries.
  double max_abs_diff = 0.0;
  double mean_entropy_scaled = 0.0;     // weight-scaled run
  double mean_entropy_reference = 0.0;  // α = 1
  bool identity_holds = false;          // max_abs_diff < 1e-5
};

/// Runs with RoPE disabled: scaling W_Q, W_K by α against dividing the
/// logits by T = 1/α².
TemperatureReport temperature_check(const Microformer& model, std::span<const int> tokens,
                                    double alpha);

// ---------------------------------------------------------------------------
// Hidden representations and CKA

enum class Pooling { kMean, kLast };

/// Per layer, one pooled hidden vector per input: [N × d_model].
std::vector<Eigen::MatrixXd> pooled_hidden(const Microformer& model,
                                           std::span<const std::vector<int>> inputs,
                                           Pooling pooling = Pooling::kMean);

/// r^(i) = (1/N) Σ_j pool(M^(i)(T_j)) per layer.
std::vector<Eigen::VectorXd> mean_hidden(const Microformer& model,
                                         std::span<const std::vector<int>> inputs,
                                         Pooling pooling = Pooling::kMean);

enum class CkaMode { BATCH_LINEAR_CKA, MEAN_VECTOR_COS2 };
std::string_view cka_mode_name(CkaMode mode);
std::optional<CkaMode> parse_cka_mode(std::string_view name);

/// One matrix per layer. Rows are examples for BATCH_LINEAR_CKA; for
/// MEAN_VECTOR_COS2 rows are averaged into one vector first.
using RepresentationSet = std::vector<Eigen::MatrixXd>;

struct CkaHeatmap {
  Eigen::MatrixXd values;  // [layers_a × layers_b]
  CkaMode mode = CkaMode::BATCH_LINEAR_CKA;
};

double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);
double cosine_squared(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

CkaHeatmap cka(const RepresentationSet& a, const RepresentationSet& b,
               CkaMode mode = CkaMode::BATCH_LINEAR_CKA);

}  // namespace spectral_forge
