#include "spectral_forge/microformer.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace spectral_forge {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ModelError("model config: " + m); };
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || n_kv_heads <= 0 || d_mlp <= 0 || vocab <= 0) {
    fail("all sizes must be positive");
  }
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_heads % n_kv_heads != 0) fail("n_heads must be divisible by n_kv_heads");
  if (rope_enabled && head_dim() % 2 != 0) fail("rotary embedding needs an even head_dim");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
}

ModelConfig ModelConfig::from_json(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ModelError(std::string("malformed model config JSON: ") + e.what());
  }
  ModelConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_kv_heads = j.value("n_kv_heads", c.n_heads);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  c.vocab = j.value("vocab", c.vocab);
  c.rope_enabled = j.value("rope_enabled", c.rope_enabled);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  if (j.contains("head_dim") && j["head_dim"].get<int>() != c.head_dim()) {
    throw ModelError("model config: head_dim must equal d_model / n_heads");
  }
  c.validate();
  return c;
}

std::string ModelConfig::to_json() const {
  nlohmann::json j = {{"d_model", d_model},       {"n_layers", n_layers},
                      {"n_heads", n_heads},       {"n_kv_heads", n_kv_heads},
                      {"d_mlp", d_mlp},           {"vocab", vocab},
                      {"head_dim", head_dim()},   {"rope_enabled", rope_enabled},
                      {"rope_base", rope_base},   {"norm_eps", norm_eps}};
  return j.dump(2);
}

std::string AuxiliaryNames::layer_name(const std::string& tmpl, int layer) const {
  std::string out = tmpl;
  if (auto pos = out.find("{layer}"); pos != std::string::npos) out.replace(pos, 7, std::to_string(layer));
  return out;
}

std::pair<std::int64_t, std::int64_t> matrix_shape(const ModelConfig& c, MatrixType type) {
  const std::int64_t q_dim = static_cast<std::int64_t>(c.n_heads) * c.head_dim();
  switch (type) {
    case MatrixType::Q: return {q_dim, c.d_model};
    case MatrixType::K:
    case MatrixType::V: return {c.kv_dim(), c.d_model};
    case MatrixType::O: return {c.d_model, q_dim};
    case MatrixType::UP:
    case MatrixType::GATE: return {c.d_mlp, c.d_model};
    case MatrixType::DOWN: return {c.d_model, c.d_mlp};
  }
  return {0, 0};
}

// ---------------------------------------------------------------------------

namespace {

const TensorRecord& need(const CheckpointStore& store, const std::string& name) {
  if (const auto* r = store.find(name)) return *r;
  throw ModelError("missing tensor '" + name + "'");
}

Eigen::VectorXf load_vector(const CheckpointStore& store, const std::string& name,
                            std::int64_t expected) {
  const auto& rec = need(store, name);
  const auto values = rec.to_floats();
  if (rec.shape.size() != 1 || rec.shape[0] != expected) {
    throw ModelError("tensor '" + name + "' should have shape [" + std::to_string(expected) + "]");
  }
  return Eigen::Map<const Eigen::VectorXf>(values.data(), expected);
}

Eigen::MatrixXf load_shaped(const CheckpointStore& store, const std::string& name,
                            const NamingSchema& schema, std::pair<std::int64_t, std::int64_t> shape) {
  need(store, name);
  Eigen::MatrixXf m = load_matrix(store, name, schema);
  if (m.rows() != shape.first || m.cols() != shape.second) {
    throw ModelError("tensor '" + name + "' has shape [" + std::to_string(m.rows()) + ", " +
                     std::to_string(m.cols()) + "], config expects [" + std::to_string(shape.first) +
                     ", " + std::to_string(shape.second) + "]");
  }
  return m;
}

void softmax_rows_causal(Eigen::MatrixXf& scores) {
  const auto n = scores.rows();
  for (Eigen::Index t = 0; t < n; ++t) {
    float mx = -std::numeric_limits<float>::infinity();
    for (Eigen::Index s = 0; s <= t; ++s) mx = std::max(mx, scores(t, s));
    double sum = 0.0;
    for (Eigen::Index s = 0; s <= t; ++s) {
      scores(t, s) = std::exp(scores(t, s) - mx);
      sum += scores(t, s);
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (Eigen::Index s = 0; s <= t; ++s) scores(t, s) *= inv;
    for (Eigen::Index s = t + 1; s < n; ++s) scores(t, s) = 0.0f;
  }
}

}  // namespace

Microformer::Microformer(ModelConfig config, const CheckpointStore& weights,
                         const NamingSchema& schema, const AuxiliaryNames& names)
    : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  {
    const auto& rec = need(weights, names.embedding);
    if (rec.shape != std::vector<std::int64_t>{c.vocab, c.d_model}) {
      throw ModelError("embedding '" + names.embedding + "' must be [vocab, d_model]");
    }
    embedding_ = record_to_matrix(rec);
  }
  for (int l = 0; l < c.n_layers; ++l) {
    Layer layer;
    auto mat = [&](MatrixType t) {
      return load_shaped(weights, schema.tensor_name({l, t}), schema, matrix_shape(c, t));
    };
    layer.wq = mat(MatrixType::Q);
    layer.wk = mat(MatrixType::K);
    layer.wv = mat(MatrixType::V);
    layer.wo = mat(MatrixType::O);
    layer.wup = mat(MatrixType::UP);
    layer.wgate = mat(MatrixType::GATE);
    layer.wdown = mat(MatrixType::DOWN);
    layer.input_norm = load_vector(weights, names.layer_name(names.input_norm, l), c.d_model);
    layer.post_norm = load_vector(weights, names.layer_name(names.post_attention_norm, l), c.d_model);
    layers_.push_back(std::move(layer));
  }
  final_norm_ = load_vector(weights, names.final_norm, c.d_model);
  if (const auto* head = weights.find(names.lm_head)) {
    if (head->shape != std::vector<std::int64_t>{c.vocab, c.d_model}) {
      throw ModelError("lm_head '" + names.lm_head + "' must be [vocab, d_model]");
    }
    lm_head_ = record_to_matrix(*head);
  } else {
    lm_head_ = embedding_;  // tied
  }
}

Microformer Microformer::with_scaled_qk(float alpha) const {
  Microformer out = *this;
  for (auto& layer : out.layers_) {
    layer.wq *= alpha;
    layer.wk *= alpha;
  }
  return out;
}

Eigen::MatrixXf Microformer::rms_norm(const Eigen::MatrixXf& x, const Eigen::VectorXf& weight) const {
  Eigen::MatrixXf out(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double ms = x.row(t).cast<double>().squaredNorm() / static_cast<double>(x.cols());
    const float inv = static_cast<float>(1.0 / std::sqrt(ms + config_.norm_eps));
    out.row(t) = (x.row(t) * inv).cwiseProduct(weight.transpose());
  }
  return out;
}

void Microformer::apply_rope(Eigen::MatrixXf& x, int heads) const {
  const int hd = config_.head_dim();
  const int half = hd / 2;
  for (Eigen::Index pos = 0; pos < x.rows(); ++pos) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(config_.rope_base, -2.0 * i / hd);
      const double angle = static_cast<double>(pos) * freq;
      const float cs = static_cast<float>(std::cos(angle));
      const float sn = static_cast<float>(std::sin(angle));
      for (int h = 0; h < heads; ++h) {
        const Eigen::Index a = h * hd + i;
        const Eigen::Index b = a + half;
        const float xa = x(pos, a);
        const float xb = x(pos, b);
        x(pos, a) = xa * cs - xb * sn;
        x(pos, b) = xb * cs + xa * sn;
      }
    }
  }
}

ForwardTrace Microformer::forward(std::span<const int> tokens, const ForwardOptions& options) const {
  const auto& c = config_;
  if (tokens.empty()) throw ModelError("forward: empty token sequence");
  for (int t : tokens) {
    if (t < 0 || t >= c.vocab) throw ModelError("forward: token id " + std::to_string(t) + " out of range");
  }
  const auto seq = static_cast<Eigen::Index>(tokens.size());
  const int hd = c.head_dim();
  const int group = c.n_heads / c.n_kv_heads;
  const bool rope = options.rope.value_or(c.rope_enabled);
  const float scale = options.logit_scale / std::sqrt(static_cast<float>(hd));

  Eigen::MatrixXf x(seq, c.d_model);
  for (Eigen::Index t = 0; t < seq; ++t) x.row(t) = embedding_.row(tokens[static_cast<std::size_t>(t)]);

  ForwardTrace trace;
  for (const auto& layer : layers_) {
    const Eigen::MatrixXf z = rms_norm(x, layer.input_norm);
    Eigen::MatrixXf q = z * layer.wq.transpose();
    Eigen::MatrixXf k = z * layer.wk.transpose();
    const Eigen::MatrixXf v = z * layer.wv.transpose();
    if (rope) {
      apply_rope(q, c.n_heads);
      apply_rope(k, c.n_kv_heads);
    }
    Eigen::MatrixXf context(seq, static_cast<Eigen::Index>(c.n_heads) * hd);
    std::vector<Eigen::MatrixXf> heads;
    heads.reserve(static_cast<std::size_t>(c.n_heads));
    for (int h = 0; h < c.n_heads; ++h) {
      const int g = h / group;
      Eigen::MatrixXf scores = q.middleCols(h * hd, hd) * k.middleCols(g * hd, hd).transpose();
      scores *= scale;
      softmax_rows_causal(scores);
      context.middleCols(h * hd, hd) = scores * v.middleCols(g * hd, hd);
      heads.push_back(std::move(scores));
    }
    const Eigen::MatrixXf h1 = x + context * layer.wo.transpose();

    const Eigen::MatrixXf z2 = rms_norm(h1, layer.post_norm);
    Eigen::MatrixXf gate = z2 * layer.wgate.transpose();
    const Eigen::MatrixXf up = z2 * layer.wup.transpose();
    gate = gate.unaryExpr([](float g) { return g / (1.0f + std::exp(-g)); });
    x = h1 + gate.cwiseProduct(up) * layer.wdown.transpose();

    trace.hidden.push_back(x);
    trace.attn.push_back(std::move(heads));
  }
  if (options.compute_logits) trace.logits = rms_norm(x, final_norm_) * lm_head_.transpose();
  return trace;
}

ForwardTrace forward(const ModelConfig& config, const CheckpointStore& weights,
                     std::span<const int> tokens, const ForwardOptions& options) {
  return Microformer(config, weights).forward(tokens, options);
}

CheckpointStore trace_to_store(const ForwardTrace& trace) {
  CheckpointStore out;
  for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
    out.add(matrix_to_record("hidden." + std::to_string(l), trace.hidden[l]));
    for (std::size_t h = 0; h < trace.attn[l].size(); ++h) {
      out.add(matrix_to_record("attn." + std::to_string(l) + "." + std::to_string(h), trace.attn[l][h]));
    }
  }
  if (trace.logits) out.add(matrix_to_record("logits", *trace.logits));
  return out;
}

// ---------------------------------------------------------------------------

double entropy(std::span<const float> distribution) {
  double h = 0.0;
  for (float p : distribution) {
    if (p > 0.0f) h -= static_cast<double>(p) * std::log(static_cast<double>(p));
  }
  return h;
}

double EntropyProfile::mean() const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& layer : per_head) {
    for (double h : layer) {
      s += h;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

EntropyProfile attention_entropy(const ForwardTrace& trace, EntropyRow row) {
  EntropyProfile p;
  for (const auto& layer : trace.attn) {
    std::vector<double> hs;
    for (const auto& a : layer) {
      Eigen::VectorXf dist;
      if (row == EntropyRow::kFinal) {
        dist = a.row(a.rows() - 1).transpose();
      } else {
        dist = a.colwise().mean().transpose();
      }
      hs.push_back(entropy(std::span<const float>(dist.data(), static_cast<std::size_t>(dist.size()))));
    }
    double m = 0.0;
    for (double h : hs) m += h;
    p.layer_mean.push_back(hs.empty() ? 0.0 : m / static_cast<double>(hs.size()));
    p.per_head.push_back(std::move(hs));
  }
  return p;
}

std::vector<std::vector<std::vector<double>>> attention_entropy_rows(const ForwardTrace& trace) {
  std::vector<std::vector<std::vector<double>>> out;
  for (const auto& layer : trace.attn) {
    auto& lo = out.emplace_back();
    for (const auto& a : layer) {
      auto& ho = lo.emplace_back();
      for (Eigen::Index t = 0; t < a.rows(); ++t) {
        const Eigen::VectorXf r = a.row(t).transpose();
        ho.push_back(entropy(std::span<const float>(r.data(), static_cast<std::size_t>(r.size()))));
      }
    }
  }
  return out;
}

TemperatureReport temperature_check(const Microformer& model, std::span<const int> tokens,
                                    double alpha) {
  if (!(alpha > 0.0)) throw ModelError("temperature_check: alpha must be positive");
  ForwardOptions plain;
  plain.rope = false;
  ForwardOptions tempered = plain;
  tempered.logit_scale = static_cast<float>(alpha * alpha);  // divide by T = 1/α²

  const auto scaled = model.with_scaled_qk(static_cast<float>(alpha)).forward(tokens, plain);
  const auto by_temperature = model.forward(tokens, tempered);
  const auto reference = model.forward(tokens, plain);

  TemperatureReport rep;
  rep.alpha = alpha;
  for (std::size_t l = 0; l < scaled.attn.size(); ++l) {
    for (std::size_t h = 0; h < scaled.attn[l].size(); ++h) {
      const double d = (scaled.attn[l][h] - by_temperature.attn[l][h]).cwiseAbs().maxCoeff();
      rep.max_abs_diff = std::max(rep.max_abs_diff, d);
    }
  }
  rep.mean_entropy_scaled = attention_entropy(scaled).mean();
  rep.mean_entropy_reference = attention_entropy(reference).mean();
  rep.identity_holds = rep.max_abs_diff < 1e-5;
  return rep;
}

// ---------------------------------------------------------------------------

std::vector<Eigen::MatrixXd> pooled_hidden(const Microformer& model,
                                           std::span<const std::vector<int>> inputs, Pooling pooling) {
  if (inputs.empty()) throw ModelError("pooled_hidden: empty input list");
  const auto& c = model.config();
  std::vector<Eigen::MatrixXd> out(static_cast<std::size_t>(c.n_layers),
                                   Eigen::MatrixXd(static_cast<Eigen::Index>(inputs.size()), c.d_model));
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    const auto trace = model.forward(inputs[j]);
    for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
      const auto& h = trace.hidden[l];
      out[l].row(static_cast<Eigen::Index>(j)) =
          pooling == Pooling::kMean ? Eigen::RowVectorXd(h.cast<double>().colwise().mean())
                                    : Eigen::RowVectorXd(h.row(h.rows() - 1).cast<double>());
    }
  }
  return out;
}

std::vector<Eigen::VectorXd> mean_hidden(const Microformer& model,
                                         std::span<const std::vector<int>> inputs, Pooling pooling) {
  const auto pooled = pooled_hidden(model, inputs, pooling);
  std::vector<Eigen::VectorXd> out;
  for (const auto& m : pooled) out.push_back(m.colwise().mean().transpose());
  return out;
}

std::string_view cka_mode_name(CkaMode mode) {
  return mode == CkaMode::BATCH_LINEAR_CKA ? "batch-linear" : "mean-cos2";
}

std::optional<CkaMode> parse_cka_mode(std::string_view name) {
  if (name == "batch-linear" || name == "BATCH_LINEAR_CKA") return CkaMode::BATCH_LINEAR_CKA;
  if (name == "mean-cos2" || name == "MEAN_VECTOR_COS2") return CkaMode::MEAN_VECTOR_COS2;
  return std::nullopt;
}

double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows()) throw ModelError("linear_cka: example counts differ");
  if (x.rows() < 2) throw ModelError("linear_cka: needs at least 2 examples");
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  const double cross = (yc.transpose() * xc).squaredNorm();
  const double nx = (xc.transpose() * xc).norm();
  const double ny = (yc.transpose() * yc).norm();
  if (nx == 0.0 || ny == 0.0) return 0.0;
  return cross / (nx * ny);
}

double cosine_squared(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const double nx = x.squaredNorm();
  const double ny = y.squaredNorm();
  if (nx == 0.0 || ny == 0.0) return 0.0;
  const double d = x.dot(y);
  return d * d / (nx * ny);
}

CkaHeatmap cka(const RepresentationSet& a, const RepresentationSet& b, CkaMode mode) {
  if (a.size() != b.size()) throw ModelError("cka: representation sets have different layer counts");
  CkaHeatmap out;
  out.mode = mode;
  out.values.resize(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      double v;
      if (mode == CkaMode::BATCH_LINEAR_CKA) {
        v = linear_cka(a[i], b[j]);
      } else {
        v = cosine_squared(a[i].colwise().mean().transpose(), b[j].colwise().mean().transpose());
      }
      out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  }
  return out;
}

}  // namespace spectral_forge
