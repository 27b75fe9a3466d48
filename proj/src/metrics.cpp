#include "spectral_forge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace spectral_forge {

namespace {

constexpr double kUndefinedRatio = 1e-8;

void require_compatible(const SpectralDecomposition& da, const SpectralDecomposition& db) {
  if (da.rank() != db.rank() || da.u.rows() != db.u.rows() || da.v.rows() != db.v.rows() ||
      da.transposed != db.transposed) {
    throw MetricsError("decompositions have mismatched shapes");
  }
}

}  // namespace

std::size_t top_count(std::size_t r, double top_fraction) {
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) {
    throw MetricsError("top_fraction must lie in (0, 1]");
  }
  const auto n = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(r) - 1e-9));
  return std::clamp<std::size_t>(n, r == 0 ? 0 : 1, r);
}

ScalingProfile scaling_profile(const SpectralDecomposition& da, const SpectralDecomposition& db,
                               double top_fraction, const MatrixKey& key) {
  require_compatible(da, db);
  const auto r = static_cast<std::size_t>(da.rank());
  if (r == 0 || !(da.sigma(0) > 0.0f)) throw MetricsError(to_string(key) + ": base spectrum is all zero");

  ScalingProfile p;
  p.key = key;
  p.top_fraction = top_fraction;
  p.top_count = top_count(r, top_fraction);
  p.div.resize(r);
  const double floor = kUndefinedRatio * static_cast<double>(da.sigma(0));
  for (std::size_t j = 0; j < r; ++j) {
    const double a = da.sigma(static_cast<Eigen::Index>(j));
    const double b = db.sigma(static_cast<Eigen::Index>(j));
    if (a > floor) p.div[j] = b / a;
  }

  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < p.top_count; ++j) {
    if (p.div[j]) {
      sum += *p.div[j];
      ++n;
    }
  }
  if (n == 0) return p;
  p.mean_top = sum / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t j = 0; j < p.top_count; ++j) {
    if (p.div[j]) ss += (*p.div[j] - p.mean_top) * (*p.div[j] - p.mean_top);
  }
  p.std_top = std::sqrt(ss / static_cast<double>(n));
  return p;
}

std::map<MatrixType, ScalingStats> scaling_stats(std::span<const ScalingProfile> profiles) {
  std::map<MatrixType, std::vector<double>> pooled;
  for (const auto& p : profiles) {
    auto& v = pooled[p.key.mtype];
    for (std::size_t j = 0; j < p.top_count; ++j) {
      if (p.div[j]) v.push_back(*p.div[j]);
    }
  }
  std::map<MatrixType, ScalingStats> out;
  for (const auto& [type, values] : pooled) {
    ScalingStats s;
    s.count = values.size();
    if (!values.empty()) {
      s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
      double ss = 0.0;
      for (double x : values) ss += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(ss / static_cast<double>(values.size()));
    }
    out[type] = s;
  }
  return out;
}

std::map<MatrixType, Eigen::MatrixXd> svsm(std::span<const ScalingProfile> profiles) {
  std::map<MatrixType, std::map<int, const ScalingProfile*>> by_type;
  int max_layer = -1;
  for (const auto& p : profiles) {
    by_type[p.key.mtype][p.key.layer] = &p;
    max_layer = std::max(max_layer, p.key.layer);
  }
  std::map<MatrixType, Eigen::MatrixXd> out;
  for (const auto& [type, layers] : by_type) {
    const auto r = static_cast<Eigen::Index>(layers.begin()->second->div.size());
    Eigen::MatrixXd m(r, max_layer + 1);
    for (int layer = 0; layer <= max_layer; ++layer) {
      auto it = layers.find(layer);
      if (it == layers.end()) {
        throw MetricsError("SVSM: matrix type " + std::string(matrix_type_name(type)) +
                           " is missing layer " + std::to_string(layer));
      }
      if (static_cast<Eigen::Index>(it->second->div.size()) != r) {
        throw MetricsError("SVSM: rank differs across layers for " + std::string(matrix_type_name(type)));
      }
      for (Eigen::Index j = 0; j < r; ++j) {
        const auto& d = it->second->div[static_cast<std::size_t>(j)];
        m(j, layer) = d ? *d : std::numeric_limits<double>::quiet_NaN();
      }
    }
    out[type] = std::move(m);
  }
  return out;
}

double quantize_alpha(double mean, double quantum) {
  if (!(quantum > 0.0)) throw MetricsError("alpha quantum must be positive");
  const double steps = std::round(mean / quantum);
  // For quanta like 0.1 divide by the integer 10 instead of multiplying by
  // 0.1, so results land on the nearest double to the decimal value.
  const double inverse = 1.0 / quantum;
  if (std::abs(inverse - std::round(inverse)) < 1e-9) return steps / std::round(inverse);
  return steps * quantum;
}

std::map<MatrixType, double> alpha_assign(const std::map<MatrixType, double>& means, double quantum) {
  if (means.empty()) throw MetricsError("alpha_assign: no scaling statistics given");
  std::map<MatrixType, double> out;
  for (const auto& [type, mean] : means) out[type] = quantize_alpha(mean, quantum);
  return out;
}

double orthogonality_defect(const Eigen::MatrixXd& q) {
  const auto r = q.cols();
  if (r == 0) return 0.0;
  return (q.transpose() * q - Eigen::MatrixXd::Identity(r, r)).norm() / static_cast<double>(r);
}

OrthogonalConsistency orthogonal_consistency(const SpectralDecomposition& da,
                                             const SpectralDecomposition& db,
                                             const MatrixKey& key) {
  require_compatible(da, db);
  OrthogonalConsistency c;
  c.key = key;
  const Eigen::MatrixXd qu = da.u.cast<double>().transpose() * db.u.cast<double>();
  const Eigen::MatrixXd qv = da.v.cast<double>().transpose() * db.v.cast<double>();
  c.sim_u = qu.cwiseAbs();
  c.sim_v = qv.cwiseAbs();
  c.i_orth = qu.transpose() * qv;
  const auto r = c.i_orth.rows();
  c.nf = (c.i_orth - Eigen::MatrixXd::Identity(r, r)).norm() / static_cast<double>(r);
  c.degenerate_flag = has_degenerate_cluster(da.sigma) || has_degenerate_cluster(db.sigma);
  c.q_u_defect = orthogonality_defect(qu);
  c.q_v_defect = orthogonality_defect(qv);
  return c;
}

std::string_view verdict_name(Verdict v) {
  switch (v) {
    case Verdict::SHARED_LINEAGE: return "SHARED_LINEAGE";
    case Verdict::INDEPENDENT: return "INDEPENDENT";
    case Verdict::INCONCLUSIVE: return "INCONCLUSIVE";
  }
  return "?";
}

Verdict verdict_for(double mean_nf, double threshold) {
  if (mean_nf < threshold) return Verdict::SHARED_LINEAGE;
  if (mean_nf > 2.0 * threshold) return Verdict::INDEPENDENT;
  return Verdict::INCONCLUSIVE;
}

FingerprintReport fingerprint_from(const std::map<MatrixKey, OrthogonalConsistency>& per_key,
                                   double threshold) {
  FingerprintReport rep;
  rep.threshold = threshold;
  if (per_key.empty()) {
    rep.explanation = "no comparable weight matrices";
    return rep;
  }
  std::map<MatrixType, std::pair<double, int>> acc;
  double total = 0.0;
  for (const auto& [key, c] : per_key) {
    rep.nf[key] = c.nf;
    acc[key.mtype].first += c.nf;
    acc[key.mtype].second += 1;
    total += c.nf;
  }
  for (const auto& [type, sn] : acc) rep.mean_nf_by_type[type] = sn.first / sn.second;
  rep.mean_nf = total / static_cast<double>(per_key.size());
  rep.verdict = verdict_for(rep.mean_nf, threshold);
  rep.explanation = "mean nf " + std::to_string(rep.mean_nf) + " over " +
                    std::to_string(per_key.size()) + " matrices against threshold " +
                    std::to_string(threshold);
  return rep;
}

FingerprintReport fingerprint(const CheckpointStore& a, const CheckpointStore& b,
                              const NamingSchema& schema, double threshold,
                              const DecomposeOptions& options) {
  const auto ca = classify(a, schema);
  const auto cb = classify(b, schema);
  reject_fused(ca);
  reject_fused(cb);

  std::vector<std::string> mismatches;
  for (const auto& [key, name] : ca.keys) {
    if (!cb.keys.count(key)) mismatches.push_back(to_string(key) + " missing in second checkpoint");
  }
  for (const auto& [key, name] : cb.keys) {
    if (!ca.keys.count(key)) mismatches.push_back(to_string(key) + " missing in first checkpoint");
  }
  for (const auto& [key, name] : ca.keys) {
    auto it = cb.keys.find(key);
    if (it != cb.keys.end() && a.at(name).shape != b.at(it->second).shape) {
      mismatches.push_back(to_string(key) + " has different shapes");
    }
  }
  if (!mismatches.empty() || ca.keys.empty()) {
    FingerprintReport rep;
    rep.threshold = threshold;
    rep.verdict = Verdict::INCONCLUSIVE;
    rep.explanation = ca.keys.empty() ? "no classified weight matrices" : "key sets differ: ";
    for (std::size_t i = 0; i < mismatches.size() && i < 8; ++i) {
      rep.explanation += (i ? "; " : "") + mismatches[i];
    }
    if (mismatches.size() > 8) rep.explanation += "; ...";
    return rep;
  }

  auto opts = options;
  opts.schema = schema;
  const auto da = decompose_all(a, ca.keys, opts);
  const auto db = decompose_all(b, cb.keys, opts);
  std::map<MatrixKey, OrthogonalConsistency> per_key;
  for (const auto& [key, d] : da) per_key.emplace(key, orthogonal_consistency(d, db.at(key), key));
  return fingerprint_from(per_key, threshold);
}

double calibrate_threshold(std::span<const double> shared_nf,
                           std::span<const double> independent_nf) {
  if (shared_nf.empty() || independent_nf.empty()) {
    throw MetricsError("threshold calibration needs both populations");
  }
  const double hi_shared = *std::max_element(shared_nf.begin(), shared_nf.end());
  const double lo_indep = *std::min_element(independent_nf.begin(), independent_nf.end());
  // A threshold t classifies both populations iff hi_shared < t and
  // 2t < lo_indep; take the geometric midpoint of that interval.
  const double upper = 0.5 * lo_indep;
  if (!(hi_shared < upper)) {
    throw MetricsError("nf populations are not separable: shared max " + std::to_string(hi_shared) +
                       ", independent min " + std::to_string(lo_indep));
  }
  // Floor keeps the midpoint positive when every shared pair is exact.
  const double lo = std::max(hi_shared, 1e-12);
  return std::sqrt(lo * upper);
}

}  // namespace spectral_forge
