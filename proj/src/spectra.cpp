#include "spectral_forge/spectra.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include <openssl/evp.h>

namespace spectral_forge {

SpectralDecomposition reduced_svd(const Eigen::MatrixXf& w, const std::string& label) {
  if (w.rows() < 1 || w.cols() < 1) throw SpectralError(label + ": empty matrix");
  if (!w.allFinite()) throw SpectralError(label + ": matrix has non-finite entries");

  SpectralDecomposition d;
  d.transposed = w.rows() < w.cols();
  const Eigen::MatrixXd a = d.transposed ? Eigen::MatrixXd(w.transpose().cast<double>())
                                         : Eigen::MatrixXd(w.cast<double>());

  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw SpectralError(label + ": SVD did not converge");

  Eigen::MatrixXd u = svd.matrixU();
  Eigen::MatrixXd v = svd.matrixV();
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    Eigen::Index best = 0;
    double best_abs = -1.0;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const double x = std::abs(u(i, j));
      if (x > best_abs) {
        best_abs = x;
        best = i;
      }
    }
    if (u(best, j) < 0) {
      u.col(j) *= -1.0;
      v.col(j) *= -1.0;
    }
  }
  d.u = u.cast<float>();
  d.sigma = svd.singularValues().cast<float>();
  d.v = v.cast<float>();
  // Narrowing to float can flip the sign of a canonical entry only if it
  // was tied in magnitude; re-run on the stored factors to keep the
  // invariant exact.
  canonicalize_signs(d);
  return d;
}

void canonicalize_signs(SpectralDecomposition& d) {
  for (Eigen::Index j = 0; j < d.u.cols(); ++j) {
    Eigen::Index best = 0;
    float best_abs = -1.0f;
    for (Eigen::Index i = 0; i < d.u.rows(); ++i) {
      const float x = std::abs(d.u(i, j));
      if (x > best_abs) {
        best_abs = x;
        best = i;
      }
    }
    if (d.u(best, j) < 0) {
      d.u.col(j) *= -1.0f;
      d.v.col(j) *= -1.0f;
    }
  }
}

Eigen::MatrixXf reconstruct(const SpectralDecomposition& d,
                            const std::optional<Eigen::VectorXf>& sigma_override,
                            const std::optional<Eigen::MatrixXf>& u_override,
                            const std::optional<Eigen::MatrixXf>& v_override) {
  const Eigen::MatrixXf& u = u_override ? *u_override : d.u;
  const Eigen::VectorXf& s = sigma_override ? *sigma_override : d.sigma;
  const Eigen::MatrixXf& v = v_override ? *v_override : d.v;
  if (u.rows() != d.u.rows() || u.cols() != d.rank() || s.size() != d.rank() ||
      v.rows() != d.v.rows() || v.cols() != d.rank()) {
    throw SpectralError("reconstruct: override dimensions do not match the decomposition");
  }
  const Eigen::MatrixXd w = u.cast<double>() * s.cast<double>().asDiagonal() *
                            v.cast<double>().transpose();
  if (d.transposed) return w.transpose().cast<float>();
  return w.cast<float>();
}

bool has_degenerate_cluster(const Eigen::VectorXf& sigma, double relative_gap) {
  if (sigma.size() < 2) return false;
  const double limit = relative_gap * static_cast<double>(sigma(0));
  for (Eigen::Index j = 1; j < sigma.size(); ++j) {
    if (static_cast<double>(sigma(j - 1)) - static_cast<double>(sigma(j)) < limit) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Hashing

std::string bytes_sha256(std::span<const std::byte> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string tensor_content_hash(const TensorRecord& record) {
  std::string prefix(dtype_name(record.dtype));
  for (auto d : record.shape) prefix += "," + std::to_string(d);
  prefix += ";";
  std::vector<std::byte> buf(prefix.size() + record.data.size());
  std::memcpy(buf.data(), prefix.data(), prefix.size());
  if (!record.data.empty()) std::memcpy(buf.data() + prefix.size(), record.data.data(), record.data.size());
  return bytes_sha256(buf);
}

// ---------------------------------------------------------------------------
// Cache sidecar

CheckpointStore decompositions_to_store(const DecompositionMap& decomps,
                                        const std::map<MatrixKey, std::string>& hashes) {
  CheckpointStore out;
  for (const auto& [key, d] : decomps) {
    const auto k = to_string(key);
    out.add(matrix_to_record(k + ".u", d.u));
    out.add(TensorRecord::from_floats(k + ".sigma", {d.sigma.size()},
                                      std::span<const float>(d.sigma.data(), d.sigma.size())));
    out.add(matrix_to_record(k + ".v", d.v));
    if (auto h = hashes.find(key); h != hashes.end()) out.set_metadata(k + ".hash", h->second);
    out.set_metadata(k + ".transposed", d.transposed ? "1" : "0");
  }
  return out;
}

DecompositionMap decompositions_from_store(const CheckpointStore& store,
                                           const std::map<MatrixKey, std::string>& hashes) {
  DecompositionMap out;
  for (const auto& [key, hash] : hashes) {
    const auto k = to_string(key);
    if (store.metadata_value(k + ".hash") != hash) continue;
    const auto* u = store.find(k + ".u");
    const auto* s = store.find(k + ".sigma");
    const auto* v = store.find(k + ".v");
    if (!u || !s || !v) continue;
    SpectralDecomposition d;
    d.u = record_to_matrix(*u);
    const auto sv = s->to_floats();
    d.sigma = Eigen::Map<const Eigen::VectorXf>(sv.data(), static_cast<Eigen::Index>(sv.size()));
    d.v = record_to_matrix(*v);
    d.transposed = store.metadata_value(k + ".transposed") == "1";
    out.emplace(key, std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------

DecompositionMap decompose_all(const CheckpointStore& store,
                               const std::map<MatrixKey, std::string>& keys,
                               const DecomposeOptions& options) {
  std::vector<std::pair<MatrixKey, std::string>> jobs(keys.begin(), keys.end());
  for (const auto& [key, name] : jobs) {
    const auto& rec = store.at(name);
    if (rec.shape.size() != 2) {
      throw SpectralError(to_string(key) + " ('" + name + "') is rank " +
                          std::to_string(rec.shape.size()) + ", expected rank 2");
    }
  }

  std::map<MatrixKey, std::string> hashes;
  std::filesystem::path cache_file;
  DecompositionMap cached;
  if (!options.cache_dir.empty()) {
    std::string combined;
    for (const auto& [key, name] : jobs) {
      const auto h = tensor_content_hash(store.at(name));
      hashes[key] = h;
      combined += to_string(key) + "=" + h + ";";
    }
    combined += options.schema.stored_transposed ? "T" : "N";
    const auto tag = bytes_sha256(std::as_bytes(std::span(combined.data(), combined.size())));
    cache_file = options.cache_dir / ("svd-" + tag.substr(0, 32) + ".safetensors");
    if (std::filesystem::exists(cache_file)) {
      try {
        cached = decompositions_from_store(read_checkpoint(cache_file), hashes);
      } catch (const CheckpointError&) {
        cached.clear();  // unreadable cache is recomputed
      }
    }
  }

  std::vector<SpectralDecomposition> results(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::vector<char> from_cache(jobs.size(), 0);
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (auto it = cached.find(jobs[i].first); it != cached.end()) {
      results[i] = it->second;
      from_cache[i] = 1;
    }
  }

  std::size_t done = 0;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(jobs.size()); ++i) {
    const auto& [key, name] = jobs[static_cast<std::size_t>(i)];
    if (!from_cache[static_cast<std::size_t>(i)]) {
      try {
        const auto w = load_matrix(store, name, options.schema);
        results[static_cast<std::size_t>(i)] = reduced_svd(w, to_string(key) + " ('" + name + "')");
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(i)] = e.what();
      }
    }
    if (options.progress) {
#pragma omp critical
      options.progress(key, ++done, jobs.size());
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw SpectralError(e);
  }

  DecompositionMap out;
  for (std::size_t i = 0; i < jobs.size(); ++i) out.emplace(jobs[i].first, std::move(results[i]));

  if (!cache_file.empty() && cached.size() != out.size()) {
    std::error_code ec;
    std::filesystem::create_directories(options.cache_dir, ec);
    try {
      write_checkpoint(decompositions_to_store(out, hashes), cache_file);
    } catch (const CheckpointError&) {
      // cache is best effort
    }
  }
  return out;
}

}  // namespace spectral_forge
