#include <doctest.h>

#include "spectral_forge/fixtures.hpp"
#include "spectral_forge/spectra.hpp"
#include "test_util.hpp"

using namespace spectral_forge;

namespace {

bool orthonormal_columns(const Eigen::MatrixXf& m, double tol) {
  const Eigen::MatrixXd g = m.cast<double>().transpose() * m.cast<double>();
  return (g - Eigen::MatrixXd::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff() < tol;
}

double rel_err(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b) {
  return (a.cast<double>() - b.cast<double>()).norm() / b.cast<double>().norm();
}

CheckpointStore toy_store() {
  FixtureSpec spec;
  spec.seed = 3;
  return generate_pair(spec).base;
}

}  // namespace

TEST_CASE("identity decomposes to identity factors") {
  auto d = reduced_svd(Eigen::MatrixXf::Identity(3, 3));
  CHECK(d.sigma.isApprox(Eigen::VectorXf::Ones(3)));
  CHECK(d.u.isIdentity(1e-6f));
  CHECK(d.v.isIdentity(1e-6f));
  CHECK_FALSE(d.transposed);
}

TEST_CASE("diagonal matrix sorts its spectrum with axis-aligned factors") {
  Eigen::MatrixXf w = Eigen::Vector3f(3, 1, 2).asDiagonal();
  auto d = reduced_svd(w);
  CHECK(d.sigma(0) == doctest::Approx(3));
  CHECK(d.sigma(1) == doctest::Approx(2));
  CHECK(d.sigma(2) == doctest::Approx(1));
  Eigen::MatrixXf p(3, 3);
  p << 1, 0, 0, 0, 0, 1, 0, 1, 0;
  CHECK(d.u.isApprox(p, 1e-6f));
  CHECK(d.v.isApprox(p, 1e-6f));
}

TEST_CASE("random rectangular reconstruction and orthonormality") {
  for (auto [rows, cols] : {std::pair{8, 5}, std::pair{5, 8}}) {
    const auto w = test_util::random_matrix(rows, cols, 11);
    auto d = reduced_svd(w);
    CHECK(d.transposed == (rows < cols));
    CHECK(d.rank() == 5);
    CHECK(d.source_rows() == rows);
    CHECK(d.source_cols() == cols);
    // Oracle: direct product in the source orientation.
    Eigen::MatrixXf direct = d.u * d.sigma.asDiagonal() * d.v.transpose();
    if (d.transposed) direct.transposeInPlace();
    CHECK(rel_err(direct, w) < 1e-5);
    CHECK(rel_err(reconstruct(d), w) < 1e-5);
    CHECK(orthonormal_columns(d.u, 1e-5));
    CHECK(orthonormal_columns(d.v, 1e-5));
    for (Eigen::Index j = 1; j < d.sigma.size(); ++j) CHECK(d.sigma(j - 1) >= d.sigma(j));
  }
}

TEST_CASE("non-finite input names the matrix") {
  Eigen::MatrixXf w = Eigen::MatrixXf::Ones(2, 2);
  w(1, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(reduced_svd(w, "L0.SA.Q"), doctest::Contains("L0.SA.Q"), SpectralError);
}

TEST_CASE("reconstruct with overrides") {
  const auto w = test_util::random_matrix(6, 4, 2);
  auto d = reduced_svd(w);
  CHECK(rel_err(reconstruct(d, Eigen::VectorXf(2 * d.sigma)), Eigen::MatrixXf(2 * w)) < 1e-5);

  auto other = reduced_svd(test_util::random_matrix(6, 4, 9));
  auto mixed = reconstruct(d, std::nullopt, other.u, other.v);
  CHECK(mixed.rows() == 6);
  CHECK(mixed.cols() == 4);

  CHECK_THROWS_AS(reconstruct(d, Eigen::VectorXf(Eigen::VectorXf::Ones(3))), SpectralError);
  CHECK_THROWS_AS(reconstruct(d, std::nullopt, Eigen::MatrixXf(Eigen::MatrixXf::Ones(5, 4))), SpectralError);
}

TEST_CASE("canonical sign convention and idempotence") {
  auto d = reduced_svd(test_util::random_matrix(7, 7, 5));
  for (Eigen::Index j = 0; j < d.u.cols(); ++j) {
    Eigen::Index i;
    d.u.col(j).cwiseAbs().maxCoeff(&i);
    CHECK(d.u(i, j) >= 0.0f);
  }
  auto again = d;
  canonicalize_signs(again);
  CHECK(again.u == d.u);
  CHECK(again.v == d.v);

  // Explicit flips are undone.
  auto flipped = d;
  flipped.u.col(2) *= -1.0f;
  flipped.v.col(2) *= -1.0f;
  canonicalize_signs(flipped);
  CHECK(flipped.u == d.u);
  CHECK(flipped.v == d.v);
}

TEST_CASE("independent backend agrees after canonicalization") {
  // Well-separated spectrum: all gaps exceed 1e-3 * sigma_1.
  const int n = 12;
  const Eigen::MatrixXd u = random_orthogonal(n, 41), v = random_orthogonal(n, 42);
  Eigen::VectorXd s(n);
  for (int j = 0; j < n; ++j) s(j) = 2.0 - 0.15 * j;
  const Eigen::MatrixXf w = (u * s.asDiagonal() * v.transpose()).cast<float>();
  auto ours = reduced_svd(w);
  REQUIRE_FALSE(has_degenerate_cluster(ours.sigma));

  Eigen::JacobiSVD<Eigen::MatrixXd> jac(w.cast<double>(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  SpectralDecomposition ref;
  ref.u = jac.matrixU().cast<float>();
  ref.v = jac.matrixV().cast<float>();
  ref.sigma = jac.singularValues().cast<float>();
  canonicalize_signs(ref);
  CHECK((ours.u - ref.u).cwiseAbs().maxCoeff() < 1e-4f);
  CHECK((ours.v - ref.v).cwiseAbs().maxCoeff() < 1e-4f);
}

TEST_CASE("spectrum scales linearly and is rotation invariant") {
  const auto w = test_util::random_matrix(10, 10, 8);
  const auto s = reduced_svd(w).sigma;
  const auto s2 = reduced_svd(Eigen::MatrixXf(0.7f * w)).sigma;
  CHECK(((s2 - 0.7f * s).cwiseAbs().array() <= 1e-5f * s(0)).all());
  const Eigen::MatrixXf q = random_orthogonal(10, 4).cast<float>();
  const auto sq = reduced_svd(Eigen::MatrixXf(w * q)).sigma;
  CHECK((sq - s).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("degenerate cluster detection") {
  CHECK(has_degenerate_cluster(Eigen::Vector3f(1.0f, 1.0f, 0.5f)));
  CHECK_FALSE(has_degenerate_cluster(Eigen::Vector3f(1.0f, 0.9f, 0.5f)));
  CHECK(has_degenerate_cluster(Eigen::Vector3f(1.0f, 0.9f, 0.8995f)));
  CHECK_FALSE(has_degenerate_cluster(Eigen::VectorXf::Ones(1)));
}

TEST_CASE("decompose_all over a toy store") {
  const auto store = toy_store();
  const auto keys = classify(store, NamingSchema::standard()).keys;
  auto a = decompose_all(store, keys);
  CHECK(a.size() == 14);
  auto b = decompose_all(store, keys);
  for (const auto& [k, d] : a) CHECK(b.at(k).sigma == d.sigma);
  // GQA K/V are wide in [out, in] storage only if out < in.
  CHECK(a.at({0, MatrixType::K}).transposed);
  CHECK_FALSE(a.at({0, MatrixType::Q}).transposed);

  std::size_t calls = 0;
  DecomposeOptions opts;
  opts.progress = [&](const MatrixKey&, std::size_t done, std::size_t total) {
    CHECK(done <= total);
    ++calls;
  };
  decompose_all(store, keys, opts);
  CHECK(calls == 14);
}

TEST_CASE("rank-3 tensor under a matched key") {
  auto store = toy_store();
  const std::string name = "model.layers.1.mlp.down_proj.weight";
  std::vector<float> z(8, 1.0f);
  store.replace(TensorRecord::from_floats(name, {2, 2, 2}, z));
  const auto keys = classify(store, NamingSchema::standard()).keys;
  CHECK_THROWS_WITH_AS(decompose_all(store, keys), doctest::Contains("L1.FFN.DOWN"), SpectralError);
}

TEST_CASE("sidecar cache is reused and keyed by content") {
  test_util::TempDir dir;
  const auto store = toy_store();
  const auto keys = classify(store, NamingSchema::standard()).keys;
  DecomposeOptions opts;
  opts.cache_dir = dir.path();
  const auto first = decompose_all(store, keys, opts);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
    CHECK(e.path().extension() == ".safetensors");
    ++files;
  }
  CHECK(files == 1);
  const auto second = decompose_all(store, keys, opts);
  for (const auto& [k, d] : first) {
    CHECK(second.at(k).u == d.u);
    CHECK(second.at(k).sigma == d.sigma);
    CHECK(second.at(k).transposed == d.transposed);
  }

  // A changed tensor gets a different cache file, never stale factors.
  auto changed = store;
  const auto& name = keys.at({0, MatrixType::Q});
  auto w = load_matrix(store, name, NamingSchema::standard());
  changed.replace(matrix_to_record(name, Eigen::MatrixXf(2.0f * w)));
  const auto third = decompose_all(changed, keys, opts);
  CHECK(third.at({0, MatrixType::Q}).sigma.isApprox(2.0f * first.at({0, MatrixType::Q}).sigma, 1e-5f));
}

TEST_CASE("content hash covers dtype, shape and bytes") {
  const float v[] = {1, 2, 3, 4};
  const auto a = TensorRecord::from_floats("a", {2, 2}, v);
  const auto b = TensorRecord::from_floats("b", {4}, v);
  CHECK(tensor_content_hash(a) != tensor_content_hash(b));
  CHECK(tensor_content_hash(a) == tensor_content_hash(TensorRecord::from_floats("c", {2, 2}, v)));
  const std::string abc = "abc";
  CHECK(bytes_sha256(std::as_bytes(std::span(abc.data(), abc.size()))) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
