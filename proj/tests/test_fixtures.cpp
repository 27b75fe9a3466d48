#include <doctest.h>

#include <cmath>

#include <json.hpp>

#include "spectral_forge/fixtures.hpp"
#include "spectral_forge/metrics.hpp"
#include "test_util.hpp"

using namespace spectral_forge;

namespace {

double defect(const Eigen::MatrixXd& q) {
  return (q.transpose() * q - Eigen::MatrixXd::Identity(q.cols(), q.cols())).norm();
}

double mean_nf(const FixturePair& p) {
  const auto schema = NamingSchema::standard();
  const auto ka = classify(p.base, schema).keys, kb = classify(p.post, schema).keys;
  const auto da = decompose_all(p.base, ka), db = decompose_all(p.post, kb);
  double sum = 0.0;
  for (const auto& [k, d] : da) sum += orthogonal_consistency(d, db.at(k)).nf;
  return sum / static_cast<double>(da.size());
}

ModelConfig square64() {
  ModelConfig c;
  c.d_model = 64;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.d_mlp = 64;
  return c;
}

}  // namespace

TEST_CASE("random orthogonal matrices") {
  const auto q1 = random_orthogonal(1, 3);
  CHECK(std::abs(q1(0, 0)) == doctest::Approx(1.0));
  CHECK(defect(random_orthogonal(64, 9)) / 64 < 1e-10);
  CHECK(random_orthogonal(8, 5) == random_orthogonal(8, 5));

  // Haar: E tr(Q1^T Q2) = 0.
  double sum = 0.0;
  for (int t = 0; t < 100; ++t) sum += (random_orthogonal(16, 2 * t).transpose() * random_orthogonal(16, 2 * t + 1)).trace();
  CHECK(std::abs(sum / 100) < 0.5);
}

TEST_CASE("small rotations") {
  CHECK(small_rotation(6, 0.0, 1).isIdentity(1e-14));
  const auto r = small_rotation(32, 0.05, 2);
  CHECK(defect(r) < 1e-8);
  // First order: ||exp(eps A) - I||_F ~ eps ||A||_F = eps.
  CHECK((r - Eigen::MatrixXd::Identity(32, 32)).norm() == doctest::Approx(0.05).epsilon(0.2));
}

TEST_CASE("seed mixing separates streams") {
  CHECK(mix_seed(1, {2, 3}) == mix_seed(1, {2, 3}));
  CHECK(mix_seed(1, {2, 3}) != mix_seed(1, {3, 2}));
  CHECK(mix_seed(1, {2}) != mix_seed(2, {2}));
}

TEST_CASE("fixture spec parsing and validation") {
  auto spec = FixtureSpec::from_json(R"({"seed":5,"alpha":{"Q":0.9,"O":1.4},"mode":"PERTURBED",
    "perturbation":0.01,"config":{"d_model":16,"n_heads":2,"n_kv_heads":1,"d_mlp":24,"n_layers":3}})");
  CHECK(spec.seed == 5);
  CHECK(spec.alpha(MatrixType::Q) == 0.9);
  CHECK(spec.alpha(MatrixType::K) == 1.0);
  CHECK(spec.mode == FixtureMode::PERTURBED);
  CHECK(spec.config.n_layers == 3);
  auto uniform = FixtureSpec::from_json(R"({"alpha":0.9})");
  for (auto t : kAllMatrixTypes) CHECK(uniform.alpha(t) == 0.9);

  FixtureSpec bad;
  bad.perturbation = 0.1;  // EXACT forbids perturbation
  CHECK_THROWS(bad.validate());
}

TEST_CASE("EXACT fixtures are recovered by metrics") {
  FixtureSpec spec;
  spec.config = square64();
  spec.alpha_map = {{MatrixType::Q, 0.9}, {MatrixType::DOWN, 1.2}};
  spec.seed = 4;
  auto pair = generate_pair(spec);
  const auto schema = NamingSchema::standard();
  const auto keys = classify(pair.base, schema).keys;
  CHECK(keys.size() == 14);
  const auto da = decompose_all(pair.base, keys), db = decompose_all(pair.post, keys);
  for (const auto& [k, d] : da) {
    const auto p = scaling_profile(d, db.at(k), 0.9, k);
    CHECK(p.mean_top == doctest::Approx(spec.alpha(k.mtype)).epsilon(1e-5));
    CHECK(p.std_top < 1e-6);
    const auto c = orthogonal_consistency(d, db.at(k), k);
    CHECK(c.nf < 1e-5);
    // sim_u recovers |Q|.
    CHECK((c.sim_u - pair.truth.matrices.at(k).q.cwiseAbs()).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("fixture stores carry the auxiliary weights") {
  FixtureSpec spec;
  auto pair = generate_pair(spec);
  CHECK(pair.base.contains("model.embed_tokens.weight"));
  CHECK(pair.base.contains("model.norm.weight"));
  CHECK(pair.base.contains("model.layers.1.post_attention_layernorm.weight"));
  CHECK(pair.base.at("model.embed_tokens.weight").data == pair.post.at("model.embed_tokens.weight").data);
  const auto [out, in] = matrix_shape(spec.config, MatrixType::K);
  CHECK(pair.base.at("model.layers.0.self_attn.k_proj.weight").shape == std::vector<std::int64_t>{out, in});
}

TEST_CASE("reproducible and variant-separated") {
  FixtureSpec spec;
  spec.mode = FixtureMode::PERTURBED;
  spec.perturbation = 0.05;
  spec.tail_noise = 0.1;
  spec.seed = 8;
  auto a = generate_pair(spec), b = generate_pair(spec);
  CHECK(serialize_checkpoint(a.base) == serialize_checkpoint(b.base));
  CHECK(serialize_checkpoint(a.post) == serialize_checkpoint(b.post));
  spec.variant = 1;
  auto c = generate_pair(spec);
  CHECK(serialize_checkpoint(c.base) == serialize_checkpoint(a.base));
  CHECK(serialize_checkpoint(c.post) != serialize_checkpoint(a.post));
}

TEST_CASE("zero perturbation equals EXACT byte for byte") {
  FixtureSpec spec;
  spec.seed = 2;
  spec.alpha_map = {{MatrixType::V, 0.8}};
  auto exact = generate_pair(spec);
  spec.mode = FixtureMode::PERTURBED;
  auto pert = generate_pair(spec);
  CHECK(serialize_checkpoint(exact.post) == serialize_checkpoint(pert.post));
  CHECK(serialize_checkpoint(exact.base) == serialize_checkpoint(pert.base));
}

TEST_CASE("INDEPENDENT fixtures at r = 64 sit near sqrt(2/r)") {
  FixtureSpec spec;
  spec.config = square64();
  spec.mode = FixtureMode::INDEPENDENT;
  spec.seed = 6;
  auto pair = generate_pair(spec);
  const auto keys = classify(pair.base, NamingSchema::standard()).keys;
  const auto da = decompose_all(pair.base, keys), db = decompose_all(pair.post, keys);
  for (const auto& [k, d] : da) CHECK(std::abs(orthogonal_consistency(d, db.at(k)).nf - 0.177) < 0.05);
}

TEST_CASE("nf grows with the perturbation") {
  const double eps[] = {0.0, 0.01, 0.05, 0.1, 0.5};
  std::vector<double> means;
  for (double e : eps) {
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      FixtureSpec spec;
      spec.config.n_layers = 1;
      spec.seed = seed;
      spec.mode = FixtureMode::PERTURBED;
      spec.perturbation = e;
      sum += mean_nf(generate_pair(spec));
    }
    means.push_back(sum / 10);
  }
  for (std::size_t i = 1; i < means.size(); ++i) CHECK(means[i] >= means[i - 1]);
}

TEST_CASE("truth JSON lists every matrix") {
  FixtureSpec spec;
  auto pair = generate_pair(spec);
  auto j = nlohmann::json::parse(pair.truth.to_json());
  CHECK(j["mode"] == "EXACT");
  CHECK(j["matrices"].size() == 14);
  CHECK(pair.truth.matrices.at({0, MatrixType::Q}).q_frobenius_to_identity() > 0.0);
}

TEST_CASE("token inputs stay in the vocabulary") {
  auto in = random_token_inputs(5, 7, 11, 1);
  CHECK(in.size() == 5);
  for (const auto& s : in) {
    CHECK(s.size() == 7);
    for (int t : s) CHECK((t >= 0 && t < 11));
  }
  CHECK(in == random_token_inputs(5, 7, 11, 1));
}

TEST_CASE("nf calibration separates the populations") {
  auto cal = calibrate_nf(32, 32, 6, 0.05, 3);
  CHECK(cal.shared.size() == 6);
  CHECK(cal.independent.size() == 6);
  for (double s : cal.shared) CHECK(verdict_for(s, cal.threshold) == Verdict::SHARED_LINEAGE);
  for (double i : cal.independent) CHECK(verdict_for(i, cal.threshold) == Verdict::INDEPENDENT);
}
