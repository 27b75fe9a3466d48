#include "spectral_forge/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <json.hpp>
#include <unsupported/Eigen/MatrixFunctions>

#include "spectral_forge/metrics.hpp"
#include "spectral_forge/spectra.hpp"

namespace spectral_forge {

namespace {

enum Stream : std::uint64_t {
  kBaseU = 1,
  kBaseV,
  kPostQ,
  kDeltaQ1,
  kDeltaQ2,
  kTail,
  kIndepU,
  kIndepV,
  kIndepSigma,
  kEmbedding,
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

Eigen::VectorXd log_spaced(Eigen::Index r, double top, double condition) {
  Eigen::VectorXd s(r);
  for (Eigen::Index j = 0; j < r; ++j) {
    const double t = r > 1 ? static_cast<double>(j) / static_cast<double>(r - 1) : 0.0;
    s(j) = top * std::pow(condition, -t);
  }
  return s;
}

std::uint64_t key_code(const MatrixKey& key) {
  return (static_cast<std::uint64_t>(key.layer) << 8) | static_cast<std::uint64_t>(key.mtype);
}

TensorRecord to_record(const std::string& name, const Eigen::MatrixXd& m) {
  return matrix_to_record(name, m.cast<float>());
}

TensorRecord ones_vector(const std::string& name, int n) {
  std::vector<float> v(static_cast<std::size_t>(n), 1.0f);
  return TensorRecord::from_floats(name, {n}, v);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = splitmix64(seed);
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ull));
  return h;
}

Eigen::MatrixXd random_orthogonal(int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("random_orthogonal: n must be >= 1");
  const Eigen::MatrixXd g = gaussian(n, n, seed);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

Eigen::MatrixXd small_rotation(int n, double epsilon, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("small_rotation: n must be >= 1");
  if (epsilon < 0) throw std::invalid_argument("small_rotation: epsilon must be >= 0");
  if (epsilon == 0.0 || n == 1) return Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd g = gaussian(n, n, seed);
  Eigen::MatrixXd a = g - g.transpose();
  a /= a.norm();
  const Eigen::MatrixXd arg = epsilon * a;
  return arg.exp();
}

std::string_view fixture_mode_name(FixtureMode mode) {
  switch (mode) {
    case FixtureMode::EXACT: return "EXACT";
    case FixtureMode::PERTURBED: return "PERTURBED";
    case FixtureMode::INDEPENDENT: return "INDEPENDENT";
  }
  return "?";
}

std::optional<FixtureMode> parse_fixture_mode(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (upper == "EXACT") return FixtureMode::EXACT;
  if (upper == "PERTURBED") return FixtureMode::PERTURBED;
  if (upper == "INDEPENDENT") return FixtureMode::INDEPENDENT;
  return std::nullopt;
}

double FixtureSpec::alpha(MatrixType type) const {
  auto it = alpha_map.find(type);
  return it == alpha_map.end() ? 1.0 : it->second;
}

void FixtureSpec::validate() const {
  config.validate();
  if (mode == FixtureMode::EXACT && (perturbation != 0.0 || tail_noise != 0.0)) {
    throw std::invalid_argument("fixture: EXACT mode requires perturbation = 0 and tail_noise = 0");
  }
  if (perturbation < 0 || tail_noise < 0) throw std::invalid_argument("fixture: negative perturbation");
  for (const auto& [t, a] : alpha_map) {
    if (!(a > 0)) throw std::invalid_argument("fixture: alpha must be positive");
  }
  if (!(sigma_max > 0) || !(condition >= 1)) throw std::invalid_argument("fixture: bad spectrum range");
}

FixtureSpec FixtureSpec::from_json(std::string_view json_text) {
  const auto j = nlohmann::json::parse(json_text);
  FixtureSpec s;
  if (j.contains("config")) s.config = ModelConfig::from_json(j["config"].dump());
  s.seed = j.value("seed", std::uint64_t{0});
  s.perturbation = j.value("perturbation", 0.0);
  s.tail_noise = j.value("tail_noise", 0.0);
  s.variant = j.value("variant", std::uint64_t{0});
  s.sigma_max = j.value("sigma_max", 1.0);
  s.condition = j.value("condition", 100.0);
  s.embedding_scale = j.value("embedding_scale", 1.0);
  if (j.contains("mode")) {
    auto m = parse_fixture_mode(j["mode"].get<std::string>());
    if (!m) throw std::invalid_argument("fixture: unknown mode " + j["mode"].get<std::string>());
    s.mode = *m;
  }
  if (j.contains("alpha")) {
    const auto& a = j["alpha"];
    if (a.is_number()) {
      for (auto t : kAllMatrixTypes) s.alpha_map[t] = a.get<double>();
    } else {
      for (auto it = a.begin(); it != a.end(); ++it) {
        auto t = parse_matrix_type(it.key());
        if (!t) throw std::invalid_argument("fixture: unknown matrix type " + it.key());
        s.alpha_map[*t] = it.value().get<double>();
      }
    }
  }
  s.validate();
  return s;
}

double MatrixTruth::q_frobenius_to_identity() const {
  if (q.size() == 0) return 0.0;
  return (q - Eigen::MatrixXd::Identity(q.rows(), q.cols())).norm();
}

std::string FixtureTruth::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = std::string(fixture_mode_name(mode));
  nlohmann::ordered_json keys = nlohmann::ordered_json::object();
  for (const auto& [key, t] : matrices) {
    keys[to_string(key)] = {{"alpha", t.alpha},
                            {"q_frobenius_to_identity", t.q_frobenius_to_identity()},
                            {"epsilon", t.epsilon}};
  }
  j["matrices"] = keys;
  return j.dump(2);
}

FixturePair generate_pair(const FixtureSpec& spec) {
  spec.validate();
  const auto& c = spec.config;
  const auto schema = NamingSchema::standard();
  const AuxiliaryNames names;
  const std::uint64_t post_stream = 1000 + spec.variant;

  FixturePair out;
  out.truth.mode = spec.mode;

  const Eigen::MatrixXd embed = gaussian(c.vocab, c.d_model, mix_seed(spec.seed, {kEmbedding})) *
                                spec.embedding_scale;
  out.base.add(to_record(names.embedding, embed));
  if (spec.mode == FixtureMode::INDEPENDENT) {
    out.post.add(to_record(names.embedding,
                           gaussian(c.vocab, c.d_model, mix_seed(spec.seed, {kEmbedding, post_stream})) *
                               spec.embedding_scale));
  } else {
    out.post.add_shared(out.base.records().back());
  }

  for (int layer = 0; layer < c.n_layers; ++layer) {
    for (const auto& norm_name : {names.input_norm, names.post_attention_norm}) {
      out.base.add(ones_vector(names.layer_name(norm_name, layer), c.d_model));
      out.post.add_shared(out.base.records().back());
    }
    for (auto type : kAllMatrixTypes) {
      const MatrixKey key{layer, type};
      const auto [m, n] = matrix_shape(c, type);
      const int r = static_cast<int>(std::min(m, n));
      const auto kc = key_code(key);

      const Eigen::MatrixXd u = random_orthogonal(static_cast<int>(m), mix_seed(spec.seed, {kBaseU, kc})).leftCols(r);
      const Eigen::MatrixXd v = random_orthogonal(static_cast<int>(n), mix_seed(spec.seed, {kBaseV, kc})).leftCols(r);
      const Eigen::VectorXd sigma = log_spaced(r, spec.sigma_max, spec.condition);
      out.base.add(to_record(schema.tensor_name(key), u * sigma.asDiagonal() * v.transpose()));

      MatrixTruth truth;
      Eigen::MatrixXd w_post;
      if (spec.mode == FixtureMode::INDEPENDENT) {
        const Eigen::MatrixXd u2 =
            random_orthogonal(static_cast<int>(m), mix_seed(spec.seed, {kIndepU, post_stream, kc})).leftCols(r);
        const Eigen::MatrixXd v2 =
            random_orthogonal(static_cast<int>(n), mix_seed(spec.seed, {kIndepV, post_stream, kc})).leftCols(r);
        std::mt19937_64 rng(mix_seed(spec.seed, {kIndepSigma, post_stream, kc}));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        Eigen::VectorXd s2(r);
        for (int j = 0; j < r; ++j) s2(j) = spec.sigma_max * std::pow(spec.condition, -unit(rng));
        std::sort(s2.data(), s2.data() + r, std::greater<>());
        w_post = u2 * s2.asDiagonal() * v2.transpose();
      } else {
        truth.alpha = spec.alpha(type);
        truth.q = random_orthogonal(r, mix_seed(spec.seed, {kPostQ, post_stream, kc}));
        Eigen::MatrixXd left = truth.q;
        Eigen::MatrixXd right = truth.q;
        Eigen::VectorXd post_sigma = truth.alpha * sigma;
        truth.dq1 = Eigen::MatrixXd::Identity(r, r);
        truth.dq2 = Eigen::MatrixXd::Identity(r, r);
        if (spec.mode == FixtureMode::PERTURBED) {
          truth.epsilon = spec.perturbation;
          if (spec.perturbation > 0) {
            truth.dq1 = small_rotation(r, spec.perturbation, mix_seed(spec.seed, {kDeltaQ1, post_stream, kc}));
            truth.dq2 = small_rotation(r, spec.perturbation, mix_seed(spec.seed, {kDeltaQ2, post_stream, kc}));
            left = truth.q * truth.dq1;
            right = truth.q * truth.dq2;
          }
          if (spec.tail_noise > 0) {
            std::mt19937_64 rng(mix_seed(spec.seed, {kTail, post_stream, kc}));
            std::normal_distribution<double> noise(0.0, 1.0);
            const int tail = static_cast<int>(std::ceil(0.1 * r));
            for (int j = r - tail; j < r; ++j) {
              post_sigma(j) = std::abs(post_sigma(j) * (1.0 + spec.tail_noise * noise(rng)));
            }
          }
        }
        w_post = (u * left) * post_sigma.asDiagonal() * (v * right).transpose();
      }
      out.post.add(to_record(schema.tensor_name(key), w_post));
      out.truth.matrices.emplace(key, std::move(truth));
    }
  }
  out.base.add(ones_vector(names.final_norm, c.d_model));
  out.post.add_shared(out.base.records().back());
  return out;
}

std::vector<std::vector<int>> random_token_inputs(int count, int length, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(0, vocab - 1);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(count));
  for (auto& seq : out) {
    seq.resize(static_cast<std::size_t>(length));
    for (auto& t : seq) t = dist(rng);
  }
  return out;
}

NfCalibration calibrate_nf(std::int64_t rows, std::int64_t cols, int samples, double epsilon,
                           std::uint64_t seed) {
  NfCalibration cal;
  const int m = static_cast<int>(rows);
  const int n = static_cast<int>(cols);
  const int r = std::min(m, n);
  const Eigen::VectorXd sigma = log_spaced(r, 1.0, 100.0);
  for (int s = 0; s < samples; ++s) {
    const auto k = static_cast<std::uint64_t>(s);
    const Eigen::MatrixXd u = random_orthogonal(m, mix_seed(seed, {kBaseU, k})).leftCols(r);
    const Eigen::MatrixXd v = random_orthogonal(n, mix_seed(seed, {kBaseV, k})).leftCols(r);
    const Eigen::MatrixXd q = random_orthogonal(r, mix_seed(seed, {kPostQ, k}));
    const Eigen::MatrixXd dq1 = small_rotation(r, epsilon, mix_seed(seed, {kDeltaQ1, k}));
    const Eigen::MatrixXd dq2 = small_rotation(r, epsilon, mix_seed(seed, {kDeltaQ2, k}));
    const Eigen::MatrixXd w_base = u * sigma.asDiagonal() * v.transpose();
    const Eigen::MatrixXd w_post = (u * q * dq1) * sigma.asDiagonal() * (v * q * dq2).transpose();
    const Eigen::MatrixXd u2 = random_orthogonal(m, mix_seed(seed, {kIndepU, k})).leftCols(r);
    const Eigen::MatrixXd v2 = random_orthogonal(n, mix_seed(seed, {kIndepV, k})).leftCols(r);
    const Eigen::MatrixXd w_indep = u2 * sigma.asDiagonal() * v2.transpose();

    const auto db = reduced_svd(w_base.cast<float>());
    cal.shared.push_back(orthogonal_consistency(db, reduced_svd(w_post.cast<float>())).nf);
    cal.independent.push_back(orthogonal_consistency(db, reduced_svd(w_indep.cast<float>())).nf);
  }
  cal.threshold = calibrate_threshold(cal.shared, cal.independent);
  return cal;
}

}  // namespace spectral_forge
