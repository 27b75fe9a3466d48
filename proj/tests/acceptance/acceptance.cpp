// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "spectral_forge/checkpoint.hpp"
#include "spectral_forge/cli.hpp"
#include "spectral_forge/fixtures.hpp"
#include "spectral_forge/metrics.hpp"
#include "spectral_forge/microformer.hpp"
#include "spectral_forge/spectra.hpp"
#include "spectral_forge/surgery.hpp"

using namespace spectral_forge;
namespace fs = std::filesystem;

namespace {

const NamingSchema kSchema = NamingSchema::standard();

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects sub-checks for one criterion.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      if (!failures_.empty()) failures_ += "; ";
      failures_ += what;
    }
  }
  void note(const std::string& s) {
    if (!notes_.empty()) notes_ += ", ";
    notes_ += s;
  }
  Outcome outcome() const { return {pass_, pass_ ? notes_ : "FAILED: " + failures_ + " | " + notes_}; }

 private:
  bool pass_ = true;
  std::string failures_, notes_;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

ModelConfig square64(int layers = 2) {
  ModelConfig c;
  c.d_model = 64;
  c.n_layers = layers;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.d_mlp = 64;
  return c;
}

FixtureSpec uniform_alpha(FixtureSpec spec, double alpha) {
  for (auto t : kAllMatrixTypes) spec.alpha_map[t] = alpha;
  return spec;
}

std::pair<DecompositionMap, DecompositionMap> decompose_pair(const FixturePair& p) {
  const auto ka = classify(p.base, kSchema).keys, kb = classify(p.post, kSchema).keys;
  return {decompose_all(p.base, ka), decompose_all(p.post, kb)};
}

double rel_frob(const CheckpointStore& a, const CheckpointStore& b, const MatrixKey& k) {
  const auto name = kSchema.tensor_name(k);
  const Eigen::MatrixXd x = load_matrix(a, name, kSchema).cast<double>();
  const Eigen::MatrixXd y = load_matrix(b, name, kSchema).cast<double>();
  return (x - y).norm() / y.norm();
}

SurgeryPlan plan(ConstructionKind kind, const std::set<MatrixKey>& keys,
                 std::optional<std::map<MatrixType, double>> alpha = std::nullopt) {
  SurgeryPlan p;
  p.construction.kind = kind;
  p.construction.alpha_prime = std::move(alpha);
  p.selector = keys;
  return p;
}

std::set<MatrixKey> keys_of(const CheckpointStore& s, std::optional<ModuleKind> module = std::nullopt) {
  std::set<MatrixKey> out;
  for (const auto& [k, n] : classify(s, kSchema).keys) {
    if (!module || k.module() == *module) out.insert(k);
  }
  return out;
}

// ---------------------------------------------------------------------------

Outcome svsm_exactness() {
  Checks c;
  const auto t0 = std::chrono::steady_clock::now();
  FixtureSpec spec = uniform_alpha({}, 0.9);
  spec.config = square64();
  spec.seed = 101;
  const auto pair = generate_pair(spec);
  const auto [da, db] = decompose_pair(pair);
  std::vector<ScalingProfile> profiles;
  double worst = 0.0;
  for (const auto& [k, d] : da) {
    auto p = scaling_profile(d, db.at(k), 0.9, k);
    for (std::size_t j = 0; j < p.top_count; ++j) worst = std::max(worst, std::abs(*p.div[j] - 0.9));
    profiles.push_back(std::move(p));
  }
  double worst_std = 0.0;
  for (const auto& [t, st] : scaling_stats(profiles)) worst_std = std::max(worst_std, st.std);
  const auto m = svsm(profiles);
  c.expect(m.size() == 7 && m.at(MatrixType::Q).cols() == 2, "SVSM shape");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.expect(worst < 1e-5, "div deviation " + sci(worst));
  c.expect(worst_std < 1e-6, "per-type std " + sci(worst_std));
  c.expect(secs < 10.0, "runtime " + sci(secs) + " s");
  c.note("max |div-0.9| " + sci(worst));
  c.note("max std " + sci(worst_std));
  c.note(sci(secs) + " s");
  return c.outcome();
}

Outcome alpha_rounding() {
  Checks c;
  c.expect(quantize_alpha(0.9071, 0.1) == 0.9, "0.9071");
  c.expect(quantize_alpha(1.3551, 0.1) == 1.4, "1.3551");
  c.expect(quantize_alpha(0.9960, 0.1) == 1.0, "0.9960");
  c.note("0.9071->0.9, 1.3551->1.4, 0.9960->1.0 (exact)");
  return c.outcome();
}

Outcome orthogonal_consistency_detection() {
  Checks c;
  const auto t0 = std::chrono::steady_clock::now();

  FixtureSpec spec = uniform_alpha({}, 0.9);
  spec.config = square64();
  spec.seed = 202;
  {
    const auto [da, db] = decompose_pair(generate_pair(spec));
    double worst = 0.0;
    for (const auto& [k, d] : da) worst = std::max(worst, orthogonal_consistency(d, db.at(k)).nf);
    c.expect(worst < 1e-4, "EXACT nf " + sci(worst));
    c.note("EXACT max nf " + sci(worst));
  }
  {
    spec.mode = FixtureMode::INDEPENDENT;
    const auto [da, db] = decompose_pair(generate_pair(spec));
    double lo = 1e9, hi = 0.0;
    for (const auto& [k, d] : da) {
      const double nf = orthogonal_consistency(d, db.at(k)).nf;
      lo = std::min(lo, nf);
      hi = std::max(hi, nf);
    }
    c.expect(lo >= 0.12 && hi <= 0.23, "INDEPENDENT nf range [" + sci(lo) + ", " + sci(hi) + "]");
    c.note("INDEPENDENT nf in [" + sci(lo) + ", " + sci(hi) + "]");
  }

  // Threshold calibrated on a disjoint seed range, then applied to 40 pairs.
  const auto cal = calibrate_nf(64, 64, 20, 0.05, 9001);
  int correct = 0;
  for (int i = 0; i < 20; ++i) {
    FixtureSpec s;
    s.config = square64(1);
    s.seed = 3000 + static_cast<std::uint64_t>(i);
    s.mode = FixtureMode::PERTURBED;
    s.perturbation = 0.01 + 0.002 * i;
    s.tail_noise = 0.05;
    const auto shared = generate_pair(s);
    if (fingerprint(shared.base, shared.post, kSchema, cal.threshold).verdict == Verdict::SHARED_LINEAGE) ++correct;
    s.mode = FixtureMode::INDEPENDENT;
    s.perturbation = 0.0;
    s.tail_noise = 0.0;
    const auto indep = generate_pair(s);
    if (fingerprint(indep.base, indep.post, kSchema, cal.threshold).verdict == Verdict::INDEPENDENT) ++correct;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.expect(correct == 40, "verdicts " + std::to_string(correct) + "/40");
  c.expect(secs < 60.0, "runtime " + sci(secs) + " s");
  c.note("verdicts " + std::to_string(correct) + "/40 at t=" + sci(cal.threshold));
  c.note(sci(secs) + " s");
  return c.outcome();
}

Outcome surgery_round_trip() {
  Checks c;
  FixtureSpec spec = uniform_alpha({}, 0.9);
  spec.config = square64();
  spec.config.n_kv_heads = 2;  // include rectangular K/V
  spec.seed = 303;
  const auto p1 = generate_pair(spec);
  const auto keys = keys_of(p1.post);

  const auto ablated = apply(plan(ConstructionKind::ABLATE_OUT, keys), p1.post, p1.base);
  const auto restored = apply(plan(ConstructionKind::RESTORE_OUT, keys), ablated.store, p1.base);
  double min_ablate = 1e9, max_restore = 0.0;
  for (const auto& k : keys) {
    min_ablate = std::min(min_ablate, rel_frob(ablated.store, p1.post, k));
    max_restore = std::max(max_restore, rel_frob(restored.store, p1.post, k));
  }
  c.expect(max_restore < 1e-4, "RESTORE_OUT error " + sci(max_restore));
  c.expect(min_ablate >= 0.1, "ABLATE_OUT deviation " + sci(min_ablate));

  spec.variant = 1;
  const auto p2 = generate_pair(spec);
  const auto cross = apply(plan(ConstructionKind::RESTORE_CROSS, keys), p1.post, p2.post);
  double max_cross = 0.0;
  for (const auto& k : keys) max_cross = std::max(max_cross, rel_frob(cross.store, p1.post, k));
  c.expect(max_cross < 1e-4, "RESTORE_CROSS error " + sci(max_cross));
  c.note("restore err " + sci(max_restore));
  c.note("min ablate dev " + sci(min_ablate));
  c.note("cross err " + sci(max_cross));
  return c.outcome();
}

Outcome replace_sigma_spectrum() {
  Checks c;
  FixtureSpec spec = uniform_alpha({}, 1.1);
  spec.config = square64();
  spec.config.n_kv_heads = 2;
  spec.mode = FixtureMode::PERTURBED;
  spec.perturbation = 0.05;
  spec.tail_noise = 0.3;
  spec.seed = 404;
  const auto pair = generate_pair(spec);
  const std::map<MatrixType, double> alpha{{MatrixType::Q, 0.9},  {MatrixType::K, 0.9},   {MatrixType::V, 1.0},
                                           {MatrixType::O, 1.4},  {MatrixType::UP, 1.0},  {MatrixType::GATE, 0.9},
                                           {MatrixType::DOWN, 1.1}};
  const auto keys = keys_of(pair.post);
  const auto res = apply(plan(ConstructionKind::REPLACE_SIGMA, keys, alpha), pair.post, pair.base);
  double worst = 0.0;
  for (const auto& k : keys) {
    const auto name = kSchema.tensor_name(k);
    const Eigen::VectorXd sb = reduced_svd(load_matrix(pair.base, name, kSchema)).sigma.cast<double>();
    const Eigen::VectorXd so = reduced_svd(load_matrix(res.store, name, kSchema)).sigma.cast<double>();
    const auto n = top_count(static_cast<std::size_t>(sb.size()), 0.9);
    for (std::size_t j = 0; j < n; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      const double want = alpha.at(k.mtype) * sb(jj);
      worst = std::max(worst, std::abs(so(jj) - want) / want);
    }
  }
  c.expect(worst < 1e-4, "relative error " + sci(worst));
  c.note("max rel err " + sci(worst));
  return c.outcome();
}

Outcome temperature_identity() {
  Checks c;
  double worst = 0.0;
  int monotone_violations = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    FixtureSpec spec;
    spec.config.d_model = 32;
    spec.config.n_layers = 2;
    spec.config.rope_enabled = false;
    spec.seed = 500 + seed;
    spec.sigma_max = 3.0;
    const Microformer m(spec.config, generate_pair(spec).base);
    const auto tokens = random_token_inputs(1, 12, spec.config.vocab, seed).front();
    double prev = std::numeric_limits<double>::infinity();
    for (double alpha : {0.5, 0.9, 1.2}) {
      const auto rep = temperature_check(m, tokens, alpha);
      worst = std::max(worst, rep.max_abs_diff);
      if (rep.mean_entropy_scaled > prev) ++monotone_violations;
      prev = rep.mean_entropy_scaled;
    }
  }
  c.expect(worst < 1e-5, "max abs diff " + sci(worst));
  c.expect(monotone_violations == 0, std::to_string(monotone_violations) + " entropy order violations");
  c.note("max |dA| " + sci(worst) + " over 5 models x 3 alphas");
  c.note("entropy non-increasing in alpha");
  return c.outcome();
}

Outcome entropy_constants() {
  Checks c;
  const float uniform[] = {0.25f, 0.25f, 0.25f, 0.25f};
  const float onehot[] = {0.0f, 0.0f, 1.0f, 0.0f};
  const double hu = entropy(uniform), ho = entropy(onehot);
  c.expect(std::abs(hu - std::log(4.0)) <= 1e-9, "uniform " + sci(hu));
  c.expect(ho == 0.0, "one-hot " + sci(ho));
  c.note("|H_uniform - ln 4| " + sci(std::abs(hu - std::log(4.0))));
  c.note("H_onehot " + sci(ho));
  return c.outcome();
}

Eigen::MatrixXd diag_cka(const CheckpointStore& a, const CheckpointStore& b, const ModelConfig& cfg,
                         const std::vector<std::vector<int>>& inputs) {
  const Microformer ma(cfg, a), mb(cfg, b);
  return cka(pooled_hidden(ma, inputs), pooled_hidden(mb, inputs)).values;
}

Outcome cka_properties() {
  Checks c;
  std::mt19937 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd x(30, 12);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  const Eigen::MatrixXd y = x.leftCols(8) * 0.5 + Eigen::MatrixXd::NullaryExpr(30, 8, [&] { return n(rng); });
  const double self = linear_cka(x, x);
  const Eigen::MatrixXd r = random_orthogonal(12, 77);
  const double base = linear_cka(x, y);
  const double rot = std::abs(linear_cka(x * r, y) - base);
  const double scl = std::max(std::abs(linear_cka(2.5 * x, y) - base), std::abs(linear_cka(-0.3 * x, y) - base));
  c.expect(std::abs(self - 1.0) <= 1e-6, "self CKA " + sci(self));
  c.expect(rot <= 1e-6, "rotation " + sci(rot));
  c.expect(scl <= 1e-6, "scaling " + sci(scl));

  // Layer-wise heatmaps on toy models.
  FixtureSpec spec = uniform_alpha({}, 0.9);
  spec.config.d_model = 32;
  spec.config.n_layers = 4;
  spec.config.d_mlp = 64;
  spec.seed = 808;
  spec.sigma_max = 8.0;
  spec.embedding_scale = 0.1;
  const auto pair = generate_pair(spec);
  const auto inputs = random_token_inputs(24, 12, spec.config.vocab, 3);
  const auto self_map = diag_cka(pair.post, pair.post, spec.config, inputs);
  double self_dev = 0.0;
  for (Eigen::Index i = 0; i < self_map.rows(); ++i) self_dev = std::max(self_dev, std::abs(self_map(i, i) - 1.0));
  c.expect(self_dev <= 1e-6, "model self-CKA diagonal " + sci(self_dev));

  const auto sa = keys_of(pair.post, ModuleKind::SA);
  const auto ablated = apply(plan(ConstructionKind::ABLATE_OUT, sa), pair.post, pair.base);
  const auto restored = apply(plan(ConstructionKind::RESTORE_OUT, sa), ablated.store, pair.base);
  const auto abl = diag_cka(pair.post, ablated.store, spec.config, inputs);
  const auto res = diag_cka(pair.post, restored.store, spec.config, inputs);
  const double abl_min = abl.diagonal().minCoeff(), res_min = res.diagonal().minCoeff();
  c.expect(abl_min < 0.5, "ablated min diagonal " + sci(abl_min));
  c.expect(res_min > 0.99, "restored min diagonal " + sci(res_min));
  c.note("self " + sci(std::abs(self - 1.0)) + ", rot " + sci(rot) + ", scale " + sci(scl));
  c.note("ablated min diag " + sci(abl_min));
  c.note("restored min diag " + sci(res_min));
  return c.outcome();
}

Outcome square_q_orthogonality() {
  Checks c;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int n = 8 + (i % 5) * 8;
    std::mt19937 rng(static_cast<unsigned>(1000 + i));
    std::normal_distribution<float> g(0.0f, 1.0f);
    const Eigen::MatrixXf a = Eigen::MatrixXf::NullaryExpr(n, n, [&] { return g(rng); });
    const Eigen::MatrixXf b = Eigen::MatrixXf::NullaryExpr(n, n, [&] { return g(rng); });
    const auto da = reduced_svd(a), db = reduced_svd(b);
    worst = std::max(worst, orthogonality_defect(da.u.cast<double>().transpose() * db.u.cast<double>()));
  }
  c.expect(worst < 1e-4, "defect " + sci(worst));
  c.note("max ||QtQ-I||/r " + sci(worst) + " over 100 pairs");
  return c.outcome();
}

std::vector<std::byte> raw(const std::string& header, const std::vector<std::byte>& data) {
  std::vector<std::byte> out(8);
  const std::uint64_t n = header.size();
  std::memcpy(out.data(), &n, 8);
  for (char ch : header) out.push_back(static_cast<std::byte>(ch));
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

void dump(const fs::path& p, std::span<const std::byte> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::byte> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::vector<char> c((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(c.size());
  std::memcpy(out.data(), c.data(), c.size());
  return out;
}

Outcome checkpoint_io() {
  Checks c;
  const fs::path dir = fs::temp_directory_path() / ("sf_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);

  std::vector<fs::path> corpus;
  auto add = [&](const std::string& name, std::span<const std::byte> bytes) {
    dump(dir / name, bytes);
    corpus.push_back(dir / name);
  };
  // Generated fixtures of several shapes and modes.
  for (int i = 0; i < 6; ++i) {
    FixtureSpec spec;
    spec.seed = 600 + static_cast<std::uint64_t>(i);
    spec.config.n_layers = 1 + i % 2;
    spec.mode = i % 3 == 0 ? FixtureMode::INDEPENDENT : FixtureMode::EXACT;
    const auto p = generate_pair(spec);
    add("fixture_" + std::to_string(i) + ".safetensors", serialize_checkpoint(i % 2 ? p.post : p.base));
  }
  // Hand-made headers: foreign key order, padding, metadata, half dtypes.
  std::vector<std::byte> eight(8, std::byte{0x3c});
  add("empty.safetensors", raw(R"({"__metadata__":{"format":"pt"}})", {}));
  add("padded.safetensors", raw(R"({"b":{"dtype":"F16","shape":[2,2],"data_offsets":[0,8]}}      )", eight));
  add("reordered.safetensors",
      raw(R"({"z":{"data_offsets":[4,8],"shape":[2],"dtype":"BF16"},"a":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]},"__metadata__":{"k":"v"}})",
          eight));
  add("f64.safetensors", raw(R"({"d":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}})", eight));
  add("scalar.safetensors", raw(R"({"s":{"dtype":"F32","shape":[],"data_offsets":[0,4]},"e":{"dtype":"F32","shape":[0,3],"data_offsets":[4,4]}})",
                                std::vector<std::byte>(4, std::byte{1})));

  int identical = 0;
  for (const auto& f : corpus) {
    try {
      const auto store = read_checkpoint(f);
      const auto out = dir / (f.stem().string() + ".rt");
      write_checkpoint(store, out);
      if (slurp(out) == slurp(f)) ++identical;
    } catch (const std::exception& e) {
      c.note(f.filename().string() + ": " + e.what());
    }
  }
  c.expect(identical == static_cast<int>(corpus.size()),
           std::to_string(identical) + "/" + std::to_string(corpus.size()) + " byte-identical");

  // Corrupt offsets: truncated data and offsets past the end.
  auto good = slurp(corpus.front());
  auto truncated = good;
  truncated.resize(good.size() - 100);
  dump(dir / "truncated.safetensors", truncated);
  dump(dir / "past_end.safetensors",
       raw(R"({"w":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})", std::vector<std::byte>(8)));
  int rejected = 0;
  for (const auto* name : {"truncated.safetensors", "past_end.safetensors"}) {
    try {
      read_checkpoint(dir / name);
    } catch (const CheckpointError& e) {
      if (std::string(e.what()).find("out-of-bounds") != std::string::npos) ++rejected;
    }
    // End to end: a surgery on the corrupt file must leave no output behind.
    std::ofstream(dir / "plan.json") << R"({"construction":"ABLATE_OUT","selector":"all"})";
    RunConfig cfg;
    cfg.command = Command::SURGERY;
    cfg.plan = dir / "plan.json";
    cfg.post = dir / name;
    cfg.donor = corpus.front();
    cfg.out = dir / (std::string(name) + ".out");
    std::ostringstream log;
    const auto res = run(cfg, log);
    const bool clean = res.exit_code != 0 && res.error_json.find("\"checkpoint\"") != std::string::npos &&
                       !fs::exists(cfg.out / "surgery.safetensors") &&
                       !fs::exists(cfg.out / "surgery.safetensors.partial");
    c.expect(clean, std::string(name) + " left output or succeeded");
  }
  {
    // Control: the same plan on a valid recipient does write a checkpoint.
    RunConfig cfg;
    cfg.command = Command::SURGERY;
    cfg.plan = dir / "plan.json";
    cfg.post = corpus.front();
    cfg.donor = corpus.front();
    cfg.out = dir / "control.out";
    std::ostringstream log;
    const auto res = run(cfg, log);
    c.expect(res.exit_code == 0 && fs::exists(cfg.out / "surgery.safetensors"), "control surgery did not write output");
  }
  c.expect(rejected == 2, std::to_string(rejected) + "/2 corrupt files rejected");
  c.note(std::to_string(identical) + "/" + std::to_string(corpus.size()) + " files byte-identical");
  c.note(std::to_string(rejected) + "/2 corrupt files rejected, no partial output");
  fs::remove_all(dir);
  return c.outcome();
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"SVSM exactness on EXACT fixtures", svsm_exactness},
      {"alpha' rounding of published means", alpha_rounding},
      {"orthogonal-consistency detection and verdicts", orthogonal_consistency_detection},
      {"surgery ablation/restoration round trip", surgery_round_trip},
      {"REPLACE_SIGMA spectrum contract", replace_sigma_spectrum},
      {"attention temperature identity", temperature_identity},
      {"entropy constants", entropy_constants},
      {"CKA properties and ablation effect", cka_properties},
      {"square-case Q_U orthogonality", square_q_orthogonality},
      {"checkpoint I/O round trip and corruption", checkpoint_io},
  };
  const auto t0 = std::chrono::steady_clock::now();
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s [%zu] %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].name, o.detail.c_str());
    std::fflush(stdout);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s total runtime %.1f s (limit 300 s)\n", secs < 300.0 ? "PASS" : "FAIL", secs);
  if (secs >= 300.0) ++failed;
  return failed == 0 ? 0 : 1;
}
