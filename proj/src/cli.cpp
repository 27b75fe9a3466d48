#include "spectral_forge/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "spectral_forge/checkpoint.hpp"
#include "spectral_forge/fixtures.hpp"
#include "spectral_forge/metrics.hpp"
#include "spectral_forge/microformer.hpp"
#include "spectral_forge/reports.hpp"
#include "spectral_forge/spectra.hpp"
#include "spectral_forge/surgery.hpp"

namespace spectral_forge {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view command_name(Command command) {
  switch (command) {
    case Command::DECOMPOSE: return "decompose";
    case Command::COMPARE: return "compare";
    case Command::FINGERPRINT: return "fingerprint";
    case Command::SURGERY: return "surgery";
    case Command::ENTROPY: return "entropy";
    case Command::CKA: return "cka";
    case Command::SYNTH: return "synth";
  }
  return "?";
}

std::optional<Command> parse_command(std::string_view name) {
  for (auto c : {Command::DECOMPOSE, Command::COMPARE, Command::FINGERPRINT, Command::SURGERY,
                 Command::ENTROPY, Command::CKA, Command::SYNTH}) {
    if (command_name(c) == name) return c;
  }
  return std::nullopt;
}

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path& require(const fs::path& p, const char* flag) {
  if (p.empty()) throw UsageError(std::string(flag) + " is required");
  return p;
}

NamingSchema load_schema(const std::string& spec) {
  if (spec.empty() || spec == "standard") return NamingSchema::standard();
  return NamingSchema::from_json(read_text(spec));
}

struct Loaded {
  CheckpointStore store;
  Classification classes;
};

Loaded load(const fs::path& path, const NamingSchema& schema) {
  Loaded l{read_checkpoint(path), {}};
  l.classes = classify(l.store, schema);
  try {
    reject_fused(l.classes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  if (l.classes.keys.empty()) {
    throw CheckpointError(path.string() + ": no matrices match schema '" + schema.name + "'");
  }
  return l;
}

class Session {
 public:
  Session(const RunConfig& cfg, std::ostream& log) : cfg_(cfg), log_(log) {}

  void hash_input(const std::string& role, const fs::path& path) {
    prov_.input_hashes[role] = file_sha256(path);
  }

  void emit(const fs::path& rel, const std::string& content) {
    const auto path = cfg_.out / rel;
    write_text_file(path, content);
    files_.push_back(path);
  }

  void emit_csv(const fs::path& rel, const std::string& body) { emit(rel, prov_.csv_comment() + body); }

  void emit_json(const fs::path& rel, json j) {
    j["tool"] = {{"name", "spectral_forge"}, {"version", kToolVersion}};
    json inputs = json::object();
    for (const auto& [role, h] : prov_.input_hashes) inputs[role] = "sha256:" + h;
    j["inputs"] = inputs;
    emit(rel, j.dump(2) + "\n");
  }

  DecomposeOptions decompose_options(const NamingSchema& schema, const std::string& label) {
    DecomposeOptions o;
    o.schema = schema;
    o.cache_dir = cfg_.cache_dir;
    if (cfg_.progress) {
      o.progress = [this, label](const MatrixKey& k, std::size_t done, std::size_t total) {
        log_ << "[svd " << label << "] " << done << "/" << total << " " << to_string(k) << "\n";
        log_.flush();
      };
    }
    return o;
  }

  const RunConfig& cfg_;
  std::ostream& log_;
  Provenance prov_;
  std::vector<fs::path> files_;
};

// ---------------------------------------------------------------------------

std::string type_name(MatrixType t) { return std::string(matrix_type_name(t)); }

Eigen::MatrixXd top_left(const Eigen::MatrixXd& m, int dims) {
  return m.topLeftCorner(std::min<Eigen::Index>(m.rows(), dims), std::min<Eigen::Index>(m.cols(), dims));
}

/// Dominant (most frequent) matrix shape, scaled down so the larger side
/// is at most `cap`.
std::pair<std::int64_t, std::int64_t> calibration_shape(const CheckpointStore& store,
                                                        const Classification& c,
                                                        const NamingSchema& schema, std::int64_t cap) {
  std::map<std::pair<std::int64_t, std::int64_t>, int> counts;
  for (const auto& [key, name] : c.keys) {
    const auto& s = store.at(name).shape;
    if (s.size() == 2) counts[{s[0], s[1]}]++;
  }
  auto best = std::max_element(counts.begin(), counts.end(),
                               [](const auto& a, const auto& b) { return a.second < b.second; })
                  ->first;
  if (schema.stored_transposed) std::swap(best.first, best.second);
  const auto big = std::max(best.first, best.second);
  if (big > cap) {
    best.first = std::max<std::int64_t>(2, best.first * cap / big);
    best.second = std::max<std::int64_t>(2, best.second * cap / big);
  }
  return best;
}

constexpr std::int64_t kCalibrationCap = 256;
constexpr int kCalibrationSamples = 8;
constexpr double kCalibrationEpsilon = 0.05;

double resolve_threshold(const RunConfig& cfg, const Loaded& a, const NamingSchema& schema,
                         json& info) {
  if (cfg.threshold) {
    if (!(*cfg.threshold > 0)) throw UsageError("--threshold must be positive");
    info = {{"source", "flag"}};
    return *cfg.threshold;
  }
  const auto [rows, cols] = calibration_shape(a.store, a.classes, schema, kCalibrationCap);
  const auto cal = calibrate_nf(rows, cols, kCalibrationSamples, kCalibrationEpsilon, cfg.seed.value_or(0));
  info = {{"source", "calibrated"},
          {"rows", rows},
          {"cols", cols},
          {"samples", kCalibrationSamples},
          {"epsilon", kCalibrationEpsilon},
          {"max_shared_nf", *std::max_element(cal.shared.begin(), cal.shared.end())},
          {"min_independent_nf", *std::min_element(cal.independent.begin(), cal.independent.end())}};
  return cal.threshold;
}

json fingerprint_json(const FingerprintReport& r) {
  json j;
  j["verdict"] = std::string(verdict_name(r.verdict));
  j["mean_nf"] = r.mean_nf;
  j["threshold"] = r.threshold;
  j["explanation"] = r.explanation;
  json by_type = json::object();
  for (const auto& [t, v] : r.mean_nf_by_type) by_type[type_name(t)] = v;
  j["mean_nf_by_type"] = by_type;
  json per_key = json::object();
  for (const auto& [k, v] : r.nf) per_key[to_string(k)] = v;
  j["nf"] = per_key;
  return j;
}

// ---------------------------------------------------------------------------

void cmd_decompose(Session& s) {
  const auto& cfg = s.cfg_;
  const auto schema = load_schema(cfg.schema);
  s.hash_input("base", require(cfg.base, "--base"));
  const auto a = load(cfg.base, schema);
  const auto dec = decompose_all(a.store, a.classes.keys, s.decompose_options(schema, "base"));

  std::map<MatrixKey, std::string> hashes;
  for (const auto& [k, name] : a.classes.keys) hashes[k] = tensor_content_hash(a.store.at(name));
  auto out = decompositions_to_store(dec, hashes);
  out.set_metadata("spectral_forge_version", kToolVersion);
  out.set_metadata("input_sha256", s.prov_.input_hashes.at("base"));
  fs::create_directories(cfg.out);
  write_checkpoint(out, cfg.out / "decomposition.safetensors");
  s.files_.push_back(cfg.out / "decomposition.safetensors");

  std::string csv = "layer,mtype,j,sigma\n";
  for (const auto& [k, d] : dec) {
    for (Eigen::Index j = 0; j < d.sigma.size(); ++j) {
      csv += std::to_string(k.layer) + "," + type_name(k.mtype) + "," + std::to_string(j) + "," +
             format_g6(d.sigma(j)) + "\n";
    }
  }
  s.emit_csv("spectra.csv", csv);
}

void cmd_compare(Session& s) {
  const auto& cfg = s.cfg_;
  if (!(cfg.top_fraction > 0 && cfg.top_fraction <= 1)) throw UsageError("--top-fraction must be in (0, 1]");
  if (!(cfg.quantum > 0)) throw UsageError("--quantum must be positive");
  const auto schema = load_schema(cfg.schema);
  s.hash_input("base", require(cfg.base, "--base"));
  s.hash_input("post", require(cfg.post, "--post"));
  const auto a = load(cfg.base, schema);
  const auto b = load(cfg.post, schema);
  for (const auto& [k, name] : a.classes.keys) {
    auto it = b.classes.keys.find(k);
    if (it == b.classes.keys.end()) throw MetricsError(to_string(k) + " is missing from " + cfg.post.string());
    if (a.store.at(name).shape != b.store.at(it->second).shape) {
      throw MetricsError(to_string(k) + ": shapes differ between base and post");
    }
  }
  for (const auto& [k, name] : b.classes.keys) {
    if (!a.classes.keys.count(k)) throw MetricsError(to_string(k) + " is missing from " + cfg.base.string());
  }

  const auto da = decompose_all(a.store, a.classes.keys, s.decompose_options(schema, "base"));
  const auto db = decompose_all(b.store, b.classes.keys, s.decompose_options(schema, "post"));

  std::vector<ScalingProfile> profiles;
  std::map<MatrixKey, OrthogonalConsistency> consistency;
  for (const auto& [k, d] : da) {
    profiles.push_back(scaling_profile(d, db.at(k), cfg.top_fraction, k));
    consistency.emplace(k, orthogonal_consistency(d, db.at(k), k));
  }
  const auto stats = scaling_stats(profiles);
  std::map<MatrixType, double> means;
  for (const auto& [t, st] : stats) means[t] = st.mean;
  const auto alpha = alpha_assign(means, cfg.quantum);

  // SVSM entries
  std::string csv = "layer,mtype,j,sigma_a,sigma_b,div\n";
  for (const auto& p : profiles) {
    const auto& sa = da.at(p.key).sigma;
    const auto& sb = db.at(p.key).sigma;
    for (std::size_t j = 0; j < p.div.size(); ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      csv += std::to_string(p.key.layer) + "," + type_name(p.key.mtype) + "," + std::to_string(j) + "," +
             format_g6(sa(jj)) + "," + format_g6(sb(jj)) + "," +
             (p.div[j] ? format_g6(*p.div[j]) : std::string("nan")) + "\n";
    }
  }
  s.emit_csv("svsm.csv", csv);

  csv = "mtype,mean_top,std_top,count,alpha_prime,summary\n";
  for (const auto& [t, st] : stats) {
    csv += type_name(t) + "," + format_g6(st.mean) + "," + format_g6(st.std) + "," + std::to_string(st.count) +
           "," + format_g6(alpha.at(t)) + "," + format_mean_std(st.mean, st.std) + "\n";
  }
  s.emit_csv("scaling_summary.csv", csv);

  csv = "layer,mtype,r,nf,degenerate_flag,q_u_defect,q_v_defect\n";
  for (const auto& [k, c] : consistency) {
    csv += std::to_string(k.layer) + "," + type_name(k.mtype) + "," + std::to_string(c.i_orth.rows()) + "," +
           format_g6(c.nf) + "," + (c.degenerate_flag ? "1" : "0") + "," + format_g6(c.q_u_defect) + "," +
           format_g6(c.q_v_defect) + "\n";
  }
  s.emit_csv("nf.csv", csv);

  // Figures
  for (const auto& [t, m] : svsm(profiles)) {
    HeatmapStyle st{"SVSM " + type_name(t) + " (rows: singular index, cols: layer)", 0.0, 2.0, 1.0,
                    Palette::kDiverging, 4};
    s.emit(fs::path("figures") / ("svsm_" + type_name(t) + ".svg"), svg_heatmap(m, st, s.prov_));
  }
  const int dims = std::max(1, cfg.heatmap_dims);
  for (const auto& [k, c] : consistency) {
    const auto base = to_string(k);
    HeatmapStyle st{"", 0.0, 1.0, 0.5, Palette::kSequential, 10};
    st.title = base + " sim_U";
    s.emit(fs::path("figures") / (base + ".sim_u.svg"), svg_heatmap(top_left(c.sim_u, dims), st, s.prov_));
    st.title = base + " sim_V";
    s.emit(fs::path("figures") / (base + ".sim_v.svg"), svg_heatmap(top_left(c.sim_v, dims), st, s.prov_));
    st.title = base + " |I_orth|";
    s.emit(fs::path("figures") / (base + ".i_orth.svg"),
           svg_heatmap(top_left(c.abs_i_orth(), dims), st, s.prov_));
  }
  std::map<MatrixType, std::vector<double>> curves;
  int layers = 0;
  for (const auto& [k, c] : consistency) layers = std::max(layers, k.layer + 1);
  for (const auto& [k, c] : consistency) {
    auto& v = curves[k.mtype];
    v.resize(static_cast<std::size_t>(layers), std::nan(""));
    v[static_cast<std::size_t>(k.layer)] = c.nf;
  }
  std::vector<Series> series;
  for (auto& [t, v] : curves) series.push_back({type_name(t), v});
  s.emit(fs::path("figures") / "nf_curve.svg", svg_line_chart("NF per layer", "layer", "NF", series, s.prov_));

  json threshold_info;
  const double threshold = resolve_threshold(cfg, a, schema, threshold_info);
  auto fp = fingerprint_json(fingerprint_from(consistency, threshold));
  fp["threshold_info"] = threshold_info;

  json j;
  j["top_fraction"] = cfg.top_fraction;
  j["quantum"] = cfg.quantum;
  json by_type = json::object();
  for (const auto& [t, st] : stats) {
    by_type[type_name(t)] = {{"mean", st.mean}, {"std", st.std}, {"count", st.count}, {"alpha_prime", alpha.at(t)}};
  }
  j["scaling"] = by_type;
  json per_key = json::object();
  for (const auto& p : profiles) {
    per_key[to_string(p.key)] = {{"mean_top", p.mean_top}, {"std_top", p.std_top}, {"top_count", p.top_count}};
  }
  j["profiles"] = per_key;
  j["fingerprint"] = fp;
  s.emit_json("report.json", j);
}

void cmd_fingerprint(Session& s) {
  const auto& cfg = s.cfg_;
  const auto schema = load_schema(cfg.schema);
  s.hash_input("base", require(cfg.base, "--base"));
  s.hash_input("post", require(cfg.post, "--post"));
  const auto a = load(cfg.base, schema);
  const auto b = load(cfg.post, schema);
  json threshold_info;
  const double threshold = resolve_threshold(cfg, a, schema, threshold_info);
  auto opts = s.decompose_options(schema, "pair");
  auto j = fingerprint_json(fingerprint(a.store, b.store, schema, threshold, opts));
  j["threshold_info"] = threshold_info;
  s.emit_json("fingerprint.json", j);
}

void cmd_surgery(Session& s) {
  const auto& cfg = s.cfg_;
  const auto schema = load_schema(cfg.schema);
  auto plan_json = json::parse(read_text(require(cfg.plan, "--plan")), nullptr, false);
  if (plan_json.is_discarded() || !plan_json.is_object()) {
    throw SurgeryError(cfg.plan.string() + ": malformed plan JSON");
  }
  auto pick = [&](const fs::path& flag, const char* field) {
    if (!flag.empty()) return flag;
    const auto v = plan_json.value(field, std::string{});
    if (v.empty()) return fs::path{};
    const fs::path p(v);
    return p.is_absolute() ? p : cfg.plan.parent_path() / p;
  };
  const fs::path recipient_path = pick(cfg.post, "recipient_path");
  const fs::path donor_path = pick(!cfg.donor.empty() ? cfg.donor : cfg.base, "donor_path");
  if (recipient_path.empty()) throw UsageError("recipient checkpoint needed (--post or plan recipient_path)");
  if (donor_path.empty()) throw UsageError("donor checkpoint needed (--donor/--base or plan donor_path)");
  s.hash_input("recipient", recipient_path);
  s.hash_input("donor", donor_path);
  s.prov_.input_hashes["plan"] = file_sha256(cfg.plan);
  const auto r = load(recipient_path, schema);
  const auto d = load(donor_path, schema);

  // "alpha_prime": "auto" derives α′ from the donor → recipient scaling.
  json alpha_info;
  if (plan_json.contains("alpha_prime") && plan_json["alpha_prime"] == "auto") {
    std::map<MatrixKey, std::string> shared;
    for (const auto& [k, n] : r.classes.keys) {
      if (d.classes.keys.count(k)) shared.emplace(k, n);
    }
    std::map<MatrixKey, std::string> dshared;
    for (const auto& [k, n] : shared) dshared.emplace(k, d.classes.keys.at(k));
    const auto dr = decompose_all(r.store, shared, s.decompose_options(schema, "recipient"));
    const auto dd = decompose_all(d.store, dshared, s.decompose_options(schema, "donor"));
    std::vector<ScalingProfile> profiles;
    for (const auto& [k, dec] : dd) profiles.push_back(scaling_profile(dec, dr.at(k), cfg.top_fraction, k));
    const auto alpha = alpha_from_metrics(scaling_stats(profiles), cfg.quantum);
    json a = json::object();
    for (const auto& [t, v] : alpha) a[type_name(t)] = v;
    plan_json["alpha_prime"] = a;
    alpha_info = a;
  }

  std::set<MatrixKey> available;
  for (const auto& [k, n] : r.classes.keys) available.insert(k);
  auto plan = SurgeryPlan::from_json(plan_json.dump(), available);
  plan.recipient_path = recipient_path.string();
  plan.donor_path = donor_path.string();
  fs::path output = plan.output_path.empty() ? cfg.out / "surgery.safetensors" : fs::path(plan.output_path);
  if (output.is_relative() && !plan.output_path.empty()) output = cfg.out / output;
  plan.output_path = output.string();

  const auto result = apply(plan, r.store, d.store, schema, s.decompose_options(schema, "surgery"));
  auto store = result.store;
  store.set_metadata("spectral_forge_version", kToolVersion);
  write_checkpoint(store, output);
  s.files_.push_back(output);

  json j;
  j["plan"] = json::parse(plan.canonical_json());
  if (!alpha_info.is_null()) j["alpha_prime_auto"] = alpha_info;
  j["output"] = output.string();
  j["output_sha256"] = file_sha256(output);
  json keys = json::object();
  for (const auto& rep : result.report) {
    keys[to_string(rep.key)] = {{"relative_change", rep.relative_change},
                                {"degenerate_flag", rep.degenerate_flag},
                                {"rotation_defect", rep.rotation_defect}};
  }
  j["matrices"] = keys;
  s.emit_json("surgery_report.json", j);
}

ModelConfig load_model_config(const RunConfig& cfg) {
  auto c = ModelConfig::from_json(read_text(require(cfg.model_config, "--config")));
  c.validate();
  return c;
}

std::vector<std::vector<int>> load_inputs(const RunConfig& cfg, const ModelConfig& model) {
  if (cfg.inputs.empty()) return random_token_inputs(16, 16, model.vocab, cfg.seed.value_or(0));
  const auto j = json::parse(read_text(cfg.inputs), nullptr, false);
  if (j.is_discarded() || !j.is_array() || j.empty()) {
    throw UsageError(cfg.inputs.string() + ": expected a non-empty JSON array of token arrays");
  }
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].empty()) {
      throw UsageError(cfg.inputs.string() + ": input " + std::to_string(i) + " is not a non-empty array");
    }
    std::vector<int> seq;
    for (const auto& t : j[i]) {
      if (!t.is_number_integer()) throw UsageError(cfg.inputs.string() + ": non-integer token in input " + std::to_string(i));
      const int id = t.get<int>();
      if (id < 0 || id >= model.vocab) {
        throw UsageError(cfg.inputs.string() + ": token " + std::to_string(id) + " in input " +
                         std::to_string(i) + " is outside the vocabulary");
      }
      seq.push_back(id);
    }
    out.push_back(std::move(seq));
  }
  return out;
}

EntropyProfile averaged_entropy(const Microformer& m, const std::vector<std::vector<int>>& inputs,
                                const ForwardOptions& fo, EntropyRow row) {
  EntropyProfile acc;
  for (const auto& seq : inputs) {
    const auto p = attention_entropy(m.forward(seq, fo), row);
    if (acc.per_head.empty()) {
      acc = p;
      continue;
    }
    for (std::size_t l = 0; l < p.per_head.size(); ++l) {
      for (std::size_t h = 0; h < p.per_head[l].size(); ++h) acc.per_head[l][h] += p.per_head[l][h];
      acc.layer_mean[l] += p.layer_mean[l];
    }
  }
  const double n = static_cast<double>(inputs.size());
  for (auto& layer : acc.per_head) {
    for (auto& v : layer) v /= n;
  }
  for (auto& v : acc.layer_mean) v /= n;
  return acc;
}

void cmd_entropy(Session& s) {
  const auto& cfg = s.cfg_;
  const auto model_cfg = load_model_config(cfg);
  const auto schema = load_schema(cfg.schema);
  EntropyRow row;
  if (cfg.entropy_rows == "final") {
    row = EntropyRow::kFinal;
  } else if (cfg.entropy_rows == "averaged") {
    row = EntropyRow::kAveraged;
  } else {
    throw UsageError("--rows must be 'final' or 'averaged'");
  }
  std::vector<std::pair<std::string, fs::path>> models{{"base", require(cfg.base, "--base")}};
  if (!cfg.post.empty()) models.emplace_back("post", cfg.post);
  const auto inputs = load_inputs(cfg, model_cfg);
  ForwardOptions fo;
  if (cfg.no_rope) fo.rope = false;

  std::string csv = "model,layer,head,entropy\n";
  std::string layer_csv = "model,layer,mean_entropy\n";
  std::vector<Series> series;
  std::string temp_csv = "model,alpha,max_abs_diff,mean_entropy_scaled,mean_entropy_reference,identity_holds\n";
  json j;
  for (const auto& [role, path] : models) {
    s.hash_input(role, path);
    const Microformer m(model_cfg, read_checkpoint(path), schema);
    const auto prof = averaged_entropy(m, inputs, fo, row);
    for (std::size_t l = 0; l < prof.per_head.size(); ++l) {
      for (std::size_t h = 0; h < prof.per_head[l].size(); ++h) {
        csv += role + "," + std::to_string(l) + "," + std::to_string(h) + "," + format_g6(prof.per_head[l][h]) + "\n";
      }
      layer_csv += role + "," + std::to_string(l) + "," + format_g6(prof.layer_mean[l]) + "\n";
    }
    series.push_back({role, prof.layer_mean});
    j["models"][role] = {{"layer_mean", prof.layer_mean}, {"mean", prof.mean()}};
    for (double alpha : cfg.temperature_alphas) {
      TemperatureReport acc;
      acc.alpha = alpha;
      for (const auto& seq : inputs) {
        const auto t = temperature_check(m, seq, alpha);
        acc.max_abs_diff = std::max(acc.max_abs_diff, t.max_abs_diff);
        acc.mean_entropy_scaled += t.mean_entropy_scaled / static_cast<double>(inputs.size());
        acc.mean_entropy_reference += t.mean_entropy_reference / static_cast<double>(inputs.size());
      }
      acc.identity_holds = acc.max_abs_diff < 1e-5;
      temp_csv += role + "," + format_g6(alpha) + "," + format_g6(acc.max_abs_diff) + "," +
                  format_g6(acc.mean_entropy_scaled) + "," + format_g6(acc.mean_entropy_reference) + "," +
                  (acc.identity_holds ? "1" : "0") + "\n";
    }
  }
  j["rows"] = cfg.entropy_rows;
  j["rope"] = !cfg.no_rope && model_cfg.rope_enabled;
  j["inputs"] = inputs.size();
  s.emit_csv("entropy.csv", csv);
  s.emit_csv("entropy_layers.csv", layer_csv);
  if (!cfg.temperature_alphas.empty()) s.emit_csv("temperature.csv", temp_csv);
  s.emit(fs::path("figures") / "entropy.svg",
         svg_line_chart("Mean attention entropy per layer", "layer", "entropy (nats)", series, s.prov_));
  auto summary = j;
  summary.erase("inputs");
  summary["input_count"] = inputs.size();
  s.emit_json("entropy.json", summary);
}

void cmd_cka(Session& s) {
  const auto& cfg = s.cfg_;
  const auto model_cfg = load_model_config(cfg);
  const auto schema = load_schema(cfg.schema);
  const auto mode = parse_cka_mode(cfg.cka_mode);
  if (!mode) throw UsageError("--mode must be 'batch-linear' or 'mean-cos2'");
  Pooling pooling;
  if (cfg.pooling == "mean") {
    pooling = Pooling::kMean;
  } else if (cfg.pooling == "last") {
    pooling = Pooling::kLast;
  } else {
    throw UsageError("--pooling must be 'mean' or 'last'");
  }
  s.hash_input("base", require(cfg.base, "--base"));
  const fs::path post = cfg.post.empty() ? cfg.base : cfg.post;
  s.hash_input("post", post);
  const auto inputs = load_inputs(cfg, model_cfg);
  auto cfg_run = model_cfg;
  if (cfg.no_rope) cfg_run.rope_enabled = false;
  const Microformer ma(cfg_run, read_checkpoint(cfg.base), schema);
  const Microformer mb(cfg_run, read_checkpoint(post), schema);
  const auto heat = cka(pooled_hidden(ma, inputs, pooling), pooled_hidden(mb, inputs, pooling), *mode);

  std::string csv = "layer_base,layer_post,cka\n";
  for (Eigen::Index i = 0; i < heat.values.rows(); ++i) {
    for (Eigen::Index k = 0; k < heat.values.cols(); ++k) {
      csv += std::to_string(i) + "," + std::to_string(k) + "," + format_g6(heat.values(i, k)) + "\n";
    }
  }
  s.emit_csv("cka.csv", csv);
  HeatmapStyle st{"CKA (" + std::string(cka_mode_name(*mode)) + ")", 0.0, 1.0, 0.5, Palette::kSequential, 16};
  s.emit(fs::path("figures") / "cka.svg", svg_heatmap(heat.values, st, s.prov_));
  std::vector<double> diag;
  for (Eigen::Index i = 0; i < std::min(heat.values.rows(), heat.values.cols()); ++i) diag.push_back(heat.values(i, i));
  s.emit_json("cka.json", {{"mode", std::string(cka_mode_name(*mode))},
                           {"pooling", cfg.pooling},
                           {"input_count", inputs.size()},
                           {"diagonal", diag}});
}

void cmd_synth(Session& s) {
  const auto& cfg = s.cfg_;
  FixtureSpec spec;
  if (!cfg.fixture.empty()) {
    s.prov_.input_hashes["fixture"] = file_sha256(cfg.fixture);
    spec = FixtureSpec::from_json(read_text(cfg.fixture));
  }
  if (!cfg.model_config.empty()) spec.config = load_model_config(cfg);
  if (cfg.seed) spec.seed = *cfg.seed;
  spec.validate();
  const auto pair = generate_pair(spec);
  fs::create_directories(cfg.out);
  for (const auto& [name, store] : {std::pair{"base.safetensors", &pair.base}, {"post.safetensors", &pair.post}}) {
    auto copy = *store;
    copy.set_metadata("spectral_forge_version", kToolVersion);
    write_checkpoint(copy, cfg.out / name);
    s.files_.push_back(cfg.out / name);
  }
  auto truth = json::parse(pair.truth.to_json());
  truth["seed"] = spec.seed;
  s.emit_json("truth.json", truth);
  s.emit("config.json", spec.config.to_json() + "\n");
}

}  // namespace

RunResult run(const RunConfig& config, std::ostream& log) {
  Session s(config, log);
  RunResult result;
  try {
    fs::create_directories(config.out);
    switch (config.command) {
      case Command::DECOMPOSE: cmd_decompose(s); break;
      case Command::COMPARE: cmd_compare(s); break;
      case Command::FINGERPRINT: cmd_fingerprint(s); break;
      case Command::SURGERY: cmd_surgery(s); break;
      case Command::ENTROPY: cmd_entropy(s); break;
      case Command::CKA: cmd_cka(s); break;
      case Command::SYNTH: cmd_synth(s); break;
    }
  } catch (const std::exception& e) {
    std::string kind = "error";
    if (dynamic_cast<const UsageError*>(&e)) kind = "usage";
    else if (dynamic_cast<const CheckpointError*>(&e)) kind = "checkpoint";
    else if (dynamic_cast<const SpectralError*>(&e)) kind = "spectral";
    else if (dynamic_cast<const MetricsError*>(&e)) kind = "metrics";
    else if (dynamic_cast<const SurgeryError*>(&e)) kind = "surgery";
    else if (dynamic_cast<const ModelError*>(&e)) kind = "model";
    result.exit_code = 1;
    result.error_json = json{{"error", {{"command", std::string(command_name(config.command))},
                                        {"kind", kind},
                                        {"message", e.what()}}}}
                            .dump();
  }
  result.files = s.files_;
  return result;
}

}  // namespace spectral_forge
