#include "spectral_forge/surgery.hpp"

#include <algorithm>

#include <json.hpp>

namespace spectral_forge {

std::string_view construction_name(ConstructionKind kind) {
  switch (kind) {
    case ConstructionKind::REPLACE_SIGMA: return "REPLACE_SIGMA";
    case ConstructionKind::ABLATE_OUT: return "ABLATE_OUT";
    case ConstructionKind::RESTORE_OUT: return "RESTORE_OUT";
    case ConstructionKind::ABLATE_IN: return "ABLATE_IN";
    case ConstructionKind::RESTORE_IN: return "RESTORE_IN";
    case ConstructionKind::RESTORE_CROSS: return "RESTORE_CROSS";
  }
  return "?";
}

std::optional<ConstructionKind> parse_construction(std::string_view name) {
  for (auto k : {ConstructionKind::REPLACE_SIGMA, ConstructionKind::ABLATE_OUT,
                 ConstructionKind::RESTORE_OUT, ConstructionKind::ABLATE_IN,
                 ConstructionKind::RESTORE_IN, ConstructionKind::RESTORE_CROSS}) {
    if (construction_name(k) == name) return k;
  }
  return std::nullopt;
}

void Construction::validate() const {
  const bool replace = kind == ConstructionKind::REPLACE_SIGMA;
  if (replace != alpha_prime.has_value()) {
    throw SurgeryError("alpha_prime must be given for REPLACE_SIGMA and only for it");
  }
  if (alpha_prime) {
    for (const auto& [t, a] : *alpha_prime) {
      if (!(a > 0)) throw SurgeryError("alpha_prime for " + std::string(matrix_type_name(t)) + " must be positive");
    }
  }
}

std::set<MatrixKey> select_module(const std::set<MatrixKey>& keys, ModuleKind module) {
  std::set<MatrixKey> out;
  for (const auto& k : keys) {
    if (k.module() == module) out.insert(k);
  }
  return out;
}

SurgeryPlan SurgeryPlan::from_json(std::string_view json_text, const std::set<MatrixKey>& available) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SurgeryError(std::string("malformed plan JSON: ") + e.what());
  }
  SurgeryPlan plan;
  const auto kind = parse_construction(j.value("construction", std::string{}));
  if (!kind) throw SurgeryError("plan: unknown or missing construction");
  plan.construction.kind = *kind;
  if (j.contains("alpha_prime")) {
    std::map<MatrixType, double> alpha;
    const auto& a = j["alpha_prime"];
    if (a.is_number()) {
      for (auto t : kAllMatrixTypes) alpha[t] = a.get<double>();
    } else {
      for (auto it = a.begin(); it != a.end(); ++it) {
        auto t = parse_matrix_type(it.key());
        if (!t) throw SurgeryError("plan: unknown matrix type '" + it.key() + "' in alpha_prime");
        alpha[*t] = it.value().get<double>();
      }
    }
    plan.construction.alpha_prime = std::move(alpha);
  }
  plan.construction.validate();
  plan.donor = *kind == ConstructionKind::RESTORE_CROSS ? DonorRole::POST : DonorRole::BASE;

  const auto& sel = j.contains("selector") ? j["selector"] : nlohmann::json::array();
  std::vector<std::string> items;
  if (sel.is_string()) {
    items.push_back(sel.get<std::string>());
  } else {
    for (const auto& s : sel) items.push_back(s.get<std::string>());
  }
  for (const auto& item : items) {
    std::string lower = item;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "sa") {
      auto s = select_module(available, ModuleKind::SA);
      plan.selector.insert(s.begin(), s.end());
    } else if (lower == "ffn") {
      auto s = select_module(available, ModuleKind::FFN);
      plan.selector.insert(s.begin(), s.end());
    } else if (lower == "all") {
      plan.selector.insert(available.begin(), available.end());
    } else {
      auto key = parse_matrix_key(item);
      if (!key) throw SurgeryError("plan: cannot parse selector entry '" + item + "'");
      plan.selector.insert(*key);
    }
  }
  plan.selector_spec = items;
  if (plan.selector.empty()) throw SurgeryError("plan: selector matches no matrices");
  plan.donor_path = j.value("donor_path", std::string{});
  plan.recipient_path = j.value("recipient_path", std::string{});
  plan.output_path = j.value("output_path", std::string{});
  return plan;
}

std::string SurgeryPlan::canonical_json() const {
  nlohmann::json j;  // std::map-backed: keys are sorted
  j["construction"] = std::string(construction_name(construction.kind));
  if (construction.alpha_prime) {
    nlohmann::json a = nlohmann::json::object();
    for (const auto& [t, v] : *construction.alpha_prime) a[std::string(matrix_type_name(t))] = v;
    j["alpha_prime"] = a;
  }
  nlohmann::json keys = nlohmann::json::array();
  for (const auto& k : selector) keys.push_back(to_string(k));
  j["selector"] = keys;
  j["donor_path"] = donor_path;
  j["recipient_path"] = recipient_path;
  j["output_path"] = output_path;
  return j.dump();
}

namespace {

using Md = Eigen::MatrixXd;

double rotation_defect(ConstructionKind kind, const SpectralDecomposition& p,
                       const SpectralDecomposition& d) {
  switch (kind) {
    case ConstructionKind::RESTORE_OUT:
    case ConstructionKind::RESTORE_CROSS:
      return orthogonality_defect(d.u.cast<double>().transpose() * p.u.cast<double>());
    case ConstructionKind::RESTORE_IN:
      return orthogonality_defect(d.v.cast<double>().transpose() * p.v.cast<double>());
    default:
      return 0.0;
  }
}

}  // namespace

Eigen::MatrixXf apply_construction(const Construction& construction, MatrixType type,
                                   const SpectralDecomposition& p, const SpectralDecomposition& d) {
  if (p.rank() != d.rank() || p.u.rows() != d.u.rows() || p.v.rows() != d.v.rows() ||
      p.transposed != d.transposed) {
    throw SurgeryError("recipient and donor matrices have different shapes");
  }
  const Md up = p.u.cast<double>(), vp = p.v.cast<double>();
  const Md ud = d.u.cast<double>(), vd = d.v.cast<double>();
  const Eigen::VectorXd sp = p.sigma.cast<double>();

  Md left = up, right = vp;
  Eigen::VectorXd sigma = sp;
  switch (construction.kind) {
    case ConstructionKind::REPLACE_SIGMA: {
      const auto& alpha = *construction.alpha_prime;
      auto it = alpha.find(type);
      if (it == alpha.end()) {
        throw SurgeryError("alpha_prime has no entry for " + std::string(matrix_type_name(type)));
      }
      sigma = it->second * d.sigma.cast<double>();
      break;
    }
    case ConstructionKind::ABLATE_OUT:
      right = vd;
      break;
    case ConstructionKind::RESTORE_OUT:
    case ConstructionKind::RESTORE_CROSS:
      right = vd * (ud.transpose() * up);
      break;
    case ConstructionKind::ABLATE_IN:
      left = ud;
      break;
    case ConstructionKind::RESTORE_IN:
      left = ud * (vd.transpose() * vp);
      break;
  }
  const Md w = left * sigma.asDiagonal() * right.transpose();
  return (p.transposed ? Md(w.transpose()) : w).cast<float>();
}

SurgeryResult apply(const SurgeryPlan& plan, const CheckpointStore& recipient,
                    const CheckpointStore& donor, const NamingSchema& schema,
                    const DecomposeOptions& options) {
  plan.construction.validate();
  if (plan.selector.empty()) throw SurgeryError("surgery plan selects no matrices");
  const auto cr = classify(recipient, schema);
  const auto cd = classify(donor, schema);

  std::map<MatrixKey, std::string> rkeys, dkeys;
  for (const auto& key : plan.selector) {
    auto r = cr.keys.find(key);
    auto d = cd.keys.find(key);
    if (r == cr.keys.end()) throw SurgeryError(to_string(key) + " is absent from the recipient");
    if (d == cd.keys.end()) throw SurgeryError(to_string(key) + " is absent from the donor");
    if (recipient.at(r->second).shape != donor.at(d->second).shape) {
      throw SurgeryError(to_string(key) + ": recipient and donor shapes differ");
    }
    if (plan.construction.kind == ConstructionKind::REPLACE_SIGMA &&
        !plan.construction.alpha_prime->count(key.mtype)) {
      throw SurgeryError("alpha_prime has no entry for " + std::string(matrix_type_name(key.mtype)));
    }
    rkeys.emplace(key, r->second);
    dkeys.emplace(key, d->second);
  }

  auto opts = options;
  opts.schema = schema;
  const auto rdec = decompose_all(recipient, rkeys, opts);
  const auto ddec = decompose_all(donor, dkeys, opts);

  SurgeryResult result;
  result.store = recipient;
  for (const auto& [key, name] : rkeys) {
    const auto& p = rdec.at(key);
    const auto& d = ddec.at(key);
    const Eigen::MatrixXf w = apply_construction(plan.construction, key.mtype, p, d);
    const Eigen::MatrixXf original = load_matrix(recipient, name, schema);

    SurgeryKeyReport rep;
    rep.key = key;
    const double base_norm = original.cast<double>().norm();
    rep.relative_change = (w.cast<double>() - original.cast<double>()).norm() / (base_norm > 0 ? base_norm : 1.0);
    rep.degenerate_flag = has_degenerate_cluster(p.sigma) || has_degenerate_cluster(d.sigma);
    rep.rotation_defect = rotation_defect(plan.construction.kind, p, d);
    result.report.push_back(rep);

    result.store.replace(store_matrix(name, w, schema));
  }
  result.store.set_metadata("surgery_plan", plan.canonical_json());
  return result;
}

std::map<MatrixType, double> alpha_from_metrics(const std::map<MatrixType, ScalingStats>& stats,
                                                double quantum, const std::set<MatrixType>& required) {
  std::map<MatrixType, double> means;
  for (const auto& [t, s] : stats) means[t] = s.mean;
  for (auto t : required) {
    if (!means.count(t)) {
      throw SurgeryError("scaling statistics lack matrix type " + std::string(matrix_type_name(t)));
    }
  }
  return alpha_assign(means, quantum);
}

}  // namespace spectral_forge
