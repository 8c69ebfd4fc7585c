#pragma once

#include <Eigen/Sparse>
#include <fstream>
#include <json.hpp>
#include <string>

#include "svdlnm/hyperopt.hpp"
#include "svdlnm/version.hpp"

namespace svdlnm {

/// Fit-artifact serialization for the CLI. The artifact carries everything
/// the `rr` and `compare` subcommands need: model/spline configuration, the
/// posterior mode, and the sparse precision factorization. JSON files cannot
/// carry comment headers, so the version/config-hash/seed header fields live
/// in a leading "meta" object instead.

inline nlohmann::json basis_to_json(const MarginalBasis& b) {
  nlohmann::json j;
  j["kind"] = b.kind == BasisKind::BSpline ? "bspline" : "natural";
  j["num_functions"] = b.num_functions;
  j["degree"] = b.degree;
  j["lo"] = b.lo;
  j["hi"] = b.hi;
  j["knots"] = std::vector<double>(b.knots.data(), b.knots.data() + b.knots.size());
  return j;
}

inline MarginalBasis basis_from_json(const nlohmann::json& j) {
  MarginalBasis b;
  b.kind = j.at("kind") == "bspline" ? BasisKind::BSpline : BasisKind::Natural;
  b.num_functions = j.at("num_functions");
  b.degree = j.at("degree");
  b.lo = j.at("lo");
  b.hi = j.at("hi");
  std::vector<double> knots = j.at("knots");
  b.knots = Eigen::Map<Eigen::VectorXd>(knots.data(), knots.size());
  return b;
}

inline nlohmann::json sparse_to_json(const Eigen::SparseMatrix<double>& m) {
  nlohmann::json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<long> ri, ci;
  std::vector<double> vals;
  for (int k = 0; k < m.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it) {
      ri.push_back(it.row());
      ci.push_back(it.col());
      vals.push_back(it.value());
    }
  j["row"] = ri;
  j["col"] = ci;
  j["value"] = vals;
  return j;
}

inline Eigen::SparseMatrix<double> sparse_from_json(const nlohmann::json& j) {
  std::vector<long> ri = j.at("row"), ci = j.at("col");
  std::vector<double> vals = j.at("value");
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(vals.size());
  for (size_t k = 0; k < vals.size(); ++k) trips.emplace_back(ri[k], ci[k], vals[k]);
  Eigen::SparseMatrix<double> m(j.at("rows").get<long>(), j.at("cols").get<long>());
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

inline std::vector<double> vec_to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline Eigen::VectorXd vec_from_std(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
}

inline nlohmann::json fit_state_to_json(const FitResult& fit, const Config& config) {
  nlohmann::json j;
  j["meta"] = {{"tool", "svdlnm"},
               {"version", kVersion},
               {"config_hash", config.hash()},
               {"seeds", nlohmann::json::array()}};

  nlohmann::json spec;
  spec["prior"] = to_string(fit.spec.type);
  spec["family"] = to_string(fit.spec.family);
  spec["penalized"] = fit.spec.is_penalized();
  spec["use_lag_shrink"] = fit.spec.use_lag_shrink;
  spec["penalty_order"] = fit.spec.penalty_order;
  spec["random_effect"] =
      fit.spec.random_effect == RandomEffectStructure::Leroux ? "leroux" : "iid";
  spec["a"] = fit.spec.a;
  spec["b"] = fit.spec.b;
  spec["nu"] = fit.spec.nu;
  spec["zeta"] = fit.spec.zeta;
  spec["ridge"] = fit.spec.ridge;
  if (fit.spec.fixed_phi) spec["fixed_phi"] = *fit.spec.fixed_phi;
  j["spec"] = spec;

  j["crossbasis"] = {{"exposure", basis_to_json(fit.cb.exposure_basis)},
                     {"lag", basis_to_json(fit.cb.lag_basis)},
                     {"max_lag", fit.cb.max_lag}};

  j["blocks"] = {{"beta_start", fit.mm.blocks.beta_start},
                 {"beta_count", fit.mm.blocks.beta_count},
                 {"theta_start", fit.mm.blocks.theta_start},
                 {"theta_count", fit.mm.blocks.theta_count},
                 {"theta_j_start", fit.mm.blocks.theta_j_start},
                 {"theta_j_count", fit.mm.blocks.theta_j_count},
                 {"u_start", fit.mm.blocks.u_start},
                 {"u_count", fit.mm.blocks.u_count},
                 {"total", fit.mm.blocks.total}};
  j["area_ids"] = fit.area_ids;
  j["J"] = fit.mm.J;
  j["p"] = fit.mm.p;
  j["H"] = fit.mm.H;
  j["has_theta_j"] = fit.mm.has_theta_j;
  j["w_col_means"] = vec_to_std(fit.mm.w_col_means.transpose());

  nlohmann::json hyper;
  for (int i = 0; i < fit.psi_hat.layout.dim(); ++i)
    hyper[fit.psi_hat.layout.entries[i].name] = fit.psi_hat.psi[i];
  j["psi_hat"] = hyper;
  j["phi_hat"] = fit.phi_hat;

  j["mode"] = vec_to_std(fit.approx.mode);
  j["factor_L"] = sparse_to_json(fit.approx.factor_L);
  j["perm"] = std::vector<int>(fit.approx.perm.data(),
                               fit.approx.perm.data() + fit.approx.perm.size());
  j["log_det_sigma"] = fit.approx.log_det_sigma;
  j["loglik_at_mode"] = fit.approx.loglik_at_mode;

  j["parts"] = {{"loglik_at_mode", fit.parts.loglik_at_mode},
                {"half_logdet_v_theta", fit.parts.half_logdet_v_theta},
                {"half_logdet_v_theta_j", fit.parts.half_logdet_v_theta_j},
                {"half_logdet_g", fit.parts.half_logdet_g},
                {"quad_term", fit.parts.quad_term},
                {"half_logdet_sigma", fit.parts.half_logdet_sigma},
                {"jacobian_rho_sum", fit.parts.jacobian_rho_sum},
                {"prior_lambda_sum", fit.parts.prior_lambda_sum},
                {"prior_tau_sum", fit.parts.prior_tau_sum},
                {"total", fit.parts.total}};
  j["convergence"] = {{"evaluations", fit.conv.evaluations},
                      {"converged", fit.conv.converged},
                      {"final_diameter", fit.conv.final_diameter},
                      {"final_spread", fit.conv.final_spread}};
  j["q_hat"] = sparse_to_json(fit.q_hat);
  return j;
}

/// Restores the downstream-relevant parts of a fit (no data matrices; the
/// compare subcommand rebuilds those from the panel CSV).
struct LoadedFit {
  FitResult fit;
  PriorSpec spec;
};

inline LoadedFit fit_state_from_json(const nlohmann::json& j) {
  LoadedFit lf;
  FitResult& f = lf.fit;

  const auto& spec = j.at("spec");
  std::string prior = spec.at("prior");
  PriorType type = prior == "common"    ? PriorType::Common
                   : prior == "typeI"   ? PriorType::TypeI
                   : prior == "typeII"  ? PriorType::TypeII
                   : prior == "typeIII" ? PriorType::TypeIII
                                        : PriorType::TypeIV;
  Family fam = spec.at("family") == "poisson" ? Family::Poisson : Family::NegBinomial;
  f.spec = PriorSpec::make(type, fam);
  if (type == PriorType::Common) f.spec.penalized = spec.at("penalized");
  f.spec.use_lag_shrink = spec.at("use_lag_shrink");
  f.spec.penalty_order = spec.at("penalty_order");
  f.spec.random_effect = spec.at("random_effect") == "leroux"
                             ? RandomEffectStructure::Leroux
                             : RandomEffectStructure::IID;
  f.spec.a = spec.at("a");
  f.spec.b = spec.at("b");
  f.spec.nu = spec.at("nu");
  f.spec.zeta = spec.at("zeta");
  f.spec.ridge = spec.at("ridge");
  if (spec.contains("fixed_phi")) f.spec.fixed_phi = spec.at("fixed_phi").get<double>();
  lf.spec = f.spec;

  f.cb = make_cross_basis(basis_from_json(j.at("crossbasis").at("exposure")),
                          basis_from_json(j.at("crossbasis").at("lag")),
                          j.at("crossbasis").at("max_lag"));

  const auto& b = j.at("blocks");
  f.mm.blocks.beta_start = b.at("beta_start");
  f.mm.blocks.beta_count = b.at("beta_count");
  f.mm.blocks.theta_start = b.at("theta_start");
  f.mm.blocks.theta_count = b.at("theta_count");
  f.mm.blocks.theta_j_start = b.at("theta_j_start");
  f.mm.blocks.theta_j_count = b.at("theta_j_count");
  f.mm.blocks.u_start = b.at("u_start");
  f.mm.blocks.u_count = b.at("u_count");
  f.mm.blocks.total = b.at("total");
  f.mm.J = j.at("J");
  f.mm.p = j.at("p");
  f.mm.H = j.at("H");
  f.mm.has_theta_j = j.at("has_theta_j");
  f.area_ids = j.at("area_ids").get<std::vector<std::string>>();
  std::vector<double> means = j.at("w_col_means");
  f.mm.w_col_means = Eigen::Map<Eigen::RowVectorXd>(means.data(), means.size());

  f.ps.layout = make_hyper_layout(f.spec);
  f.psi_hat = HyperVector::zeros(f.ps.layout);
  for (int i = 0; i < f.ps.layout.dim(); ++i)
    f.psi_hat.psi[i] = j.at("psi_hat").at(f.ps.layout.entries[i].name).get<double>();
  f.phi_hat = j.at("phi_hat");

  f.approx.mode = vec_from_std(j.at("mode").get<std::vector<double>>());
  f.approx.factor_L = sparse_from_json(j.at("factor_L"));
  std::vector<int> perm = j.at("perm");
  f.approx.perm = Eigen::Map<Eigen::VectorXi>(perm.data(), perm.size());
  f.approx.log_det_sigma = j.at("log_det_sigma");
  f.approx.loglik_at_mode = j.at("loglik_at_mode");
  f.approx.converged = j.at("convergence").at("converged");
  f.conv.evaluations = j.at("convergence").at("evaluations");
  f.conv.converged = j.at("convergence").at("converged");
  f.q_hat = sparse_from_json(j.at("q_hat"));
  return lf;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(1) << '\n';
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

}  // namespace svdlnm
