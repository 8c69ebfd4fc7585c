#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "svdlnm/config.hpp"
#include "svdlnm/laplace.hpp"
#include "svdlnm/model.hpp"

namespace svdlnm {

/// log(1 + e^x) without overflow.
inline double log1p_exp(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// Jacobian-adjusted Beta(1/2, 1/2) prior of a correlation on the logit
/// scale: psi/2 - log(1 + e^psi).
inline double rho_jacobian_term(double psi) { return 0.5 * psi - log1p_exp(psi); }

/// Jacobian-adjusted marginal prior of a penalty or precision parameter on
/// the log scale, after integrating out its Gamma(a, b) hyperparameter:
/// (nu/2) psi - (nu/2 + a) log(b + (nu/2) e^psi).
inline double gamma_prior_term(double psi, double nu, double a, double b) {
  double scaled = psi + std::log(0.5 * nu);  // log((nu/2) e^psi)
  double log_sum = scaled > std::log(b) ? scaled + std::log1p(b * std::exp(-scaled))
                                        : std::log(b + std::exp(scaled));
  return 0.5 * nu * psi - (0.5 * nu + a) * log_sum;
}

/// Term-by-term decomposition of the transformed hyperparameter
/// log-posterior; total is their sum (up to an additive constant).
struct HyperLogPostParts {
  double loglik_at_mode = 0.0;
  double half_logdet_v_theta = 0.0;
  double half_logdet_v_theta_j = 0.0;
  double half_logdet_g = 0.0;
  double quad_term = 0.0;  // -xi' Q xi / 2 at the mode
  double half_logdet_sigma = 0.0;
  double jacobian_rho_sum = 0.0;
  double prior_lambda_sum = 0.0;
  double prior_tau_sum = 0.0;
  double total = -std::numeric_limits<double>::infinity();
  std::string diagnostic;  // set when the inner solve failed

  double sum_parts() const {
    return loglik_at_mode + half_logdet_v_theta + half_logdet_v_theta_j +
           half_logdet_g + quad_term + half_logdet_sigma + jacobian_rho_sum +
           prior_lambda_sum + prior_tau_sum;
  }
};

/// Mutable state of one fit: data-side matrices, prior structure and the
/// warm-start bookkeeping shared by consecutive objective evaluations.
struct FitContext {
  ModelMatrices mm;
  PriorStructure ps;
  NewtonSettings newton;
  Eigen::VectorXd warm_mode;  // empty until the first successful solve
  std::shared_ptr<NewtonWorkspace> newton_ws = std::make_shared<NewtonWorkspace>();

  FamilyParams family_params(const HyperVector& hyper) const {
    FamilyParams fp;
    fp.family = ps.spec.family;
    if (fp.family == Family::NegBinomial)
      fp.phi = ps.spec.fixed_phi ? *ps.spec.fixed_phi : hyper.positive(ps.layout.phi);
    return fp;
  }
};

struct HyperEvaluation {
  HyperLogPostParts parts;
  GaussianApprox approx;
  Eigen::SparseMatrix<double> q;
  bool ok = false;
};

/// Evaluates the hyperparameter log-posterior at psi: inner Newton solve for
/// the conditional mode (warm-started; one retry from zero), then the
/// determinant, quadratic, Jacobian and prior terms. A failed inner solve
/// yields total = -inf so the outer optimizer retreats.
inline HyperEvaluation hyper_logpost_full(const Eigen::VectorXd& psi, FitContext& ctx) {
  HyperEvaluation ev;
  HyperVector hyper{ctx.ps.layout, psi};
  FamilyParams fp = ctx.family_params(hyper);
  ev.q = build_prior_precision(ctx.ps, hyper, ctx.mm.blocks);

  try {
    ev.approx = newton_mode(ctx.mm, ev.q, fp, ctx.warm_mode, ctx.newton,
                            ctx.newton_ws.get());
  } catch (const std::exception& first) {
    try {
      ev.approx = newton_mode(ctx.mm, ev.q, fp, Eigen::VectorXd(), ctx.newton,
                              ctx.newton_ws.get());
    } catch (const std::exception& second) {
      ev.parts.diagnostic = second.what();
      return ev;  // total stays -inf
    }
  }
  ctx.warm_mode = ev.approx.mode;

  auto ld = log_det_prior_blocks(ctx.ps, hyper);
  HyperLogPostParts& p = ev.parts;
  p.loglik_at_mode = ev.approx.loglik_at_mode;
  p.half_logdet_v_theta = 0.5 * ld.v_theta;
  p.half_logdet_v_theta_j = 0.5 * ld.v_theta_j;
  p.half_logdet_g = 0.5 * ld.g;
  p.quad_term = -0.5 * ev.approx.mode.dot(ev.q * ev.approx.mode);
  p.half_logdet_sigma = 0.5 * ev.approx.log_det_sigma;
  const PriorSpec& spec = ctx.ps.spec;
  for (int i = 0; i < ctx.ps.layout.dim(); ++i) {
    switch (ctx.ps.layout.entries[i].role) {
      case HyperRole::LogLambda:
        p.prior_lambda_sum += gamma_prior_term(psi[i], spec.nu, spec.a, spec.b);
        break;
      case HyperRole::LogTau:
        p.prior_tau_sum += gamma_prior_term(psi[i], spec.nu, spec.a, spec.b);
        break;
      case HyperRole::LogitRho:
        p.jacobian_rho_sum += rho_jacobian_term(psi[i]);
        break;
      case HyperRole::LogPhi:
        break;  // p(phi) proportional to 1/phi is flat on the log scale
    }
  }
  p.total = p.sum_parts();
  ev.ok = std::isfinite(p.total);
  if (!ev.ok) p.total = -std::numeric_limits<double>::infinity();
  return ev;
}

inline HyperLogPostParts hyper_logpost(const Eigen::VectorXd& psi, FitContext& ctx) {
  return hyper_logpost_full(psi, ctx).parts;
}

struct NelderMeadSettings {
  int max_evals = 500;
  double simplex_tol = 1e-4;
  double objective_tol = 1e-6;
  double init_step = 1.0;
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double fx = -std::numeric_limits<double>::infinity();
  int evals = 0;
  bool converged = false;
  double final_diameter = std::numeric_limits<double>::infinity();
  double final_spread = std::numeric_limits<double>::infinity();
};

/// Derivative-free simplex ascent (standard Nelder-Mead coefficients).
/// Converged when the simplex diameter and objective spread fall under their
/// tolerances; otherwise stops at the evaluation cap with best-so-far.
inline NelderMeadResult nelder_mead_maximize(
    const std::function<double(const Eigen::VectorXd&)>& objective,
    const Eigen::VectorXd& x0, const NelderMeadSettings& settings) {
  const int n = static_cast<int>(x0.size());
  NelderMeadResult res;
  int evals = 0;
  auto g = [&](const Eigen::VectorXd& x) {  // minimize g = -objective
    ++evals;
    double f = objective(x);
    return std::isfinite(f) ? -f : std::numeric_limits<double>::infinity();
  };

  std::vector<std::pair<double, Eigen::VectorXd>> simplex;
  simplex.reserve(n + 1);
  simplex.emplace_back(g(x0), x0);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd xi = x0;
    xi[i] += settings.init_step;
    simplex.emplace_back(g(xi), xi);
  }
  auto order = [&simplex]() {
    std::stable_sort(simplex.begin(), simplex.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
  };
  order();

  auto diameter = [&simplex, n]() {
    double d = 0.0;
    for (int i = 1; i <= n; ++i)
      d = std::max(d, (simplex[i].second - simplex[0].second).cwiseAbs().maxCoeff());
    return d;
  };
  auto spread = [&simplex, n]() {
    if (!std::isfinite(simplex[n].first)) return std::numeric_limits<double>::infinity();
    return std::abs(simplex[n].first - simplex[0].first);
  };

  while (evals < settings.max_evals) {
    if (diameter() < settings.simplex_tol && spread() < settings.objective_tol) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) centroid += simplex[i].second;
    centroid /= n;
    const auto& worst = simplex[n];

    Eigen::VectorXd xr = centroid + (centroid - worst.second);
    double gr = g(xr);
    if (gr < simplex[0].first) {
      Eigen::VectorXd xe = centroid + 2.0 * (centroid - worst.second);
      double ge = g(xe);
      simplex[n] = ge < gr ? std::make_pair(ge, xe) : std::make_pair(gr, xr);
    } else if (gr < simplex[n - 1].first) {
      simplex[n] = {gr, xr};
    } else if (gr < worst.first) {
      Eigen::VectorXd xc = centroid + 0.5 * (xr - centroid);
      double gc = g(xc);
      if (gc <= gr) {
        simplex[n] = {gc, xc};
      } else {
        for (int i = 1; i <= n; ++i) {
          simplex[i].second = simplex[0].second + 0.5 * (simplex[i].second - simplex[0].second);
          simplex[i].first = g(simplex[i].second);
        }
      }
    } else {
      Eigen::VectorXd xc = centroid - 0.5 * (centroid - worst.second);
      double gc = g(xc);
      if (gc < worst.first) {
        simplex[n] = {gc, xc};
      } else {
        for (int i = 1; i <= n; ++i) {
          simplex[i].second = simplex[0].second + 0.5 * (simplex[i].second - simplex[0].second);
          simplex[i].first = g(simplex[i].second);
        }
      }
    }
    order();
  }
  res.x = simplex[0].second;
  res.fx = -simplex[0].first;
  res.evals = evals;
  res.final_diameter = diameter();
  res.final_spread = spread();
  return res;
}

struct FitConvergence {
  int evaluations = 0;
  bool converged = false;
  double final_diameter = 0.0;
  double final_spread = 0.0;
};

/// Outcome of the hyperparameter optimization for one model.
struct FitOutcome {
  HyperVector psi_hat;
  GaussianApprox approx;
  Eigen::SparseMatrix<double> q_hat;
  HyperLogPostParts parts;
  FitConvergence conv;
  double phi_hat = 0.0;  // NB only; 0 marks Poisson
};

/// MAP ascent over psi with warm-started inner Newton solves, followed by a
/// full Laplace refit at the optimum.
inline FitOutcome optimize_hyper(FitContext& ctx, const Eigen::VectorXd& psi0,
                                 const NelderMeadSettings& settings = NelderMeadSettings()) {
  Eigen::VectorXd start =
      psi0.size() == ctx.ps.layout.dim() ? psi0 : Eigen::VectorXd::Zero(ctx.ps.layout.dim());
  auto objective = [&ctx](const Eigen::VectorXd& psi) {
    return hyper_logpost(psi, ctx).total;
  };
  NelderMeadResult nm = nelder_mead_maximize(objective, start, settings);

  FitOutcome out;
  out.psi_hat = HyperVector{ctx.ps.layout, nm.x};
  HyperEvaluation ev = hyper_logpost_full(nm.x, ctx);
  if (!ev.ok) throw std::runtime_error("laplace refit at the optimum failed: " +
                                       ev.parts.diagnostic);
  out.approx = std::move(ev.approx);
  out.q_hat = std::move(ev.q);
  out.parts = ev.parts;
  out.conv.evaluations = nm.evals + 1;
  out.conv.converged = nm.converged;
  out.conv.final_diameter = nm.final_diameter;
  out.conv.final_spread = nm.final_spread;
  if (ctx.ps.spec.family == Family::NegBinomial)
    out.phi_hat = ctx.ps.spec.fixed_phi ? *ctx.ps.spec.fixed_phi
                                        : out.psi_hat.positive(ctx.ps.layout.phi);
  return out;
}

/// Cross-basis construction settings. Penalized specs use cubic B-splines
/// with `bspline_df` functions per dimension on equally spaced knots;
/// unpenalized specs use natural splines with percentile knots in the
/// exposure dimension and log-scale-spaced knots in the lag dimension.
struct SplineSettings {
  int max_lag = 8;
  int bspline_df = 6;
  int bspline_degree = 3;
  int natural_exposure_knots = 2;
  int natural_lag_knots = 2;
};

/// Type-7 (linear interpolation) quantile of a copy of the values.
inline double quantile(Eigen::VectorXd values, double prob) {
  std::sort(values.data(), values.data() + values.size());
  double h = (values.size() - 1) * prob;
  Eigen::Index lo = static_cast<Eigen::Index>(std::floor(h));
  Eigen::Index hi = std::min<Eigen::Index>(lo + 1, values.size() - 1);
  return values[lo] + (h - lo) * (values[hi] - values[lo]);
}

inline CrossBasis build_cross_basis_for(const PriorSpec& spec, const SplineSettings& ss,
                                        const Eigen::VectorXd& exposure) {
  const double lo = exposure.minCoeff(), hi = exposure.maxCoeff();
  const int L = ss.max_lag;
  if (spec.is_penalized()) {
    auto bx = make_bspline_basis(ss.bspline_df, ss.bspline_degree, lo, hi);
    auto bl = make_bspline_basis(ss.bspline_df, ss.bspline_degree, 0.0,
                                 std::max(1, L));
    return make_cross_basis(std::move(bx), std::move(bl), L);
  }
  // Natural exposure knots: 10%/90% percentiles for two knots, equally
  // spaced quantiles otherwise.
  const int kx = ss.natural_exposure_knots;
  Eigen::VectorXd xknots(kx);
  for (int i = 0; i < kx; ++i) {
    double prob = (kx == 2) ? (i == 0 ? 0.10 : 0.90)
                            : static_cast<double>(i + 1) / (kx + 1);
    xknots[i] = quantile(exposure, prob);
  }
  // Lag knots equally spaced on log(l + 1), mapped back inside (0, L).
  const int kl = ss.natural_lag_knots;
  Eigen::VectorXd lknots(kl);
  for (int i = 0; i < kl; ++i) {
    double t = std::log(static_cast<double>(L) + 1.0) * (i + 1) / (kl + 1);
    lknots[i] = std::exp(t) - 1.0;
  }
  auto bx = make_natural_basis(xknots, lo, hi);
  auto bl = make_natural_basis(lknots, 0.0, std::max(1, L));
  return make_cross_basis(std::move(bx), std::move(bl), L);
}

struct FitOptions {
  SplineSettings splines;
  NewtonSettings newton;
  NelderMeadSettings optim;
  std::map<std::string, double> init_psi;  // by hyperparameter name
};

inline FitOptions fit_options_from_config(const Config& cfg) {
  FitOptions fo;
  fo.splines.max_lag = static_cast<int>(cfg.get_long("max_lag", fo.splines.max_lag));
  fo.splines.bspline_df = static_cast<int>(cfg.get_long("bspline_df", fo.splines.bspline_df));
  fo.splines.bspline_degree =
      static_cast<int>(cfg.get_long("bspline_degree", fo.splines.bspline_degree));
  fo.splines.natural_exposure_knots = static_cast<int>(
      cfg.get_long("natural_exposure_knots", fo.splines.natural_exposure_knots));
  fo.splines.natural_lag_knots =
      static_cast<int>(cfg.get_long("natural_lag_knots", fo.splines.natural_lag_knots));
  fo.newton.grad_tol_rel = cfg.get_double("newton_tol", fo.newton.grad_tol_rel);
  fo.newton.max_iter = static_cast<int>(cfg.get_long("newton_max_iter", fo.newton.max_iter));
  fo.optim.max_evals = static_cast<int>(cfg.get_long("max_outer_evals", fo.optim.max_evals));
  fo.optim.simplex_tol = cfg.get_double("simplex_tol", fo.optim.simplex_tol);
  fo.optim.objective_tol = cfg.get_double("objective_tol", fo.optim.objective_tol);
  fo.optim.init_step = cfg.get_double("init_step", fo.optim.init_step);
  for (const auto& [key, value] : cfg.entries())
    if (key.rfind("init_psi.", 0) == 0) fo.init_psi[key.substr(9)] = std::stod(value);
  return fo;
}

inline PriorSpec prior_spec_from_config(const Config& cfg) {
  std::string prior = cfg.get_string("prior", "common");
  PriorType type;
  if (prior == "common") type = PriorType::Common;
  else if (prior == "typeI" || prior == "type1") type = PriorType::TypeI;
  else if (prior == "typeII" || prior == "type2") type = PriorType::TypeII;
  else if (prior == "typeIII" || prior == "type3") type = PriorType::TypeIII;
  else if (prior == "typeIV" || prior == "type4") type = PriorType::TypeIV;
  else throw std::runtime_error("config: unknown prior '" + prior + "'");

  std::string family = cfg.get_string("family", "poisson");
  Family fam;
  if (family == "poisson") fam = Family::Poisson;
  else if (family == "negbin" || family == "nb") fam = Family::NegBinomial;
  else throw std::runtime_error("config: unknown family '" + family + "'");

  PriorSpec spec = PriorSpec::make(type, fam);
  if (type == PriorType::Common) spec.penalized = cfg.get_bool("penalized", spec.penalized);
  spec.use_lag_shrink = cfg.get_bool("use_lag_shrink", spec.use_lag_shrink);
  spec.penalty_order = static_cast<int>(cfg.get_long("penalty_order", spec.penalty_order));
  std::string re = cfg.get_string(
      "random_effect", spec.random_effect == RandomEffectStructure::Leroux ? "leroux" : "iid");
  if (re == "iid") spec.random_effect = RandomEffectStructure::IID;
  else if (re == "leroux") spec.random_effect = RandomEffectStructure::Leroux;
  else throw std::runtime_error("config: unknown random_effect '" + re + "'");
  spec.a = cfg.get_double("a", spec.a);
  spec.b = cfg.get_double("b", spec.b);
  spec.nu = cfg.get_double("nu", spec.nu);
  spec.zeta = cfg.get_double("zeta", spec.zeta);
  spec.ridge = cfg.get_double("ridge", spec.ridge);
  if (cfg.has("fix_phi")) spec.fixed_phi = cfg.get_double("fix_phi", 0.0);
  spec.check();
  return spec;
}

/// A completed fit: everything downstream consumers (relative risks, model
/// criteria, serialization) need.
struct FitResult {
  PriorSpec spec;
  CrossBasis cb;
  ModelMatrices mm;
  PriorStructure ps;
  HyperVector psi_hat;
  GaussianApprox approx;
  Eigen::SparseMatrix<double> q_hat;
  HyperLogPostParts parts;
  FitConvergence conv;
  double phi_hat = 0.0;
  std::vector<std::string> area_ids;

  FamilyParams family_params() const {
    FamilyParams fp;
    fp.family = spec.family;
    fp.phi = phi_hat;
    return fp;
  }
};

/// End-to-end deterministic fit: bases from the spec and observed exposure,
/// design assembly, MAP hyperparameter search, final Laplace refit.
inline FitResult fit(const PanelData& panel, const AdjacencyGraph* graph,
                     const PriorSpec& spec, const FitOptions& options = FitOptions()) {
  spec.check();
  CrossBasis cb = build_cross_basis_for(spec, options.splines, panel.exposure);

  FitContext ctx;
  ctx.mm = build_design(panel, cb, spec.has_theta_j());
  ctx.ps = make_prior_structure(spec, cb, panel.num_areas(), panel.num_covariates(), graph);
  ctx.newton = options.newton;

  Eigen::VectorXd psi0 = Eigen::VectorXd::Zero(ctx.ps.layout.dim());
  for (const auto& [name, value] : options.init_psi) {
    int idx = ctx.ps.layout.index_of(name);
    if (idx < 0) throw std::runtime_error("init_psi: unknown hyperparameter '" + name + "'");
    psi0[idx] = value;
  }

  FitOutcome out = optimize_hyper(ctx, psi0, options.optim);

  FitResult fr;
  fr.spec = spec;
  fr.cb = std::move(cb);
  fr.mm = std::move(ctx.mm);
  fr.ps = std::move(ctx.ps);
  fr.psi_hat = std::move(out.psi_hat);
  fr.approx = std::move(out.approx);
  fr.q_hat = std::move(out.q_hat);
  fr.parts = out.parts;
  fr.conv = out.conv;
  fr.phi_hat = out.phi_hat;
  fr.area_ids = panel.area_ids;
  return fr;
}

}  // namespace svdlnm
