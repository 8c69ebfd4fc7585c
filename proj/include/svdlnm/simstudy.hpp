#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "svdlnm/graph.hpp"
#include "svdlnm/inference.hpp"
#include "svdlnm/rng.hpp"
#include "svdlnm/version.hpp"

namespace svdlnm {

enum class StudyScale { Small, Large };

/// Ground truth of one simulated panel: area-specific polynomial
/// coefficients, lag-decay denominators, random effects and populations.
struct SimTruth {
  Eigen::MatrixXd delta;    // J x 5, delta_pj = 1.5 delta_p (1 + Delta_pj)
  Eigen::VectorXd decay;    // d_j = 4 + r_j
  Eigen::VectorXd u;        // area random effects
  Eigen::VectorXd log_pop;  // offsets
  int setting = 2;
  Family family = Family::Poisson;
  double phi = 5.0;
  double beta0 = -10.5;
  int regenerated_r = 0;  // redraws of r forced by the d_j > 0.1 rule
};

inline const Eigen::VectorXd& sim_baseline_delta() {
  static const Eigen::VectorXd delta = [] {
    Eigen::VectorXd d(5);
    d << 0.211881, 0.1406585, -0.0982663, 0.0153671, -0.0006265;
    return d;
  }();
  return delta;
}

inline double normal_pdf(double x, double mean, double sd) {
  double z = (x - mean) / sd;
  return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * M_PI));
}

/// The exposure-lag weight: exponential decay above the pivot exposure,
/// a scaled normal density in the lag below it.
inline double sim_lag_weight(const SimTruth& truth, int area, double x, int lag) {
  if (x >= 5.0) return std::exp(-static_cast<double>(lag) / truth.decay[area]);
  return 4.0 * normal_pdf(static_cast<double>(lag), 2.0, 2.0);
}

/// f_j * w_j(x, l) = 0.1 sum_p delta_pj (x-5)^(p-1) w_j(x, l).
inline double truth_surface(const SimTruth& truth, int area, double x, int lag) {
  double poly = 0.0, pw = 1.0;
  for (int p = 0; p < 5; ++p) {
    poly += truth.delta(area, p) * pw;
    pw *= (x - 5.0);
  }
  return 0.1 * poly * sim_lag_weight(truth, area, x, lag);
}

inline double true_log_rr(const SimTruth& truth, int area, double x, double x0, int lag) {
  return truth_surface(truth, area, x, lag) - truth_surface(truth, area, x0, lag);
}

inline double true_log_rr_cumulative(const SimTruth& truth, int area, double x,
                                     double x0, int max_lag = 8) {
  double s = 0.0;
  for (int l = 0; l <= max_lag; ++l) s += true_log_rr(truth, area, x, x0, l);
  return s;
}

struct SimSettingParams {
  Eigen::VectorXd sigma2;  // per polynomial order
  double rho;
};

inline SimSettingParams sim_setting_params(int setting) {
  SimSettingParams sp;
  sp.sigma2.resize(5);
  switch (setting) {
    case 1:
      sp.sigma2 << 0.0001, 0.0005, 0.00025, 0.000005, 0.000001;
      sp.rho = 0.95;
      break;
    case 2:
      sp.sigma2 << 0.001, 0.005, 0.0025, 0.00005, 0.00001;
      sp.rho = 0.95;
      break;
    case 3:
      sp.sigma2 << 0.001, 0.005, 0.0025, 0.00005, 0.00001;
      sp.rho = 0.05;
      break;
    default:
      throw std::invalid_argument("simulation setting must be 1, 2 or 3");
  }
  return sp;
}

/// Draws the area-level truth: Leroux fields for the polynomial deviations
/// and the decay shift, Leroux random effects, lognormal populations.
inline SimTruth simulate_truth(int setting, const AdjacencyGraph& graph, StudyScale scale,
                               Family family, std::uint64_t seed,
                               double rho_override = -1.0) {
  SimSettingParams sp = sim_setting_params(setting);
  double rho = rho_override >= 0.0 ? rho_override : sp.rho;
  const int J = graph.num_areas;

  SimTruth truth;
  truth.setting = setting;
  truth.family = family;
  truth.phi = 5.0;
  Rng rng(derive_seed(seed, 101));
  auto spectrum = icar_spectrum(graph);
  auto lp_setting = leroux_precision(graph, rho, &spectrum);

  truth.delta.resize(J, 5);
  const Eigen::VectorXd& base = sim_baseline_delta();
  for (int p = 0; p < 5; ++p) {
    Eigen::VectorXd dev = leroux_sample(lp_setting, sp.sigma2[p], rng);
    for (int j = 0; j < J; ++j) truth.delta(j, p) = 1.5 * base[p] * (1.0 + dev[j]);
  }

  truth.decay.resize(J);
  for (;;) {
    Eigen::VectorXd r = leroux_sample(lp_setting, 1.0, rng);
    truth.decay = r.array() + 4.0;
    if ((truth.decay.array() > 0.1).all()) break;
    ++truth.regenerated_r;
  }

  auto lp_u = leroux_precision(graph, 0.90, &spectrum);
  truth.u = leroux_sample(lp_u, 0.05, rng);

  truth.log_pop.resize(J);
  const double log_mean = scale == StudyScale::Small ? std::log(12000.0) : std::log(6000000.0);
  const double log_sd = scale == StudyScale::Small ? 1.8 : 0.9;
  for (int j = 0; j < J; ++j) truth.log_pop[j] = log_mean + log_sd * rng.normal();
  return truth;
}

/// Per-area AR(1) exposure series (coefficient 0.8), min-max standardized to
/// [0, 10] area by area. Returns a T x J matrix.
inline Eigen::MatrixXd exposure_generator(int T, int J, std::uint64_t seed) {
  Eigen::MatrixXd x(T, J);
  Rng rng(derive_seed(seed, 202));
  for (int j = 0; j < J; ++j) {
    double v = rng.normal() / std::sqrt(1.0 - 0.64);  // stationary start
    for (int t = 0; t < T; ++t) {
      x(t, j) = v;
      v = 0.8 * v + rng.normal();
    }
    double lo = x.col(j).minCoeff(), hi = x.col(j).maxCoeff();
    x.col(j) = 10.0 * (x.col(j).array() - lo) / (hi - lo);
  }
  return x;
}

/// Counts from the truth surface: log mu = beta0 + sum_l f_j w_j(x_{t-l}, l)
/// + u_j + log pop_j. Rows with t <= L use the available partial lag window;
/// they are excluded from every likelihood downstream.
inline PanelData simulate_panel(const SimTruth& truth, const Eigen::MatrixXd& exposures,
                                int max_lag, std::uint64_t seed) {
  const int T = static_cast<int>(exposures.rows());
  const int J = static_cast<int>(exposures.cols());
  Rng rng(derive_seed(seed, 303));
  PanelData p;
  const Eigen::Index n = static_cast<Eigen::Index>(T) * J;
  p.row_area.resize(n);
  p.row_time.resize(n);
  p.y.resize(n);
  p.exposure.resize(n);
  p.offset.resize(n);
  p.covariates.resize(n, 0);
  Eigen::Index r = 0;
  for (int j = 0; j < J; ++j) {
    p.area_ids.push_back("area" + std::to_string(j));
    for (int t = 0; t < T; ++t, ++r) {
      p.row_area[r] = j;
      p.row_time[r] = t + 1;
      p.exposure[r] = exposures(t, j);
      p.offset[r] = truth.log_pop[j];
      double lag_sum = 0.0;
      for (int l = 0; l <= std::min(max_lag, t); ++l)
        lag_sum += truth_surface(truth, j, exposures(t - l, j), l);
      double eta = truth.beta0 + lag_sum + truth.u[j] + truth.log_pop[j];
      if (eta > kLinearPredictorCap)
        throw std::runtime_error("simulated mean overflows the linear predictor cap");
      double mu = std::exp(eta);
      p.y[r] = truth.family == Family::Poisson
                   ? static_cast<double>(rng.poisson(mu))
                   : static_cast<double>(rng.neg_binomial(mu, truth.phi));
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

/// The paper's evaluation grid: x = 0, 0.25, ..., 10 against x0 = 5,
/// lags 0..8.
struct MetricGrid {
  Eigen::VectorXd xs = Eigen::VectorXd::LinSpaced(41, 0.0, 10.0);
  double x0 = 5.0;
  int max_lag = 8;
  int num_lags() const { return max_lag + 1; }
};

/// One run's estimates over the grid. Lag-specific rows are indexed
/// (area * |xs| + ix), columns by lag; overall matrices are J x |xs|.
/// All values are on the log-RR scale.
struct RRGridEval {
  Eigen::MatrixXd lag_mean, lag_lo, lag_hi;
  Eigen::MatrixXd ov_mean, ov_lo, ov_hi;
};

struct TruthGridEval {
  Eigen::MatrixXd lag;  // (J*|xs|) x (L+1)
  Eigen::MatrixXd ov;   // J x |xs|
};

inline TruthGridEval evaluate_truth_grid(const SimTruth& truth, int J,
                                         const MetricGrid& grid) {
  TruthGridEval tg;
  const int nx = static_cast<int>(grid.xs.size());
  tg.lag.resize(J * nx, grid.num_lags());
  tg.ov.resize(J, nx);
  for (int j = 0; j < J; ++j)
    for (int ix = 0; ix < nx; ++ix) {
      double cum = 0.0;
      for (int l = 0; l <= grid.max_lag; ++l) {
        double v = true_log_rr(truth, j, grid.xs[ix], grid.x0, l);
        tg.lag(j * nx + ix, l) = v;
        cum += v;
      }
      tg.ov(j, ix) = cum;
    }
  return tg;
}

/// Covariance of theta + theta_j per area (p x p), extracted from the fit
/// factorization with (J + 1) * p solves; the per-cell contrast variances
/// are then cheap quadratic forms.
inline std::vector<Eigen::MatrixXd> area_curve_covariances(const FitResult& fit) {
  const int p = fit.mm.p, J = fit.mm.J;
  const Eigen::Index n = fit.approx.dim();
  const auto& bm = fit.mm.blocks;
  Eigen::MatrixXd sigma_theta(n, p);  // Sigma columns of the theta block
  for (int i = 0; i < p; ++i)
    sigma_theta.col(i) = fit.approx.cov_solve(Eigen::VectorXd::Unit(n, bm.theta_start + i));
  std::vector<Eigen::MatrixXd> out(J);
  if (!fit.mm.has_theta_j) {
    Eigen::MatrixXd s = sigma_theta.middleRows(bm.theta_start, p);
    for (int j = 0; j < J; ++j) out[j] = s;
    return out;
  }
  for (int j = 0; j < J; ++j) {
    const int tj = bm.theta_j_start + j * p;
    Eigen::MatrixXd sigma_tj(n, p);
    for (int i = 0; i < p; ++i)
      sigma_tj.col(i) = fit.approx.cov_solve(Eigen::VectorXd::Unit(n, tj + i));
    // (e_theta + e_thetaj)' Sigma (e_theta + e_thetaj)
    out[j] = sigma_theta.middleRows(bm.theta_start, p) +
             sigma_theta.middleRows(tj, p) + sigma_tj.middleRows(bm.theta_start, p) +
             sigma_tj.middleRows(tj, p);
  }
  return out;
}

/// Evaluates the full estimate grid for one fit.
inline RRGridEval evaluate_rr_grid(const FitResult& fit, const MetricGrid& grid) {
  const int J = fit.mm.J, p = fit.mm.p;
  const int nx = static_cast<int>(grid.xs.size());
  const auto& bm = fit.mm.blocks;
  RRGridEval ev;
  ev.lag_mean.resize(J * nx, grid.num_lags());
  ev.lag_lo.resize(J * nx, grid.num_lags());
  ev.lag_hi.resize(J * nx, grid.num_lags());
  ev.ov_mean.resize(J, nx);
  ev.ov_lo.resize(J, nx);
  ev.ov_hi.resize(J, nx);

  std::vector<Eigen::MatrixXd> curve_cov = area_curve_covariances(fit);
  Eigen::MatrixXd coef(p, J);  // theta + theta_j per area
  for (int j = 0; j < J; ++j) {
    coef.col(j) = fit.approx.mode.segment(bm.theta_start, p);
    if (fit.mm.has_theta_j)
      coef.col(j) += fit.approx.mode.segment(bm.theta_j_start + j * p, p);
  }

  for (int ix = 0; ix < nx; ++ix) {
    const double x = grid.xs[ix];
    for (int l = 0; l <= grid.max_lag; ++l) {
      Eigen::VectorXd c = rr_contrast(fit.cb, x, grid.x0, l);
      for (int j = 0; j < J; ++j) {
        double mean = c.dot(coef.col(j));
        double sd = std::sqrt(std::max(0.0, c.dot(curve_cov[j] * c)));
        ev.lag_mean(j * nx + ix, l) = mean;
        ev.lag_lo(j * nx + ix, l) = mean - 1.96 * sd;
        ev.lag_hi(j * nx + ix, l) = mean + 1.96 * sd;
      }
    }
    Eigen::VectorXd c = rr_cumulative_contrast(fit.cb, x, grid.x0);
    for (int j = 0; j < J; ++j) {
      double mean = c.dot(coef.col(j));
      double sd = std::sqrt(std::max(0.0, c.dot(curve_cov[j] * c)));
      ev.ov_mean(j, ix) = mean;
      ev.ov_lo(j, ix) = mean - 1.96 * sd;
      ev.ov_hi(j, ix) = mean + 1.96 * sd;
    }
  }
  return ev;
}

/// RMSE over a grid: cell-wise mean over runs of squared error, averaged
/// over cells, square root.
inline double rmse_metric(const std::vector<const Eigen::MatrixXd*>& est_runs,
                          const std::vector<const Eigen::MatrixXd*>& truth_runs) {
  if (est_runs.empty()) return 0.0;
  Eigen::MatrixXd cell_mean = Eigen::MatrixXd::Zero(est_runs[0]->rows(), est_runs[0]->cols());
  for (size_t s = 0; s < est_runs.size(); ++s)
    cell_mean += (*est_runs[s] - *truth_runs[s]).array().square().matrix();
  cell_mean /= static_cast<double>(est_runs.size());
  return std::sqrt(cell_mean.mean());
}

/// Share of (cell, run) pairs whose interval covers the truth.
inline double coverage_metric(const std::vector<const Eigen::MatrixXd*>& lo_runs,
                              const std::vector<const Eigen::MatrixXd*>& hi_runs,
                              const std::vector<const Eigen::MatrixXd*>& truth_runs) {
  if (lo_runs.empty()) return 0.0;
  double covered = 0.0, total = 0.0;
  for (size_t s = 0; s < lo_runs.size(); ++s) {
    covered += ((truth_runs[s]->array() >= lo_runs[s]->array()) &&
                (truth_runs[s]->array() <= hi_runs[s]->array()))
                   .cast<double>()
                   .sum();
    total += static_cast<double>(truth_runs[s]->size());
  }
  return covered / total;
}

/// Mann-Whitney AUC with midrank tie correction.
inline double auc_mann_whitney(const Eigen::VectorXd& scores,
                               const std::vector<char>& positive) {
  const int n = static_cast<int>(scores.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](int a, int b) { return scores[a] < scores[b]; });
  Eigen::VectorXd rank(n);
  int i = 0;
  while (i < n) {
    int k = i;
    while (k + 1 < n && scores[order[k + 1]] == scores[order[i]]) ++k;
    double mid = 0.5 * (i + k) + 1.0;  // 1-based midrank
    for (int t = i; t <= k; ++t) rank[order[t]] = mid;
    i = k + 1;
  }
  double r_pos = 0.0;
  int n_pos = 0;
  for (int j = 0; j < n; ++j)
    if (positive[j]) {
      r_pos += rank[j];
      ++n_pos;
    }
  int n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return 0.5;
  return (r_pos - 0.5 * n_pos * (n_pos + 1.0)) / (static_cast<double>(n_pos) * n_neg);
}

/// Per exposure level, label the true top ceil(f J) areas positive (ties by
/// area index) and score by the estimated values; average the AUC over the
/// grid. Constant estimates at a level give exactly 0.5 there.
inline double auc_metric(const Eigen::MatrixXd& est_overall,
                         const Eigen::MatrixXd& true_overall, double top_fraction) {
  const int J = static_cast<int>(est_overall.rows());
  const int nx = static_cast<int>(est_overall.cols());
  const int m = static_cast<int>(std::ceil(top_fraction * J));
  double total = 0.0;
  std::vector<int> order(J);
  for (int ix = 0; ix < nx; ++ix) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return true_overall(a, ix) > true_overall(b, ix);
    });
    std::vector<char> positive(J, 0);
    for (int k = 0; k < m; ++k) positive[order[k]] = 1;
    total += auc_mann_whitney(est_overall.col(ix), positive);
  }
  return total / nx;
}

// ---------------------------------------------------------------------------
// Study orchestration
// ---------------------------------------------------------------------------

struct SimMetrics {
  double rmse_lag = 0.0;
  double rmse_overall = 0.0;
  double coverage_lag = 0.0;
  double coverage_overall = 0.0;
  double auc_top10 = 0.0;
  double auc_top25 = 0.0;
  double wall_time = 0.0;  // mean seconds per fit
};

struct StudyConfig {
  int setting = 2;
  std::vector<PriorType> priors = {PriorType::Common, PriorType::TypeII, PriorType::TypeIV};
  Family family = Family::Poisson;
  int runs = 25;
  int T = 400;
  int grid_rows = 6;
  int grid_cols = 6;
  StudyScale scale = StudyScale::Large;
  std::uint64_t master_seed = 1;
  int workers = 1;
  bool compute_criteria = false;
  int criteria_runs = -1;  // criteria for the first N runs only; -1 = all
  int criteria_draws = 1000;
  std::string out_dir;  // empty: keep everything in memory only
  FitOptions fit_options;
};

struct RunCriteria {
  double dic = 0.0, waic = 0.0, cpo = 0.0;
};

struct RunOutcome {
  int run_index = -1;
  bool ok = false;
  std::string error;
  std::uint64_t seed = 0;
  TruthGridEval truth;
  std::vector<RRGridEval> per_prior;     // aligned with config.priors
  std::vector<RunCriteria> criteria;     // if requested
  std::vector<double> fit_seconds;
};

struct StudyResult {
  StudyConfig config;
  std::vector<SimMetrics> metrics;  // per prior
  std::vector<RunOutcome> runs;     // sorted by run index, failed ones flagged
  int failed_runs = 0;
};

inline std::uint64_t run_seed(const StudyConfig& cfg, int run_index) {
  return derive_seed(cfg.master_seed, static_cast<std::uint64_t>(run_index),
                     static_cast<std::uint64_t>(cfg.setting));
}

namespace detail {

inline RunOutcome execute_run(const StudyConfig& cfg, const AdjacencyGraph& graph,
                              int run_index) {
  RunOutcome out;
  out.run_index = run_index;
  out.seed = run_seed(cfg, run_index);
  try {
    const int J = graph.num_areas;
    SimTruth truth = simulate_truth(cfg.setting, graph, cfg.scale, cfg.family, out.seed);
    Eigen::MatrixXd exposures = exposure_generator(cfg.T, J, derive_seed(out.seed, 1));
    PanelData panel = simulate_panel(truth, exposures, cfg.fit_options.splines.max_lag,
                                     derive_seed(out.seed, 2));
    MetricGrid grid;
    grid.max_lag = cfg.fit_options.splines.max_lag;
    out.truth = evaluate_truth_grid(truth, J, grid);

    for (size_t pi = 0; pi < cfg.priors.size(); ++pi) {
      PriorSpec spec = PriorSpec::make(cfg.priors[pi], cfg.family);
      auto t0 = std::chrono::steady_clock::now();
      FitResult fr = fit(panel, spec.needs_graph() ? &graph : nullptr, spec,
                         cfg.fit_options);
      auto t1 = std::chrono::steady_clock::now();
      out.fit_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
      out.per_prior.push_back(evaluate_rr_grid(fr, grid));
      bool want_criteria = cfg.compute_criteria &&
                           (cfg.criteria_runs < 0 || run_index < cfg.criteria_runs);
      if (want_criteria) {
        RunCriteria rc;
        rc.dic = dic(fr).dic;
        auto draws = posterior_draws(fr, cfg.criteria_draws, derive_seed(out.seed, 3));
        auto pair = waic_and_cpo(fr, draws);
        rc.waic = pair.waic.waic;
        rc.cpo = pair.cpo.neg_sum_log;
        out.criteria.push_back(rc);
      }
    }
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
    out.per_prior.clear();
    out.criteria.clear();
  }
  return out;
}

inline void persist_run(const StudyConfig& cfg, const RunOutcome& run,
                        const std::string& header) {
  namespace fs = std::filesystem;
  char name[32];
  std::snprintf(name, sizeof(name), "run_%04d", run.run_index);
  fs::path dir = fs::path(cfg.out_dir) / name;
  fs::create_directories(dir);
  MetricGrid grid;
  grid.max_lag = cfg.fit_options.splines.max_lag;
  const int nx = static_cast<int>(grid.xs.size());
  const int J = static_cast<int>(run.truth.ov.rows());

  {
    std::ofstream f(dir / "truth.csv");
    f << header << "area,x,lag,log_rr_true\n";
    f.precision(17);
    for (int j = 0; j < J; ++j)
      for (int ix = 0; ix < nx; ++ix) {
        for (int l = 0; l <= grid.max_lag; ++l)
          f << j << ',' << grid.xs[ix] << ',' << l << ',' << run.truth.lag(j * nx + ix, l)
            << '\n';
        f << j << ',' << grid.xs[ix] << ",-1," << run.truth.ov(j, ix) << '\n';
      }
  }
  for (size_t pi = 0; pi < run.per_prior.size(); ++pi) {
    const RRGridEval& ev = run.per_prior[pi];
    std::ofstream f(dir / ("rr_" + std::string(to_string(cfg.priors[pi])) + ".csv"));
    f << header << "area,x,lag,log_rr,lo,hi\n";
    f.precision(17);
    for (int j = 0; j < J; ++j)
      for (int ix = 0; ix < nx; ++ix) {
        for (int l = 0; l <= grid.max_lag; ++l)
          f << j << ',' << grid.xs[ix] << ',' << l << ',' << ev.lag_mean(j * nx + ix, l)
            << ',' << ev.lag_lo(j * nx + ix, l) << ',' << ev.lag_hi(j * nx + ix, l) << '\n';
        f << j << ',' << grid.xs[ix] << ",-1," << ev.ov_mean(j, ix) << ','
          << ev.ov_lo(j, ix) << ',' << ev.ov_hi(j, ix) << '\n';
      }
    std::ofstream s(dir / ("fit_" + std::string(to_string(cfg.priors[pi])) + ".txt"));
    s << header;
    s.precision(17);
    s << "prior " << to_string(cfg.priors[pi]) << '\n';
    if (pi < run.criteria.size())
      s << "dic " << run.criteria[pi].dic << "\nwaic " << run.criteria[pi].waic
        << "\ncpo " << run.criteria[pi].cpo << '\n';
  }
}

}  // namespace detail

/// Generate -> fit -> evaluate for every (run, prior); failed runs are
/// recorded and excluded from aggregates. Runs execute on a small worker
/// pool (capped by the SVDLNM_THREADS environment variable) and aggregation
/// is a deterministic reduce over sorted run indices.
inline StudyResult run_study(const StudyConfig& cfg) {
  StudyResult res;
  res.config = cfg;
  AdjacencyGraph graph = grid_graph(cfg.grid_rows, cfg.grid_cols);

  int workers = std::max(1, cfg.workers);
  if (const char* cap = std::getenv("SVDLNM_THREADS"))
    workers = std::min(workers, std::max(1, std::atoi(cap)));
  workers = std::min(workers, std::max(1, cfg.runs));

  res.runs.resize(cfg.runs);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      int idx = next.fetch_add(1);
      if (idx >= cfg.runs) return;
      res.runs[idx] = detail::execute_run(cfg, graph, idx);
    }
  };
  if (workers == 1 || cfg.runs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  // Aggregate over successful runs, in index order.
  const size_t np = cfg.priors.size();
  res.metrics.assign(np, SimMetrics{});
  for (size_t pi = 0; pi < np; ++pi) {
    std::vector<const Eigen::MatrixXd*> lag_est, lag_lo, lag_hi, lag_truth;
    std::vector<const Eigen::MatrixXd*> ov_est, ov_lo, ov_hi, ov_truth;
    double auc10 = 0.0, auc25 = 0.0, seconds = 0.0;
    int ok_runs = 0;
    for (const RunOutcome& run : res.runs) {
      if (!run.ok) continue;
      ++ok_runs;
      const RRGridEval& ev = run.per_prior[pi];
      lag_est.push_back(&ev.lag_mean);
      lag_lo.push_back(&ev.lag_lo);
      lag_hi.push_back(&ev.lag_hi);
      lag_truth.push_back(&run.truth.lag);
      ov_est.push_back(&ev.ov_mean);
      ov_lo.push_back(&ev.ov_lo);
      ov_hi.push_back(&ev.ov_hi);
      ov_truth.push_back(&run.truth.ov);
      auc10 += auc_metric(ev.ov_mean, run.truth.ov, 0.10);
      auc25 += auc_metric(ev.ov_mean, run.truth.ov, 0.25);
      seconds += run.fit_seconds[pi];
    }
    SimMetrics& m = res.metrics[pi];
    if (ok_runs > 0) {
      m.rmse_lag = rmse_metric(lag_est, lag_truth);
      m.rmse_overall = rmse_metric(ov_est, ov_truth);
      m.coverage_lag = coverage_metric(lag_lo, lag_hi, lag_truth);
      m.coverage_overall = coverage_metric(ov_lo, ov_hi, ov_truth);
      m.auc_top10 = auc10 / ok_runs;
      m.auc_top25 = auc25 / ok_runs;
      m.wall_time = seconds / ok_runs;
    }
  }
  for (const RunOutcome& run : res.runs)
    if (!run.ok) ++res.failed_runs;

  if (!cfg.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    std::ostringstream hdr;
    hdr << "# svdlnm " << kVersion << " study setting=" << cfg.setting
        << " master_seed=" << cfg.master_seed << '\n';
    const std::string header = hdr.str();

    // Wall times go to a separate file so every other output is
    // byte-reproducible for a given seed.
    std::ofstream mf(fs::path(cfg.out_dir) / "metrics.csv");
    mf << header
       << "prior,setting,family,scale,runs_ok,rmse_lag,rmse_overall,coverage_lag,"
          "coverage_overall,auc_top10,auc_top25\n";
    mf.precision(17);
    for (size_t pi = 0; pi < np; ++pi) {
      const SimMetrics& m = res.metrics[pi];
      mf << to_string(cfg.priors[pi]) << ',' << cfg.setting << ','
         << to_string(cfg.family) << ','
         << (cfg.scale == StudyScale::Small ? "small" : "large") << ','
         << (cfg.runs - res.failed_runs) << ',' << m.rmse_lag << ',' << m.rmse_overall
         << ',' << m.coverage_lag << ',' << m.coverage_overall << ',' << m.auc_top10
         << ',' << m.auc_top25 << '\n';
    }
    std::ofstream tf(fs::path(cfg.out_dir) / "timings.txt");
    tf << header << "# wall-clock seconds per fit; not reproducible across machines\n";
    for (size_t pi = 0; pi < np; ++pi)
      tf << to_string(cfg.priors[pi]) << ' ' << res.metrics[pi].wall_time << '\n';

    std::ofstream mani(fs::path(cfg.out_dir) / "manifest.txt");
    mani << header;
    mani << "runs " << cfg.runs << "\nfailed " << res.failed_runs << '\n';
    for (const RunOutcome& run : res.runs) {
      mani << "run " << run.run_index << " seed " << run.seed << ' '
           << (run.ok ? "ok" : ("failed: " + run.error)) << '\n';
      if (run.ok) detail::persist_run(cfg, run, header);
    }
  }
  return res;
}

}  // namespace svdlnm
