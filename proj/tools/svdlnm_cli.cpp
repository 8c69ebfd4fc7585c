// svdlnm: fit spatially-varying distributed lag non-linear models to count
// panels, evaluate relative risks and model criteria, and run the built-in
// simulation study.

#include <CLI11.hpp>
#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "svdlnm/config.hpp"
#include "svdlnm/fit_io.hpp"
#include "svdlnm/hyperopt.hpp"
#include "svdlnm/inference.hpp"
#include "svdlnm/simstudy.hpp"
#include "svdlnm/version.hpp"

namespace fs = std::filesystem;
using namespace svdlnm;

namespace {

std::string comment_header(const Config& cfg, const std::string& seeds = "") {
  std::ostringstream os;
  os << "# svdlnm " << kVersion << " config_hash=" << cfg.hash();
  os << " seeds=" << (seeds.empty() ? "none" : seeds) << '\n';
  return os.str();
}

/// CLI overrides must agree with explicit config-file entries.
void set_override(Config& cfg, const std::string& key, const std::string& value) {
  if (value.empty()) return;
  if (cfg.has(key) && cfg.get_string(key, "") != value)
    throw std::runtime_error("conflicting values for '" + key + "': config says '" +
                             cfg.get_string(key, "") + "', command line says '" + value + "'");
  cfg.set(key, value);
}

std::optional<AdjacencyLoadResult> load_graph_file(const std::string& path) {
  if (path.empty()) return std::nullopt;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open adjacency file: " + path);
  auto res = load_adjacency(in);
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
  return res;
}

/// Aligns graph node order with panel area order (ids must match).
AdjacencyGraph align_graph(const AdjacencyLoadResult& loaded, const PanelData& panel) {
  std::unordered_map<std::string, int> panel_index;
  for (size_t i = 0; i < panel.area_ids.size(); ++i)
    panel_index[panel.area_ids[i]] = static_cast<int>(i);
  std::vector<int> remap(loaded.ids.size(), -1);
  for (size_t g = 0; g < loaded.ids.size(); ++g) {
    auto it = panel_index.find(loaded.ids[g]);
    if (it == panel_index.end())
      throw std::runtime_error("adjacency id '" + loaded.ids[g] + "' not present in panel");
    remap[g] = it->second;
  }
  for (const auto& id : panel.area_ids)
    if (!std::count(loaded.ids.begin(), loaded.ids.end(), id))
      throw std::runtime_error("panel area '" + id + "' missing from adjacency file");
  AdjacencyGraph g;
  g.num_areas = panel.num_areas();
  for (auto& [a, b] : loaded.graph.edges) {
    auto e = std::minmax(remap[a], remap[b]);
    g.edges.emplace_back(e.first, e.second);
  }
  return g;
}

int cmd_fit(const std::string& panel_path, const std::string& adjacency_path,
            const std::string& config_path, const std::string& out_dir,
            const std::string& prior_flag, const std::string& family_flag) {
  Config cfg = config_path.empty() ? Config() : Config::parse_file(config_path);
  set_override(cfg, "prior", prior_flag);
  set_override(cfg, "family", family_flag);
  PriorSpec spec = prior_spec_from_config(cfg);
  FitOptions options = fit_options_from_config(cfg);

  PanelData panel = read_panel_csv_file(panel_path);
  std::optional<AdjacencyLoadResult> loaded = load_graph_file(adjacency_path);
  std::optional<AdjacencyGraph> graph;
  if (loaded) graph = align_graph(*loaded, panel);
  if (spec.needs_graph() && !graph)
    throw std::runtime_error(std::string(to_string(spec.type)) +
                             " prior requires --adjacency");

  FitResult fr = fit(panel, graph ? &*graph : nullptr, spec, options);
  DicResult d = dic(fr);

  fs::create_directories(out_dir);
  nlohmann::json summary;
  summary["meta"] = {{"tool", "svdlnm"}, {"version", kVersion},
                     {"config_hash", cfg.hash()}, {"seeds", "none"}};
  summary["prior"] = to_string(spec.type);
  summary["family"] = to_string(spec.family);
  nlohmann::json hypers;
  for (int i = 0; i < fr.ps.layout.dim(); ++i) {
    const auto& e = fr.ps.layout.entries[i];
    double psi = fr.psi_hat.psi[i];
    // back-transformed value under its natural name
    std::string name = e.name.substr(e.name.find('_') + 1);
    hypers[name] = e.role == HyperRole::LogitRho ? 1.0 / (1.0 + std::exp(-psi))
                                                 : std::exp(psi);
    hypers[e.name] = psi;
  }
  summary["hyperparameters"] = hypers;
  if (spec.family == Family::NegBinomial) summary["phi"] = fr.phi_hat;
  summary["loglik_at_mode"] = fr.approx.loglik_at_mode;
  summary["log_posterior"] = fr.parts.total;
  summary["p_d"] = d.p_d;
  summary["dic"] = d.dic;
  summary["n_xi"] = fr.mm.blocks.total;
  summary["converged"] = fr.conv.converged;
  summary["objective_evaluations"] = fr.conv.evaluations;
  write_json_file((fs::path(out_dir) / "fit.json").string(), summary);
  write_json_file((fs::path(out_dir) / "fit_state.json").string(),
                  fit_state_to_json(fr, cfg));
  std::cout << "fit " << to_string(spec.type) << '/' << to_string(spec.family)
            << (fr.conv.converged ? " converged" : " NOT converged (best effort)")
            << " after " << fr.conv.evaluations << " objective evaluations\n";
  return fr.conv.converged ? 0 : 2;
}

Eigen::VectorXd parse_grid(const std::string& spec) {
  double lo = 0.0, hi = 10.0, step = 0.25;
  if (!spec.empty()) {
    std::string s = spec;
    std::replace(s.begin(), s.end(), ':', ' ');
    std::istringstream is(s);
    if (!(is >> lo >> hi >> step) || step <= 0 || hi < lo)
      throw std::runtime_error("bad --grid; expected lo:hi:step");
  }
  int n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
  Eigen::VectorXd xs(n);
  for (int i = 0; i < n; ++i) xs[i] = lo + i * step;
  return xs;
}

void write_svg_curves(const std::string& path, const std::string& title,
                      const Eigen::VectorXd& xs, const Eigen::VectorXd& rr,
                      const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  const int w = 640, h = 400, ml = 60, mb = 40, mt = 30, mr = 20;
  double ymin = std::min(0.0, std::log(lo.minCoeff()));
  double ymax = std::max(0.0, std::log(hi.maxCoeff()));
  if (ymax - ymin < 1e-12) {
    ymax += 0.5;
    ymin -= 0.5;
  }
  auto px = [&](double x) {
    return ml + (x - xs[0]) / (xs[xs.size() - 1] - xs[0]) * (w - ml - mr);
  };
  auto py = [&](double v) { return h - mb - (v - ymin) / (ymax - ymin) * (h - mb - mt); };
  std::ofstream f(path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  f << "<rect width='100%' height='100%' fill='white'/>\n";
  f << "<text x='" << w / 2 << "' y='18' text-anchor='middle' font-size='14'>" << title
    << "</text>\n";
  f << "<polygon fill='#9ecae1' fill-opacity='0.5' points='";
  for (int i = 0; i < xs.size(); ++i) f << px(xs[i]) << ',' << py(std::log(lo[i])) << ' ';
  for (int i = static_cast<int>(xs.size()) - 1; i >= 0; --i)
    f << px(xs[i]) << ',' << py(std::log(hi[i])) << ' ';
  f << "'/>\n<polyline fill='none' stroke='#08519c' stroke-width='2' points='";
  for (int i = 0; i < xs.size(); ++i) f << px(xs[i]) << ',' << py(std::log(rr[i])) << ' ';
  f << "'/>\n<line x1='" << ml << "' y1='" << py(0.0) << "' x2='" << w - mr << "' y2='"
    << py(0.0) << "' stroke='#888' stroke-dasharray='4'/>\n";
  f << "<text x='" << w / 2 << "' y='" << h - 8 << "' text-anchor='middle' font-size='12'>"
    << "exposure</text>\n";
  f << "<text x='14' y='" << h / 2 << "' font-size='12' transform='rotate(-90 14 " << h / 2
    << ")'>RR (log scale)</text>\n</svg>\n";
}

void write_svg_choropleth(const std::string& path, const std::vector<std::string>& ids,
                          const std::vector<double>& cx, const std::vector<double>& cy,
                          const Eigen::VectorXd& values) {
  const int w = 640, h = 520;
  double xmin = *std::min_element(cx.begin(), cx.end());
  double xmax = *std::max_element(cx.begin(), cx.end());
  double ymin = *std::min_element(cy.begin(), cy.end());
  double ymax = *std::max_element(cy.begin(), cy.end());
  double vmin = values.minCoeff(), vmax = values.maxCoeff();
  if (vmax - vmin < 1e-12) vmax = vmin + 1.0;
  std::ofstream f(path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  f << "<rect width='100%' height='100%' fill='white'/>\n";
  for (size_t i = 0; i < ids.size(); ++i) {
    double fx = 40 + (cx[i] - xmin) / std::max(1e-12, xmax - xmin) * (w - 80);
    double fy = h - 60 - (cy[i] - ymin) / std::max(1e-12, ymax - ymin) * (h - 120);
    double t = (values[i] - vmin) / (vmax - vmin);
    int red = static_cast<int>(255 * t), blue = static_cast<int>(255 * (1 - t));
    f << "<circle cx='" << fx << "' cy='" << fy << "' r='12' fill='rgb(" << red << ",60,"
      << blue << ")'><title>" << ids[i] << ": " << values[i] << "</title></circle>\n";
  }
  f << "<text x='" << w / 2 << "' y='" << h - 16
    << "' text-anchor='middle' font-size='12'>overall cumulative RR (blue low, red high)"
    << "</text>\n</svg>\n";
}

int cmd_rr(const std::string& fit_path, const std::string& grid_spec, double x0,
           const std::string& areas_flag, const std::string& out_path,
           const std::string& plot_dir, const std::string& centroid_path) {
  LoadedFit lf = fit_state_from_json(read_json_file(fit_path));
  const FitResult& fr = lf.fit;
  Eigen::VectorXd xs = parse_grid(grid_spec);
  const auto& eb = fr.cb.exposure_basis;
  if (x0 < eb.lo || x0 > eb.hi)
    throw std::runtime_error("reference exposure x0 outside the basis boundary");

  std::vector<int> areas;
  if (areas_flag.empty() || areas_flag == "all") {
    for (int j = 0; j < fr.mm.J; ++j) areas.push_back(j);
  } else {
    std::istringstream is(areas_flag);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      auto it = std::find(fr.area_ids.begin(), fr.area_ids.end(), tok);
      if (it == fr.area_ids.end()) throw std::runtime_error("unknown area id: " + tok);
      areas.push_back(static_cast<int>(it - fr.area_ids.begin()));
    }
  }

  Config hash_cfg;
  hash_cfg.set("fit", fit_path);
  hash_cfg.set("x0", std::to_string(x0));
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << comment_header(hash_cfg);
  out << "area_id,x,x0,lag,rr,ci_low,ci_high\n";
  out.precision(17);
  for (int j : areas) {
    for (int ix = 0; ix < xs.size(); ++ix) {
      double xv = std::clamp(xs[ix], eb.lo, eb.hi);
      for (int l = 0; l <= fr.cb.max_lag + 1; ++l) {
        bool cumulative = (l == fr.cb.max_lag + 1);
        RREstimate est =
            cumulative ? rr_estimate(fr, j, xv, x0) : rr_estimate(fr, j, xv, x0, l);
        out << fr.area_ids[j] << ',' << xs[ix] << ',' << x0 << ',' << (cumulative ? -1 : l)
            << ',' << est.rr << ',' << est.ci_low << ',' << est.ci_high << '\n';
      }
    }
  }
  out.close();

  if (!plot_dir.empty()) {
    fs::create_directories(plot_dir);
    Eigen::VectorXd rr(xs.size()), lo(xs.size()), hi(xs.size());
    for (int j : areas) {
      for (int ix = 0; ix < xs.size(); ++ix) {
        double xv = std::clamp(xs[ix], eb.lo, eb.hi);
        RREstimate est = rr_estimate(fr, j, xv, x0);
        rr[ix] = est.rr;
        lo[ix] = est.ci_low;
        hi[ix] = est.ci_high;
      }
      write_svg_curves((fs::path(plot_dir) / ("rr_" + fr.area_ids[j] + ".svg")).string(),
                       "overall cumulative RR, area " + fr.area_ids[j], xs, rr, lo, hi);
    }
    if (!centroid_path.empty()) {
      std::ifstream cf(centroid_path);
      if (!cf) throw std::runtime_error("cannot open centroid file: " + centroid_path);
      std::unordered_map<std::string, std::pair<double, double>> pts;
      std::string line;
      while (std::getline(cf, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        std::string id;
        double px, py;
        if (ls >> id >> px >> py) pts[id] = {px, py};
      }
      std::vector<std::string> ids;
      std::vector<double> cxs, cys;
      Eigen::VectorXd vals(static_cast<Eigen::Index>(areas.size()));
      Eigen::Index k = 0;
      for (int j : areas) {
        auto it = pts.find(fr.area_ids[j]);
        if (it == pts.end())
          throw std::runtime_error("centroid missing for area " + fr.area_ids[j]);
        ids.push_back(fr.area_ids[j]);
        cxs.push_back(it->second.first);
        cys.push_back(it->second.second);
        vals[k++] = rr_estimate(fr, j, eb.hi, x0).rr;
      }
      write_svg_choropleth((fs::path(plot_dir) / "rr_map.svg").string(), ids, cxs, cys, vals);
    }
  }
  std::cout << "wrote " << out_path << " (" << areas.size() * xs.size() * (fr.cb.max_lag + 2)
            << " rows)\n";
  return 0;
}

int cmd_compare(const std::string& panel_path, const std::vector<std::string>& fit_paths,
                const std::string& out_path, std::uint64_t seed, int draws_n) {
  PanelData panel = read_panel_csv_file(panel_path);
  struct Row {
    std::string name;
    double dic, waic, cpo;
  };
  std::vector<Row> rows;
  for (const auto& path : fit_paths) {
    LoadedFit lf = fit_state_from_json(read_json_file(path));
    FitResult& fr = lf.fit;
    // Rebuild the data-side matrices deterministically from the panel.
    ModelMatrices mm = build_design(panel, fr.cb, fr.mm.has_theta_j);
    if (mm.blocks.total != fr.mm.blocks.total)
      throw std::runtime_error("fit artifact '" + path + "' does not match the panel shape");
    fr.mm = std::move(mm);
    Row row;
    row.name = fs::path(path).parent_path().filename().string();
    if (row.name.empty()) row.name = path;
    row.dic = dic(fr).dic;
    PosteriorDraws pd = posterior_draws(fr, draws_n, seed);  // shared seed across models
    row.waic = waic(fr, pd).waic;
    row.cpo = cpo(fr, pd).neg_sum_log;
    rows.push_back(row);
  }
  double min_dic = rows[0].dic, min_waic = rows[0].waic, min_cpo = rows[0].cpo;
  for (const auto& r : rows) {
    min_dic = std::min(min_dic, r.dic);
    min_waic = std::min(min_waic, r.waic);
    min_cpo = std::min(min_cpo, r.cpo);
  }
  Config hash_cfg;
  hash_cfg.set("panel", panel_path);
  for (size_t i = 0; i < fit_paths.size(); ++i)
    hash_cfg.set("fit" + std::to_string(i), fit_paths[i]);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << comment_header(hash_cfg, std::to_string(seed));
  out << "model,dic,waic,cpo,delta_dic,delta_waic,delta_cpo\n";
  out.precision(17);
  for (const auto& r : rows)
    out << r.name << ',' << r.dic << ',' << r.waic << ',' << r.cpo << ',' << r.dic - min_dic
        << ',' << r.waic - min_waic << ',' << r.cpo - min_cpo << '\n';
  std::cout << "wrote " << out_path << " (" << rows.size() << " models)\n";
  return 0;
}

int cmd_simulate(const std::string& out_dir, int runs, int setting, const std::string& scale,
                 const std::string& priors_flag, int workers, std::uint64_t master_seed,
                 int T, int grid_rows, int grid_cols, const std::string& family,
                 bool criteria, const std::string& config_path) {
  StudyConfig cfg;
  if (!config_path.empty()) {
    Config file_cfg = Config::parse_file(config_path);
    cfg.fit_options = fit_options_from_config(file_cfg);
    cfg.criteria_draws = static_cast<int>(file_cfg.get_long("criteria_draws", 1000));
  }
  cfg.setting = setting;
  cfg.runs = runs;
  cfg.T = T;
  cfg.grid_rows = grid_rows;
  cfg.grid_cols = grid_cols;
  cfg.master_seed = master_seed;
  cfg.workers = workers;
  cfg.compute_criteria = criteria;
  cfg.out_dir = out_dir;
  if (scale == "small") cfg.scale = StudyScale::Small;
  else if (scale == "large") cfg.scale = StudyScale::Large;
  else throw std::runtime_error("scale must be small or large");
  if (family == "poisson") cfg.family = Family::Poisson;
  else if (family == "negbin" || family == "nb") cfg.family = Family::NegBinomial;
  else throw std::runtime_error("family must be poisson or negbin");
  (void)sim_setting_params(setting);  // validate early

  cfg.priors.clear();
  std::istringstream is(priors_flag);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    if (tok == "common") cfg.priors.push_back(PriorType::Common);
    else if (tok == "typeI" || tok == "type1") cfg.priors.push_back(PriorType::TypeI);
    else if (tok == "typeII" || tok == "type2") cfg.priors.push_back(PriorType::TypeII);
    else if (tok == "typeIII" || tok == "type3") cfg.priors.push_back(PriorType::TypeIII);
    else if (tok == "typeIV" || tok == "type4") cfg.priors.push_back(PriorType::TypeIV);
    else throw std::runtime_error("unknown prior in --priors: " + tok);
  }
  if (cfg.priors.empty()) throw std::runtime_error("--priors must name at least one prior");

  StudyResult res = run_study(cfg);
  for (size_t pi = 0; pi < cfg.priors.size(); ++pi) {
    const SimMetrics& m = res.metrics[pi];
    std::cout << to_string(cfg.priors[pi]) << ": rmse_ov " << m.rmse_overall << " cov_ov "
              << m.coverage_overall << " auc25 " << m.auc_top25 << " (" << m.wall_time
              << " s/fit)\n";
  }
  if (res.failed_runs > 0)
    std::cerr << "warning: " << res.failed_runs << " run(s) failed; see manifest.txt\n";
  return 0;
}

int cmd_timetrend(const std::string& panel_path, int df_per_year,
                  const std::string& out_path) {
  if (df_per_year < 2) throw std::runtime_error("--df-per-year must be at least 2");
  PanelData panel = read_panel_csv_file(panel_path);
  long t_min = panel.row_time[0], t_max = panel.row_time[0];
  for (long t : panel.row_time) {
    t_min = std::min(t_min, t);
    t_max = std::max(t_max, t);
  }
  long span = t_max - t_min + 1;
  int years = std::max(1, static_cast<int>(std::lround(span / 365.0)));
  int df = df_per_year * years;

  Eigen::VectorXd interior(df - 1);
  for (int i = 0; i < df - 1; ++i)
    interior[i] = t_min + static_cast<double>(span) * (i + 1) / df;
  auto basis =
      make_natural_basis(interior, static_cast<double>(t_min), static_cast<double>(t_max));

  // Day-of-week indicators, reference = weekday of the first row present.
  const long ref_dow = ((panel.row_time[0] % 7) + 7) % 7;
  std::vector<long> dows;
  for (long t : panel.row_time) {
    long d = ((t % 7) + 7) % 7;
    if (d != ref_dow && !std::count(dows.begin(), dows.end(), d)) dows.push_back(d);
  }
  std::sort(dows.begin(), dows.end());

  PanelData augmented = panel;
  const Eigen::Index n = panel.num_rows();
  const int old_h = panel.num_covariates();
  augmented.covariates.resize(n, old_h + df + static_cast<int>(dows.size()));
  augmented.covariates.leftCols(old_h) = panel.covariates;
  for (int c = 0; c < df; ++c)
    augmented.covariate_names.push_back("cov_trend_" + std::to_string(c + 1));
  for (long d : dows) augmented.covariate_names.push_back("cov_dow_" + std::to_string(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::RowVectorXd row = basis.eval(static_cast<double>(panel.row_time[i]));
    augmented.covariates.block(i, old_h, 1, df) = row;
    long d = ((panel.row_time[i] % 7) + 7) % 7;
    for (size_t k = 0; k < dows.size(); ++k)
      augmented.covariates(i, old_h + df + static_cast<int>(k)) = (d == dows[k]) ? 1.0 : 0.0;
  }

  Config hash_cfg;
  hash_cfg.set("panel", panel_path);
  hash_cfg.set("df_per_year", std::to_string(df_per_year));
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  write_panel_csv(out, augmented, comment_header(hash_cfg));
  std::cout << "wrote " << out_path << " with " << df << " trend and " << dows.size()
            << " day-of-week columns\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian spatially-varying DLNM fitting via Laplace approximation"};
  app.require_subcommand(1);

  std::string panel_path, adjacency_path, config_path, out_dir, prior_flag, family_flag;
  auto* fit_cmd = app.add_subcommand("fit", "fit a model to a panel CSV");
  fit_cmd->add_option("--panel", panel_path, "panel CSV")->required();
  fit_cmd->add_option("--adjacency", adjacency_path, "area adjacency edge list");
  fit_cmd->add_option("--config", config_path, "key-value config file");
  fit_cmd->add_option("--out", out_dir, "output directory")->required();
  fit_cmd->add_option("--prior", prior_flag, "common|typeI|typeII|typeIII|typeIV");
  fit_cmd->add_option("--family", family_flag, "poisson|negbin");

  std::string fit_path, grid_spec, areas_flag, rr_out, plot_dir, centroid_path;
  double x0 = 5.0;
  auto* rr_cmd = app.add_subcommand("rr", "relative risks from a fit artifact");
  rr_cmd->add_option("--fit", fit_path, "fit_state.json from `fit`")->required();
  rr_cmd->add_option("--grid", grid_spec, "exposure grid lo:hi:step (default 0:10:0.25)");
  rr_cmd->add_option("--x0", x0, "reference exposure")->required();
  rr_cmd->add_option("--areas", areas_flag, "all (default) or comma-separated area ids");
  rr_cmd->add_option("--out", rr_out, "output CSV")->required();
  rr_cmd->add_option("--plot-dir", plot_dir, "optional directory for static SVG plots");
  rr_cmd->add_option("--centroids", centroid_path, "id,x,y centroid CSV for the map plot");

  std::string cmp_panel, cmp_out;
  std::vector<std::string> cmp_fits;
  std::uint64_t cmp_seed = 1;
  int cmp_draws = 1000;
  auto* cmp_cmd = app.add_subcommand("compare", "DIC/WAIC/CPO across fitted models");
  cmp_cmd->add_option("--panel", cmp_panel, "panel CSV the models were fitted to")->required();
  cmp_cmd->add_option("--fits", cmp_fits, "fit_state.json artifacts")
      ->required()
      ->delimiter(',');
  cmp_cmd->add_option("--out", cmp_out, "output CSV")->required();
  cmp_cmd->add_option("--seed", cmp_seed, "shared draw seed");
  cmp_cmd->add_option("--draws", cmp_draws, "posterior draws for WAIC/CPO");

  std::string sim_out, sim_scale = "large", sim_priors = "common,typeII,typeIV";
  std::string sim_family = "poisson", sim_config;
  int sim_runs = 25, sim_setting = 2, sim_workers = 1, sim_t = 400;
  int sim_rows = 6, sim_cols = 6;
  std::uint64_t sim_seed = 1;
  bool sim_criteria = false;
  auto* sim_cmd = app.add_subcommand("simulate", "run the simulation study");
  sim_cmd->add_option("--out", sim_out, "output directory")->required();
  sim_cmd->add_option("--runs", sim_runs, "number of simulation runs");
  sim_cmd->add_option("--setting", sim_setting, "scenario 1, 2 or 3");
  sim_cmd->add_option("--scale", sim_scale, "small|large populations");
  sim_cmd->add_option("--priors", sim_priors, "comma-separated prior list");
  sim_cmd->add_option("--workers", sim_workers, "parallel runs (capped by SVDLNM_THREADS)");
  sim_cmd->add_option("--master-seed", sim_seed, "master seed");
  sim_cmd->add_option("--T", sim_t, "time points per area");
  sim_cmd->add_option("--grid-rows", sim_rows, "lattice rows");
  sim_cmd->add_option("--grid-cols", sim_cols, "lattice cols");
  sim_cmd->add_option("--family", sim_family, "poisson|negbin");
  sim_cmd->add_flag("--criteria", sim_criteria, "also compute DIC/WAIC/CPO per run");
  sim_cmd->add_option("--config", sim_config, "fit options config file");

  std::string tt_panel, tt_out;
  int tt_df = 7;
  auto* tt_cmd = app.add_subcommand("timetrend", "augment a panel with trend columns");
  tt_cmd->add_option("--panel", tt_panel, "panel CSV")->required();
  tt_cmd->add_option("--df-per-year", tt_df, "trend degrees of freedom per year");
  tt_cmd->add_option("--out", tt_out, "augmented CSV path")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (fit_cmd->parsed())
      return cmd_fit(panel_path, adjacency_path, config_path, out_dir, prior_flag,
                     family_flag);
    if (rr_cmd->parsed())
      return cmd_rr(fit_path, grid_spec, x0, areas_flag, rr_out, plot_dir, centroid_path);
    if (cmp_cmd->parsed()) return cmd_compare(cmp_panel, cmp_fits, cmp_out, cmp_seed, cmp_draws);
    if (sim_cmd->parsed())
      return cmd_simulate(sim_out, sim_runs, sim_setting, sim_scale, sim_priors, sim_workers,
                          sim_seed, sim_t, sim_rows, sim_cols, sim_family, sim_criteria,
                          sim_config);
    if (tt_cmd->parsed()) return cmd_timetrend(tt_panel, tt_df, tt_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
