#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "svdlnm/fit_io.hpp"
#include "svdlnm/inference.hpp"
#include "svdlnm/simstudy.hpp"

namespace fs = std::filesystem;
using namespace svdlnm;

namespace {

struct CliResult {
  int exit_code;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  fs::path log = fs::temp_directory_path() / "svdlnm_cli_out.txt";
  std::string cmd = std::string(SVDLNM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  int rc = std::system(cmd.c_str());
  CliResult res;
  res.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  res.output = ss.str();
  return res;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path dir;
  explicit Workspace(const std::string& name) {
    dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const std::string& rel) const { return (dir / rel).string(); }
};

void write_toy_panel(const std::string& path, int T = 40, int J = 4,
                     std::uint64_t seed = 7) {
  SimTruth truth;
  AdjacencyGraph g = grid_graph(2, 2);
  truth = simulate_truth(2, g, StudyScale::Large, Family::Poisson, seed);
  Eigen::MatrixXd expo = exposure_generator(T, J, seed + 1);
  PanelData p = simulate_panel(truth, expo, 2, seed + 2);
  std::ofstream out(path);
  write_panel_csv(out, p);
}

void write_adjacency(const std::string& path) {
  std::ofstream out(path);
  out << "# 2x2 lattice\narea0 area1\narea0 area2\narea1 area3\narea2 area3\n";
}

void write_config(const std::string& path, const std::string& extra = "") {
  std::ofstream out(path);
  out << "max_lag 2\nbspline_df 4\nnatural_lag_knots 1\nmax_outer_evals 800\n" << extra;
}

}  // namespace

TEST_CASE("fit: spatial prior without adjacency fails with a clear message") {
  Workspace ws("svdlnm_cli_fit1");
  write_toy_panel(ws.path("panel.csv"));
  write_config(ws.path("cfg.txt"));
  auto res = run_cli("fit --panel " + ws.path("panel.csv") + " --config " + ws.path("cfg.txt") +
                     " --prior typeIII --out " + ws.path("out"));
  REQUIRE(res.exit_code == 1);
  REQUIRE(res.output.find("adjacency") != std::string::npos);
}

TEST_CASE("fit: common prior needs no adjacency and is byte-reproducible") {
  Workspace ws("svdlnm_cli_fit2");
  write_toy_panel(ws.path("panel.csv"));
  write_config(ws.path("cfg.txt"));
  std::string base = "fit --panel " + ws.path("panel.csv") + " --config " + ws.path("cfg.txt") +
                     " --prior common ";
  auto r1 = run_cli(base + "--out " + ws.path("out1"));
  REQUIRE(r1.exit_code == 0);
  auto r2 = run_cli(base + "--out " + ws.path("out2"));
  REQUIRE(r2.exit_code == 0);
  REQUIRE(read_file(ws.path("out1/fit.json")) == read_file(ws.path("out2/fit.json")));
  REQUIRE(read_file(ws.path("out1/fit_state.json")) ==
          read_file(ws.path("out2/fit_state.json")));
}

TEST_CASE("fit: conflicting prior override is rejected") {
  Workspace ws("svdlnm_cli_fit3");
  write_toy_panel(ws.path("panel.csv"));
  write_config(ws.path("cfg.txt"), "prior common\n");
  auto res = run_cli("fit --panel " + ws.path("panel.csv") + " --config " + ws.path("cfg.txt") +
                     " --prior typeI --out " + ws.path("out"));
  REQUIRE(res.exit_code == 1);
  REQUIRE(res.output.find("conflicting") != std::string::npos);
}

TEST_CASE("rr: artifact round trip, row counts and reference row") {
  Workspace ws("svdlnm_cli_rr");
  write_toy_panel(ws.path("panel.csv"));
  write_adjacency(ws.path("adj.txt"));
  write_config(ws.path("cfg.txt"));
  auto fit_res = run_cli("fit --panel " + ws.path("panel.csv") + " --adjacency " +
                         ws.path("adj.txt") + " --config " + ws.path("cfg.txt") +
                         " --prior typeI --out " + ws.path("out"));
  REQUIRE(fit_res.exit_code == 0);

  SECTION("x0 outside the boundary fails") {
    auto res = run_cli("rr --fit " + ws.path("out/fit_state.json") +
                       " --x0 25 --out " + ws.path("rr.csv"));
    REQUIRE(res.exit_code == 1);
  }

  SECTION("grid output has |areas| * |grid| * (L+2) rows and rr=1 at x0") {
    auto res = run_cli("rr --fit " + ws.path("out/fit_state.json") +
                       " --grid 1:9:0.5 --x0 5 --out " + ws.path("rr.csv"));
    REQUIRE(res.exit_code == 0);
    std::ifstream in(ws.path("rr.csv"));
    std::string line;
    std::getline(in, line);
    REQUIRE(line.rfind("# svdlnm", 0) == 0);  // comment header
    std::getline(in, line);                   // csv header
    int rows = 0;
    bool x0_row_ok = false;
    while (std::getline(in, line)) {
      ++rows;
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream ls(line);
      std::string id;
      double x, x0v, rr, lo, hi;
      int lag;
      ls >> id >> x >> x0v >> lag >> rr >> lo >> hi;
      if (x == 5.0) {
        REQUIRE(rr == 1.0);
        x0_row_ok = true;
      }
      REQUIRE(lo <= rr + 1e-12);
      REQUIRE(rr <= hi + 1e-12);
    }
    REQUIRE(rows == 4 * 17 * (2 + 2));
    REQUIRE(x0_row_ok);
  }

  SECTION("plots are emitted when requested") {
    auto res = run_cli("rr --fit " + ws.path("out/fit_state.json") +
                       " --x0 5 --areas area0 --out " + ws.path("rr.csv") + " --plot-dir " +
                       ws.path("plots") + " --centroids " + ws.path("centroids.csv"));
    // centroid file absent: command fails cleanly
    REQUIRE(res.exit_code == 1);
    std::ofstream c(ws.path("centroids.csv"));
    c << "area0,0,0\narea1,1,0\narea2,0,1\narea3,1,1\n";
    c.close();
    res = run_cli("rr --fit " + ws.path("out/fit_state.json") +
                  " --x0 5 --out " + ws.path("rr.csv") + " --plot-dir " + ws.path("plots") +
                  " --centroids " + ws.path("centroids.csv"));
    REQUIRE(res.exit_code == 0);
    REQUIRE(fs::exists(ws.path("plots/rr_area0.svg")));
    REQUIRE(fs::exists(ws.path("plots/rr_map.svg")));
  }
}

TEST_CASE("loaded artifacts reproduce in-process estimates") {
  Workspace ws("svdlnm_cli_roundtrip");
  write_toy_panel(ws.path("panel.csv"));
  write_config(ws.path("cfg.txt"));

  PanelData panel = read_panel_csv_file(ws.path("panel.csv"));
  PriorSpec spec = PriorSpec::make(PriorType::Common);
  FitOptions options;
  options.splines.max_lag = 2;
  options.splines.bspline_df = 4;
  FitResult fr = fit(panel, nullptr, spec, options);
  Config cfg;
  write_json_file(ws.path("state.json"), fit_state_to_json(fr, cfg));
  LoadedFit lf = fit_state_from_json(read_json_file(ws.path("state.json")));

  for (double x : {2.0, 7.0}) {
    auto orig = rr_estimate(fr, 1, x, 5.0);
    auto loaded = rr_estimate(lf.fit, 1, x, 5.0);
    REQUIRE(loaded.rr == Catch::Approx(orig.rr).epsilon(1e-12));
    REQUIRE(loaded.ci_low == Catch::Approx(orig.ci_low).epsilon(1e-10));
  }
}

TEST_CASE("compare: deltas are zero for one model, nonnegative always") {
  Workspace ws("svdlnm_cli_cmp");
  write_toy_panel(ws.path("panel.csv"));
  write_config(ws.path("cfg.txt"));
  REQUIRE(run_cli("fit --panel " + ws.path("panel.csv") + " --config " + ws.path("cfg.txt") +
                  " --prior common --out " + ws.path("m1")).exit_code == 0);
  REQUIRE(run_cli("fit --panel " + ws.path("panel.csv") + " --config " + ws.path("cfg.txt") +
                  " --prior typeI --out " + ws.path("m2")).exit_code == 0);

  auto single = run_cli("compare --panel " + ws.path("panel.csv") + " --fits " +
                        ws.path("m1/fit_state.json") + " --out " + ws.path("single.csv"));
  REQUIRE(single.exit_code == 0);
  {
    std::ifstream in(ws.path("single.csv"));
    std::string line;
    std::getline(in, line);  // comment
    std::getline(in, line);  // header
    std::getline(in, line);
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    std::string name;
    double dic, waic, cpo, dd, dw, dc;
    ls >> name >> dic >> waic >> cpo >> dd >> dw >> dc;
    REQUIRE(dd == 0.0);
    REQUIRE(dw == 0.0);
    REQUIRE(dc == 0.0);
  }

  // Duplicated artifact: identical criteria (shared draw seed), deltas >= 0.
  auto both = run_cli("compare --panel " + ws.path("panel.csv") + " --fits " +
                      ws.path("m1/fit_state.json") + "," + ws.path("m2/fit_state.json") +
                      "," + ws.path("m1/fit_state.json") + " --out " + ws.path("cmp.csv"));
  REQUIRE(both.exit_code == 0);
  std::ifstream in(ws.path("cmp.csv"));
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  std::vector<std::array<double, 6>> vals;
  while (std::getline(in, line)) {
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    std::string name;
    std::array<double, 6> v;
    ls >> name >> v[0] >> v[1] >> v[2] >> v[3] >> v[4] >> v[5];
    REQUIRE(v[3] >= 0.0);
    REQUIRE(v[4] >= 0.0);
    REQUIRE(v[5] >= 0.0);
    vals.push_back(v);
  }
  REQUIRE(vals.size() == 3);
  for (int k = 0; k < 6; ++k) REQUIRE(vals[0][k] == vals[2][k]);
}

TEST_CASE("simulate: smoke run, reproducibility and bad settings") {
  Workspace ws("svdlnm_cli_sim");
  write_config(ws.path("cfg.txt"));
  std::string base = "simulate --runs 1 --setting 2 --priors common --T 40 --grid-rows 2 "
                     "--grid-cols 2 --master-seed 7 --config " + ws.path("cfg.txt");
  auto res = run_cli(base + " --out " + ws.path("study1"));
  REQUIRE(res.exit_code == 0);
  std::string metrics = read_file(ws.path("study1/metrics.csv"));
  REQUIRE(metrics.rfind("# svdlnm", 0) == 0);
  REQUIRE(metrics.find("common,2,poisson,large,1,") != std::string::npos);
  REQUIRE(fs::exists(ws.path("study1/run_0000/rr_common.csv")));
  REQUIRE(fs::exists(ws.path("study1/manifest.txt")));

  auto res2 = run_cli(base + " --out " + ws.path("study2"));
  REQUIRE(res2.exit_code == 0);
  REQUIRE(read_file(ws.path("study1/metrics.csv")) == read_file(ws.path("study2/metrics.csv")));
  REQUIRE(read_file(ws.path("study1/run_0000/rr_common.csv")) ==
          read_file(ws.path("study2/run_0000/rr_common.csv")));

  auto bad = run_cli("simulate --runs 1 --setting 9 --priors common --out " + ws.path("bad"));
  REQUIRE(bad.exit_code == 1);
}

TEST_CASE("timetrend: trend and weekday columns") {
  Workspace ws("svdlnm_cli_tt");
  // One year of daily data for one area; y arbitrary.
  {
    std::ofstream out(ws.path("panel.csv"));
    out << "area_id,time,y,exposure,offset\n";
    for (int t = 1; t <= 365; ++t)
      out << "a," << t << ',' << (t % 3) << ',' << (t % 10) << ",0\n";
  }
  auto res = run_cli("timetrend --panel " + ws.path("panel.csv") + " --df-per-year 7 --out " +
                     ws.path("aug.csv"));
  REQUIRE(res.exit_code == 0);

  PanelData aug = read_panel_csv_file(ws.path("aug.csv"));
  int trend_cols = 0, dow_cols = 0;
  for (const auto& name : aug.covariate_names) {
    if (name.rfind("cov_trend_", 0) == 0) ++trend_cols;
    if (name.rfind("cov_dow_", 0) == 0) ++dow_cols;
  }
  REQUIRE(trend_cols == 7);
  REQUIRE(dow_cols == 6);  // 7 weekdays present, first is the reference

  // Trend columns reproduce the natural spline basis on the time index.
  Eigen::VectorXd interior(6);
  for (int i = 0; i < 6; ++i) interior[i] = 1.0 + 365.0 * (i + 1) / 7.0;
  auto basis = make_natural_basis(interior, 1.0, 365.0);
  for (Eigen::Index r = 0; r < aug.num_rows(); r += 37) {
    Eigen::RowVectorXd expect = basis.eval(static_cast<double>(aug.row_time[r]));
    for (int c = 0; c < 7; ++c)
      REQUIRE(aug.covariates(r, c) == Catch::Approx(expect[c]).margin(1e-12));
  }

  // Each weekday indicator column marks exactly its weekday.
  const long ref_dow = 1 % 7;
  for (Eigen::Index r = 0; r < aug.num_rows(); r += 11) {
    long d = aug.row_time[r] % 7;
    double row_sum = aug.covariates.row(r).tail(6).sum();
    REQUIRE(row_sum == (d == ref_dow ? 0.0 : 1.0));
  }
}
