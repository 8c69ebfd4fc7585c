#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <random>
#include <sstream>

#include "svdlnm/model.hpp"

using namespace svdlnm;

namespace {

PanelData toy_panel(int T, int J, int H, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<double> ex(0.0, 10.0);
  std::normal_distribution<double> cov(0.0, 1.0);
  std::poisson_distribution<int> counts(3.0);
  PanelData p;
  const Eigen::Index n = static_cast<Eigen::Index>(T) * J;
  p.row_area.resize(n);
  p.row_time.resize(n);
  p.y.resize(n);
  p.exposure.resize(n);
  p.offset.resize(n);
  p.covariates.resize(n, H);
  for (int h = 0; h < H; ++h) p.covariate_names.push_back("cov_" + std::to_string(h));
  Eigen::Index r = 0;
  for (int j = 0; j < J; ++j) {
    p.area_ids.push_back("a" + std::to_string(j));
    for (int t = 0; t < T; ++t, ++r) {
      p.row_area[r] = j;
      p.row_time[r] = t + 1;
      p.y[r] = counts(gen);
      p.exposure[r] = ex(gen);
      p.offset[r] = 0.1 * cov(gen);
      for (int h = 0; h < H; ++h) p.covariates(r, h) = cov(gen);
    }
  }
  return p;
}

CrossBasis toy_cb(int vx, int vl, int L) {
  return make_cross_basis(make_bspline_basis(vx, std::min(3, vx - 1), 0.0, 10.0),
                          make_bspline_basis(vl, std::min(3, vl - 1), 0.0, std::max(1, L)),
                          L);
}

// Naive per-row reconstruction of X straight from the definition.
Eigen::MatrixXd naive_design(const PanelData& panel, const CrossBasis& cb, bool with_theta_j) {
  const int J = panel.num_areas(), H = panel.num_covariates();
  const int p = cb.dim(), L = cb.max_lag;
  std::vector<Eigen::VectorXd> w_rows;
  std::vector<Eigen::Index> keep;
  std::vector<int> keep_area;
  for (Eigen::Index r = 0; r < panel.num_rows(); ++r) {
    auto [first, last] = panel.area_rows(panel.row_area[r]);
    if (r - first < L) continue;
    Eigen::VectorXd q(L + 1);
    for (int l = 0; l <= L; ++l) q[l] = panel.exposure[r - l];
    w_rows.push_back(cross_basis_row(q, cb));
    keep.push_back(r);
    keep_area.push_back(panel.row_area[r]);
  }
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(p);
  for (auto& w : w_rows) mean += w.transpose();
  mean /= static_cast<double>(w_rows.size());

  const int n_xi = (H + 1) + p + (with_theta_j ? J * p : 0) + J;
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(keep.size()), n_xi);
  for (size_t i = 0; i < keep.size(); ++i) {
    Eigen::Index r = keep[i];
    int j = keep_area[i];
    x(i, 0) = 1.0;
    for (int h = 0; h < H; ++h) x(i, 1 + h) = panel.covariates(r, h);
    Eigen::RowVectorXd wc = w_rows[i].transpose() - mean;
    x.block(i, H + 1, 1, p) = wc;
    if (with_theta_j) x.block(i, H + 1 + p + j * p, 1, p) = wc;
    x(i, n_xi - J + j) = 1.0;
  }
  return x;
}

Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

}  // namespace

TEST_CASE("single-area common design has no theta_J block") {
  auto panel = toy_panel(6, 1, 0, 1);
  auto cb = toy_cb(3, 2, 1);
  auto mm = build_design(panel, cb, /*with_theta_j=*/false);
  REQUIRE(mm.blocks.total == 1 + 6 + 0 + 1);
  REQUIRE(mm.blocks.theta_j_count == 0);
  // u block is a single column of ones
  Eigen::MatrixXd dense = Eigen::MatrixXd(mm.X);
  REQUIRE((dense.col(mm.blocks.u_start).array() == 1.0).all());
}

TEST_CASE("design dimension bookkeeping") {
  auto panel = toy_panel(5, 2, 1, 2);
  auto cb = toy_cb(2, 2, 1);
  auto mm = build_design(panel, cb, true);
  REQUIRE(mm.blocks.total == 2 + 4 + 8 + 2);
  REQUIRE(mm.num_rows() == 2 * (5 - 1));
}

TEST_CASE("sparse design matches the naive per-row loop") {
  for (bool with_tj : {true, false}) {
    auto panel = toy_panel(9, 3, 2, 3);
    auto cb = toy_cb(4, 3, 2);
    auto mm = build_design(panel, cb, with_tj);
    Eigen::MatrixXd oracle = naive_design(panel, cb, with_tj);
    REQUIRE(mm.X.rows() == oracle.rows());
    REQUIRE(mm.X.cols() == oracle.cols());
    REQUIRE((Eigen::MatrixXd(mm.X) - oracle).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("linear predictor through area blocks matches X * xi") {
  auto panel = toy_panel(8, 3, 1, 4);
  auto cb = toy_cb(3, 2, 2);
  auto mm = build_design(panel, cb, true);
  std::mt19937 gen(7);
  std::normal_distribution<double> norm(0.0, 0.3);
  Eigen::VectorXd xi(mm.blocks.total);
  for (int i = 0; i < xi.size(); ++i) xi[i] = norm(gen);
  Eigen::VectorXd direct = mm.X * xi + mm.offset;
  REQUIRE((mm.linear_predictor(xi) - direct).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("TypeI prior precision is the expected diagonal") {
  PriorSpec spec = PriorSpec::make(PriorType::TypeI);
  auto cb = toy_cb(2, 2, 1);
  auto ps = make_prior_structure(spec, cb, 2, 0);
  auto hyper = HyperVector::zeros(ps.layout);
  hyper.psi[ps.layout.tau_theta] = std::log(2.0);
  hyper.psi[ps.layout.tau_u] = std::log(3.0);
  BlockMap bm;
  bm.beta_count = 1;
  bm.theta_start = 1;
  bm.theta_count = 4;
  bm.theta_j_start = 5;
  bm.theta_j_count = 8;
  bm.u_start = 13;
  bm.u_count = 2;
  bm.total = 15;
  Eigen::MatrixXd q = Eigen::MatrixXd(build_prior_precision(ps, hyper, bm));
  Eigen::VectorXd expect(15);
  expect << 1e-5, 1e-5, 1e-5, 1e-5, 1e-5, 2, 2, 2, 2, 2, 2, 2, 2, 3, 3;
  REQUIRE((q - Eigen::MatrixXd(expect.asDiagonal())).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("TypeIV with rho1 = 0 reduces to the TypeII block") {
  auto g = grid_graph(2, 2);
  auto cb = toy_cb(2, 2, 1);
  PriorSpec s4 = PriorSpec::make(PriorType::TypeIV);
  s4.penalty_order = 1;
  PriorSpec s2 = PriorSpec::make(PriorType::TypeII);
  s2.penalty_order = 1;
  s2.random_effect = RandomEffectStructure::Leroux;  // align G blocks
  auto ps4 = make_prior_structure(s4, cb, 4, 0, &g);
  auto ps2 = make_prior_structure(s2, cb, 4, 0, &g);

  auto h4 = HyperVector::zeros(ps4.layout);
  h4.psi[ps4.layout.rho1] = -60.0;  // rho ~ 0
  auto h2 = HyperVector::zeros(ps2.layout);

  BlockMap bm;
  bm.beta_count = 1;
  bm.theta_start = 1;
  bm.theta_count = 4;
  bm.theta_j_start = 5;
  bm.theta_j_count = 16;
  bm.u_start = 21;
  bm.u_count = 4;
  bm.total = 25;
  Eigen::MatrixXd q4 = Eigen::MatrixXd(build_prior_precision(ps4, h4, bm));
  Eigen::MatrixXd q2 = Eigen::MatrixXd(build_prior_precision(ps2, h2, bm));
  REQUIRE((q4.block(5, 5, 16, 16) - q2.block(5, 5, 16, 16)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("TypeIV block matches a dense Kronecker oracle") {
  auto g = grid_graph(1, 3);
  auto cb = toy_cb(2, 2, 1);
  PriorSpec spec = PriorSpec::make(PriorType::TypeIV);
  spec.penalty_order = 1;
  auto ps = make_prior_structure(spec, cb, 3, 0, &g);
  auto hyper = HyperVector::zeros(ps.layout);
  std::mt19937 gen(17);
  std::normal_distribution<double> norm(0.0, 0.7);
  for (int i = 0; i < hyper.psi.size(); ++i) hyper.psi[i] = norm(gen);

  BlockMap bm;
  bm.beta_count = 2;
  bm.theta_start = 2;
  bm.theta_count = 4;
  bm.theta_j_start = 6;
  bm.theta_j_count = 12;
  bm.u_start = 18;
  bm.u_count = 3;
  bm.total = 21;
  Eigen::MatrixXd q = Eigen::MatrixXd(build_prior_precision(ps, hyper, bm));

  const auto& lay = ps.layout;
  double rho1 = hyper.correlation(lay.rho1);
  Eigen::MatrixXd z1 = rho1 * Eigen::MatrixXd(ps.icar) +
                       (1 - rho1) * Eigen::MatrixXd::Identity(3, 3);
  Eigen::MatrixXd p2 =
      hyper.positive(lay.lambda2_x) * kron(ps.Sx, Eigen::MatrixXd::Identity(2, 2)) +
      hyper.positive(lay.lambda2_l) * kron(Eigen::MatrixXd::Identity(2, 2), ps.Sl) +
      hyper.positive(lay.lambda2_shrink) * kron(Eigen::MatrixXd::Identity(2, 2), ps.Sl2);
  REQUIRE((q.block(6, 6, 12, 12) - kron(z1, p2)).cwiseAbs().maxCoeff() < 1e-12);

  // P(lambda^(1)) block as well.
  Eigen::MatrixXd p1 =
      hyper.positive(lay.lambda1_x) * kron(ps.Sx, Eigen::MatrixXd::Identity(2, 2)) +
      hyper.positive(lay.lambda1_l) * kron(Eigen::MatrixXd::Identity(2, 2), ps.Sl) +
      hyper.positive(lay.lambda1_shrink) * kron(Eigen::MatrixXd::Identity(2, 2), ps.Sl2);
  REQUIRE((q.block(2, 2, 4, 4) - p1).cwiseAbs().maxCoeff() < 1e-12);

  // G = tau_u Z(rho2).
  double rho2 = hyper.correlation(lay.rho2);
  Eigen::MatrixXd zg = rho2 * Eigen::MatrixXd(ps.icar) +
                       (1 - rho2) * Eigen::MatrixXd::Identity(3, 3);
  REQUIRE((q.block(18, 18, 3, 3) - hyper.positive(lay.tau_u) * zg).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("prior precision handles isolated areas") {
  AdjacencyGraph g;
  g.num_areas = 3;
  g.edges = {{0, 1}};  // area 2 isolated
  auto cb = toy_cb(2, 2, 1);
  PriorSpec spec = PriorSpec::make(PriorType::TypeIII);
  auto ps = make_prior_structure(spec, cb, 3, 0, &g);
  auto hyper = HyperVector::zeros(ps.layout);
  hyper.psi[ps.layout.rho1] = 0.5;

  BlockMap bm;
  bm.beta_count = 1;
  bm.theta_start = 1;
  bm.theta_count = 4;
  bm.theta_j_start = 5;
  bm.theta_j_count = 12;
  bm.u_start = 17;
  bm.u_count = 3;
  bm.total = 20;
  Eigen::MatrixXd q = Eigen::MatrixXd(build_prior_precision(ps, hyper, bm));
  double rho = hyper.correlation(ps.layout.rho1);
  // Isolated area block: tau * (1 - rho) * I.
  REQUIRE(q(5 + 2 * 4, 5 + 2 * 4) == Catch::Approx(1.0 - rho));
}

TEST_CASE("log-det identities") {
  auto g = grid_graph(2, 3);
  auto cb = toy_cb(3, 3, 2);

  SECTION("unpenalized V_theta is p log zeta") {
    PriorSpec spec = PriorSpec::make(PriorType::TypeI);
    auto ps = make_prior_structure(spec, cb, 6, 0);
    auto hyper = HyperVector::zeros(ps.layout);
    auto ld = log_det_prior_blocks(ps, hyper);
    REQUIRE(ld.v_theta == Catch::Approx(9.0 * std::log(1e-5)));
  }

  SECTION("Kronecker determinant identity for TypeIV") {
    PriorSpec spec = PriorSpec::make(PriorType::TypeIV);
    auto ps = make_prior_structure(spec, cb, 6, 0, &g);
    auto hyper = HyperVector::zeros(ps.layout);
    std::mt19937 gen(3);
    std::normal_distribution<double> norm(0.0, 0.5);
    for (int i = 0; i < hyper.psi.size(); ++i) hyper.psi[i] = norm(gen);
    auto ld = log_det_prior_blocks(ps, hyper);
    const auto& lay = ps.layout;
    double logdet_p2 = ps.penalty_log_det(hyper.positive(lay.lambda2_x),
                                          hyper.positive(lay.lambda2_l),
                                          hyper.positive(lay.lambda2_shrink));
    double expect = 9.0 * ps.log_det_z(hyper.correlation(lay.rho1)) + 6.0 * logdet_p2;
    REQUIRE(ld.v_theta_j == Catch::Approx(expect).margin(1e-10));
  }
}

TEST_CASE("spectral log-dets match dense determinants for every prior type") {
  auto g = grid_graph(2, 3);
  auto cb = toy_cb(3, 3, 2);
  std::mt19937 gen(23);
  std::normal_distribution<double> norm(0.0, 0.8);

  for (PriorType t : {PriorType::Common, PriorType::TypeI, PriorType::TypeII,
                      PriorType::TypeIII, PriorType::TypeIV}) {
    PriorSpec spec = PriorSpec::make(t);
    auto ps = make_prior_structure(spec, cb, 6, 0, &g);
    auto hyper = HyperVector::zeros(ps.layout);
    for (int i = 0; i < hyper.psi.size(); ++i) hyper.psi[i] = norm(gen);

    BlockMap bm;
    bm.beta_count = 1;
    bm.theta_start = 1;
    bm.theta_count = 9;
    bm.theta_j_start = 10;
    bm.theta_j_count = spec.has_theta_j() ? 54 : 0;
    bm.u_start = bm.theta_j_start + bm.theta_j_count;
    bm.u_count = 6;
    bm.total = bm.u_start + 6;

    Eigen::MatrixXd q = Eigen::MatrixXd(build_prior_precision(ps, hyper, bm));
    auto ld = log_det_prior_blocks(ps, hyper);

    auto dense_logdet = [](const Eigen::MatrixXd& m) {
      Eigen::LLT<Eigen::MatrixXd> llt(m);
      REQUIRE(llt.info() == Eigen::Success);
      return 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    };
    REQUIRE(ld.v_theta ==
            Catch::Approx(dense_logdet(q.block(1, 1, 9, 9))).margin(1e-8));
    if (spec.has_theta_j())
      REQUIRE(ld.v_theta_j ==
              Catch::Approx(dense_logdet(q.block(10, 10, 54, 54))).margin(1e-8));
    REQUIRE(ld.g ==
            Catch::Approx(dense_logdet(q.block(bm.u_start, bm.u_start, 6, 6))).margin(1e-8));

    // Q overall: symmetric PD, and the block sum reproduces
    // log|Q| - log|Omega_beta| densely.
    REQUIRE((q - q.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    double whole = dense_logdet(q);
    double beta_part = std::log(spec.zeta) * bm.beta_count;
    REQUIRE(ld.v_theta + ld.v_theta_j + ld.g ==
            Catch::Approx(whole - beta_part).margin(1e-8));
  }
}

TEST_CASE("hyper layout order is documented and stable") {
  PriorSpec spec = PriorSpec::make(PriorType::TypeIV, Family::NegBinomial);
  auto lay = make_hyper_layout(spec);
  std::vector<std::string> names;
  for (auto& e : lay.entries) names.push_back(e.name);
  REQUIRE(names == std::vector<std::string>{
                       "log_lambda_x1", "log_lambda_l1", "log_lambda_s1",
                       "log_lambda_x2", "log_lambda_l2", "log_lambda_s2",
                       "log_tau_u", "logit_rho1", "logit_rho2", "log_phi"});

  PriorSpec s1 = PriorSpec::make(PriorType::TypeI);
  auto lay1 = make_hyper_layout(s1);
  names.clear();
  for (auto& e : lay1.entries) names.push_back(e.name);
  REQUIRE(names == std::vector<std::string>{"log_tau_theta", "log_tau_u"});
}

TEST_CASE("prior structure validation") {
  auto cb = toy_cb(2, 2, 1);
  PriorSpec spec = PriorSpec::make(PriorType::TypeIII);
  REQUIRE_THROWS_AS(make_prior_structure(spec, cb, 3, 0, nullptr), std::invalid_argument);
  auto g = grid_graph(1, 2);
  REQUIRE_THROWS_AS(make_prior_structure(spec, cb, 3, 0, &g), std::invalid_argument);
}
