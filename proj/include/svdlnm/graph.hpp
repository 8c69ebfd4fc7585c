#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <istream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "svdlnm/rng.hpp"

namespace svdlnm {

/// Area neighbourhood structure. Edges are unordered pairs of dense indices;
/// isolated areas are allowed.
struct AdjacencyGraph {
  int num_areas = 0;
  std::vector<std::pair<int, int>> edges;  // normalized first < second, unique

  std::vector<int> degrees() const {
    std::vector<int> d(num_areas, 0);
    for (auto& [a, b] : edges) {
      ++d[a];
      ++d[b];
    }
    return d;
  }
};

struct AdjacencyLoadResult {
  AdjacencyGraph graph;
  std::vector<std::string> ids;  // dense index -> original id
  std::vector<std::string> warnings;
};

/// Parses an edge-list file: one edge per line, two whitespace-separated ids,
/// `#` starts a comment. Ids map to dense indices in first-appearance order.
/// Duplicate edges are collapsed with a warning; self-loops are an error.
inline AdjacencyLoadResult load_adjacency(std::istream& in) {
  AdjacencyLoadResult res;
  std::unordered_map<std::string, int> index;
  std::set<std::pair<int, int>> seen;
  std::string line;
  int line_no = 0;
  auto intern = [&](const std::string& id) {
    auto [it, inserted] = index.emplace(id, static_cast<int>(res.ids.size()));
    if (inserted) res.ids.push_back(id);
    return it->second;
  };
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string a, b, extra;
    if (!(ls >> a)) continue;  // blank line
    if (!(ls >> b) || (ls >> extra))
      throw std::runtime_error("adjacency line " + std::to_string(line_no) +
                               ": expected exactly two ids");
    if (a == b)
      throw std::runtime_error("adjacency line " + std::to_string(line_no) +
                               ": self-loop on id '" + a + "'");
    int ia = intern(a), ib = intern(b);
    auto e = std::minmax(ia, ib);
    if (!seen.insert(std::make_pair(e.first, e.second)).second) {
      res.warnings.push_back("duplicate edge '" + a + " " + b + "' at line " +
                             std::to_string(line_no) + " ignored");
      continue;
    }
    res.graph.edges.emplace_back(e.first, e.second);
  }
  res.graph.num_areas = static_cast<int>(res.ids.size());
  return res;
}

inline AdjacencyLoadResult load_adjacency(const std::string& text) {
  std::istringstream in(text);
  return load_adjacency(in);
}

/// 4-neighbour lattice on rows x cols cells, indexed row-major.
inline AdjacencyGraph grid_graph(int rows, int cols) {
  if (rows < 1 || cols < 1) throw std::invalid_argument("grid dimensions must be >= 1");
  AdjacencyGraph g;
  g.num_areas = rows * cols;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      int idx = r * cols + c;
      if (c + 1 < cols) g.edges.emplace_back(idx, idx + 1);
      if (r + 1 < rows) g.edges.emplace_back(idx, idx + cols);
    }
  return g;
}

/// ICAR structure matrix: degree on the diagonal, -1 for neighbours.
inline Eigen::SparseMatrix<double> icar_matrix(const AdjacencyGraph& g) {
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(g.num_areas + 2 * g.edges.size());
  auto deg = g.degrees();
  for (int j = 0; j < g.num_areas; ++j)
    trips.emplace_back(j, j, static_cast<double>(deg[j]));
  for (auto& [a, b] : g.edges) {
    trips.emplace_back(a, b, -1.0);
    trips.emplace_back(b, a, -1.0);
  }
  Eigen::SparseMatrix<double> m(g.num_areas, g.num_areas);
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

/// Eigenvalues of the ICAR matrix, computed once per graph (dense symmetric
/// solve; desk-scale J).
inline Eigen::VectorXd icar_spectrum(const AdjacencyGraph& g) {
  Eigen::MatrixXd dense = Eigen::MatrixXd(icar_matrix(g));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dense, Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}

/// Leroux precision Z(rho) = rho * Lambda + (1-rho) * I, positive definite
/// for rho in [0, 1). The cached ICAR spectrum gives
/// log|Z| = sum_j log(rho * omega_j + 1 - rho) without refactorizing.
struct LerouxPrecision {
  double rho = 0.0;
  Eigen::SparseMatrix<double> structure;  // Lambda
  Eigen::SparseMatrix<double> Z;
  Eigen::VectorXd icar_eigenvalues;

  double log_det() const {
    double s = 0.0;
    for (Eigen::Index j = 0; j < icar_eigenvalues.size(); ++j)
      s += std::log(rho * icar_eigenvalues[j] + (1.0 - rho));
    return s;
  }
};

inline LerouxPrecision leroux_precision(const AdjacencyGraph& g, double rho,
                                        const Eigen::VectorXd* cached_spectrum = nullptr) {
  if (!(rho >= 0.0 && rho < 1.0))
    throw std::invalid_argument("leroux rho must satisfy 0 <= rho < 1");
  LerouxPrecision lp;
  lp.rho = rho;
  lp.structure = icar_matrix(g);
  Eigen::SparseMatrix<double> eye(g.num_areas, g.num_areas);
  eye.setIdentity();
  lp.Z = rho * lp.structure + (1.0 - rho) * eye;
  lp.icar_eigenvalues = cached_spectrum ? *cached_spectrum : icar_spectrum(g);
  return lp;
}

/// One draw from N(0, sigma2 * Z(rho)^{-1}) via a triangular solve against
/// the Cholesky factor of Z.
inline Eigen::VectorXd leroux_sample(const LerouxPrecision& lp, double sigma2, Rng& rng) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("leroux sigma2 must be > 0");
  const Eigen::Index n = lp.Z.rows();
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(lp.Z);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("leroux precision factorization failed");
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = rng.normal();
  // Z = P' L L' P  =>  cov = Z^{-1} = (P' L^{-T})(P' L^{-T})'.
  Eigen::VectorXd x = llt.matrixU().solve(z);
  x = llt.permutationPinv() * x;
  return std::sqrt(sigma2) * x;
}

inline Eigen::VectorXd leroux_sample(const AdjacencyGraph& g, double rho,
                                     double sigma2, std::uint64_t seed) {
  Rng rng(seed);
  LerouxPrecision lp = leroux_precision(g, rho);
  return leroux_sample(lp, sigma2, rng);
}

}  // namespace svdlnm
