#pragma once

// Semilinear elliptic problems on finite-difference grids: masked 5-point
// Dirichlet Laplacians (holes allowed), ingestion/export of externally
// assembled symmetric operators in coordinate format, vertical-line spectrum
// scans (eigenvalues of DF along base + t*phi_1), and the driver experiment
// that recovers all solutions of A u - f(u) = -t*phi_1 via a bifurcation
// diagram along a perturbed vertical line.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bifurcation.hpp"
#include "core.hpp"
#include "spectral.hpp"
#include "sturm.hpp"

namespace preim {

// ---------------------------------------------------------------------------
// grid domains
// ---------------------------------------------------------------------------

/// A rectangular lattice of candidate interior nodes with a mask selecting
/// the actual degrees of freedom. Everything outside the mask (including the
/// implicit frame around the lattice) is a homogeneous Dirichlet boundary.
struct GridDomain {
  int nx = 0, ny = 0;
  double spacing = 1.0;
  std::vector<std::uint8_t> mask;  // row-major j*nx + i, nonzero = interior

  bool inside(int i, int j) const {
    return i >= 0 && i < nx && j >= 0 && j < ny &&
           mask[static_cast<size_t>(j) * nx + i] != 0;
  }
  Index dof_count() const {
    Index c = 0;
    for (std::uint8_t m : mask) c += (m != 0);
    return c;
  }
  /// Row-major map from lattice cell to dof index, -1 outside the mask.
  std::vector<int> dof_map() const {
    std::vector<int> d(mask.size(), -1);
    int next = 0;
    for (size_t c = 0; c < mask.size(); ++c)
      if (mask[c]) d[c] = next++;
    return d;
  }
};

/// Full nx x ny rectangle.
inline GridDomain make_rect_grid(int nx, int ny, double spacing) {
  if (nx < 1 || ny < 1 || !(spacing > 0.0))
    fail(Errc::InvalidArgument, "make_rect_grid: need nx, ny >= 1 and spacing > 0");
  GridDomain g;
  g.nx = nx;
  g.ny = ny;
  g.spacing = spacing;
  g.mask.assign(static_cast<size_t>(nx) * ny, 1);
  return g;
}

/// Annulus-like domain: the unit disk minus a small off-center hole
/// (center (-0.3,-0.3), radius 0.2), rasterized on an n x n lattice over
/// (-1,1)^2. The off-center hole breaks the disk's rotational symmetry, so
/// the low eigenvalues of the Dirichlet Laplacian are simple.
inline GridDomain make_annulus_grid(int n = 32) {
  if (n < 8) fail(Errc::InvalidArgument, "make_annulus_grid: lattice too coarse");
  GridDomain g;
  g.nx = g.ny = n;
  g.spacing = 2.0 / (n + 1);
  g.mask.assign(static_cast<size_t>(n) * n, 0);
  for (int j = 0; j < n; ++j) {
    double y = -1.0 + (j + 1) * g.spacing;
    for (int i = 0; i < n; ++i) {
      double x = -1.0 + (i + 1) * g.spacing;
      bool in_disk = x * x + y * y < 1.0;
      bool in_hole = (x + 0.3) * (x + 0.3) + (y + 0.3) * (y + 0.3) <= 0.04;
      if (in_disk && !in_hole) g.mask[static_cast<size_t>(j) * n + i] = 1;
    }
  }
  return g;
}

/// Unit square with a centered square hole of the given half-width,
/// rasterized on an n x n lattice over (0,1)^2.
inline GridDomain make_square_hole_grid(int n, double hole_half_width) {
  if (n < 4) fail(Errc::InvalidArgument, "make_square_hole_grid: lattice too coarse");
  GridDomain g;
  g.nx = g.ny = n;
  g.spacing = 1.0 / (n + 1);
  g.mask.assign(static_cast<size_t>(n) * n, 0);
  for (int j = 0; j < n; ++j) {
    double y = (j + 1) * g.spacing;
    for (int i = 0; i < n; ++i) {
      double x = (i + 1) * g.spacing;
      bool in_hole =
          std::abs(x - 0.5) < hole_half_width && std::abs(y - 0.5) < hole_half_width;
      if (!in_hole) g.mask[static_cast<size_t>(j) * n + i] = 1;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// sparse operators
// ---------------------------------------------------------------------------

enum class OperatorProvenance { FdFivePoint, Ingested };

/// A symmetric operator with its origin. Ingested operators may carry a mass
/// matrix; the generalized pencil is honored by spectrum queries only (the
/// nonlinear drivers require an identity mass).
struct SparseOperator {
  Index n = 0;
  SpMat A;
  std::optional<SpMat> mass;
  OperatorProvenance provenance = OperatorProvenance::FdFivePoint;
};

namespace detail {

inline void require_symmetric_sparse(const SpMat& A, double tol, const char* where) {
  SpMat D = SpMat(A.transpose()) - A;
  double scale = 1.0;
  for (int k = 0; k < A.outerSize(); ++k)
    for (SpMat::InnerIterator it(A, k); it; ++it) scale = std::max(scale, std::abs(it.value()));
  for (int k = 0; k < D.outerSize(); ++k)
    for (SpMat::InnerIterator it(D, k); it; ++it)
      if (std::abs(it.value()) > tol * scale)
        fail(Errc::NotSymmetric, std::string(where) + ": operator is not symmetric");
}

/// Certified lower bound on the spectrum of a symmetric sparse matrix
/// (Gershgorin), for use as a shift-invert anchor.
inline double gershgorin_floor(const SpMat& A) {
  Index n = A.rows();
  std::vector<double> diag(n, 0.0), off(n, 0.0);
  for (int k = 0; k < A.outerSize(); ++k)
    for (SpMat::InnerIterator it(A, k); it; ++it) {
      if (it.row() == it.col())
        diag[it.row()] += it.value();
      else
        off[it.row()] += std::abs(it.value());
    }
  double lo = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < n; ++i) lo = std::min(lo, diag[i] - off[i]);
  return lo;
}

}  // namespace detail

/// Standard 5-point Dirichlet Laplacian on the masked interior nodes. A
/// degenerate lattice direction (extent 1) is treated as absent, so a 1 x n
/// strip assembles the classical second-difference tridiagonal operator.
inline SparseOperator build_fd_laplacian(const GridDomain& grid) {
  Index n = grid.dof_count();
  if (n < 1) fail(Errc::DisconnectedDomain, "build_fd_laplacian: mask has no interior nodes");
  std::vector<int> dof = grid.dof_map();

  // connectivity: BFS over 4-neighbor adjacency within the mask
  {
    std::vector<std::uint8_t> seen(grid.mask.size(), 0);
    std::queue<std::pair<int, int>> q;
    for (int j = 0; j < grid.ny && q.empty(); ++j)
      for (int i = 0; i < grid.nx && q.empty(); ++i)
        if (grid.inside(i, j)) {
          q.emplace(i, j);
          seen[static_cast<size_t>(j) * grid.nx + i] = 1;
        }
    Index reached = 0;
    while (!q.empty()) {
      auto [i, j] = q.front();
      q.pop();
      ++reached;
      const int di[4] = {1, -1, 0, 0}, dj[4] = {0, 0, 1, -1};
      for (int d = 0; d < 4; ++d) {
        int ii = i + di[d], jj = j + dj[d];
        if (!grid.inside(ii, jj)) continue;
        std::uint8_t& s = seen[static_cast<size_t>(jj) * grid.nx + ii];
        if (s) continue;
        s = 1;
        q.emplace(ii, jj);
      }
    }
    if (reached != n)
      fail(Errc::DisconnectedDomain, "build_fd_laplacian: mask is not connected");
  }

  double w = 1.0 / (grid.spacing * grid.spacing);
  bool use_x = grid.nx > 1, use_y = grid.ny > 1;
  double diag = 2.0 * w * ((use_x ? 1.0 : 0.0) + (use_y ? 1.0 : 0.0));
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(5 * n));
  for (int j = 0; j < grid.ny; ++j)
    for (int i = 0; i < grid.nx; ++i) {
      if (!grid.inside(i, j)) continue;
      int r = dof[static_cast<size_t>(j) * grid.nx + i];
      trip.emplace_back(r, r, diag);
      auto couple = [&](int ii, int jj) {
        if (grid.inside(ii, jj))
          trip.emplace_back(r, dof[static_cast<size_t>(jj) * grid.nx + ii], -w);
      };
      if (use_x) {
        couple(i - 1, j);
        couple(i + 1, j);
      }
      if (use_y) {
        couple(i, j - 1);
        couple(i, j + 1);
      }
    }
  SparseOperator op;
  op.n = n;
  op.A.resize(n, n);
  op.A.setFromTriplets(trip.begin(), trip.end());
  op.A.makeCompressed();
  op.provenance = OperatorProvenance::FdFivePoint;
  return op;
}

// ---------------------------------------------------------------------------
// coordinate-format (Matrix Market) ingest / export
// ---------------------------------------------------------------------------

/// Write a symmetric operator in coordinate format (lower triangle).
inline void export_operator(const SparseOperator& op, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(Errc::BadFormat, "export_operator: cannot open " + path);
  Index nnz = 0;
  std::ostringstream body;
  body.precision(17);
  for (int k = 0; k < op.A.outerSize(); ++k)
    for (SpMat::InnerIterator it(op.A, k); it; ++it)
      if (it.row() >= it.col()) {
        body << (it.row() + 1) << ' ' << (it.col() + 1) << ' ' << it.value() << '\n';
        ++nnz;
      }
  out << "%%MatrixMarket matrix coordinate real symmetric\n";
  out << op.n << ' ' << op.n << ' ' << nnz << '\n';
  out << body.str();
  if (!out) fail(Errc::BadFormat, "export_operator: write failed for " + path);
}

namespace detail {

inline SpMat read_coordinate_matrix(const std::string& path, const char* where) {
  std::ifstream in(path);
  if (!in) fail(Errc::BadFormat, std::string(where) + ": cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) fail(Errc::BadFormat, std::string(where) + ": empty file");
  std::istringstream hs(header);
  std::string banner, object, format, field, symmetry;
  hs >> banner >> object >> format >> field >> symmetry;
  if (banner != "%%MatrixMarket" || object != "matrix" || format != "coordinate")
    fail(Errc::BadFormat, std::string(where) + ": expected a coordinate-format matrix header");
  if (field != "real" && field != "integer")
    fail(Errc::BadFormat, std::string(where) + ": only real-valued operators are supported");
  bool sym_header = symmetry == "symmetric";
  if (!sym_header && symmetry != "general")
    fail(Errc::BadFormat, std::string(where) + ": unsupported symmetry '" + symmetry + "'");

  std::string line;
  long rows = -1, cols = -1, nnz = -1;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '%') continue;
    std::istringstream ls(line);
    if (!(ls >> rows >> cols >> nnz))
      fail(Errc::BadFormat, std::string(where) + ": malformed size line");
    break;
  }
  if (rows < 1 || cols < 1 || nnz < 0)
    fail(Errc::BadFormat, std::string(where) + ": missing or invalid size line");
  if (rows != cols) fail(Errc::BadFormat, std::string(where) + ": operator must be square");

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(sym_header ? 2 * nnz : nnz));
  long read = 0;
  while (read < nnz && std::getline(in, line)) {
    if (line.empty() || line[0] == '%') continue;
    std::istringstream ls(line);
    long i = 0, j = 0;
    double v = 0.0;
    if (!(ls >> i >> j >> v))
      fail(Errc::BadFormat, std::string(where) + ": malformed entry line '" + line + "'");
    if (i < 1 || i > rows || j < 1 || j > cols)
      fail(Errc::BadFormat, std::string(where) + ": entry index out of range");
    trip.emplace_back(static_cast<int>(i - 1), static_cast<int>(j - 1), v);
    if (sym_header && i != j)
      trip.emplace_back(static_cast<int>(j - 1), static_cast<int>(i - 1), v);
    ++read;
  }
  if (read != nnz)
    fail(Errc::BadFormat, std::string(where) + ": fewer entries than the size line promised");
  SpMat A(rows, cols);
  A.setFromTriplets(trip.begin(), trip.end());
  A.makeCompressed();
  return A;
}

}  // namespace detail

/// Read a symmetric operator (optionally with a mass matrix) from coordinate
/// files. General-symmetry files are verified entrywise; asymmetry raises
/// NotSymmetric, parse problems raise BadFormat.
inline SparseOperator ingest_operator(const std::string& path, const std::string& mass_path = "") {
  SparseOperator op;
  op.A = detail::read_coordinate_matrix(path, "ingest_operator");
  detail::require_symmetric_sparse(op.A, 1e-12, "ingest_operator");
  op.n = op.A.rows();
  op.provenance = OperatorProvenance::Ingested;
  if (!mass_path.empty()) {
    SpMat M = detail::read_coordinate_matrix(mass_path, "ingest_operator(mass)");
    if (M.rows() != op.n)
      fail(Errc::BadFormat, "ingest_operator: mass matrix dimension mismatch");
    detail::require_symmetric_sparse(M, 1e-12, "ingest_operator(mass)");
    op.mass = std::move(M);
  }
  return op;
}

// ---------------------------------------------------------------------------
// spectrum queries
// ---------------------------------------------------------------------------

/// Smallest m eigenvalues (ascending) of the operator, honoring the mass
/// pencil A x = lambda M x when one was ingested. Eigenvectors are unit norm
/// with deterministic sign.
inline std::vector<double> operator_spectrum(const SparseOperator& op, int m,
                                             std::vector<Vector>* vectors = nullptr) {
  if (m < 1 || static_cast<Index>(m) > op.n)
    fail(Errc::InvalidArgument, "operator_spectrum: m out of range");
  if (op.mass) {
    if (op.n > 4096)
      fail(Errc::InvalidArgument, "operator_spectrum: mass pencil requires dense solve (n too large)");
    Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(Matrix(op.A), Matrix(*op.mass));
    if (es.info() != Eigen::Success)
      fail(Errc::ConvergenceFailure, "operator_spectrum: generalized eigensolver failed");
    std::vector<double> out(es.eigenvalues().data(), es.eigenvalues().data() + m);
    if (vectors) {
      vectors->clear();
      for (int i = 0; i < m; ++i) {
        Vector v = es.eigenvectors().col(i).normalized();
        detail::stabilize_sign(v);
        vectors->push_back(std::move(v));
      }
    }
    return out;
  }
  double sigma = detail::gershgorin_floor(op.A) - 1.0;
  return smallest_eigenvalues(op.A, m, sigma, {}, vectors);
}

/// Ground state of the operator: smallest eigenvalue and its eigenvector,
/// flipped positive. fd-5point operators must produce a uniform-sign vector.
struct GroundState {
  double lambda1 = 0.0;
  Vector phi1;
};

inline GroundState ground_state(const SparseOperator& op) {
  std::vector<Vector> vecs;
  std::vector<double> lam = operator_spectrum(op, 1, &vecs);
  GroundState gs;
  gs.lambda1 = lam[0];
  gs.phi1 = vecs[0];
  double top = gs.phi1.lpNorm<Eigen::Infinity>();
  double mn = gs.phi1.minCoeff(), mx = gs.phi1.maxCoeff();
  if (std::abs(mn) > std::abs(mx)) gs.phi1 = -gs.phi1;  // majority-positive
  if (op.provenance == OperatorProvenance::FdFivePoint && gs.phi1.minCoeff() < -1e-10 * top)
    fail(Errc::ConvergenceFailure, "ground_state: fd ground state is not of uniform sign");
  return gs;
}

// ---------------------------------------------------------------------------
// the semilinear map
// ---------------------------------------------------------------------------

/// F(u) = A u - f(u), the nonlinearity applied nodally. Requires an identity
/// mass (spectrum queries are the only consumers of an ingested pencil).
inline MapHandle make_elliptic_map(const SparseOperator& op, const ALNonlinearity& nl) {
  if (op.mass)
    fail(Errc::InvalidArgument,
         "make_elliptic_map: nonlinear drivers require an identity mass matrix");
  MapHandle m;
  m.n = op.n;
  m.symmetric = true;
  SpMat A = op.A;
  m.eval = [A, nl](const Vector& u) {
    Vector out = A * u;
    for (Index i = 0; i < u.size(); ++i) out(i) -= nl.value(u(i));
    return out;
  };
  m.jac = [A, nl](const Vector& u) {
    Matrix J = Matrix(A);
    for (Index i = 0; i < u.size(); ++i) J(i, i) -= nl.slope(u(i));
    return J;
  };
  m.sparse_jac = [A, nl](const Vector& u) {
    SpMat J = A;
    for (Index i = 0; i < u.size(); ++i) J.coeffRef(i, i) -= nl.slope(u(i));
    J.makeCompressed();
    return J;
  };
  return m;
}

// ---------------------------------------------------------------------------
// vertical-line spectrum scans
// ---------------------------------------------------------------------------

struct ScanSample {
  double t = 0.0;
  std::vector<double> lambdas;  // ascending
};

struct ScanCrossing {
  int branch = 0;  // eigenvalue index (0-based)
  double t = 0.0;
};

struct VerticalScan {
  Vector base;
  Vector direction;  // the operator's ground state, unit and positive
  std::vector<ScanSample> samples;
  std::vector<ScanCrossing> crossings;
  bool degenerate = false;  // a branch hugged zero instead of crossing it
};

/// Sample the first m eigenvalues of DF(base + t*phi_1) = A - diag(f'(.))
/// over a uniform t-grid and localize every zero crossing per eigenvalue
/// branch by bisection.
inline VerticalScan vertical_scan(const SparseOperator& op, const ALNonlinearity& nl,
                                  const Vector& base, double t_lo, double t_hi, int m,
                                  int samples) {
  if (op.mass)
    fail(Errc::InvalidArgument, "vertical_scan: spectra along lines require an identity mass");
  if (base.size() != op.n) fail(Errc::InvalidArgument, "vertical_scan: base dimension mismatch");
  if (!(t_lo < t_hi)) fail(Errc::InvalidArgument, "vertical_scan: need t_lo < t_hi");
  if (samples < 2) fail(Errc::InvalidArgument, "vertical_scan: need at least two samples");
  if (m < 1 || static_cast<Index>(m) > op.n)
    fail(Errc::InvalidArgument, "vertical_scan: m out of range");

  VerticalScan scan;
  scan.base = base;
  scan.direction = ground_state(op).phi1;

  double slope_cap = std::max(std::abs(nl.ell_minus()), std::abs(nl.ell_plus()));
  double sigma = detail::gershgorin_floor(op.A) - slope_cap - 1.0;
  auto spectrum_at = [&](double t) {
    Vector u = scan.base + t * scan.direction;
    SpMat J = op.A;
    for (Index i = 0; i < op.n; ++i) J.coeffRef(i, i) -= nl.slope(u(i));
    J.makeCompressed();
    return smallest_eigenvalues(J, m, sigma);
  };

  for (int s = 0; s < samples; ++s) {
    ScanSample smp;
    smp.t = t_lo + (t_hi - t_lo) * s / (samples - 1);
    smp.lambdas = spectrum_at(smp.t);
    scan.samples.push_back(std::move(smp));
  }

  const double ztol = 1e-11;
  for (int i = 0; i < m; ++i) {
    for (int s = 0; s + 1 < samples; ++s) {
      double a = scan.samples[s].lambdas[i], b = scan.samples[s + 1].lambdas[i];
      if (std::abs(a) <= ztol && std::abs(b) <= ztol) {
        scan.degenerate = true;  // branch rides zero: no isolated crossing
        continue;
      }
      if (a * b >= 0.0) continue;
      double lo = scan.samples[s].t, hi = scan.samples[s + 1].t;
      double fa = a;
      for (int it = 0; it < 80 && (hi - lo) > 1e-10 * (1.0 + std::abs(lo)); ++it) {
        double mid = 0.5 * (lo + hi);
        double fm = spectrum_at(mid)[i];
        if (fm == 0.0) {
          lo = hi = mid;
          break;
        }
        if ((fm > 0.0) == (fa > 0.0)) {
          lo = mid;
          fa = fm;
        } else {
          hi = mid;
        }
      }
      scan.crossings.push_back({i, 0.5 * (lo + hi)});
    }
  }
  std::sort(scan.crossings.begin(), scan.crossings.end(),
            [](const ScanCrossing& x, const ScanCrossing& y) {
              return x.branch != y.branch ? x.branch < y.branch : x.t < y.t;
            });
  return scan;
}

// ---------------------------------------------------------------------------
// the load-line experiment
// ---------------------------------------------------------------------------

struct SoliminiConfig {
  double s_min = -1000.0, s_max = 1000.0;  // diagram line range
  int homotopy_steps = 4;                  // load ramp toward g = -t*phi_1
  int scan_samples = 101;
  double scan_t_lo = 0.0, scan_t_hi = 0.0;  // equal = derive from the load
  DiagramConfig diagram;                    // step sizes are rescaled to the range
  bool autoscale_steps = true;
};

struct SoliminiResult {
  BifurcationDiagram diagram;  // diagram.solutions holds the harvested set
  VerticalScan scan;
  Vector g;
  Vector p0;
  int enclosed = 0;  // eigenvalues of op inside (ell_minus, ell_plus)
};

/// Recover the solutions of A u - f(u) = -t_load*phi_1: ramp the load with
/// damped Newton from the linearized seed to a first solution P0, build the
/// bifurcation diagram along the perturbed vertical line through P0, and
/// record the Fig.-9-style eigenvalue scan along the exact vertical line.
inline SoliminiResult run_solimini_experiment(const SparseOperator& op, const ALNonlinearity& nl,
                                              double t_load, SoliminiConfig cfg = {}) {
  if (op.mass)
    fail(Errc::InvalidArgument, "run_solimini_experiment: requires an identity mass matrix");
  if (!(t_load > 0.0)) fail(Errc::InvalidArgument, "run_solimini_experiment: t_load must be > 0");
  double lm = nl.ell_minus(), lp = nl.ell_plus();

  // enclosed-eigenvalue count k and the first max(k+1, 3) eigenpairs
  int want = static_cast<int>(std::min<Index>(op.n, 8));
  std::vector<Vector> vecs;
  std::vector<double> lam = operator_spectrum(op, want, &vecs);
  while (lam.back() <= lp && static_cast<Index>(want) < op.n) {
    want = static_cast<int>(std::min<Index>(op.n, 2 * want));
    lam = operator_spectrum(op, want, &vecs);
  }
  if (lam.back() <= lp)
    fail(Errc::InvalidArgument, "run_solimini_experiment: ell_plus clears the whole spectrum");
  int k = 0;
  for (double l : lam)
    if (lm < l && l < lp) ++k;
  if (!(lm < lam[0]))
    fail(Errc::InvalidArgument, "run_solimini_experiment: ell_minus must sit below lambda_1");

  SoliminiResult R;
  R.enclosed = k;
  GroundState gs;
  gs.lambda1 = lam[0];
  gs.phi1 = vecs[0];
  if (std::abs(gs.phi1.minCoeff()) > std::abs(gs.phi1.maxCoeff())) gs.phi1 = -gs.phi1;
  R.g = -t_load * gs.phi1;

  MapHandle map = make_elliptic_map(op, nl);

  // load ramp: linearized seed at the first stage, then damped Newton
  NewtonOptions nopt;
  nopt.damped = true;
  nopt.max_iter = 300;
  Vector u;
  for (int stage = 1; stage <= std::max(1, cfg.homotopy_steps); ++stage) {
    double tau = t_load * stage / std::max(1, cfg.homotopy_steps);
    Vector gj = -tau * gs.phi1;
    Vector seed = stage == 1 ? Vector((tau / (lp - gs.lambda1)) * gs.phi1) : u;
    auto r = newton_solve(map, gj, seed, nopt);
    if (!r)
      fail(Errc::NoInitialSolution,
           "run_solimini_experiment: load ramp lost the solution branch");
    u = *r;
  }
  R.p0 = u;

  // perturbed vertical line through P0 (small transversality terms)
  Vector dir = 0.8 * gs.phi1;
  if (vecs.size() > 1) dir -= 0.1 * vecs[1];
  if (vecs.size() > 2) dir -= 0.1 * vecs[2];
  LineSpec line;
  line.base = R.p0;
  line.direction = dir;
  line.s_min = cfg.s_min;
  line.s_max = cfg.s_max;
  line.description = "perturbed vertical line through P0";

  DiagramConfig dcfg = cfg.diagram;
  if (cfg.autoscale_steps) {
    double span = line.s_max - line.s_min;
    dcfg.step.max_step = std::max(dcfg.step.max_step, span / 100.0);
    dcfg.step.initial_step = std::max(dcfg.step.initial_step, span / 2000.0);
    dcfg.step.min_step = std::max(dcfg.step.min_step, 1e-4 * span / 100.0);
    dcfg.step.max_points = std::max(dcfg.step.max_points, 40000);
  }
  R.diagram = build_diagram(map, line, R.g, dcfg);

  // Fig. 9 analog: eigenvalues of DF along the exact vertical line through P0
  double lo = cfg.scan_t_lo, hi = cfg.scan_t_hi;
  if (!(lo < hi)) {
    double d_minus = gs.lambda1 - lm;  // > 0, checked above
    if (lp > gs.lambda1) {
      lo = -1.5 * t_load * (1.0 / d_minus + 1.0 / (lp - gs.lambda1));
      hi = 0.5 * t_load / (lp - gs.lambda1);
    } else {
      // no enclosure from above (flat or sub-lambda_1 slope): symmetric window
      lo = -3.0 * t_load / d_minus;
      hi = 3.0 * t_load / d_minus;
    }
  }
  R.scan = vertical_scan(op, nl, R.p0, lo, hi, k + 1, cfg.scan_samples);
  return R;
}

}  // namespace preim
