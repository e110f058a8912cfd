#include <preim/grid.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

using namespace preim;

namespace {

std::string tmp_path(const std::string& name) { return "/tmp/preim_grid_" + name; }

void write_file(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  out << body;
}

std::vector<int> morse_multiset(const SolutionSet& s) {
  std::vector<int> m;
  for (const auto& it : s.items) m.push_back(it.morse);
  std::sort(m.begin(), m.end());
  return m;
}

/// Dense symmetric operator with a prescribed leading spectrum and an exactly
/// uniform (hence positive) ground state: Q from a QR of [1 | gaussian],
/// A = Q diag(d) Q^T. Stands in for an externally assembled problem whose
/// low eigenvalues are known.
SparseOperator designed_operator(int n, const std::vector<double>& leading) {
  std::mt19937 rng(20260818u);
  std::normal_distribution<double> nd;
  Matrix B(n, n);
  B.col(0).setOnes();
  for (int j = 1; j < n; ++j)
    for (int i = 0; i < n; ++i) B(i, j) = nd(rng);
  Eigen::HouseholderQR<Matrix> qr(B);
  Matrix Q = qr.householderQ() * Matrix::Identity(n, n);
  if (Q(0, 0) < 0) Q = -Q;
  Vector d(n);
  for (size_t i = 0; i < leading.size(); ++i) d(static_cast<Index>(i)) = leading[i];
  for (int i = static_cast<int>(leading.size()); i < n; ++i)
    d(i) = 40.0 + 6.0 * (i - static_cast<int>(leading.size()));
  Matrix A = Q * d.asDiagonal() * Q.transpose();
  SparseOperator op;
  op.n = n;
  op.A = A.sparseView(1.0, 1e-18);
  op.A.makeCompressed();
  op.provenance = OperatorProvenance::Ingested;
  return op;
}

}  // namespace

TEST_CASE("strip grids assemble the interval operator exactly", "[grid]") {
  for (int n : {5, 31}) {
    TridiagonalOperator tri((MeshSpec(n)));
    GridDomain row = make_rect_grid(n, 1, M_PI / (n + 1));
    GridDomain col = make_rect_grid(1, n, M_PI / (n + 1));
    Matrix dr = Matrix(build_fd_laplacian(row).A) - tri.dense();
    Matrix dc = Matrix(build_fd_laplacian(col).A) - tri.dense();
    REQUIRE(dr.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(dc.cwiseAbs().maxCoeff() == 0.0);
  }
  REQUIRE_THROWS_AS(make_rect_grid(0, 3, 0.1), Error);
  REQUIRE_THROWS_AS(make_rect_grid(3, 3, 0.0), Error);
}

TEST_CASE("unit square ground eigenvalue approaches the continuum value", "[grid]") {
  GridDomain sq = make_rect_grid(64, 64, 1.0 / 65);
  SparseOperator op = build_fd_laplacian(sq);
  REQUIRE(op.n == 4096);
  double l1 = operator_spectrum(op, 1)[0];
  double target = 2.0 * M_PI * M_PI;
  REQUIRE(std::abs(l1 - target) / target < 0.02);  // discretization bound
  REQUIRE(l1 == Catch::Approx(19.735367).margin(1e-4));
}

TEST_CASE("removing a hole raises the ground eigenvalue", "[grid]") {
  double l_full = operator_spectrum(build_fd_laplacian(make_rect_grid(32, 32, 1.0 / 33)), 1)[0];
  GridDomain hole = make_square_hole_grid(32, 0.25);
  SparseOperator hop = build_fd_laplacian(hole);
  REQUIRE(hop.n == 1024 - 256);  // the mask removes the centered block
  double l_hole = operator_spectrum(hop, 1)[0];
  REQUIRE(l_hole > l_full);
}

TEST_CASE("masks without interior nodes or connectivity are rejected", "[grid]") {
  GridDomain empty = make_rect_grid(4, 4, 0.1);
  std::fill(empty.mask.begin(), empty.mask.end(), 0);
  REQUIRE_THROWS_MATCHES(build_fd_laplacian(empty), Error, Catch::Matchers::Predicate<Error>([](
      const Error& e) { return e.code() == Errc::DisconnectedDomain; }));

  GridDomain split = make_rect_grid(5, 1, 0.1);
  split.mask[2] = 0;  // two separated segments
  REQUIRE_THROWS_MATCHES(build_fd_laplacian(split), Error, Catch::Matchers::Predicate<Error>([](
      const Error& e) { return e.code() == Errc::DisconnectedDomain; }));

  GridDomain corner = make_rect_grid(2, 2, 0.1);
  corner.mask = {1, 0, 0, 1};  // diagonal touch is not 4-adjacency
  REQUIRE_THROWS_AS(build_fd_laplacian(corner), Error);
}

TEST_CASE("annulus grids have the recorded sizes and spectra", "[grid]") {
  GridDomain g16 = make_annulus_grid(16);
  SparseOperator op16 = build_fd_laplacian(g16);
  REQUIRE(op16.n == 207);
  auto lam = operator_spectrum(op16, 4);
  REQUIRE(lam[0] == Catch::Approx(8.1060).margin(5e-4));
  REQUIRE(lam[1] == Catch::Approx(14.6668).margin(5e-4));
  REQUIRE(lam[2] == Catch::Approx(20.1355).margin(5e-4));
  REQUIRE(lam[3] == Catch::Approx(26.4657).margin(5e-4));

  SparseOperator op32 = build_fd_laplacian(make_annulus_grid(32));
  REQUIRE(op32.n == 816);
  REQUIRE(operator_spectrum(op32, 1)[0] == Catch::Approx(8.294148).margin(1e-5));
}

TEST_CASE("ground state is strictly positive", "[grid]") {
  for (int n : {16, 32}) {
    GroundState gs = ground_state(build_fd_laplacian(make_annulus_grid(n)));
    REQUIRE(gs.phi1.minCoeff() > 0.0);
    REQUIRE(gs.phi1.norm() == Catch::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("coordinate files round-trip the operator spectrum", "[grid]") {
  SparseOperator op = build_fd_laplacian(make_annulus_grid(16));
  std::string path = tmp_path("roundtrip.mtx");
  export_operator(op, path);
  SparseOperator in = ingest_operator(path);
  REQUIRE(in.provenance == OperatorProvenance::Ingested);
  REQUIRE(in.n == op.n);
  auto a = operator_spectrum(op, 8);
  auto b = operator_spectrum(in, 8);
  for (int i = 0; i < 8; ++i) REQUIRE(b[i] == Catch::Approx(a[i]).margin(1e-12 * (1.0 + a[i])));
}

TEST_CASE("asymmetric and malformed operator files are rejected", "[grid]") {
  auto code_of = [](const std::string& path) {
    try {
      ingest_operator(path);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::InvalidArgument;
  };

  std::string p1 = tmp_path("asym.mtx");
  write_file(p1,
             "%%MatrixMarket matrix coordinate real general\n"
             "2 2 3\n1 1 4.0\n1 2 1.0\n2 2 4.0\n");
  REQUIRE(code_of(p1) == Errc::NotSymmetric);

  std::string p2 = tmp_path("badheader.mtx");
  write_file(p2, "%%MatrixMarket matrix array real general\n2 2\n1\n0\n0\n1\n");
  REQUIRE(code_of(p2) == Errc::BadFormat);

  std::string p3 = tmp_path("truncated.mtx");
  write_file(p3, "%%MatrixMarket matrix coordinate real symmetric\n3 3 3\n1 1 2.0\n2 2 2.0\n");
  REQUIRE(code_of(p3) == Errc::BadFormat);

  std::string p4 = tmp_path("nonsquare.mtx");
  write_file(p4, "%%MatrixMarket matrix coordinate real general\n2 3 1\n1 1 1.0\n");
  REQUIRE(code_of(p4) == Errc::BadFormat);

  std::string p5 = tmp_path("badentry.mtx");
  write_file(p5, "%%MatrixMarket matrix coordinate real symmetric\n2 2 1\n5 5 1.0\n");
  REQUIRE(code_of(p5) == Errc::BadFormat);

  REQUIRE(code_of(tmp_path("does_not_exist.mtx")) == Errc::BadFormat);
}

TEST_CASE("ingested mass pencils drive generalized spectra only", "[grid]") {
  // A x = lambda M x with M = 2 I halves every eigenvalue
  TridiagonalOperator tri((MeshSpec(6)));
  SparseOperator a;
  a.n = 6;
  a.A = tri.sparse();
  std::string pa = tmp_path("pencil_a.mtx"), pm = tmp_path("pencil_m.mtx");
  export_operator(a, pa);
  SparseOperator m;
  m.n = 6;
  SpMat M(6, 6);
  M.setIdentity();
  m.A = 2.0 * M;
  export_operator(m, pm);

  SparseOperator pencil = ingest_operator(pa, pm);
  REQUIRE(pencil.mass.has_value());
  auto lam = operator_spectrum(pencil, 3);
  for (int k = 1; k <= 3; ++k)
    REQUIRE(lam[k - 1] == Catch::Approx(0.5 * tri.eigenvalue(k)).epsilon(1e-12));

  ALNonlinearity nl = calibrate_arctan(-1.0, 5.0);
  REQUIRE_THROWS_AS(make_elliptic_map(pencil, nl), Error);
  Vector zero = Vector::Zero(6);
  REQUIRE_THROWS_AS(vertical_scan(pencil, nl, zero, -1.0, 1.0, 2, 5), Error);
}

TEST_CASE("semilinear map evaluation and jacobians are consistent", "[grid]") {
  SparseOperator op = build_fd_laplacian(make_annulus_grid(12));
  ALNonlinearity nl = calibrate_arctan(-1.0, 17.0);
  MapHandle map = make_elliptic_map(op, nl);
  REQUIRE(map.symmetric);
  REQUIRE(map.has_sparse());

  std::mt19937 rng(7u);
  std::normal_distribution<double> nd;
  Vector u(op.n);
  for (Index i = 0; i < op.n; ++i) u(i) = 3.0 * nd(rng);

  Vector manual = op.A * u;
  for (Index i = 0; i < op.n; ++i) manual(i) -= nl.value(u(i));
  REQUIRE((map.eval(u) - manual).norm() <= 1e-12 * (1.0 + manual.norm()));
  REQUIRE((Matrix(map.sparse_jac(u)) - map.jac(u)).cwiseAbs().maxCoeff() <= 1e-14);

  // finite-difference check of one jacobian column
  double h = 1e-6;
  Vector e = Vector::Zero(op.n);
  e(5) = 1.0;
  Vector fd_col = (map.eval(u + h * e) - map.eval(u - h * e)) / (2.0 * h);
  REQUIRE((map.jac(u).col(5) - fd_col).norm() <= 1e-5 * (1.0 + fd_col.norm()));
}

TEST_CASE("vertical scans count the enclosed eigenvalues", "[grid][scan]") {
  SparseOperator op = build_fd_laplacian(make_annulus_grid(32));
  auto lam = operator_spectrum(op, 4);
  Vector base = Vector::Zero(op.n);

  const double expected_t[3][3] = {
      {17.616802, 0, 0}, {-0.551323, 55.022641, 0}, {-8.590024, 11.419067, 73.443730}};
  for (int k : {1, 2, 3}) {
    double lp = 0.5 * (lam[k - 1] + lam[k]);
    ALNonlinearity nl = calibrate_arctan(-1.0, lp);
    VerticalScan scan = vertical_scan(op, nl, base, -2000.0, 2000.0, k + 1, 81);
    CAPTURE(k, lp);
    REQUIRE(static_cast<int>(scan.crossings.size()) == k);
    REQUIRE_FALSE(scan.degenerate);
    // one crossing per enclosed branch, none on branch k
    for (int i = 0; i < k; ++i) {
      REQUIRE(scan.crossings[i].branch == i);
      REQUIRE(scan.crossings[i].t == Catch::Approx(expected_t[k - 1][i]).margin(1e-4));
    }
    // strictly decreasing branches, sorted samples
    for (size_t s = 0; s + 1 < scan.samples.size(); ++s)
      for (int b = 0; b <= k; ++b) {
        REQUIRE(scan.samples[s].lambdas[b] > scan.samples[s + 1].lambdas[b]);
        if (b > 0) REQUIRE(scan.samples[s].lambdas[b - 1] <= scan.samples[s].lambdas[b]);
      }
    REQUIRE(scan.direction.minCoeff() > 0.0);
  }
}

TEST_CASE("a constant slope produces flat branches and a degenerate flag", "[grid][scan]") {
  SparseOperator op = build_fd_laplacian(make_annulus_grid(12));
  auto lam = operator_spectrum(op, 2);
  ALNonlinearity flat{0.0, lam[0]};  // f'(x) = lambda_1 everywhere
  Vector base = Vector::Zero(op.n);
  VerticalScan scan = vertical_scan(op, flat, base, -50.0, 50.0, 2, 21);
  REQUIRE(scan.degenerate);
  REQUIRE(scan.crossings.empty());
  for (const ScanSample& s : scan.samples) {
    REQUIRE(std::abs(s.lambdas[0]) <= 1e-9);
    REQUIRE(s.lambdas[1] == Catch::Approx(lam[1] - lam[0]).margin(1e-9));
  }
}

TEST_CASE("scan crossings coincide with the diagram's singular events", "[grid][scan]") {
  SparseOperator op = build_fd_laplacian(make_annulus_grid(12));
  auto lam = operator_spectrum(op, 3);
  double lp = 0.5 * (lam[1] + lam[2]);  // two enclosed eigenvalues
  ALNonlinearity nl = calibrate_arctan(-1.0, lp);
  GroundState gs = ground_state(op);
  MapHandle map = make_elliptic_map(op, nl);

  double tload = 300.0;
  Vector g = -tload * gs.phi1;
  NewtonOptions nopt;
  nopt.damped = true;
  nopt.max_iter = 300;
  Vector seed = (tload / (lp - gs.lambda1)) * gs.phi1;
  auto p0 = newton_solve(map, g, seed, nopt);
  REQUIRE(p0.has_value());

  LineSpec line;
  line.base = *p0;
  line.direction = gs.phi1;
  line.s_min = -800;
  line.s_max = 800;
  DiagramConfig dcfg;
  dcfg.step.max_step = 16.0;
  dcfg.step.initial_step = 0.8;
  dcfg.step.min_step = 1e-3;
  dcfg.step.max_points = 40000;
  dcfg.step.fold_tol = 1e-8;  // localization to ~1e-8/|dlambda/dt| in t
  BifurcationDiagram dia = build_diagram(map, line, g, dcfg);

  VerticalScan scan = vertical_scan(op, nl, *p0, -800.0, 800.0, 3, 81);
  REQUIRE(scan.crossings.size() == 2);

  // singular root events: probe actually vanished there (kinks are
  // modulus-identity switches of the smallest-modulus probe, not roots)
  std::vector<double> singular;
  for (const FoldEvent& f : dia.folds)
    if (f.branch_id == 0 && std::abs(f.lambda) <= 1e-6) singular.push_back(f.t);
  REQUIRE(singular.size() == 2);

  for (const ScanCrossing& c : scan.crossings) {
    double best = 1e300;
    for (double s : singular) best = std::min(best, std::abs(s - c.t));
    REQUIRE(best <= 1e-6);
  }
}

TEST_CASE("load experiment with one enclosed eigenvalue finds the pair", "[grid][solimini]") {
  SparseOperator op = build_fd_laplacian(make_annulus_grid(16));
  auto lam = operator_spectrum(op, 2);
  ALNonlinearity nl = calibrate_arctan(-1.0, 0.5 * (lam[0] + lam[1]));
  SoliminiConfig cfg;
  cfg.scan_samples = 41;
  SoliminiResult R = run_solimini_experiment(op, nl, 200.0, cfg);
  REQUIRE(R.enclosed == 1);
  REQUIRE(R.diagram.solutions.items.size() == 2);
  REQUIRE(morse_multiset(R.diagram.solutions) == std::vector<int>{0, 1});
  for (const auto& it : R.diagram.solutions.items) REQUIRE(it.residue <= 1e-10);
  // the ramp solution is itself on the diagram
  double dmin = 1e300;
  for (const auto& it : R.diagram.solutions.items) dmin = std::min(dmin, (it.u - R.p0).norm());
  REQUIRE(dmin <= 1e-6 * (1.0 + R.p0.norm()));
}

TEST_CASE("load experiment with three enclosed eigenvalues finds six solutions",
          "[grid][solimini][heavy]") {
  SparseOperator op = build_fd_laplacian(make_annulus_grid(16));
  auto lam = operator_spectrum(op, 4);
  ALNonlinearity nl = calibrate_arctan(-1.0, 0.5 * (lam[2] + lam[3]));
  SoliminiConfig cfg;
  cfg.scan_samples = 41;
  SoliminiResult R = run_solimini_experiment(op, nl, 1000.0, cfg);
  REQUIRE(R.enclosed == 3);
  REQUIRE(R.diagram.solutions.items.size() == 6);  // even and >= 4: fold pairs
  REQUIRE(morse_multiset(R.diagram.solutions) == std::vector<int>{0, 1, 1, 2, 2, 3});
  for (const auto& it : R.diagram.solutions.items) REQUIRE(it.residue <= 1e-10);
  REQUIRE_FALSE(R.diagram.budget_spent.exhausted);
  REQUIRE(!R.scan.samples.empty());
  for (const ScanSample& s : R.scan.samples)
    REQUIRE(std::is_sorted(s.lambdas.begin(), s.lambdas.end()));
}

TEST_CASE("ingested reference operator recovers all six solutions", "[grid][solimini][heavy]") {
  SparseOperator made =
      designed_operator(96, {9.0988, 16.3218, 22.9346, 30.4949});
  std::string path = tmp_path("reference_op.mtx");
  export_operator(made, path);
  SparseOperator op = ingest_operator(path);

  auto lam = operator_spectrum(op, 4);
  REQUIRE(lam[0] == Catch::Approx(9.0988).margin(1e-2));
  REQUIRE(lam[1] == Catch::Approx(16.3218).margin(1e-2));
  REQUIRE(lam[2] == Catch::Approx(22.9346).margin(1e-2));
  REQUIRE(lam[3] == Catch::Approx(30.4949).margin(1e-2));
  REQUIRE(lam[0] == Catch::Approx(9.0988).margin(1e-8));  // ingest is exact

  GroundState gs = ground_state(op);
  REQUIRE(gs.phi1.minCoeff() > 0.0);
  REQUIRE(gs.phi1.maxCoeff() - gs.phi1.minCoeff() <= 1e-10);

  ALNonlinearity nl = calibrate_arctan(-1.0, 25.3397);
  SoliminiConfig cfg;
  cfg.scan_samples = 61;
  SoliminiResult R = run_solimini_experiment(op, nl, 1000.0, cfg);
  REQUIRE(R.enclosed == 3);
  REQUIRE(R.diagram.solutions.items.size() == 6);
  REQUIRE(morse_multiset(R.diagram.solutions) == std::vector<int>{0, 1, 1, 2, 2, 3});
  for (const auto& it : R.diagram.solutions.items) REQUIRE(it.residue <= 1e-12);
  REQUIRE(R.scan.crossings.size() == 3);
}

TEST_CASE("zero slope reduces the experiment to one linear solve", "[grid][solimini]") {
  SparseOperator op = build_fd_laplacian(make_annulus_grid(12));
  ALNonlinearity zero{0.0, 0.0};
  SoliminiConfig cfg;
  cfg.scan_samples = 11;
  SoliminiResult R = run_solimini_experiment(op, zero, 100.0, cfg);
  REQUIRE(R.enclosed == 0);
  REQUIRE(R.diagram.solutions.items.size() == 1);
  // the unique solution of the linear problem
  GroundState gs = ground_state(op);
  Vector expect = -(100.0 / gs.lambda1) * gs.phi1;
  REQUIRE((R.diagram.solutions.items[0].u - expect).norm() <= 1e-8 * (1.0 + expect.norm()));
}

TEST_CASE("load experiment argument guards", "[grid][solimini]") {
  SparseOperator op = build_fd_laplacian(make_annulus_grid(12));
  ALNonlinearity nl = calibrate_arctan(-1.0, 17.0);
  REQUIRE_THROWS_AS(run_solimini_experiment(op, nl, -5.0), Error);
  double l1 = operator_spectrum(op, 1)[0];
  ALNonlinearity high{0.0, l1 + 1.0};  // ell_minus above lambda_1
  REQUIRE_THROWS_AS(run_solimini_experiment(op, high, 10.0), Error);
}
