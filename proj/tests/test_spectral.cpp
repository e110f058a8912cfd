#include "preim/spectral.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace preim;

namespace {

SpMat sparse_tridiag(Index n, double diag, double off) {
  std::vector<Eigen::Triplet<double>> trip;
  for (Index i = 0; i < n; ++i) {
    trip.emplace_back(i, i, diag);
    if (i + 1 < n) {
      trip.emplace_back(i, i + 1, off);
      trip.emplace_back(i + 1, i, off);
    }
  }
  SpMat A(n, n);
  A.setFromTriplets(trip.begin(), trip.end());
  A.makeCompressed();
  return A;
}

}  // namespace

TEST_CASE("smallest_modulus_eigenpair picks the near-kernel direction", "[spectral]") {
  Matrix J = Matrix::Zero(3, 3);
  J.diagonal() << 3.0, 0.2, -1.0;
  EigenProbe p = smallest_modulus_eigenpair(J);
  REQUIRE(p.lambda_s == Catch::Approx(0.2).epsilon(1e-12));
  Vector e2 = Vector::Zero(3);
  e2(1) = 1.0;
  REQUIRE((p.phi_s - e2).norm() < 1e-12);
  REQUIRE(p.gap == Catch::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("smallest_modulus_eigenpair stabilizes the eigenvector sign", "[spectral]") {
  Matrix J(2, 2);
  J << 1.0, 2.0, 2.0, 1.0;  // eigenvector for -1 is (1,-1)/sqrt(2)
  EigenProbe p = smallest_modulus_eigenpair(J);
  REQUIRE(p.lambda_s == Catch::Approx(-1.0).epsilon(1e-12));
  Index imax = 0;
  p.phi_s.cwiseAbs().maxCoeff(&imax);
  REQUIRE(p.phi_s(imax) > 0.0);
}

TEST_CASE("full_spectrum sorts eigenvalues and counts the Morse index", "[spectral]") {
  Matrix J(2, 2);
  J << 2.0, 1.0, 1.0, 2.0;
  SpectrumSlice s = full_spectrum(J);
  REQUIRE(s.eigenvalues[0] == Catch::Approx(1.0).epsilon(1e-12));
  REQUIRE(s.eigenvalues[1] == Catch::Approx(3.0).epsilon(1e-12));
  REQUIRE(s.morse_index == 0);

  J << -2.0, 1.0, 1.0, -2.0;
  s = full_spectrum(J);
  REQUIRE(s.morse_index == 2);
}

TEST_CASE("nonsymmetric input is rejected", "[spectral]") {
  Matrix J(2, 2);
  J << 0.0, 1.0, 0.0, 0.0;
  try {
    full_spectrum(J);
    FAIL("expected NotSymmetric");
  } catch (const Error& e) {
    REQUIRE(e.code() == Errc::NotSymmetric);
  }
}

TEST_CASE("orient_like flips a vector toward its predecessor", "[spectral]") {
  Vector phi(2), prev(2);
  phi << 1.0, 0.0;
  prev << -1.0, 0.1;
  orient_like(phi, prev);
  REQUIRE(phi(0) == -1.0);
  orient_like(phi, prev);
  REQUIRE(phi(0) == -1.0);
}

TEST_CASE("rank_one_shifted_solve handles an exactly singular Jacobian", "[spectral]") {
  // 1x1: J = 0, phi = 1, alpha = 1 -> S = 1, solution equals rhs
  Matrix J = Matrix::Zero(1, 1);
  Vector phi = Vector::Ones(1), rhs(1);
  rhs << 3.0;
  Vector x = rank_one_shifted_solve(J, phi, 1.0, rhs);
  REQUIRE(x(0) == Catch::Approx(3.0).epsilon(1e-14));

  // 2x2: J = diag(0,2), phi = e1 -> S = diag(1,2)
  Matrix J2 = Matrix::Zero(2, 2);
  J2(1, 1) = 2.0;
  Vector phi2(2), rhs2(2);
  phi2 << 1.0, 0.0;
  rhs2 << 1.0, 2.0;
  Vector x2 = rank_one_shifted_solve(J2, phi2, 1.0, rhs2);
  REQUIRE(x2(0) == Catch::Approx(1.0).epsilon(1e-12));
  REQUIRE(x2(1) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("rank_one_shifted_solve validates its inputs", "[spectral]") {
  Matrix J = Matrix::Zero(2, 2);
  Vector phi(2), rhs(2);
  phi << 2.0, 0.0;  // not unit norm
  rhs << 1.0, 1.0;
  REQUIRE_THROWS_AS(rank_one_shifted_solve(J, phi, 1.0, rhs), Error);
  phi << 1.0, 0.0;
  REQUIRE_THROWS_AS(rank_one_shifted_solve(J, phi, 0.5, rhs), Error);
  // S = J + phi phi^T = diag(1, 0) is still singular
  try {
    rank_one_shifted_solve(J, phi, 1.0, rhs);
    FAIL("expected SingularShiftedOperator");
  } catch (const Error& e) {
    REQUIRE(e.code() == Errc::SingularShiftedOperator);
  }
}

TEST_CASE("sparse rank_one_shifted_solve matches the dense formula", "[spectral]") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Index n = 40;
  SpMat A = sparse_tridiag(n, 0.5, -0.3);
  Vector phi(n);
  for (Index i = 0; i < n; ++i) phi(i) = gauss(rng);
  phi.normalize();
  Vector rhs(n);
  for (Index i = 0; i < n; ++i) rhs(i) = gauss(rng);
  Vector xs = rank_one_shifted_solve(A, phi, 2.0, rhs);
  Vector xd = rank_one_shifted_solve(Matrix(A), phi, 2.0, rhs);
  REQUIRE((xs - xd).norm() < 1e-9 * (1.0 + xd.norm()));
}

TEST_CASE("shift-invert Lanczos reproduces dense eigenpairs", "[spectral][lanczos]") {
  Index n = 400;
  // indefinite tridiagonal with a small near-kernel eigenvalue
  SpMat A = sparse_tridiag(n, 0.02, -1.0);
  Matrix Ad(A);
  Eigen::SelfAdjointEigenSolver<Matrix> es(Ad);
  Index imin = 0;
  for (Index i = 1; i < n; ++i)
    if (std::abs(es.eigenvalues()(i)) < std::abs(es.eigenvalues()(imin))) imin = i;

  EigenProbe p = smallest_modulus_eigenpair(A);
  REQUIRE(p.lambda_s == Catch::Approx(es.eigenvalues()(imin)).margin(1e-9));
  Vector ref = es.eigenvectors().col(imin);
  double align = std::abs(ref.dot(p.phi_s));
  REQUIRE(align == Catch::Approx(1.0).margin(1e-7));
  REQUIRE((A * p.phi_s - p.lambda_s * p.phi_s).norm() < 1e-8);
}

TEST_CASE("smallest_eigenvalues returns the ascending bottom of the spectrum",
          "[spectral][lanczos]") {
  Index n = 500;
  SpMat A = sparse_tridiag(n, 2.0, -1.0);  // SPD, lambda_min > 0
  std::vector<Vector> vecs;
  std::vector<double> lam = smallest_eigenvalues(A, 4, -0.5, {}, &vecs);
  Matrix Ad(A);
  Eigen::SelfAdjointEigenSolver<Matrix> es(Ad);
  for (int i = 0; i < 4; ++i) {
    REQUIRE(lam[i] == Catch::Approx(es.eigenvalues()(i)).margin(1e-8));
    REQUIRE((A * vecs[i] - lam[i] * vecs[i]).norm() < 1e-7);
  }
  REQUIRE(std::is_sorted(lam.begin(), lam.end()));
}

TEST_CASE("morse_index agrees between dense and sparse paths", "[spectral]") {
  Index n = 120;
  SpMat A = sparse_tridiag(n, 0.1, -1.0);
  Matrix Ad(A);
  int dense_count = 0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(Ad, Eigen::EigenvaluesOnly);
  for (Index i = 0; i < n; ++i)
    if (es.eigenvalues()(i) < 0.0) ++dense_count;
  REQUIRE(morse_index(A) == dense_count);
  REQUIRE(morse_index(Ad) == dense_count);
}
