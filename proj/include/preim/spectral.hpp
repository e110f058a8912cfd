#pragma once

#include "preim/core.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>

namespace preim {

/// Smallest-modulus eigenpair of a symmetric Jacobian, plus a modulus gap to
/// the next eigenvalue. The kernel-adjacent direction phi_s is unit norm with
/// a stabilized sign (largest-magnitude entry positive).
struct EigenProbe {
  double lambda_s = 0.0;
  Vector phi_s;
  double gap = 0.0;
};

struct SpectrumSlice {
  std::vector<double> eigenvalues;  // ascending
  int morse_index = 0;              // count of negative eigenvalues
};

namespace detail {

inline void stabilize_sign(Vector& phi) {
  Index imax = 0;
  phi.cwiseAbs().maxCoeff(&imax);
  if (phi(imax) < 0.0) phi = -phi;
}

inline void check_symmetric(const Matrix& J, double tol = 1e-10) {
  double scale = 1.0 + J.cwiseAbs().maxCoeff();
  if ((J - J.transpose()).cwiseAbs().maxCoeff() > tol * scale)
    fail(Errc::NotSymmetric, "spectral routine requires a symmetric operator");
}

}  // namespace detail

/// Flip phi if needed so it aligns with a previous kernel direction; keeps
/// eigenvector fields continuous along continuation paths.
inline void orient_like(Vector& phi, const Vector& prev) {
  if (prev.size() == phi.size() && prev.size() > 0 && phi.dot(prev) < 0.0) phi = -phi;
}

inline SpectrumSlice full_spectrum(const Matrix& J) {
  detail::check_symmetric(J);
  Eigen::SelfAdjointEigenSolver<Matrix> es(J, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) fail(Errc::ConvergenceFailure, "full_spectrum: eigensolver failed");
  SpectrumSlice s;
  s.eigenvalues.assign(es.eigenvalues().data(), es.eigenvalues().data() + J.rows());
  s.morse_index = static_cast<int>(
      std::count_if(s.eigenvalues.begin(), s.eigenvalues.end(), [](double x) { return x < 0.0; }));
  return s;
}

inline EigenProbe smallest_modulus_eigenpair(const Matrix& J) {
  detail::check_symmetric(J);
  Eigen::SelfAdjointEigenSolver<Matrix> es(J);
  if (es.info() != Eigen::Success)
    fail(Errc::ConvergenceFailure, "smallest_modulus_eigenpair: eigensolver failed");
  const auto& ev = es.eigenvalues();
  Index n = J.rows(), imin = 0;
  for (Index i = 1; i < n; ++i)
    if (std::abs(ev(i)) < std::abs(ev(imin))) imin = i;
  EigenProbe p;
  p.lambda_s = ev(imin);
  p.phi_s = es.eigenvectors().col(imin);
  detail::stabilize_sign(p.phi_s);
  double gap = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < n; ++i)
    if (i != imin) gap = std::min(gap, std::abs(std::abs(ev(i)) - std::abs(ev(imin))));
  p.gap = (n > 1) ? gap : std::abs(p.lambda_s);
  return p;
}

struct LanczosOptions {
  int max_iter = 200;
  double tol = 1e-11;
  std::uint64_t seed = 0x9e3779b97f4a7c15ull;  // deterministic start vector
};

namespace detail {

/// Lanczos with full reorthogonalization on a symmetric operator given as a
/// solve callback. Returns Ritz values/vectors of the operator.
struct LanczosResult {
  std::vector<double> theta;       // Ritz values, by descending |theta|
  std::vector<Vector> vectors;     // matching Ritz vectors
  std::vector<double> residual;    // Lanczos residual bound per pair
};

template <class Apply>
LanczosResult lanczos_sym(Index n, Apply&& apply, int want, const LanczosOptions& opt) {
  std::mt19937_64 rng(opt.seed + static_cast<std::uint64_t>(n));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix V(n, std::min<Index>(n, opt.max_iter));
  std::vector<double> alpha, beta;
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = gauss(rng);
  v.normalize();
  V.col(0) = v;
  Vector w;
  int k = 0;
  int m_max = static_cast<int>(std::min<Index>(n, opt.max_iter));
  LanczosResult out;
  for (k = 0; k < m_max; ++k) {
    w = apply(V.col(k));
    if (!w.allFinite()) fail(Errc::NonFinite, "lanczos: operator produced non-finite vector");
    double a = V.col(k).dot(w);
    alpha.push_back(a);
    w -= a * V.col(k);
    if (k > 0) w -= beta.back() * V.col(k - 1);
    // full reorthogonalization, twice for stability
    for (int pass = 0; pass < 2; ++pass)
      w -= V.leftCols(k + 1) * (V.leftCols(k + 1).transpose() * w);
    double b = w.norm();
    bool breakdown = b < 1e-14 * (1.0 + std::abs(a));
    bool last = (k + 1 == m_max);
    if (!breakdown && !last) {
      beta.push_back(b);
      V.col(k + 1) = w / b;
    }
    // check convergence periodically on the tridiagonal Ritz problem
    if (breakdown || last || (k + 1 >= want && (k % 4 == 3 || k + 1 == want))) {
      int m = k + 1;
      Matrix T = Matrix::Zero(m, m);
      for (int i = 0; i < m; ++i) T(i, i) = alpha[i];
      for (int i = 0; i + 1 < m; ++i) {
        T(i, i + 1) = beta[i];
        T(i + 1, i) = beta[i];
      }
      Eigen::SelfAdjointEigenSolver<Matrix> es(T);
      std::vector<int> order(m);
      for (int i = 0; i < m; ++i) order[i] = i;
      std::sort(order.begin(), order.end(), [&](int a2, int b2) {
        return std::abs(es.eigenvalues()(a2)) > std::abs(es.eigenvalues()(b2));
      });
      double bk = (breakdown || last) ? 0.0 : b;
      int take = std::min(want, m);
      bool all_conv = true;
      for (int i = 0; i < take; ++i) {
        double th = es.eigenvalues()(order[i]);
        double res = std::abs(bk * es.eigenvectors()(m - 1, order[i]));
        if (res > opt.tol * std::max(1.0, std::abs(th))) all_conv = false;
      }
      if (all_conv || breakdown || last) {
        out.theta.clear();
        out.vectors.clear();
        out.residual.clear();
        for (int i = 0; i < take; ++i) {
          double th = es.eigenvalues()(order[i]);
          out.theta.push_back(th);
          out.vectors.push_back(V.leftCols(m) * es.eigenvectors().col(order[i]));
          out.residual.push_back(std::abs(bk * es.eigenvectors()(m - 1, order[i])));
        }
        if (all_conv || breakdown) return out;
        if (last) return out;  // caller validates residuals
      }
    }
  }
  return out;
}

struct ShiftedSolve {
  Eigen::SparseLU<SpMat>* lu;
  Vector operator()(const Vector& x) const { return lu->solve(x); }
};

}  // namespace detail

/// Shift-invert Lanczos for the eigenvalue of smallest modulus of a sparse
/// symmetric operator. Factorizes J (perturbing the shift slightly if J is
/// numerically singular) and runs Lanczos on J^{-1}.
inline EigenProbe smallest_modulus_eigenpair(const SpMat& J, const LanczosOptions& opt = {}) {
  Index n = J.rows();
  if (n != J.cols()) fail(Errc::InvalidArgument, "smallest_modulus_eigenpair: square operator required");
  if (n <= 192) return smallest_modulus_eigenpair(Matrix(J));
  double scale = 0.0;
  for (int k = 0; k < J.outerSize(); ++k)
    for (SpMat::InnerIterator it(J, k); it; ++it) scale = std::max(scale, std::abs(it.value()));
  if (scale == 0.0) scale = 1.0;

  SpMat I(n, n);
  I.setIdentity();
  Eigen::SparseLU<SpMat> lu;
  double shift = 0.0;
  bool ok = false;
  for (double rel : {0.0, 1e-12, -1e-12, 1e-9, -1e-9, 1e-6, -1e-6}) {
    shift = rel * scale;
    SpMat A = J;
    if (shift != 0.0) A = A - shift * I;
    A.makeCompressed();
    lu.compute(A);
    if (lu.info() == Eigen::Success) {
      ok = true;
      break;
    }
  }
  if (!ok) fail(Errc::SingularShiftedOperator, "smallest_modulus_eigenpair: factorization failed");

  auto res = detail::lanczos_sym(
      n, [&](const Vector& x) { return lu.solve(x); }, 2, opt);
  if (res.theta.empty() || std::abs(res.theta[0]) < 1e-300)
    fail(Errc::ConvergenceFailure, "smallest_modulus_eigenpair: no Ritz value converged");

  EigenProbe p;
  p.lambda_s = shift + 1.0 / res.theta[0];
  p.phi_s = res.vectors[0].normalized();
  // one inverse-iteration polish at the Ritz value tightens the pair
  {
    SpMat A = J - (p.lambda_s + 1e-12 * scale) * I;
    A.makeCompressed();
    Eigen::SparseLU<SpMat> lu2(A);
    if (lu2.info() == Eigen::Success) {
      Vector y = lu2.solve(p.phi_s);
      if (y.allFinite() && y.norm() > 0) {
        y.normalize();
        double rq = y.dot(J * y);
        Vector r = J * y - rq * y;
        Vector r0 = J * p.phi_s - p.lambda_s * p.phi_s;
        if (r.norm() < r0.norm()) {
          p.phi_s = y;
          p.lambda_s = rq;
        }
      }
    }
  }
  detail::stabilize_sign(p.phi_s);
  Vector resid = J * p.phi_s - p.lambda_s * p.phi_s;
  if (resid.norm() > 1e-7 * scale)
    fail(Errc::ConvergenceFailure, "smallest_modulus_eigenpair: residual too large");
  if (res.theta.size() > 1 && std::abs(res.theta[1]) > 1e-300)
    p.gap = std::abs(std::abs(shift + 1.0 / res.theta[1]) - std::abs(p.lambda_s));
  else
    p.gap = std::abs(p.lambda_s);
  return p;
}

/// Smallest m eigenvalues (ascending) of a sparse symmetric operator via
/// shift-invert Lanczos at a caller-certified lower bound sigma < lambda_min.
inline std::vector<double> smallest_eigenvalues(const SpMat& A, int m, double sigma,
                                                const LanczosOptions& opt = {},
                                                std::vector<Vector>* vectors = nullptr) {
  Index n = A.rows();
  if (m < 1) fail(Errc::InvalidArgument, "smallest_eigenvalues: m must be positive");
  if (static_cast<Index>(m) > n) fail(Errc::InvalidArgument, "smallest_eigenvalues: m exceeds dimension");
  if (n <= 256 || 4 * static_cast<Index>(m) >= n) {
    Matrix Ad(A);
    detail::check_symmetric(Ad);
    Eigen::SelfAdjointEigenSolver<Matrix> es(Ad);
    if (es.info() != Eigen::Success) fail(Errc::ConvergenceFailure, "smallest_eigenvalues: dense solve failed");
    std::vector<double> out(es.eigenvalues().data(), es.eigenvalues().data() + m);
    if (vectors) {
      vectors->clear();
      for (int i = 0; i < m; ++i) {
        Vector v = es.eigenvectors().col(i);
        detail::stabilize_sign(v);
        vectors->push_back(v);
      }
    }
    return out;
  }
  SpMat I(n, n);
  I.setIdentity();
  SpMat B = A - sigma * I;
  B.makeCompressed();
  Eigen::SparseLU<SpMat> lu(B);
  if (lu.info() != Eigen::Success)
    fail(Errc::SingularShiftedOperator, "smallest_eigenvalues: shifted factorization failed");
  auto res = detail::lanczos_sym(
      n, [&](const Vector& x) { return lu.solve(x); }, m + 1, opt);
  if (static_cast<int>(res.theta.size()) < m)
    fail(Errc::ConvergenceFailure, "smallest_eigenvalues: Lanczos returned too few pairs");
  for (int i = 0; i < m; ++i) {
    if (res.theta[i] <= 0.0)
      fail(Errc::SingularShiftedOperator, "smallest_eigenvalues: sigma is not below the spectrum");
    if (res.residual[i] > 1e-7 * std::max(1.0, std::abs(res.theta[i])))
      fail(Errc::ConvergenceFailure, "smallest_eigenvalues: Ritz pair did not converge");
  }
  std::vector<std::pair<double, int>> lam(m);
  for (int i = 0; i < m; ++i) lam[i] = {sigma + 1.0 / res.theta[i], i};
  std::sort(lam.begin(), lam.end());
  std::vector<double> out(m);
  if (vectors) vectors->assign(m, Vector());
  for (int i = 0; i < m; ++i) {
    out[i] = lam[i].first;
    if (vectors) {
      Vector v = res.vectors[lam[i].second].normalized();
      detail::stabilize_sign(v);
      (*vectors)[i] = v;
    }
  }
  return out;
}

/// Morse index (count of negative eigenvalues). Inertia is computed densely:
/// unpivoted sparse LDLT is untrustworthy on indefinite operators.
inline int morse_index(const Matrix& J) { return full_spectrum(J).morse_index; }

inline int morse_index(const SpMat& J) {
  if (J.rows() > 4096) fail(Errc::InvalidArgument, "morse_index: dimension too large for dense inertia");
  return full_spectrum(Matrix(J)).morse_index;
}

/// Solve (J + alpha * phi phi^T) x = rhs for the spectral fold tangent. The
/// rank-one shift moves the near-kernel eigenvalue to ~alpha, restoring a
/// well-conditioned solve near folds.
inline Vector rank_one_shifted_solve(const Matrix& J, const Vector& phi, double alpha,
                                     const Vector& rhs) {
  if (std::abs(phi.norm() - 1.0) > 1e-6)
    fail(Errc::InvalidArgument, "rank_one_shifted_solve: phi must be unit norm");
  if (!(alpha >= 1.0)) fail(Errc::InvalidArgument, "rank_one_shifted_solve: alpha must be >= 1");
  Matrix S = J + alpha * (phi * phi.transpose());
  Eigen::PartialPivLU<Matrix> lu(S);
  Vector x = lu.solve(rhs);
  double scale = S.cwiseAbs().maxCoeff() * std::max(1.0, x.norm()) + rhs.norm();
  if (!x.allFinite() || (S * x - rhs).norm() > 1e-8 * (1.0 + scale))
    fail(Errc::SingularShiftedOperator, "rank_one_shifted_solve: shifted operator is singular");
  return x;
}

/// Sparse variant via the bordered system [[J, phi], [phi^T, -1/alpha]]:
/// eliminating the border reproduces (J + alpha phi phi^T) x = rhs without
/// densifying J.
inline Vector rank_one_shifted_solve(const SpMat& J, const Vector& phi, double alpha,
                                     const Vector& rhs) {
  if (std::abs(phi.norm() - 1.0) > 1e-6)
    fail(Errc::InvalidArgument, "rank_one_shifted_solve: phi must be unit norm");
  if (!(alpha >= 1.0)) fail(Errc::InvalidArgument, "rank_one_shifted_solve: alpha must be >= 1");
  Index n = J.rows();
  SpMat K(n + 1, n + 1);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(J.nonZeros() + 2 * n + 1);
  for (int k = 0; k < J.outerSize(); ++k)
    for (SpMat::InnerIterator it(J, k); it; ++it)
      trip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
  for (Index i = 0; i < n; ++i) {
    if (phi(i) != 0.0) {
      trip.emplace_back(static_cast<int>(i), static_cast<int>(n), phi(i));
      trip.emplace_back(static_cast<int>(n), static_cast<int>(i), phi(i));
    }
  }
  trip.emplace_back(static_cast<int>(n), static_cast<int>(n), -1.0 / alpha);
  K.setFromTriplets(trip.begin(), trip.end());
  K.makeCompressed();
  Eigen::SparseLU<SpMat> lu(K);
  if (lu.info() != Eigen::Success)
    fail(Errc::SingularShiftedOperator, "rank_one_shifted_solve: bordered factorization failed");
  Vector b(n + 1);
  b.head(n) = rhs;
  b(n) = 0.0;
  Vector xw = lu.solve(b);
  if (!xw.allFinite())
    fail(Errc::SingularShiftedOperator, "rank_one_shifted_solve: bordered solve not finite");
  Vector x = xw.head(n);
  Vector check = J * x + alpha * phi * (phi.dot(x)) - rhs;
  if (check.norm() > 1e-7 * (1.0 + rhs.norm() + x.norm()))
    fail(Errc::SingularShiftedOperator, "rank_one_shifted_solve: bordered residual too large");
  return x;
}

}  // namespace preim
