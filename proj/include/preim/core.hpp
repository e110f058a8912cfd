#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace preim {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;
using Index = Eigen::Index;

enum class Errc {
  ZeroRhs,
  NonFinite,
  ConvergenceFailure,
  SingularShiftedOperator,
  NearSingularJacobian,
  TransversalityFailure,
  NewtonDivergence,
  MaxIterations,
  StepUnderflow,
  SeedNotOnDiagram,
  SingularOrthantMatrix,
  EigenvalueStraddle,
  SeedNotNearCritical,
  ComponentBudgetExceeded,
  DisconnectedDomain,
  NotSymmetric,
  BadFormat,
  NoInitialSolution,
  SingularAdjacent,
  InvalidArgument,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::ZeroRhs: return "ZeroRhs";
    case Errc::NonFinite: return "NonFinite";
    case Errc::ConvergenceFailure: return "ConvergenceFailure";
    case Errc::SingularShiftedOperator: return "SingularShiftedOperator";
    case Errc::NearSingularJacobian: return "NearSingularJacobian";
    case Errc::TransversalityFailure: return "TransversalityFailure";
    case Errc::NewtonDivergence: return "NewtonDivergence";
    case Errc::MaxIterations: return "MaxIterations";
    case Errc::StepUnderflow: return "StepUnderflow";
    case Errc::SeedNotOnDiagram: return "SeedNotOnDiagram";
    case Errc::SingularOrthantMatrix: return "SingularOrthantMatrix";
    case Errc::EigenvalueStraddle: return "EigenvalueStraddle";
    case Errc::SeedNotNearCritical: return "SeedNotNearCritical";
    case Errc::ComponentBudgetExceeded: return "ComponentBudgetExceeded";
    case Errc::DisconnectedDomain: return "DisconnectedDomain";
    case Errc::NotSymmetric: return "NotSymmetric";
    case Errc::BadFormat: return "BadFormat";
    case Errc::NoInitialSolution: return "NoInitialSolution";
    case Errc::SingularAdjacent: return "SingularAdjacent";
    case Errc::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

enum class JacMode { Analytic, FiniteDifference };

/// A nonlinear map R^n -> R^n with Jacobian access. `jac` is always usable;
/// `sparse_jac` is set for large structured problems and preferred when present.
/// `line_kinks` optionally reports the parameters s where DF jumps along
/// base + s*dir (piecewise-smooth maps); smooth maps leave it empty.
struct MapHandle {
  Index n = 0;
  std::function<Vector(const Vector&)> eval;
  std::function<Matrix(const Vector&)> jac;
  std::function<SpMat(const Vector&)> sparse_jac;
  std::function<std::vector<double>(const Vector&, const Vector&)> line_kinks;
  bool symmetric = false;
  JacMode jac_mode = JacMode::Analytic;

  bool has_sparse() const { return static_cast<bool>(sparse_jac); }
  Vector operator()(const Vector& u) const { return eval(u); }
};

inline double default_fd_step(const Vector& u) {
  return 1e-6 * (1.0 + u.lpNorm<Eigen::Infinity>());
}

inline Matrix fd_jacobian(const MapHandle& map, const Vector& u, double step = 0.0) {
  if (u.size() != map.n) fail(Errc::InvalidArgument, "fd_jacobian: dimension mismatch");
  if (step == 0.0) step = default_fd_step(u);
  if (!(step > 0.0)) fail(Errc::InvalidArgument, "fd_jacobian: step must be positive");
  Matrix J(map.n, map.n);
  Vector up = u, um = u;
  for (Index j = 0; j < map.n; ++j) {
    up(j) = u(j) + step;
    um(j) = u(j) - step;
    Vector fp = map.eval(up);
    Vector fm = map.eval(um);
    if (!fp.allFinite() || !fm.allFinite())
      fail(Errc::NonFinite, "fd_jacobian: map evaluation not finite");
    J.col(j) = (fp - fm) / (2.0 * step);
    up(j) = u(j);
    um(j) = u(j);
  }
  return J;
}

/// Wrap a plain evaluator as a MapHandle with finite-difference Jacobians.
inline MapHandle make_fd_map(Index n, std::function<Vector(const Vector&)> eval,
                             bool symmetric = false) {
  MapHandle m;
  m.n = n;
  m.eval = std::move(eval);
  m.symmetric = symmetric;
  m.jac_mode = JacMode::FiniteDifference;
  m.jac = [m](const Vector& u) { return fd_jacobian(m, u); };
  return m;
}

struct ResidueReport {
  double residue = 0.0;
  double threshold = 0.0;
  bool accepted = false;
};

/// Relative residue ||F(u) - g|| / ||g||. A zero right-hand side has no
/// relative scale; callers switch to residue_of() for that case.
inline ResidueReport relative_residue(const MapHandle& map, const Vector& u, const Vector& g,
                                      double threshold = 1e-10) {
  double gn = g.norm();
  if (gn == 0.0) fail(Errc::ZeroRhs, "relative_residue: rhs has zero norm, use absolute residue");
  Vector r = map.eval(u) - g;
  if (!r.allFinite()) fail(Errc::NonFinite, "relative_residue: map evaluation not finite");
  ResidueReport rep;
  rep.residue = r.norm() / gn;
  rep.threshold = threshold;
  rep.accepted = rep.residue <= threshold;
  return rep;
}

/// Residue with automatic fallback: relative when ||g|| > 0, otherwise
/// ||F(u)|| / (1 + ||u||).
inline double residue_of(const MapHandle& map, const Vector& u, const Vector& g) {
  Vector r = map.eval(u) - g;
  if (!r.allFinite()) fail(Errc::NonFinite, "residue_of: map evaluation not finite");
  double gn = g.norm();
  if (gn > 0.0) return r.norm() / gn;
  return r.norm() / (1.0 + u.norm());
}

struct NewtonOptions {
  double tol = 1e-12;       // scaled by (1 + ||g||)
  int max_iter = 50;
  bool damped = false;      // backtracking line search on the residual norm
  double divergence_factor = 1e4;
};

/// Plain Newton for F(u) = g at fixed map. Returns the root or nullopt.
/// Shared by mirror seeding, preimage counting, and solution refinement.
inline std::optional<Vector> newton_solve(const MapHandle& map, const Vector& g, const Vector& u0,
                                          const NewtonOptions& opt = {}) {
  Vector u = u0;
  double scale = 1.0 + g.norm();
  double best = std::numeric_limits<double>::infinity();
  for (int it = 0; it < opt.max_iter; ++it) {
    Vector r = map.eval(u) - g;
    if (!r.allFinite()) return std::nullopt;
    double rn = r.norm();
    if (rn <= opt.tol * scale) return u;
    if (rn > opt.divergence_factor * scale && rn > 10.0 * best) return std::nullopt;
    best = std::min(best, rn);
    Vector du;
    if (map.has_sparse()) {
      SpMat J = map.sparse_jac(u);
      Eigen::SparseLU<SpMat> lu(J);
      if (lu.info() != Eigen::Success) return std::nullopt;
      du = lu.solve(-r);
    } else {
      Matrix J = map.jac(u);
      Eigen::PartialPivLU<Matrix> lu(J);
      du = lu.solve(-r);
    }
    if (!du.allFinite()) return std::nullopt;
    if (opt.damped) {
      double step = 1.0;
      for (int k = 0; k < 6; ++k) {
        Vector cand = u + step * du;
        Vector rc = map.eval(cand) - g;
        if (rc.allFinite() && rc.norm() < rn) {
          u = cand;
          break;
        }
        step *= 0.5;
        if (k == 5) u += step * du;
      }
    } else {
      u += du;
    }
  }
  Vector r = map.eval(u) - g;
  if (r.allFinite() && r.norm() <= opt.tol * scale) return u;
  return std::nullopt;
}

}  // namespace preim
