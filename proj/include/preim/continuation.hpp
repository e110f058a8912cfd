#pragma once

#include "preim/core.hpp"
#include "preim/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

namespace preim {

/// Codomain curve gamma with its derivative; the homotopy is
/// H(u, t) = F(u) - gamma(t).
struct CodomainPath {
  std::function<Vector(double)> gamma;
  std::function<Vector(double)> gamma_prime;
  double t_min = 0.0;
  double t_max = 1.0;
};

/// Finite-difference check that gamma_prime is consistent with gamma at a few
/// sample parameters. Returns the worst relative mismatch.
inline double validate_path(const CodomainPath& path, int samples = 5) {
  double worst = 0.0;
  for (int i = 0; i < samples; ++i) {
    double t = path.t_min + (path.t_max - path.t_min) * (i + 0.5) / samples;
    double dt = 1e-6 * (1.0 + std::abs(t));
    Vector fd = (path.gamma(t + dt) - path.gamma(t - dt)) / (2.0 * dt);
    Vector gp = path.gamma_prime(t);
    worst = std::max(worst, (fd - gp).norm() / (1.0 + gp.norm()));
  }
  return worst;
}

/// Criticality probe along a branch: for symmetric maps the smallest-modulus
/// eigenvalue and its eigenvector; for planar (2x2 nonsymmetric) maps the
/// Hadamard-scaled determinant and the near-kernel direction read off the
/// adjugate. `gap` feeds the automatic fold-band width; dimensions where a
/// second eigenvalue does not exist (n = 1, planar mode) report a unit gap.
struct CritProbe {
  double value = 0.0;
  Vector dir;
  double gap = 1.0;
  bool planar = false;
};

namespace detail {

inline bool use_planar_probe(const MapHandle& map) { return map.n == 2 && !map.symmetric; }

inline CritProbe planar_probe(const Matrix& J, const CritProbe* prev) {
  CritProbe p;
  p.planar = true;
  double det = J(0, 0) * J(1, 1) - J(0, 1) * J(1, 0);
  double scale = J.row(0).norm() * J.row(1).norm();
  p.value = det / std::max(scale, 1e-300);
  // the adjugate's columns span ker DF when det = 0
  Vector c1(2), c2(2);
  c1 << J(1, 1), -J(1, 0);
  c2 << -J(0, 1), J(0, 0);
  Vector k = (c1.norm() >= c2.norm()) ? c1 : c2;
  if (k.norm() < 1e-300) k = Vector::Unit(2, 0);
  p.dir = k.normalized();
  stabilize_sign(p.dir);
  p.gap = 1.0;
  if (prev && prev->dir.size() == 2) orient_like(p.dir, prev->dir);
  return p;
}

}  // namespace detail

inline CritProbe criticality_probe(const MapHandle& map, const Vector& u,
                                   const CritProbe* prev = nullptr) {
  if (detail::use_planar_probe(map)) return detail::planar_probe(map.jac(u), prev);
  if (!map.symmetric)
    fail(Errc::NotSymmetric, "criticality_probe: non-planar maps must be symmetric");
  EigenProbe e;
  if (map.has_sparse() && map.n > 192)
    e = smallest_modulus_eigenpair(map.sparse_jac(u));
  else
    e = smallest_modulus_eigenpair(map.jac(u));
  CritProbe p;
  p.value = e.lambda_s;
  p.dir = e.phi_s;
  p.gap = (map.n == 1) ? std::max(1.0, std::abs(e.lambda_s)) : e.gap;
  if (prev && prev->dir.size() == p.dir.size()) orient_like(p.dir, prev->dir);
  return p;
}

enum class PointClass { Regular, NearFold, FoldNode };

inline const char* point_class_name(PointClass c) {
  switch (c) {
    case PointClass::Regular: return "Regular";
    case PointClass::NearFold: return "NearFold";
    case PointClass::FoldNode: return "FoldNode";
  }
  return "Unknown";
}

struct TracePoint {
  Vector u;
  double t = 0.0;
  CritProbe probe;
  PointClass classification = PointClass::Regular;
};

enum class TangentMode { Regular, Spectral };

struct Tangent {
  Vector u_dot;
  double t_dot = 0.0;
  TangentMode mode = TangentMode::Regular;
};

struct StepConfig {
  double initial_step = 1e-2;
  double min_step = 1e-9;
  double max_step = 0.25;
  double newton_tol = 1e-10;
  int newton_max_iter = 12;
  double fold_band = 0.0;  // 0 = automatic: 0.05 * probe gap
  double fold_tol = 1e-4;
  double band_hysteresis = 2.0;  // leave spectral mode at hysteresis * band
  double alpha = 1.0;            // rank-one shift weight in the fold tangent
  int max_points = 20000;

  void validate() const {
    if (!(0.0 < min_step && min_step <= initial_step && initial_step <= max_step))
      fail(Errc::InvalidArgument, "StepConfig: need 0 < min_step <= initial_step <= max_step");
    if (fold_band > 0.0 && !(fold_tol < fold_band))
      fail(Errc::InvalidArgument, "StepConfig: need fold_tol < fold_band");
    if (!(fold_tol > 0.0)) fail(Errc::InvalidArgument, "StepConfig: fold_tol must be positive");
  }
};

inline double resolve_band(const StepConfig& cfg, const CritProbe& probe) {
  if (cfg.fold_band > 0.0) return cfg.fold_band;
  double band = 0.05 * probe.gap;
  return std::max(band, 2.0 * cfg.fold_tol);
}

inline PointClass classify_point(const StepConfig& cfg, const CritProbe& probe) {
  double a = std::abs(probe.value);
  if (a <= cfg.fold_tol) return PointClass::FoldNode;
  if (a <= resolve_band(cfg, probe)) return PointClass::NearFold;
  return PointClass::Regular;
}

/// Tangent away from the critical set: u_dot = DF^{-1} gamma', t_dot = 1.
inline Tangent regular_tangent(const MapHandle& map, const CodomainPath& path, const Vector& u,
                               double t) {
  Vector gp = path.gamma_prime(t);
  Tangent tg;
  tg.mode = TangentMode::Regular;
  tg.t_dot = 1.0;
  if (map.has_sparse() && map.n > 192) {
    SpMat J = map.sparse_jac(u);
    Eigen::SparseLU<SpMat> lu(J);
    if (lu.info() != Eigen::Success)
      fail(Errc::NearSingularJacobian, "regular_tangent: Jacobian factorization failed");
    tg.u_dot = lu.solve(gp);
    if (!tg.u_dot.allFinite() || (J * tg.u_dot - gp).norm() > 1e-8 * (1.0 + gp.norm()))
      fail(Errc::NearSingularJacobian, "regular_tangent: Jacobian is near-singular");
  } else {
    Matrix J = map.jac(u);
    Eigen::PartialPivLU<Matrix> lu(J);
    if (lu.rcond() < 1e-13)
      fail(Errc::NearSingularJacobian, "regular_tangent: Jacobian is near-singular");
    tg.u_dot = lu.solve(gp);
    if (!tg.u_dot.allFinite() || (J * tg.u_dot - gp).norm() > 1e-8 * (1.0 + gp.norm()))
      fail(Errc::NearSingularJacobian, "regular_tangent: Jacobian is near-singular");
  }
  return tg;
}

/// Fold tangent. Symmetric maps: solve (DF + alpha phi phi^T) u_dot =
/// -lambda gamma' - alpha <phi, gamma'> phi, which gives DF u_dot =
/// -lambda gamma' exactly, so t_dot = -lambda keeps DF u_dot - gamma' t_dot = 0.
/// At a fold this degenerates smoothly to the pure kernel direction (phi, 0).
/// Planar maps: (adj(DF) gamma', det DF), with a kernel fallback at cusp-like
/// contacts where both entries vanish.
inline Tangent spectral_tangent(const MapHandle& map, const CodomainPath& path, const Vector& u,
                                double t, const StepConfig& cfg = {},
                                const CritProbe* probe_hint = nullptr) {
  Vector gp = path.gamma_prime(t);
  Tangent tg;
  tg.mode = TangentMode::Spectral;
  if (detail::use_planar_probe(map)) {
    Matrix J = map.jac(u);
    double det = J(0, 0) * J(1, 1) - J(0, 1) * J(1, 0);
    Matrix adj(2, 2);
    adj << J(1, 1), -J(0, 1), -J(1, 0), J(0, 0);
    tg.u_dot = adj * gp;
    tg.t_dot = det;
    double norm = std::hypot(tg.u_dot.norm(), tg.t_dot);
    double jscale = std::max(1e-300, J.cwiseAbs().maxCoeff()) * (1.0 + gp.norm());
    if (norm <= 1e-12 * jscale) {
      CritProbe p = probe_hint ? *probe_hint : detail::planar_probe(J, nullptr);
      tg.u_dot = p.dir;
      tg.t_dot = 0.0;
    }
    return tg;
  }
  if (!map.symmetric)
    fail(Errc::NotSymmetric, "spectral_tangent: non-planar maps must be symmetric");
  CritProbe p = probe_hint ? *probe_hint : criticality_probe(map, u);
  double lambda = p.value;
  double c = p.dir.dot(gp);
  if (std::abs(lambda) <= cfg.fold_tol && std::abs(c) <= 1e-8 * (1.0 + gp.norm()))
    fail(Errc::TransversalityFailure,
         "spectral_tangent: gamma' is tangent to the critical image at this fold");
  Vector rhs = -lambda * gp - cfg.alpha * c * p.dir;
  if (map.has_sparse() && map.n > 192)
    tg.u_dot = rank_one_shifted_solve(map.sparse_jac(u), p.dir, cfg.alpha, rhs);
  else
    tg.u_dot = rank_one_shifted_solve(map.jac(u), p.dir, cfg.alpha, rhs);
  tg.t_dot = -lambda;
  return tg;
}

namespace detail {

struct BorderedSolve {
  Vector du;
  double dt = 0.0;
};

inline BorderedSolve solve_bordered(const MapHandle& map, const Vector& u, const Vector& gp,
                                    const Tangent& tg, const Vector& r, double c) {
  Index n = map.n;
  BorderedSolve out;
  if (map.has_sparse() && n > 192) {
    SpMat J = map.sparse_jac(u);
    SpMat M(n + 1, n + 1);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(J.nonZeros() + 2 * n + 1);
    for (int k = 0; k < J.outerSize(); ++k)
      for (SpMat::InnerIterator it(J, k); it; ++it)
        trip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
    for (Index i = 0; i < n; ++i) {
      if (gp(i) != 0.0) trip.emplace_back(static_cast<int>(i), static_cast<int>(n), -gp(i));
      if (tg.u_dot(i) != 0.0)
        trip.emplace_back(static_cast<int>(n), static_cast<int>(i), tg.u_dot(i));
    }
    trip.emplace_back(static_cast<int>(n), static_cast<int>(n), tg.t_dot);
    M.setFromTriplets(trip.begin(), trip.end());
    M.makeCompressed();
    Eigen::SparseLU<SpMat> lu(M);
    if (lu.info() != Eigen::Success)
      fail(Errc::NewtonDivergence, "corrector: bordered factorization failed");
    Vector rhs(n + 1);
    rhs.head(n) = -r;
    rhs(n) = -c;
    Vector d = lu.solve(rhs);
    if (!d.allFinite()) fail(Errc::NewtonDivergence, "corrector: bordered solve not finite");
    out.du = d.head(n);
    out.dt = d(n);
  } else {
    Matrix M(n + 1, n + 1);
    M.topLeftCorner(n, n) = map.jac(u);
    M.topRightCorner(n, 1) = -gp;
    M.bottomLeftCorner(1, n) = tg.u_dot.transpose();
    M(n, n) = tg.t_dot;
    Vector rhs(n + 1);
    rhs.head(n) = -r;
    rhs(n) = -c;
    Eigen::PartialPivLU<Matrix> lu(M);
    Vector d = lu.solve(rhs);
    if (!d.allFinite()) fail(Errc::NewtonDivergence, "corrector: bordered solve not finite");
    out.du = d.head(n);
    out.dt = d(n);
  }
  return out;
}

}  // namespace detail

/// Bordered Newton corrector: solves {H(u,t) = 0, <(u,t) - (u_pred,t_pred),
/// tangent> = 0}. Returns the corrected point with a fresh criticality probe
/// and classification.
inline TracePoint correct(const MapHandle& map, const CodomainPath& path, const Vector& u_pred,
                          double t_pred, const Tangent& tangent, const StepConfig& cfg,
                          const CritProbe* prev_probe = nullptr, int* iterations_out = nullptr) {
  Vector u = u_pred;
  double t = t_pred;
  double best = std::numeric_limits<double>::infinity();
  int worse_streak = 0;
  for (int it = 0; it <= cfg.newton_max_iter; ++it) {
    Vector gt = path.gamma(t);
    Vector r = map.eval(u) - gt;
    if (!r.allFinite()) fail(Errc::NewtonDivergence, "corrector: residual not finite");
    double rn = r.norm();
    double scale = 1.0 + gt.norm();
    double c = tangent.u_dot.dot(u - u_pred) + tangent.t_dot * (t - t_pred);
    double cscale = 1.0 + std::hypot(tangent.u_dot.norm(), tangent.t_dot) *
                              (1.0 + u.norm() + std::abs(t));
    if (rn <= cfg.newton_tol * scale && std::abs(c) <= 1e-8 * cscale) {
      if (iterations_out) *iterations_out = it;
      TracePoint p;
      p.u = std::move(u);
      p.t = t;
      p.probe = criticality_probe(map, p.u, prev_probe);
      p.classification = classify_point(cfg, p.probe);
      return p;
    }
    if (it == cfg.newton_max_iter) break;
    if (rn > best * 4.0) {
      if (++worse_streak >= 2) fail(Errc::NewtonDivergence, "corrector: residual diverging");
    } else {
      worse_streak = 0;
    }
    best = std::min(best, rn);
    auto d = detail::solve_bordered(map, u, path.gamma_prime(t), tangent, r, c);
    u += d.du;
    t += d.dt;
  }
  fail(Errc::MaxIterations, "corrector: Newton did not converge");
}

enum class FoldKind { Fold, Kink, Degenerate };

inline const char* fold_kind_name(FoldKind k) {
  switch (k) {
    case FoldKind::Fold: return "Fold";
    case FoldKind::Kink: return "Kink";
    case FoldKind::Degenerate: return "Degenerate";
  }
  return "Unknown";
}

struct FoldEvent {
  Vector u;
  double t = 0.0;
  Vector phi;
  double lambda = 0.0;
  FoldKind kind = FoldKind::Fold;
  double transversality = 0.0;  // |<phi, gamma'(t)>| / (1 + ||gamma'||)
  double dlambda_dphi = 0.0;    // fd directional derivative of the probe along phi
  int branch_id = -1;           // filled by the diagram builder
};

enum class TraceStatus { RangeExhausted, StepUnderflow, PointBudget, Stopped };

inline const char* trace_status_name(TraceStatus s) {
  switch (s) {
    case TraceStatus::RangeExhausted: return "RangeExhausted";
    case TraceStatus::StepUnderflow: return "StepUnderflow";
    case TraceStatus::PointBudget: return "PointBudget";
    case TraceStatus::Stopped: return "Stopped";
  }
  return "Unknown";
}

struct TraceResult {
  std::vector<TracePoint> points;
  std::vector<FoldEvent> events;
  TraceStatus status = TraceStatus::RangeExhausted;
  long corrector_iterations = 0;
};

namespace detail {

inline FoldEvent make_event(const MapHandle& map, const CodomainPath& path, const TracePoint& at,
                            bool bracket_collapsed, const StepConfig& cfg) {
  FoldEvent ev;
  ev.u = at.u;
  ev.t = at.t;
  ev.phi = at.probe.dir;
  ev.lambda = at.probe.value;
  Vector gp = path.gamma_prime(at.t);
  ev.transversality = std::abs(ev.phi.dot(gp)) / (1.0 + gp.norm());
  if (bracket_collapsed && std::abs(at.probe.value) > cfg.fold_tol) {
    ev.kind = FoldKind::Kink;  // probe jumped across zero without shrinking
    ev.dlambda_dphi = 0.0;
    return ev;
  }
  // Smooth fold test: probe the criticality value on both sides of the event
  // along phi. A transversal fold crosses zero there; a tangential touch dips
  // and returns with the same sign. The offset must dominate the event's own
  // localization slack, which is fold_tol-sized.
  double eps = (1.0 + at.u.lpNorm<Eigen::Infinity>()) * std::max(1e-5, 10.0 * cfg.fold_tol);
  CritProbe pp = criticality_probe(map, at.u + eps * at.probe.dir, &at.probe);
  CritProbe pm = criticality_probe(map, at.u - eps * at.probe.dir, &at.probe);
  ev.dlambda_dphi = (pp.value - pm.value) / (2.0 * eps);
  bool crosses = pp.value * pm.value < 0.0;
  ev.kind = (crosses && std::abs(ev.dlambda_dphi) > 1e-6) ? FoldKind::Fold : FoldKind::Degenerate;
  return ev;
}

/// Attempt to continue past a wall the corrector cannot step through (a
/// kink vertex where the diagram turns by more than the constraint plane
/// allows). The outgoing arm's tangent is read from the one-sided Jacobian
/// just beyond the wall along the incoming direction; both signs are tried
/// and a candidate that walks back down the incoming arm is rejected.
inline bool try_corner_turn(const MapHandle& map, const CodomainPath& path, const TracePoint& cur,
                            const Tangent& T_in, const StepConfig& cfg, TracePoint& q_out,
                            Tangent& T_out) {
  double kappa = 1e-8 * (1.0 + cur.u.lpNorm<Eigen::Infinity>());
  Vector u_b = cur.u + kappa * T_in.u_dot;
  Tangent D;
  try {
    D = regular_tangent(map, path, u_b, cur.t);
  } catch (const Error&) {
    return false;
  }
  double n = std::hypot(D.u_dot.norm(), D.t_dot);
  if (!(n > 0.0) || !std::isfinite(n)) return false;
  D.u_dot /= n;
  D.t_dot /= n;
  double h0 = std::clamp(1e-4 * (1.0 + std::abs(cur.t)), 1e3 * cfg.min_step, cfg.max_step);
  for (double sgn : {+1.0, -1.0}) {
    Tangent Dc = D;
    Dc.u_dot *= sgn;
    Dc.t_dot *= sgn;
    Vector up = cur.u + h0 * Dc.u_dot;
    double tp = cur.t + h0 * Dc.t_dot;
    TracePoint q;
    try {
      q = correct(map, path, up, tp, Dc, cfg, &cur.probe);
    } catch (const Error&) {
      continue;
    }
    Vector du = q.u - cur.u;
    double dt = q.t - cur.t;
    double adv = std::hypot(du.norm(), dt);
    if (adv < 0.25 * h0) continue;
    double cosine = (du.dot(T_in.u_dot) + dt * T_in.t_dot) / adv;
    if (cosine < -0.9) continue;  // backtracked onto the incoming arm
    q_out = q;
    T_out = Dc;
    return true;
  }
  return false;
}

struct TraceGuts {
  const MapHandle& map;
  const CodomainPath& path;
  const StepConfig& cfg;
  TraceResult& out;

  TracePoint try_fraction(const TracePoint& from, const Tangent& T, double h, double frac,
                          int* iters) {
    Vector up = from.u + (frac * h) * T.u_dot;
    double tp = from.t + (frac * h) * T.t_dot;
    return correct(map, path, up, tp, T, cfg, &from.probe, iters);
  }

  bool near_existing_event(const TracePoint& p) const {
    for (const auto& ev : out.events) {
      double d = std::hypot((p.u - ev.u).norm(), p.t - ev.t);
      if (d <= 10.0 * cfg.fold_tol * (1.0 + ev.u.norm() + std::abs(ev.t))) return true;
    }
    return false;
  }

  /// Bisect a probe sign change between `from` and the point at fraction 1.
  /// Emits a Fold event when |probe| reaches fold_tol, a Kink event when the
  /// bracket collapses around a jump discontinuity.
  void localize_crossing(const TracePoint& from, const Tangent& T, double h,
                         const TracePoint& to) {
    double lo = 0.0, hi = 1.0;
    double vlo = from.probe.value;
    TracePoint best_lo = from, best_hi = to;
    for (int it = 0; it < 80; ++it) {
      double width = (hi - lo) * h;
      if (width < 1e-12 * (1.0 + from.u.lpNorm<Eigen::Infinity>() + std::abs(from.t))) {
        const TracePoint& side =
            std::abs(best_lo.probe.value) <= std::abs(best_hi.probe.value) ? best_lo : best_hi;
        if (!near_existing_event(side)) {
          out.events.push_back(make_event(map, path, side, true, cfg));
          out.points.push_back(side);
        }
        return;
      }
      double mid = 0.5 * (lo + hi);
      TracePoint pm;
      try {
        int its = 0;
        pm = try_fraction(from, T, h, mid, &its);
        out.corrector_iterations += its;
      } catch (const Error&) {
        // corrector trouble exactly at the wall: shrink toward the low side
        hi = mid;
        continue;
      }
      if (std::abs(pm.probe.value) <= cfg.fold_tol) {
        if (!near_existing_event(pm)) {
          out.events.push_back(make_event(map, path, pm, false, cfg));
          out.points.push_back(pm);
        }
        return;
      }
      if ((pm.probe.value > 0.0) == (vlo > 0.0)) {
        lo = mid;
        best_lo = pm;
      } else {
        hi = mid;
        best_hi = pm;
      }
    }
  }

  /// Golden-section search for a tangential touch of the probe value between
  /// two same-sign points that entered the fold band.
  void localize_dip(const TracePoint& from, const Tangent& T, double h) {
    const double inv_phi = 0.6180339887498949;
    double a = 0.0, b = 1.0;
    double x1 = b - inv_phi * (b - a), x2 = a + inv_phi * (b - a);
    auto value_at = [&](double f, TracePoint* keep) -> double {
      try {
        int its = 0;
        TracePoint p = try_fraction(from, T, h, f, &its);
        out.corrector_iterations += its;
        double v = std::abs(p.probe.value);
        if (keep) *keep = std::move(p);
        return v;
      } catch (const Error&) {
        return std::numeric_limits<double>::infinity();
      }
    };
    TracePoint p1, p2;
    double f1 = value_at(x1, &p1), f2 = value_at(x2, &p2);
    TracePoint best;
    double fbest = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 40 && (b - a) > 1e-10; ++it) {
      if (f1 <= f2) {
        if (f1 < fbest) {
          fbest = f1;
          best = p1;
        }
        b = x2;
        x2 = x1;
        f2 = f1;
        p2 = p1;
        x1 = b - inv_phi * (b - a);
        f1 = value_at(x1, &p1);
      } else {
        if (f2 < fbest) {
          fbest = f2;
          best = p2;
        }
        a = x1;
        x1 = x2;
        f1 = f2;
        p1 = p2;
        x2 = a + inv_phi * (b - a);
        f2 = value_at(x2, &p2);
      }
    }
    if (fbest <= cfg.fold_tol && !near_existing_event(best)) {
      out.events.push_back(make_event(map, path, best, false, cfg));
      out.points.push_back(best);
    }
  }
};

}  // namespace detail

/// Adaptive pseudo-arclength sweep over the path's t-range. direction = +1
/// starts toward increasing t, -1 toward decreasing t. Every probe sign change
/// is localized and emitted as a FoldEvent; tangential touches that reach
/// fold_tol inside the fold band are emitted as well. `stop` (if given) ends
/// the trace when it returns true on an accepted point.
inline TraceResult trace(const MapHandle& map, const CodomainPath& path, const TracePoint& start,
                         int direction, const StepConfig& cfg,
                         const std::function<bool(const TracePoint&)>& stop = nullptr,
                         const Vector* orient_u = nullptr, double orient_t = 0.0) {
  cfg.validate();
  TraceResult out;
  detail::TraceGuts guts{map, path, cfg, out};

  TracePoint cur = start;
  if (cur.probe.dir.size() == 0) {
    cur.probe = criticality_probe(map, cur.u);
    cur.classification = classify_point(cfg, cur.probe);
  }
  out.points.push_back(cur);

  bool in_spectral = std::abs(cur.probe.value) <= resolve_band(cfg, cur.probe);
  auto pick_tangent = [&](const TracePoint& p) -> Tangent {
    double band = resolve_band(cfg, p.probe);
    double a = std::abs(p.probe.value);
    if (in_spectral) {
      if (a > cfg.band_hysteresis * band) in_spectral = false;
    } else {
      if (a <= band) in_spectral = true;
    }
    if (!in_spectral) {
      try {
        return regular_tangent(map, path, p.u, p.t);
      } catch (const Error& e) {
        if (e.code() != Errc::NearSingularJacobian) throw;
        in_spectral = true;
      }
    }
    return spectral_tangent(map, path, p.u, p.t, cfg, &p.probe);
  };

  auto normalized = [](Tangent tg) {
    double n = std::hypot(tg.u_dot.norm(), tg.t_dot);
    if (n <= 0.0) fail(Errc::TransversalityFailure, "trace: zero tangent");
    tg.u_dot /= n;
    tg.t_dot /= n;
    return tg;
  };

  // A tangential contact of gamma with the fold image leaves no usable
  // tangent; the trace is truncated there rather than poisoning the caller's
  // whole exploration (the builder treats it like a wall).
  auto tangent_or_stop = [&](const TracePoint& p, Tangent& tg) -> bool {
    try {
      tg = normalized(pick_tangent(p));
      return true;
    } catch (const Error& e) {
      if (e.code() != Errc::TransversalityFailure) throw;
      out.status = TraceStatus::StepUnderflow;
      return false;
    }
  };

  Tangent T;
  if (!tangent_or_stop(cur, T)) return out;
  if (orient_u && orient_u->size() == map.n) {
    double align = T.u_dot.dot(*orient_u) + T.t_dot * orient_t;
    if (align < 0.0) {
      T.u_dot = -T.u_dot;
      T.t_dot = -T.t_dot;
    }
  } else if (direction != 0 && T.t_dot * direction < 0.0) {
    T.u_dot = -T.u_dot;
    T.t_dot = -T.t_dot;
  }

  double h = cfg.initial_step;
  // previous accepted leg, for dip searches spanning a local minimum of |probe|
  struct Leg {
    TracePoint from;
    Tangent tangent;
    double step;
  };
  std::optional<Leg> prev_leg;
  int turn_count = 0;

  // Step size has underflowed against a wall the corrector cannot turn
  // through: the piecewise-linear analog of a fold. Record the vertex so a
  // builder can seed the outgoing arm, then try to turn the corner in place
  // using the one-sided tangent. Returns 0 to give up (StepUnderflow), 1 to
  // continue from the turned point, 2 if the turn landed terminally
  // (out.status already set).
  auto stall_resolve = [&]() -> int {
    if (out.points.size() >= 2 && !guts.near_existing_event(cur))
      out.events.push_back(detail::make_event(map, path, cur, true, cfg));
    if (turn_count >= 1024) return 0;
    TracePoint q;
    Tangent Tq;
    if (!detail::try_corner_turn(map, path, cur, T, cfg, q, Tq)) return 0;
    ++turn_count;
    prev_leg.reset();
    out.points.push_back(q);
    if (stop && stop(q)) {
      out.status = TraceStatus::Stopped;
      return 2;
    }
    if (q.t < path.t_min - 1e-12 || q.t > path.t_max + 1e-12) {
      out.status = TraceStatus::RangeExhausted;
      return 2;
    }
    cur = q;
    T = Tq;
    h = cfg.initial_step;
    return 1;
  };

  while (true) {
    if (static_cast<int>(out.points.size()) >= cfg.max_points) {
      out.status = TraceStatus::PointBudget;
      return out;
    }
    TracePoint next;
    int iters = 0;
    bool ok = false;
    int turned = 0;
    while (!ok) {
      try {
        next = guts.try_fraction(cur, T, h, 1.0, &iters);
        out.corrector_iterations += iters;
        ok = true;
      } catch (const Error& e) {
        if (e.code() != Errc::NewtonDivergence && e.code() != Errc::MaxIterations) throw;
        h *= 0.5;
        if (h < cfg.min_step) {
          turned = stall_resolve();
          if (turned == 0) {
            out.status = TraceStatus::StepUnderflow;
            return out;
          }
          break;
        }
      }
    }
    if (turned == 2) return out;
    if (turned == 1) continue;

    // reject steps that stall (corrector pulled the point back to cur)
    double advance = std::hypot((next.u - cur.u).norm(), next.t - cur.t);
    if (advance < 0.01 * h) {
      h *= 0.5;
      if (h < cfg.min_step) {
        turned = stall_resolve();
        if (turned == 0) {
          out.status = TraceStatus::StepUnderflow;
          return out;
        }
        if (turned == 2) return out;
      }
      continue;
    }

    double v0 = cur.probe.value, v1 = next.probe.value;
    if (v0 * v1 < 0.0) {
      guts.localize_crossing(cur, T, h, next);
    } else if (std::abs(v1) <= cfg.fold_tol) {
      if (!guts.near_existing_event(next))
        out.events.push_back(detail::make_event(map, path, next, false, cfg));
    } else if (std::abs(v0) > cfg.fold_tol &&
               std::abs(v0) <= resolve_band(cfg, cur.probe) && std::abs(v1) > std::abs(v0) &&
               prev_leg && std::abs(prev_leg->from.probe.value) > std::abs(v0)) {
      // |probe| has a local minimum at cur inside the band: hunt for a
      // tangential touch on both adjacent legs
      guts.localize_dip(prev_leg->from, prev_leg->tangent, prev_leg->step);
      guts.localize_dip(cur, T, h);
    }
    prev_leg = Leg{cur, T, h};

    out.points.push_back(next);
    if (stop && stop(next)) {
      out.status = TraceStatus::Stopped;
      return out;
    }
    if (next.t < path.t_min - 1e-12 || next.t > path.t_max + 1e-12) {
      out.status = TraceStatus::RangeExhausted;
      return out;
    }

    Tangent Tn;
    if (!tangent_or_stop(next, Tn)) return out;
    double align = Tn.u_dot.dot(T.u_dot) + Tn.t_dot * T.t_dot;
    if (align < 0.0) {
      Tn.u_dot = -Tn.u_dot;
      Tn.t_dot = -Tn.t_dot;
    }
    T = Tn;
    cur = next;
    if (iters <= 3) h = std::min(h * 2.0, cfg.max_step);
  }
}

/// Natural-parameter marching: t advances by fixed increments and u is
/// corrected by fixed-t Newton. This is the classical first-category tracer;
/// it cannot turn at folds and stalls there with StepUnderflow.
inline TraceResult trace_natural(const MapHandle& map, const CodomainPath& path,
                                 const TracePoint& start, int direction, const StepConfig& cfg) {
  cfg.validate();
  TraceResult out;
  TracePoint cur = start;
  if (cur.probe.dir.size() == 0) {
    cur.probe = criticality_probe(map, cur.u);
    cur.classification = classify_point(cfg, cur.probe);
  }
  out.points.push_back(cur);
  double h = cfg.initial_step;
  while (true) {
    if (static_cast<int>(out.points.size()) >= cfg.max_points) {
      out.status = TraceStatus::PointBudget;
      return out;
    }
    double tn = cur.t + direction * h;
    NewtonOptions nopt;
    nopt.tol = cfg.newton_tol;
    nopt.max_iter = cfg.newton_max_iter;
    auto root = newton_solve(map, path.gamma(tn), cur.u, nopt);
    if (!root) {
      h *= 0.5;
      if (h < cfg.min_step) {
        out.status = TraceStatus::StepUnderflow;
        return out;
      }
      continue;
    }
    TracePoint next;
    next.u = std::move(*root);
    next.t = tn;
    next.probe = criticality_probe(map, next.u, &cur.probe);
    next.classification = classify_point(cfg, next.probe);
    out.points.push_back(next);
    if (tn < path.t_min - 1e-12 || tn > path.t_max + 1e-12) {
      out.status = TraceStatus::RangeExhausted;
      return out;
    }
    cur = next;
    h = std::min(h * 2.0, cfg.max_step);
  }
}

}  // namespace preim
