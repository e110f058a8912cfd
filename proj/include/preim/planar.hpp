#pragma once

// Plane-map testbed: built-in maps carrying closed-form determinants,
// implicit tracing of the critical curve {det DF = 0}, brute-force preimage
// counting by multistart Newton, flower computation (the full preimage of
// the critical image), and verification of the tile-parity law (adjacent
// image tiles across a fold arc differ by exactly two preimages).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "continuation.hpp"
#include "core.hpp"

namespace preim {

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

/// A map of the plane bundled with a closed-form determinant of its Jacobian.
/// The determinant drives critical-curve tracing; it must agree with the
/// 2x2 determinant of `handle.jac` to 1e-10.
struct PlanarMap {
  MapHandle handle;
  std::function<double(double, double)> det;
  std::string name;
};

/// An axis-aligned rectangle used as the working window of the plane.
struct PlanarBox {
  double x_min = -4.0, x_max = 4.0;
  double y_min = -4.0, y_max = 4.0;

  bool contains(const Vector& v, double slack = 0.0) const {
    return v(0) >= x_min - slack && v(0) <= x_max + slack && v(1) >= y_min - slack &&
           v(1) <= y_max + slack;
  }
  double diameter() const { return std::hypot(x_max - x_min, y_max - y_min); }
};

/// Ordered polyline on {det DF = 0}; `closed` when the trace returned to its
/// starting point rather than leaving the working box.
struct CriticalCurve {
  std::vector<TracePoint> polyline;
  bool closed = false;
};

/// Probe points in the codomain with their brute-force preimage counts, and
/// the adjacency differences checked across fold-image arcs.
struct TileProbe {
  Vector y;
  int count = -1;           // filled by verify_tile_parity when negative
  bool suspect = false;     // basin crowding during the count
};

struct AdjacencyCheck {
  int first = 0, second = 0;  // indices into probe_points
  int difference = -1;        // |count_a - count_b|, filled by verification
};

struct TileReport {
  std::vector<TileProbe> probe_points;
  std::vector<AdjacencyCheck> adjacency_checks;
  PlanarBox box;
  int grid = 64;
  std::vector<std::string> notes;  // e.g. NonFoldBoundary diagnostics
};

// ---------------------------------------------------------------------------
// built-in maps
// ---------------------------------------------------------------------------

namespace detail {

inline MapHandle planar_handle(std::function<Vector(double, double)> f,
                               std::function<Matrix(double, double)> j) {
  MapHandle h;
  h.n = 2;
  h.eval = [f = std::move(f)](const Vector& u) { return f(u(0), u(1)); };
  h.jac = [j = std::move(j)](const Vector& u) { return j(u(0), u(1)); };
  h.symmetric = false;
  return h;
}

inline Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

}  // namespace detail

/// The quadratic model map (x, y) -> (x^2 - y^2 + x, 2xy - y). Its critical
/// set is the circle of radius 1/2 about the origin; the bounded image tile
/// has four preimages and the unbounded one two.
inline PlanarMap planar_circle_fold() {
  PlanarMap m;
  m.name = "circle-fold";
  m.handle = detail::planar_handle(
      [](double x, double y) { return detail::vec2(x * x - y * y + x, 2.0 * x * y - y); },
      [](double x, double y) {
        Matrix J(2, 2);
        J << 2.0 * x + 1.0, -2.0 * y, 2.0 * y, 2.0 * x - 1.0;
        return J;
      });
  m.det = [](double x, double y) { return 4.0 * x * x + 4.0 * y * y - 1.0; };
  return m;
}

/// The pleat map (x, y) -> (cos x - x^2 cos x + 2x sin x, y) on x > -0.1.
/// Critical set: the vertical lines x = k*pi; every critical point is a fold.
inline PlanarMap planar_pleat() {
  PlanarMap m;
  m.name = "pleat";
  m.handle = detail::planar_handle(
      [](double x, double y) {
        return detail::vec2(std::cos(x) - x * x * std::cos(x) + 2.0 * x * std::sin(x), y);
      },
      [](double x, double y) {
        (void)y;
        Matrix J(2, 2);
        J << (1.0 + x * x) * std::sin(x), 0.0, 0.0, 1.0;
        return J;
      });
  m.det = [](double x, double y) {
    (void)y;
    return (1.0 + x * x) * std::sin(x);
  };
  return m;
}

/// The plane cubic z -> z^3 + (12/5) zbar^2 + z in real coordinates. Nine
/// zeros; the critical set consists of two closed curves; image tiles count
/// 9 / 7 / 5 / 3 preimages from the inner triangle outward.
inline PlanarMap planar_cubic() {
  PlanarMap m;
  m.name = "cubic";
  const double c = 2.4;
  m.handle = detail::planar_handle(
      [c](double x, double y) {
        return detail::vec2(x * x * x - 3.0 * x * y * y + c * (x * x - y * y) + x,
                            3.0 * x * x * y - y * y * y - 2.0 * c * x * y + y);
      },
      [c](double x, double y) {
        Matrix J(2, 2);
        J << 3.0 * (x * x - y * y) + 2.0 * c * x + 1.0, -6.0 * x * y - 2.0 * c * y,
            6.0 * x * y - 2.0 * c * y, 3.0 * (x * x - y * y) - 2.0 * c * x + 1.0;
        return J;
      });
  m.det = [c](double x, double y) {
    double a = 3.0 * (x * x - y * y) + 1.0;
    double b = 2.0 * c * x;
    return a * a - b * b + 36.0 * x * x * y * y - 4.0 * c * c * y * y;
  };
  return m;
}

/// The coordinate-squares map (x, y) -> (x^2, y^2). Its image is the closed
/// positive quadrant and crossing a non-origin boundary value changes the
/// preimage count by four, the canonical violation of fold parity.
inline PlanarMap planar_squares() {
  PlanarMap m;
  m.name = "squares";
  m.handle = detail::planar_handle(
      [](double x, double y) { return detail::vec2(x * x, y * y); },
      [](double x, double y) {
        Matrix J(2, 2);
        J << 2.0 * x, 0.0, 0.0, 2.0 * y;
        return J;
      });
  m.det = [](double x, double y) { return 4.0 * x * y; };
  return m;
}

// ---------------------------------------------------------------------------
// critical-curve tracing
// ---------------------------------------------------------------------------

namespace detail {

/// Gradient of the determinant by central differences on the closed form.
inline Vector det_gradient(const PlanarMap& map, const Vector& u) {
  double s = 1e-6 * (1.0 + u.lpNorm<Eigen::Infinity>());
  Vector g(2);
  g(0) = (map.det(u(0) + s, u(1)) - map.det(u(0) - s, u(1))) / (2.0 * s);
  g(1) = (map.det(u(0), u(1) + s) - map.det(u(0), u(1) - s)) / (2.0 * s);
  return g;
}

/// Project a point onto {det = 0} along the determinant gradient.
inline std::optional<Vector> project_to_critical(const PlanarMap& map, Vector u, double tol,
                                                 int max_iter = 60) {
  for (int it = 0; it < max_iter; ++it) {
    double d = map.det(u(0), u(1));
    if (std::abs(d) <= tol) return u;
    Vector g = det_gradient(map, u);
    double gn2 = g.squaredNorm();
    if (!(gn2 > 0.0) || !std::isfinite(gn2)) return std::nullopt;
    u -= (d / gn2) * g;
    if (!u.allFinite()) return std::nullopt;
  }
  return std::abs(map.det(u(0), u(1))) <= tol ? std::optional<Vector>(u) : std::nullopt;
}

}  // namespace detail

struct CurveTraceConfig {
  double step = 0.02;          // arclength predictor step
  double min_step = 1e-7;
  double det_tol = 1e-10;      // corrector target on |det|
  int max_vertices = 20000;
  PlanarBox box;
};

/// Follow the zero level set of det DF from a seed until it closes up or
/// leaves the working box. The seed must already be near the critical set
/// (found e.g. by a sign-change scan on a grid).
inline CriticalCurve trace_critical_curve(const PlanarMap& map, const Vector& seed,
                                          const CurveTraceConfig& cfg = {}) {
  if (seed.size() != 2) fail(Errc::InvalidArgument, "trace_critical_curve: seed must be planar");
  double scale = 1.0 + seed.lpNorm<Eigen::Infinity>();
  if (std::abs(map.det(seed(0), seed(1))) > 0.5 * scale)
    fail(Errc::SeedNotNearCritical, "trace_critical_curve: determinant too large at seed");
  auto start = detail::project_to_critical(map, seed, cfg.det_tol);
  if (!start)
    fail(Errc::SeedNotNearCritical, "trace_critical_curve: projection onto det=0 failed");
  Vector g0 = detail::det_gradient(map, *start);
  if (!(g0.norm() > 0.0))
    fail(Errc::SeedNotNearCritical, "trace_critical_curve: degenerate determinant gradient");

  // march the level set from *start in one direction; closes = returned home
  auto march = [&](double dir, bool& closes) {
    std::vector<Vector> pts{*start};
    closes = false;
    Vector cur = *start;
    Vector g = detail::det_gradient(map, cur);
    Vector tang = dir * detail::vec2(-g(1), g(0)).normalized();
    double h = cfg.step, arc = 0.0;
    while (static_cast<int>(pts.size()) < cfg.max_vertices) {
      Vector pred = cur + h * tang;
      auto nxt = detail::project_to_critical(map, pred, cfg.det_tol, 40);
      if (!nxt || (*nxt - cur).norm() < 0.05 * h || (*nxt - cur).norm() > cfg.step * (1.0 + 1e-9)) {
        h *= 0.5;
        if (h < cfg.min_step) break;  // stuck (e.g. sharp degeneracy): stop here
        continue;
      }
      Vector gn = detail::det_gradient(map, *nxt);
      Vector t_new = detail::vec2(-gn(1), gn(0));
      if (!(t_new.norm() > 0.0)) break;
      t_new.normalize();
      if (t_new.dot(tang) < 0.0) t_new = -t_new;
      arc += (*nxt - cur).norm();
      cur = *nxt;
      tang = t_new;
      pts.push_back(cur);
      h = std::min(h * 1.5, cfg.step);
      if (!cfg.box.contains(cur)) break;
      if (pts.size() > 8 && arc > 4.0 * cfg.step && (cur - *start).norm() <= cfg.step) {
        closes = true;
        pts.push_back(*start);  // repeat the start vertex so the loop renders closed
        break;
      }
    }
    return pts;
  };

  bool closed_fwd = false, closed_bwd = false;
  std::vector<Vector> fwd = march(+1.0, closed_fwd);
  std::vector<Vector> merged;
  if (closed_fwd) {
    merged = std::move(fwd);
  } else {
    std::vector<Vector> bwd = march(-1.0, closed_bwd);
    merged.reserve(fwd.size() + bwd.size());
    for (size_t k = bwd.size(); k-- > 1;) merged.push_back(std::move(bwd[k]));
    for (Vector& v : fwd) merged.push_back(std::move(v));
  }

  CriticalCurve curve;
  curve.closed = closed_fwd;
  double arc = 0.0;
  for (size_t k = 0; k < merged.size(); ++k) {
    if (k > 0) arc += (merged[k] - curve.polyline.back().u).norm();
    TracePoint tp;
    tp.u = std::move(merged[k]);
    tp.t = arc;  // cumulative arclength stands in for the fiber parameter
    tp.probe.value = map.det(tp.u(0), tp.u(1));
    tp.probe.planar = true;
    curve.polyline.push_back(std::move(tp));
  }
  return curve;
}

/// Classify a planar critical point: a fold when the determinant gradient is
/// not orthogonal to ker DF (the kernel crosses the critical curve
/// transversally); Degenerate otherwise (cusp-like vertices).
inline FoldKind classify_critical_point(const PlanarMap& map, const Vector& u,
                                        double angle_tol = 1e-4) {
  Matrix J = map.handle.jac(u);
  // kernel of a (numerically) singular 2x2: orthogonal to its larger row
  Vector r0 = J.row(0), r1 = J.row(1);
  Vector row = r0.norm() >= r1.norm() ? r0 : r1;
  if (!(row.norm() > 0.0)) return FoldKind::Degenerate;  // DF = 0: flat point
  Vector k = detail::vec2(-row(1), row(0)).normalized();
  Vector g = detail::det_gradient(map, u);
  double gn = g.norm();
  if (!(gn > 0.0)) return FoldKind::Degenerate;
  return std::abs(k.dot(g) / gn) > angle_tol ? FoldKind::Fold : FoldKind::Degenerate;
}

/// Sign-change scan over a grid: one refined seed per sign-flip cluster of
/// the determinant, each projected onto the critical set. Seeds that land
/// within `separation` of an earlier one are dropped.
inline std::vector<Vector> critical_seeds(const PlanarMap& map, const PlanarBox& box = {},
                                          int grid = 64, double separation = 0.25) {
  std::vector<Vector> seeds;
  double dx = (box.x_max - box.x_min) / grid;
  double dy = (box.y_max - box.y_min) / grid;
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j <= grid; ++j) {
      double x0 = box.x_min + i * dx, x1 = x0 + dx;
      double y = box.y_min + j * dy;
      double d0 = map.det(x0, y), d1 = map.det(x1, y);
      if (d0 == 0.0) d0 = -1e-300;
      if (d0 * d1 >= 0.0) continue;
      // bisect the horizontal edge
      double a = x0, b = x1;
      for (int it = 0; it < 60; ++it) {
        double m = 0.5 * (a + b);
        double dm = map.det(m, y);
        if (dm == 0.0) {
          a = b = m;
          break;
        }
        ((dm > 0.0) == (d0 > 0.0) ? a : b) = m;
      }
      Vector cand = detail::vec2(0.5 * (a + b), y);
      bool dup = false;
      for (const Vector& s : seeds)
        if ((s - cand).norm() < separation) dup = true;
      if (!dup) seeds.push_back(std::move(cand));
    }
  }
  return seeds;
}

/// Trace every critical curve the seed scan can reach: each surviving seed is
/// traced, and later seeds lying on an already-traced polyline are skipped.
inline std::vector<CriticalCurve> trace_all_critical_curves(const PlanarMap& map,
                                                            const CurveTraceConfig& cfg = {},
                                                            int grid = 64) {
  std::vector<CriticalCurve> curves;
  for (const Vector& seed : critical_seeds(map, cfg.box, grid)) {
    bool covered = false;
    for (const CriticalCurve& c : curves) {
      for (const TracePoint& tp : c.polyline) {
        if ((tp.u - seed).norm() <= 2.0 * cfg.step) {
          covered = true;
          break;
        }
      }
      if (covered) break;
    }
    if (covered) continue;
    curves.push_back(trace_critical_curve(map, seed, cfg));
  }
  return curves;
}

// ---------------------------------------------------------------------------
// preimage counting
// ---------------------------------------------------------------------------

struct CountOptions {
  double dedupe_tol = 1e-6;
  NewtonOptions newton;
};

/// Brute-force preimage count: Newton from grid x grid starts across the box,
/// converged roots deduplicated. Sets *suspect when two distinct roots sit
/// within 10x the dedupe tolerance (basins may have been conflated).
inline std::vector<Vector> preimage_points(const PlanarMap& map, const Vector& y,
                                           const PlanarBox& box, int grid,
                                           bool* suspect = nullptr,
                                           const CountOptions& opt = {}) {
  if (y.size() != 2) fail(Errc::InvalidArgument, "preimage_points: target must be planar");
  if (grid < 2) fail(Errc::InvalidArgument, "preimage_points: grid must be at least 2");
  std::vector<Vector> roots;
  if (suspect) *suspect = false;
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      Vector u0 = detail::vec2(box.x_min + (i + 0.5) * (box.x_max - box.x_min) / grid,
                               box.y_min + (j + 0.5) * (box.y_max - box.y_min) / grid);
      auto r = newton_solve(map.handle, y, u0, opt.newton);
      if (!r) continue;
      if (!box.contains(*r, 1e-6 * box.diameter())) continue;
      bool dup = false;
      for (const Vector& known : roots) {
        double d = (known - *r).norm();
        double rad = opt.dedupe_tol * (1.0 + known.norm());
        if (d <= rad) {
          dup = true;
        } else if (suspect && d <= 10.0 * rad) {
          *suspect = true;  // crowded basins: the count may be unsafe
        }
      }
      if (!dup) roots.push_back(std::move(*r));
    }
  }
  return roots;
}

inline int count_preimages(const PlanarMap& map, const Vector& y, const PlanarBox& box = {},
                           int grid = 64, bool* suspect = nullptr, const CountOptions& opt = {}) {
  return static_cast<int>(preimage_points(map, y, box, grid, suspect, opt).size());
}

// ---------------------------------------------------------------------------
// flower computation
// ---------------------------------------------------------------------------

struct FlowerConfig {
  int multistart_grid = 28;     // inversion starts per sampled image point
  int sample_stride = 1;        // consume every k-th vertex of the curve
  int component_budget = 96;    // hard cap on live components
  double link_factor = 6.0;     // chain linking radius, in units of sample spacing
  PlanarBox box;
};

/// All preimage components of the image of each traced critical curve:
/// the flower F^-1(F(C)). Sampled image points are inverted by multistart
/// Newton and the converged roots chained into polylines by proximity
/// between consecutive samples. Throws ComponentBudgetExceeded when the
/// component cap is hit (partial output would be misleading).
inline std::vector<std::vector<Vector>> compute_flower(const PlanarMap& map,
                                                       const std::vector<CriticalCurve>& curves,
                                                       const FlowerConfig& cfg = {}) {
  std::vector<std::vector<Vector>> components;
  CountOptions copt;
  for (const CriticalCurve& curve : curves) {
    if (curve.polyline.size() < 2) continue;
    double spacing = 0.0;
    for (size_t k = 0; k + 1 < curve.polyline.size(); ++k)
      spacing += (curve.polyline[k + 1].u - curve.polyline[k].u).norm();
    spacing /= static_cast<double>(curve.polyline.size() - 1);
    double link_radius = cfg.link_factor * spacing * std::max(1, cfg.sample_stride);

    // live chains: component index + tail point; a chain not extended by the
    // current sample dies, an unclaimed preimage point opens a new one
    std::vector<std::pair<int, Vector>> live;
    for (size_t k = 0; k < curve.polyline.size();
         k += static_cast<size_t>(std::max(1, cfg.sample_stride))) {
      Vector target = map.handle.eval(curve.polyline[k].u);
      std::vector<Vector> pts =
          preimage_points(map, target, cfg.box, cfg.multistart_grid, nullptr, copt);
      std::vector<bool> used(pts.size(), false);
      std::vector<std::pair<int, Vector>> next_live;
      for (auto& [ci, tail] : live) {
        int best = -1;
        double bd = link_radius;
        for (size_t p = 0; p < pts.size(); ++p) {
          if (used[p]) continue;
          double d = (pts[p] - tail).norm();
          if (d < bd) {
            bd = d;
            best = static_cast<int>(p);
          }
        }
        if (best < 0) continue;
        used[best] = true;
        components[ci].push_back(pts[best]);
        next_live.emplace_back(ci, pts[best]);
      }
      for (size_t p = 0; p < pts.size(); ++p) {
        if (used[p]) continue;
        if (static_cast<int>(components.size()) >= cfg.component_budget)
          fail(Errc::ComponentBudgetExceeded, "compute_flower: component cap hit");
        components.push_back({pts[p]});
        next_live.emplace_back(static_cast<int>(components.size()) - 1, pts[p]);
      }
      live = std::move(next_live);
    }
  }
  // drop isolated specks (single-sample chains are usually basin noise)
  std::erase_if(components, [](const std::vector<Vector>& c) { return c.size() < 3; });
  return components;
}

// ---------------------------------------------------------------------------
// tile parity
// ---------------------------------------------------------------------------

/// Fill in the probe counts of a report and verify the fold-parity law:
/// every checked adjacent pair must differ by exactly two preimages. Pairs
/// violating it are recorded in notes as NonFoldBoundary and make the
/// verification fail.
inline bool verify_tile_parity(const PlanarMap& map, TileReport& report) {
  for (TileProbe& probe : report.probe_points)
    if (probe.count < 0)
      probe.count = count_preimages(map, probe.y, report.box, report.grid, &probe.suspect);
  bool ok = true;
  for (AdjacencyCheck& chk : report.adjacency_checks) {
    if (chk.first < 0 || chk.second < 0 ||
        chk.first >= static_cast<int>(report.probe_points.size()) ||
        chk.second >= static_cast<int>(report.probe_points.size()))
      fail(Errc::InvalidArgument, "verify_tile_parity: probe index out of range");
    const TileProbe& a = report.probe_points[chk.first];
    const TileProbe& b = report.probe_points[chk.second];
    chk.difference = std::abs(a.count - b.count);
    if (chk.difference != 2) {
      ok = false;
      report.notes.push_back("NonFoldBoundary: probes " + std::to_string(chk.first) + "/" +
                             std::to_string(chk.second) + " differ by " +
                             std::to_string(chk.difference));
    }
  }
  return ok;
}

}  // namespace preim
