#pragma once

// Bifurcation-diagram construction over a line of right-hand sides.
//
// Given F and a domain line c(s) = base + s * direction with F(base) = g, the
// diagram is the preimage F^{-1}({F(c(s))}) organized as branches: the root
// line itself plus every arm reachable by passing folds. Each fold event
// spawns mirror branches seeded on the opposite side of the critical point;
// harvesting intersects branches with the levels where the image line returns
// to g and Newton-refines the crossings into exact solutions of F(u) = g.

#include <algorithm>
#include <cmath>
#include <deque>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "preim/continuation.hpp"
#include "preim/core.hpp"
#include "preim/spectral.hpp"

namespace preim {

/// A line of domain seeds c(s) = base + s * direction, s in [s_min, s_max].
/// The diagram is built over its image gamma(s) = F(c(s)).
struct LineSpec {
  Vector base;
  Vector direction;
  double s_min = -1.0;
  double s_max = 1.0;
  std::string description;
};

/// The codomain path traced out by the image of a domain line.
inline CodomainPath line_image_path(const MapHandle& map, const LineSpec& line) {
  CodomainPath p;
  Vector b = line.base;
  Vector d = line.direction;
  auto eval = map.eval;
  p.gamma = [eval, b, d](double s) { return eval(b + s * d); };
  if (map.has_sparse()) {
    auto sj = map.sparse_jac;
    p.gamma_prime = [sj, b, d](double s) { return Vector(sj(b + s * d) * d); };
  } else {
    auto j = map.jac;
    p.gamma_prime = [j, b, d](double s) { return Vector(j(b + s * d) * d); };
  }
  p.t_min = line.s_min;
  p.t_max = line.s_max;
  return p;
}

enum class BranchTerminal { RangeExhausted, StepUnderflow, Merged, Budget };

inline const char* branch_terminal_name(BranchTerminal t) {
  switch (t) {
    case BranchTerminal::RangeExhausted: return "RangeExhausted";
    case BranchTerminal::StepUnderflow: return "StepUnderflow";
    case BranchTerminal::Merged: return "Merged";
    case BranchTerminal::Budget: return "Budget";
  }
  return "?";
}

struct Branch {
  int id = 0;
  int depth = 0;  // fold generations between this branch and the root line
  std::optional<FoldEvent> parent_fold;
  int merged_with = -1;  // branch this one ran into, when terminal == Merged
  std::vector<TracePoint> points;
  BranchTerminal terminal = BranchTerminal::RangeExhausted;
};

struct SolutionItem {
  Vector u;
  double residue = 0.0;  // relative residue of F(u) = g
  int morse = -1;        // Morse index on symmetric problems, -1 when untagged
  int branch_id = -1;    // branch whose crossing produced the solution
  double level = 0.0;    // parameter s0 of the harvest level gamma(s0) = g
};

struct SolutionSet {
  std::vector<SolutionItem> items;
  double dedupe_tol = 1e-6;  // relative identity tolerance used to dedupe
};

struct DiagramBudget {
  long traces = 0;
  long fold_events = 0;
  long corrector_iterations = 0;
  long newton_calls = 0;
  bool exhausted = false;  // a limit clipped the exploration; diagram partial
};

struct DiagramConfig {
  StepConfig step;
  int depth_limit = 4;     // fold-spawn recursion depth
  int root_samples = 400;  // probe samples along the root line
  double residue_threshold = 1e-10;  // relative-residue gate for harvesting
  double dedupe_tol = 1e-6;          // relative point-identity tolerance
  int max_branches = 256;
  long max_total_points = 400000;
  bool with_morse = true;  // tag Morse indices on symmetric problems

  void validate() const {
    step.validate();
    if (depth_limit < 0) fail(Errc::InvalidArgument, "DiagramConfig: depth_limit must be >= 0");
    if (root_samples < 8) fail(Errc::InvalidArgument, "DiagramConfig: root_samples must be >= 8");
    if (!(dedupe_tol > 0.0)) fail(Errc::InvalidArgument, "DiagramConfig: dedupe_tol must be > 0");
    if (!(residue_threshold > 0.0))
      fail(Errc::InvalidArgument, "DiagramConfig: residue_threshold must be > 0");
    if (max_branches < 1) fail(Errc::InvalidArgument, "DiagramConfig: max_branches must be >= 1");
  }
};

struct BifurcationDiagram {
  LineSpec line;
  MapHandle map;      // the problem the diagram belongs to
  CodomainPath path;  // gamma(s) = F(base + s * direction)
  DiagramConfig cfg;
  std::vector<Branch> branches;  // branches[0] is the root line
  std::vector<FoldEvent> folds;
  SolutionSet solutions;  // harvested at build time
  DiagramBudget budget_spent;
};

namespace detail {

inline double point_identity_radius(const DiagramConfig& cfg, const Vector& u, double t) {
  return cfg.dedupe_tol * (1.0 + u.norm() + std::abs(t));
}

/// Traced points hashed into t-buckets for near-neighbor lookups against
/// previously recorded branches.
class PointCloud {
 public:
  explicit PointCloud(double bucket_width) : w_(std::max(bucket_width, 1e-12)) {}

  void add(const Vector& u, double t, int branch) {
    buckets_[key(t)].push_back(static_cast<int>(items_.size()));
    items_.push_back(Item{u, t, branch});
  }

  struct Hit {
    Vector u;
    double t = 0.0;
    int branch = -1;
    double dist = 0.0;
  };

  /// Closest stored point within radius r of (u, t), if any.
  std::optional<Hit> nearest(const Vector& u, double t, double r) const {
    long long k0 = key(t - r), k1 = key(t + r);
    const Item* best = nullptr;
    double best_d = r;
    for (long long k = k0; k <= k1; ++k) {
      auto it = buckets_.find(k);
      if (it == buckets_.end()) continue;
      for (int idx : it->second) {
        const Item& cand = items_[static_cast<size_t>(idx)];
        if (std::abs(cand.t - t) > r) continue;
        double d = std::hypot((cand.u - u).norm(), cand.t - t);
        if (d <= best_d) {
          best_d = d;
          best = &cand;
        }
      }
    }
    if (!best) return std::nullopt;
    return Hit{best->u, best->t, best->branch, best_d};
  }

 private:
  struct Item {
    Vector u;
    double t;
    int branch;
  };

  long long key(double t) const { return static_cast<long long>(std::floor(t / w_)); }

  double w_;
  std::vector<Item> items_;
  std::unordered_map<long long, std::vector<int>> buckets_;
};

/// Wall parameters of the map along the line, clipped to the open range,
/// sorted and deduplicated. Empty for smooth maps.
inline std::vector<double> interior_knots(const MapHandle& map, const LineSpec& line) {
  std::vector<double> knots;
  if (!map.line_kinks) return knots;
  double span = line.s_max - line.s_min;
  double edge = 1e-12 * (1.0 + span);
  for (double w : map.line_kinks(line.base, line.direction))
    if (w > line.s_min + edge && w < line.s_max - edge) knots.push_back(w);
  std::sort(knots.begin(), knots.end());
  knots.erase(std::unique(knots.begin(), knots.end(),
                          [&](double a, double b) { return std::abs(a - b) <= edge; }),
              knots.end());
  return knots;
}

/// Sample parameters: a uniform grid refined with the midpoints of every cell
/// the knots cut, so that adjacent samples always bracket at most one knot.
/// Samples landing exactly on a knot are dropped (one-sided Jacobians there
/// would make the probe side-dependent).
inline std::vector<double> root_sample_grid(const LineSpec& line, const std::vector<double>& knots,
                                            int root_samples) {
  double span = line.s_max - line.s_min;
  double edge = 1e-12 * (1.0 + span);
  int n = std::max(root_samples, 8);
  std::vector<double> S;
  S.reserve(static_cast<size_t>(n) + 2 * knots.size() + 2);
  for (int i = 0; i < n; ++i)
    S.push_back(line.s_min + span * static_cast<double>(i) / static_cast<double>(n - 1));
  // midpoints of the cells the knots delimit, including the boundary cells
  std::vector<double> cuts;
  cuts.push_back(line.s_min);
  cuts.insert(cuts.end(), knots.begin(), knots.end());
  cuts.push_back(line.s_max);
  for (size_t i = 0; i + 1 < cuts.size(); ++i) S.push_back(0.5 * (cuts[i] + cuts[i + 1]));
  std::sort(S.begin(), S.end());
  S.erase(std::unique(S.begin(), S.end(), [&](double a, double b) { return std::abs(a - b) <= edge; }),
          S.end());
  // drop samples on (or within noise of) a knot
  std::vector<double> out;
  out.reserve(S.size());
  double guard = 1e-11 * (1.0 + span);
  for (double s : S) {
    bool on_knot = false;
    auto it = std::lower_bound(knots.begin(), knots.end(), s - guard);
    if (it != knots.end() && std::abs(*it - s) <= guard) on_knot = true;
    if (!on_knot) out.push_back(s);
  }
  return out;
}

inline bool near_fold_event(const FoldEvent& ev, const Vector& u, double t, const StepConfig& scfg) {
  double r = 10.0 * scfg.fold_tol * (1.0 + ev.u.norm() + std::abs(ev.t));
  return std::hypot((ev.u - u).norm(), ev.t - t) <= r;
}

inline bool near_any_fold_event(const std::vector<FoldEvent>& evs, const Vector& u, double t,
                                const StepConfig& scfg) {
  for (const FoldEvent& ev : evs)
    if (near_fold_event(ev, u, t, scfg)) return true;
  return false;
}

/// Decide whether (u_from, t_from) and (u_to, t_to) lie on the same diagram
/// curve by walking the parameter across in a few fixed-t Newton hops. A
/// walker keeps landing on its own sheet; one long-range Newton would gamble
/// on basin geometry and can hop sheets where the diagram is crowded.
inline bool same_curve_walk(const MapHandle& map, const CodomainPath& path, const Vector& u_from,
                            double t_from, const Vector& u_to, double t_to, double accept_rad,
                            DiagramBudget& budget) {
  NewtonOptions nopt;
  Vector cur = u_from;
  double total = (u_to - u_from).norm() + 1e-15;
  const int kSteps = 4;
  for (int k = 1; k <= kSteps; ++k) {
    double tk = t_from + (t_to - t_from) * k / kSteps;
    ++budget.newton_calls;
    auto r = newton_solve(map, path.gamma(tk), cur, nopt);
    if (!r) return false;
    if ((*r - cur).norm() > 2.0 * total) return false;  // left the sheet
    cur = *r;
  }
  return (cur - u_to).norm() <= accept_rad;
}

/// Golden-section minimizer for |probe| along the root line (analytic in s,
/// no corrector involved).
inline std::pair<double, double> golden_min(const std::function<double(double)>& f, double a,
                                            double b, int iters) {
  const double r = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = b - r * (b - a), x2 = a + r * (b - a);
  double f1 = f(x1), f2 = f(x2);
  for (int i = 0; i < iters; ++i) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - r * (b - a);
      f1 = f(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + r * (b - a);
      f2 = f(x2);
    }
  }
  return f1 <= f2 ? std::make_pair(x1, f1) : std::make_pair(x2, f2);
}

/// Locate every criticality event on the root line: sign changes across a
/// wall knot become kinks at the knot, smooth sign changes are bisected to
/// |probe| <= fold_tol, direct landings and tangential dips are kept as
/// smooth events.
inline std::vector<FoldEvent> root_events(const MapHandle& map, const CodomainPath& path,
                                          const LineSpec& line, const std::vector<double>& S,
                                          const std::vector<CritProbe>& P,
                                          const std::vector<double>& knots,
                                          const DiagramConfig& cfg, DiagramBudget& budget) {
  std::vector<FoldEvent> out;
  const StepConfig& scfg = cfg.step;
  auto point_at = [&](double s, const CritProbe* prev) {
    TracePoint tp;
    tp.u = line.base + s * line.direction;
    tp.t = s;
    tp.probe = criticality_probe(map, tp.u, prev);
    tp.classification = classify_point(scfg, tp.probe);
    return tp;
  };
  auto emit = [&](const TracePoint& tp, bool collapsed) {
    if (near_any_fold_event(out, tp.u, tp.t, scfg)) return;
    if (out.size() >= 64) {
      budget.exhausted = true;
      return;
    }
    FoldEvent ev = make_event(map, path, tp, collapsed, scfg);
    ev.branch_id = 0;
    out.push_back(std::move(ev));
  };

  for (size_t i = 0; i + 1 < S.size(); ++i) {
    double a = S[i], b = S[i + 1];
    double va = P[i].value, vb = P[i + 1].value;

    if (std::abs(va) <= scfg.fold_tol) {
      TracePoint tp;
      tp.u = line.base + a * line.direction;
      tp.t = a;
      tp.probe = P[i];
      tp.classification = classify_point(scfg, P[i]);
      emit(tp, false);
      continue;
    }

    if (va * vb < 0.0) {
      // a knot inside the cell carries the jump; the grid guarantees at most one
      auto kit = std::lower_bound(knots.begin(), knots.end(), a);
      if (kit != knots.end() && *kit < b) {
        double w = *kit;
        TracePoint tp;
        tp.u = line.base + w * line.direction;
        tp.t = w;
        tp.probe = std::abs(va) <= std::abs(vb) ? P[i] : P[i + 1];
        tp.classification = classify_point(scfg, tp.probe);
        emit(tp, true);
        continue;
      }
      // smooth bisection
      double lo = a, hi = b;
      CritProbe plo = P[i];
      TracePoint best;
      bool found = false, collapsed = false;
      for (int it = 0; it < 80; ++it) {
        double uscale = 1.0 + (line.base + lo * line.direction).lpNorm<Eigen::Infinity>();
        if ((hi - lo) * (1.0 + line.direction.norm()) < 1e-12 * (uscale + std::abs(lo))) {
          best = point_at(std::abs(plo.value) <= std::abs(vb) ? lo : hi, &plo);
          found = true;
          collapsed = true;
          break;
        }
        double mid = 0.5 * (lo + hi);
        TracePoint tm = point_at(mid, &plo);
        if (std::abs(tm.probe.value) <= scfg.fold_tol) {
          best = tm;
          found = true;
          break;
        }
        if (plo.value * tm.probe.value < 0.0) {
          hi = mid;
          vb = tm.probe.value;
        } else {
          lo = mid;
          plo = tm.probe;
        }
      }
      if (!found) best = point_at(0.5 * (lo + hi), &plo);
      emit(best, collapsed);
      continue;
    }

    // tangential dip: |probe| has an interior local minimum at S[i] that
    // reaches into the fold band without a sign change on either side
    if (i > 0) {
      double vm = P[i - 1].value;
      double band = resolve_band(scfg, P[i]);
      if (std::abs(va) > scfg.fold_tol && std::abs(va) <= band && std::abs(vb) > std::abs(va) &&
          std::abs(vm) > std::abs(va) && vm * va > 0.0) {
        CritProbe anchor = P[i];
        auto absprobe = [&](double s) {
          return std::abs(criticality_probe(map, line.base + s * line.direction, &anchor).value);
        };
        auto [sbest, fbest] = golden_min(absprobe, S[i - 1], b, 40);
        if (fbest <= scfg.fold_tol) {
          TracePoint tp = point_at(sbest, &anchor);
          emit(tp, false);
        }
      }
    }
  }

  // every interior knot of a piecewise-linear line is a kink of the diagram
  // and therefore a legitimate branch point, sign flip or not: sheets can
  // hang tangentially off the root exactly at its wall crossings
  for (double w : knots) {
    if (w <= line.s_min || w >= line.s_max) continue;
    TracePoint tp;
    tp.u = line.base + w * line.direction;
    tp.t = w;
    tp.probe = criticality_probe(map, tp.u, nullptr);
    tp.classification = classify_point(scfg, tp.probe);
    emit(tp, true);
  }

  budget.fold_events += static_cast<long>(out.size());
  return out;
}

struct MirrorSeed {
  Vector u;
  double t = 0.0;
  Vector away;  // unit vector from the critical point to the seed
};

/// Newton-correct mirror seeds u_c +/- eps * phi onto the diagram just off
/// the fold parameter. The dt and eps ladders escalate until each side of
/// the event yields arms or is exhausted; candidates that land back on the
/// root line or on recorded branches are rejected.
inline std::vector<MirrorSeed> mirror_seeds(const MapHandle& map, const CodomainPath& path,
                                            const LineSpec& line, const FoldEvent& ev,
                                            const DiagramConfig& cfg, const PointCloud& cloud,
                                            DiagramBudget& budget) {
  std::vector<MirrorSeed> out;
  if (ev.phi.size() != map.n) return out;
  const StepConfig& scfg = cfg.step;
  double span = path.t_max - path.t_min;
  double dt0 = std::max(10.0 * scfg.fold_tol * (1.0 + std::abs(ev.t)), 1e-7 * span);
  NewtonOptions nopt;

  // the root branch's point of THIS fiber; a candidate elsewhere on the line
  // belongs to a different parameter and is a genuine new diagram point
  auto is_root_point = [&](const Vector& r, double sp) {
    Vector croot = line.base + sp * line.direction;
    double rad = std::max(point_identity_radius(cfg, r, sp), 1e-8 * (1.0 + r.norm()));
    return (r - croot).norm() <= rad;
  };

  // a previously accepted seed and a candidate may sample the same sheet at
  // slightly different parameters; one fixed-parameter Newton hop from the
  // seed onto the candidate's fiber settles whether they are the same arm
  auto same_seed_sheet = [&](const MirrorSeed& m, const Vector& r, double sp) -> bool {
    ++budget.newton_calls;
    auto q = newton_solve(map, path.gamma(sp), m.u, nopt);
    if (!q) return false;
    return (*q - r).norm() <= 1e-3 * (1.0 + r.norm());
  };

  auto try_accept = [&](const Vector& r, double sp, double ball_center_dist) -> bool {
    if (ball_center_dist > 0.5 * (1.0 + ev.u.norm())) return false;  // basin jump
    if (is_root_point(r, sp)) return false;
    double rad = point_identity_radius(cfg, r, sp);
    if (auto hit = cloud.nearest(r, sp, rad)) {
      (void)hit;
      return false;
    }
    for (const MirrorSeed& m : out) {
      if (std::hypot((m.u - r).norm(), m.t - sp) <= rad) return false;
      if (std::abs(m.t - sp) <= 1e-2 * (1.0 + std::abs(sp)) && same_seed_sheet(m, r, sp))
        return false;
    }
    MirrorSeed m;
    m.u = r;
    m.t = sp;
    Vector aw = r - ev.u;
    double awn = aw.norm();
    m.away = awn > 0.0 ? Vector(aw / awn) : Vector(ev.phi);
    out.push_back(std::move(m));
    return true;
  };

  // --- stage 0: exact local fiber at a kink vertex ---
  // a piecewise-linear map is affine on every orthant, so near a kink the
  // fiber can be enumerated exactly: for each sign pattern over the walls
  // passing close to the vertex, one linear solve yields the candidate
  // fiber point of that orthant and the residual certifies it. This sees
  // arms in orthants the host curve never enters — sheets may cross or
  // fold at the vertex arriving from any wall side, with slopes far too
  // steep for tangent-based prediction.
  if (ev.kind != FoldKind::Fold) {
    double scale = 1.0 + ev.u.lpNorm<Eigen::Infinity>();
    double wloc = 2e-3 * scale;
    std::vector<int> walls;
    for (int i = 0; i < map.n; ++i)
      if (std::abs(ev.u(i)) <= wloc) walls.push_back(i);
    std::sort(walls.begin(), walls.end(),
              [&](int a, int b) { return std::abs(ev.u(a)) < std::abs(ev.u(b)); });
    if (walls.size() > 6) walls.resize(6);  // tightest walls only
    if (!walls.empty()) {
      struct OrthantSolve {
        Vector p;
        Vector b;
        Eigen::PartialPivLU<Matrix> lu;
      };
      std::vector<OrthantSolve> fans;
      fans.reserve(std::size_t{1} << walls.size());
      for (unsigned mask = 0; mask < (1u << walls.size()); ++mask) {
        OrthantSolve os;
        os.p = ev.u;
        for (size_t k = 0; k < walls.size(); ++k)
          os.p(walls[k]) = ((mask >> k) & 1u) ? wloc : -wloc;
        os.b = map.eval(os.p);
        os.lu.compute(map.jac(os.p));
        fans.push_back(std::move(os));
      }
      for (double hmag : {0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3}) {
        for (double hsgn : {+1.0, -1.0}) {
          if (hmag == 0.0 && hsgn < 0.0) continue;
          double sp = ev.t + hsgn * hmag * (1.0 + std::abs(ev.t));
          if (sp < path.t_min || sp > path.t_max) continue;
          Vector target = path.gamma(sp);
          for (const OrthantSolve& os : fans) {
            Vector v = os.p + os.lu.solve(target - os.b);
            if (!v.allFinite()) continue;
            if ((map.eval(v) - target).norm() > 1e-9 * (1.0 + target.norm())) {
              // left the orthant mid-solve: polish, accept only if it settles
              ++budget.newton_calls;
              auto r = newton_solve(map, target, v, nopt);
              if (!r) continue;
              v = *r;
            }
            if (try_accept(v, sp, (v - ev.u).norm()) && out.size() >= 8) return out;
          }
        }
      }
    }
  }

  // --- stage 1: eigenvector ladder ---
  for (double side : {+1.0, -1.0}) {
    int side_found = 0;
    // sub-dt0 rungs matter: an arm that folds at the event with steep du/dt
    // is only within Newton's reach when the parameter offset is tiny
    for (double mult : {1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0, 1000.0}) {
      double sp = ev.t + side * mult * dt0;
      if (sp < path.t_min || sp > path.t_max) break;
      Vector target = path.gamma(sp);
      for (double sgn : {+1.0, -1.0}) {
        for (double dscale : {1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 5e-2, 0.2}) {
          double delta = dscale * (1.0 + ev.u.norm());
          Vector seed = ev.u + (sgn * delta) * ev.phi;
          ++budget.newton_calls;
          auto r = newton_solve(map, target, seed, nopt);
          if (!r) continue;
          if (try_accept(*r, sp, (*r - ev.u).norm())) ++side_found;
          if (out.size() >= 8) return out;
        }
      }
      // arms recovered at the smallest workable offset are the best
      // representatives; larger offsets would just re-find their continuations
      if (side_found > 0) break;
    }
  }
  return out;
}

/// Levels s0 where the image line returns to the right-hand side:
/// local minima of ||gamma(s) - g|| refined by golden section and accepted
/// when they reach zero to tolerance. s0 = 0 is always a level.
inline std::vector<double> harvest_levels(const MapHandle& map, const CodomainPath& path,
                                          const LineSpec& line, const Vector& g,
                                          const DiagramConfig& cfg) {
  std::vector<double> knots = interior_knots(map, line);
  std::vector<double> S = root_sample_grid(line, knots, std::max(cfg.root_samples, 64));
  std::vector<double> d(S.size());
  for (size_t i = 0; i < S.size(); ++i) d[i] = (path.gamma(S[i]) - g).norm();
  double accept = 1e-8 * (1.0 + g.norm());
  double span = line.s_max - line.s_min;
  std::vector<double> levels{0.0};
  auto push_level = [&](double s) {
    for (double e : levels)
      if (std::abs(e - s) <= 1e-7 * (1.0 + span)) return;
    levels.push_back(s);
  };
  auto dist = [&](double s) { return (path.gamma(s) - g).norm(); };
  for (size_t i = 0; i < S.size(); ++i) {
    bool lmin = (i == 0 || d[i] <= d[i - 1]) && (i + 1 == S.size() || d[i] <= d[i + 1]);
    if (!lmin) continue;
    double a = i == 0 ? S[0] : S[i - 1];
    double b = i + 1 == S.size() ? S.back() : S[i + 1];
    auto [sbest, dbest] = golden_min(dist, a, b, 60);
    if (d[i] < dbest) {
      sbest = S[i];
      dbest = d[i];
    }
    if (dbest <= accept) push_level(sbest);
  }
  std::sort(levels.begin(), levels.end());
  return levels;
}

}  // namespace detail

/// Intersect every branch with the levels gamma(s0) = g, Newton-refine the
/// crossings into solutions of F(u) = g, gate on relative residue, dedupe
/// canonically, and tag Morse indices on symmetric problems.
inline SolutionSet harvest_solutions(const BifurcationDiagram& D, const Vector& g) {
  const MapHandle& map = D.map;
  const DiagramConfig& cfg = D.cfg;
  SolutionSet out;
  out.dedupe_tol = cfg.dedupe_tol;

  std::vector<double> levels = detail::harvest_levels(map, D.path, D.line, g, cfg);
  std::vector<SolutionItem> cands;
  NewtonOptions nopt;

  auto consider = [&](const Vector& u0, int bid, double s0) {
    auto r = newton_solve(map, g, u0, nopt);
    if (!r) return;
    if ((*r - u0).norm() > 0.5 * (1.0 + u0.norm())) return;  // left the basin
    double res = residue_of(map, *r, g);
    if (!(res <= cfg.residue_threshold)) return;
    SolutionItem it;
    it.u = *r;
    it.residue = res;
    it.branch_id = bid;
    it.level = s0;
    cands.push_back(std::move(it));
  };

  for (const Branch& b : D.branches) {
    for (size_t i = 0; i + 1 < b.points.size(); ++i) {
      double t0 = b.points[i].t, t1 = b.points[i + 1].t;
      for (double s0 : levels) {
        if ((t0 - s0) * (t1 - s0) > 0.0) continue;
        double dt = t1 - t0;
        double w = std::abs(dt) > 1e-300 ? std::clamp((s0 - t0) / dt, 0.0, 1.0) : 0.0;
        Vector u0 = b.points[i].u + w * (b.points[i + 1].u - b.points[i].u);
        consider(u0, b.id, s0);
      }
    }
  }
  for (const FoldEvent& fe : D.folds)
    for (double s0 : levels)
      if (std::abs(fe.t - s0) <= 10.0 * cfg.step.fold_tol * (1.0 + std::abs(s0)))
        consider(fe.u, fe.branch_id, s0);

  std::sort(cands.begin(), cands.end(), [](const SolutionItem& a, const SolutionItem& b) {
    for (Index i = 0; i < a.u.size(); ++i)
      if (a.u(i) != b.u(i)) return a.u(i) < b.u(i);
    return a.level < b.level;
  });
  for (SolutionItem& c : cands) {
    bool dup = false;
    for (const SolutionItem& k : out.items)
      if ((k.u - c.u).norm() <= cfg.dedupe_tol * (1.0 + k.u.norm())) {
        dup = true;
        break;
      }
    if (!dup) out.items.push_back(std::move(c));
  }

  if (cfg.with_morse && map.symmetric)
    for (SolutionItem& it : out.items) it.morse = morse_index(Matrix(map.jac(it.u)));
  return out;
}

/// Build the bifurcation diagram of F over the line: trace the root line's
/// criticality profile, localize its fold events, and recursively spawn
/// mirror branches through every event up to depth_limit. The returned
/// diagram carries the harvested solutions of F(u) = g.
inline BifurcationDiagram build_diagram(const MapHandle& map, const LineSpec& line, const Vector& g,
                                        const DiagramConfig& cfg = {}) {
  cfg.validate();
  if (line.base.size() != map.n || line.direction.size() != map.n)
    fail(Errc::InvalidArgument, "build_diagram: line dimensions do not match the map");
  if (!(line.direction.norm() > 0.0))
    fail(Errc::InvalidArgument, "build_diagram: line direction must be nonzero");
  if (!(line.s_min < line.s_max))
    fail(Errc::InvalidArgument, "build_diagram: need s_min < s_max");
  if (line.s_min > 0.0 || line.s_max < 0.0)
    fail(Errc::InvalidArgument, "build_diagram: the s-range must contain 0 (the seed)");

  BifurcationDiagram D;
  D.line = line;
  D.map = map;
  D.cfg = cfg;
  D.path = line_image_path(map, line);

  if (residue_of(map, line.base, g) > 1e-8)
    fail(Errc::SeedNotOnDiagram, "build_diagram: F(base) does not reproduce the right-hand side");

  double span = line.s_max - line.s_min;

  // --- root line: analytic branch, probed on a knot-aware grid ---
  std::vector<double> knots = detail::interior_knots(map, line);
  std::vector<double> S = detail::root_sample_grid(line, knots, cfg.root_samples);
  std::vector<CritProbe> P(S.size());
  for (size_t i = 0; i < S.size(); ++i)
    P[i] = criticality_probe(map, line.base + S[i] * line.direction, i > 0 ? &P[i - 1] : nullptr);

  Branch root;
  root.id = 0;
  root.depth = 0;
  root.terminal = BranchTerminal::RangeExhausted;
  root.points.reserve(S.size());
  for (size_t i = 0; i < S.size(); ++i) {
    TracePoint tp;
    tp.u = line.base + S[i] * line.direction;
    tp.t = S[i];
    tp.probe = P[i];
    tp.classification = classify_point(cfg.step, P[i]);
    root.points.push_back(std::move(tp));
  }

  D.folds = detail::root_events(map, D.path, line, S, P, knots, cfg, D.budget_spent);

  detail::PointCloud cloud(std::max(span / 1024.0, 1e-9 * (1.0 + span)));
  for (const TracePoint& p : root.points) cloud.add(p.u, p.t, 0);
  long total_points = static_cast<long>(root.points.size());
  D.branches.push_back(std::move(root));

  // --- breadth-first fold exploration ---
  // depth_limit counts smooth fold generations only: a piecewise-linear
  // diagram crosses a kink per wall and its arm count is governed by merging
  // and the branch cap, not by how many walls a chain happens to thread
  std::deque<std::tuple<FoldEvent, int, int>> queue;  // event, host depth, host fold-gen
  for (const FoldEvent& ev : D.folds) queue.emplace_back(ev, 0, 0);

  bool out_of_budget = false;
  while (!queue.empty() && !out_of_budget) {
    auto [ev, host_depth, host_gen] = queue.front();
    queue.pop_front();
    int spawn_gen = host_gen + (ev.kind == FoldKind::Fold ? 1 : 0);
    if (spawn_gen > cfg.depth_limit) {
      D.budget_spent.exhausted = true;
      continue;
    }
    std::vector<detail::MirrorSeed> seeds =
        detail::mirror_seeds(map, D.path, line, ev, cfg, cloud, D.budget_spent);
    for (detail::MirrorSeed& seed : seeds) {
      if (static_cast<int>(D.branches.size()) >= cfg.max_branches ||
          total_points >= cfg.max_total_points) {
        D.budget_spent.exhausted = true;
        out_of_budget = true;
        break;
      }
      int bid = static_cast<int>(D.branches.size());

      int consecutive = 0, merged_into = -1;
      bool points_budget = false;
      auto stopfn = [&](const TracePoint& p) -> bool {
        if (total_points + consecutive + 1 >= cfg.max_total_points) {
          points_budget = true;
          return true;
        }
        // near folds the fiber points coalesce and identity tests are
        // meaningless (the confirmation Newton may land on either sheet),
        // so merge detection only runs on regular points
        if (p.classification != PointClass::Regular) {
          consecutive = 0;
          return false;
        }
        double r_big = 0.75 * cfg.step.max_step;
        auto hit = cloud.nearest(p.u, p.t, r_big);
        if (hit) {
          double rad = std::max(detail::point_identity_radius(cfg, hit->u, hit->t),
                                1e-7 * (1.0 + hit->u.norm()));
          if (detail::same_curve_walk(map, D.path, p.u, p.t, hit->u, hit->t, rad,
                                      D.budget_spent)) {
            if (++consecutive >= 3) {
              merged_into = hit->branch;
              return true;
            }
            return false;
          }
        }
        consecutive = 0;
        return false;
      };

      TracePoint start;
      start.u = seed.u;
      start.t = seed.t;
      // a seed can sit on a crossing sheet as easily as on a fold arm, so
      // the branch is traced away from the event and back across it; a pure
      // fold arm just retraces its sibling, which the merge guard absorbs
      TraceResult fwd = trace(map, D.path, start, +1, cfg.step, stopfn, &seed.away, 0.0);
      ++D.budget_spent.traces;
      D.budget_spent.corrector_iterations += fwd.corrector_iterations;
      total_points += static_cast<long>(fwd.points.size());
      int fwd_merge = merged_into;
      TraceStatus fwd_status = fwd.status;

      consecutive = 0;
      merged_into = -1;
      Vector rdir = -seed.away;
      TraceResult bwd = trace(map, D.path, start, -1, cfg.step, stopfn, &rdir, 0.0);
      ++D.budget_spent.traces;
      D.budget_spent.corrector_iterations += bwd.corrector_iterations;
      total_points += static_cast<long>(bwd.points.size()) - 1;

      Branch br;
      br.id = bid;
      br.depth = host_depth + 1;
      br.parent_fold = ev;
      br.points.reserve(bwd.points.size() - 1 + fwd.points.size());
      for (size_t k = bwd.points.size(); k-- > 1;) br.points.push_back(std::move(bwd.points[k]));
      for (TracePoint& p : fwd.points) br.points.push_back(std::move(p));

      auto to_terminal = [&](TraceStatus st, int mrg) -> BranchTerminal {
        switch (st) {
          case TraceStatus::RangeExhausted: return BranchTerminal::RangeExhausted;
          case TraceStatus::StepUnderflow: return BranchTerminal::StepUnderflow;
          case TraceStatus::PointBudget:
            D.budget_spent.exhausted = true;
            return BranchTerminal::Budget;
          case TraceStatus::Stopped:
            if (mrg >= 0) return BranchTerminal::Merged;
            if (points_budget) D.budget_spent.exhausted = true;
            return BranchTerminal::Budget;
        }
        return BranchTerminal::Budget;
      };
      BranchTerminal term_f = to_terminal(fwd_status, fwd_merge);
      BranchTerminal term_b = to_terminal(bwd.status, merged_into);
      if (fwd_merge >= 0) {
        br.terminal = BranchTerminal::Merged;
        br.merged_with = fwd_merge;
      } else if (merged_into >= 0) {
        br.terminal = BranchTerminal::Merged;
        br.merged_with = merged_into;
      } else {
        br.terminal = term_f == BranchTerminal::RangeExhausted ? term_b : term_f;
      }

      for (const TracePoint& p : br.points) cloud.add(p.u, p.t, bid);
      for (const TraceResult* tr : {&fwd, &bwd}) {
        for (FoldEvent fe : tr->events) {
          if (detail::near_any_fold_event(D.folds, fe.u, fe.t, cfg.step)) continue;
          fe.branch_id = bid;
          D.folds.push_back(fe);
          ++D.budget_spent.fold_events;
          queue.emplace_back(D.folds.back(), host_depth + 1, spawn_gen);
        }
      }
      D.branches.push_back(std::move(br));
    }
  }
  if (!queue.empty()) D.budget_spent.exhausted = true;

  D.solutions = harvest_solutions(D, g);
  return D;
}

struct LineReport {
  int line_index = 0;
  std::string description;
  std::string error;  // nonempty when the diagram failed to build
  int harvested = 0;  // solutions on this line's own diagram
  int new_found = 0;  // solutions not already seen on earlier lines
  std::vector<int> solution_ids;  // indices into the campaign solution set
};

struct CampaignResult {
  SolutionSet solutions;
  std::vector<LineReport> lines;
  std::vector<BifurcationDiagram> diagrams;  // kept only when requested
};

/// Build a diagram per line, harvest each, and merge the solution sets with
/// a global dedupe. A line whose diagram fails to build is reported, not
/// fatal. Lines are processed in order, so the result is deterministic.
inline CampaignResult multi_line_campaign(const MapHandle& map, const std::vector<LineSpec>& lines,
                                          const Vector& g, const DiagramConfig& cfg = {},
                                          bool keep_diagrams = false) {
  cfg.validate();
  CampaignResult R;
  R.solutions.dedupe_tol = cfg.dedupe_tol;
  for (size_t li = 0; li < lines.size(); ++li) {
    LineReport rep;
    rep.line_index = static_cast<int>(li);
    rep.description = lines[li].description;
    try {
      BifurcationDiagram D = build_diagram(map, lines[li], g, cfg);
      rep.harvested = static_cast<int>(D.solutions.items.size());
      for (const SolutionItem& it : D.solutions.items) {
        int found = -1;
        for (size_t k = 0; k < R.solutions.items.size(); ++k)
          if ((R.solutions.items[k].u - it.u).norm() <=
              cfg.dedupe_tol * (1.0 + R.solutions.items[k].u.norm())) {
            found = static_cast<int>(k);
            break;
          }
        if (found < 0) {
          found = static_cast<int>(R.solutions.items.size());
          R.solutions.items.push_back(it);
          ++rep.new_found;
        }
        rep.solution_ids.push_back(found);
      }
      if (keep_diagrams) R.diagrams.push_back(std::move(D));
    } catch (const Error& e) {
      rep.error = e.what();
    }
    R.lines.push_back(std::move(rep));
  }
  return R;
}

/// Convenience form pairing seed points with directions (either list may be
/// a singleton, broadcast against the other) over a common s-range.
inline CampaignResult multi_line_campaign(const MapHandle& map, const std::vector<Vector>& seeds,
                                          const std::vector<Vector>& directions, const Vector& g,
                                          double s_min, double s_max, const DiagramConfig& cfg = {},
                                          bool keep_diagrams = false) {
  if (seeds.empty() || directions.empty())
    fail(Errc::InvalidArgument, "multi_line_campaign: need at least one seed and one direction");
  if (seeds.size() != directions.size() && seeds.size() != 1 && directions.size() != 1)
    fail(Errc::InvalidArgument, "multi_line_campaign: seed/direction lists must zip or broadcast");
  size_t n = std::max(seeds.size(), directions.size());
  std::vector<LineSpec> lines(n);
  for (size_t i = 0; i < n; ++i) {
    lines[i].base = seeds[std::min(i, seeds.size() - 1)];
    lines[i].direction = directions[std::min(i, directions.size() - 1)];
    lines[i].s_min = s_min;
    lines[i].s_max = s_max;
    lines[i].description = "line " + std::to_string(i);
  }
  return multi_line_campaign(map, lines, g, cfg, keep_diagrams);
}

}  // namespace preim
