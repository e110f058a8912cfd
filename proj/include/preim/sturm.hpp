#pragma once

#include "preim/core.hpp"
#include "preim/spectral.hpp"

#include <atomic>
#include <cstdint>
#include <random>
#include <thread>
#include <unordered_set>

namespace preim {

/// Uniform interior mesh for the second-difference operator on (0, pi):
/// h = pi / (n + 1), nodes x_i = i h for i = 1..n.
struct MeshSpec {
  Index n = 0;
  double h = 0.0;

  explicit MeshSpec(Index n_) : n(n_), h(M_PI / static_cast<double>(n_ + 1)) {
    if (n_ < 1) fail(Errc::InvalidArgument, "MeshSpec: n must be positive");
  }
  double node(Index i) const { return static_cast<double>(i + 1) * h; }
};

/// Discrete negative second-difference operator (1/h^2) tridiag(-1, 2, -1)
/// with closed-form spectrum lambda_k = (2/h^2)(1 - cos(k h)) and eigenvectors
/// sin(k x_i). The closed form is checked against a dense eigensolve on
/// construction for moderate sizes.
class TridiagonalOperator {
 public:
  explicit TridiagonalOperator(MeshSpec mesh) : mesh_(mesh) {
    if (mesh_.n <= 128) {
      double err = verify_closed_form();
      if (err > 1e-10 * (1.0 + eigenvalue(mesh_.n)))
        fail(Errc::ConvergenceFailure, "TridiagonalOperator: closed-form spectrum check failed");
    }
  }

  const MeshSpec& mesh() const { return mesh_; }
  Index n() const { return mesh_.n; }

  Matrix dense() const {
    Index n = mesh_.n;
    double w = 1.0 / (mesh_.h * mesh_.h);
    Matrix A = Matrix::Zero(n, n);
    for (Index i = 0; i < n; ++i) {
      A(i, i) = 2.0 * w;
      if (i + 1 < n) {
        A(i, i + 1) = -w;
        A(i + 1, i) = -w;
      }
    }
    return A;
  }

  SpMat sparse() const {
    Index n = mesh_.n;
    double w = 1.0 / (mesh_.h * mesh_.h);
    SpMat A(n, n);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<size_t>(3 * n));
    for (Index i = 0; i < n; ++i) {
      trip.emplace_back(static_cast<int>(i), static_cast<int>(i), 2.0 * w);
      if (i + 1 < n) {
        trip.emplace_back(static_cast<int>(i), static_cast<int>(i + 1), -w);
        trip.emplace_back(static_cast<int>(i + 1), static_cast<int>(i), -w);
      }
    }
    A.setFromTriplets(trip.begin(), trip.end());
    A.makeCompressed();
    return A;
  }

  /// k-th eigenvalue, 1-based.
  double eigenvalue(Index k) const {
    if (k < 1 || k > mesh_.n) fail(Errc::InvalidArgument, "eigenvalue: index out of range");
    double h = mesh_.h;
    return (2.0 / (h * h)) * (1.0 - std::cos(static_cast<double>(k) * h));
  }

  /// k-th eigenvector with raw entries sin(k x_i) (not normalized); this is
  /// the scaling used by the classical seed formulas.
  Vector eigenvector_raw(Index k) const {
    if (k < 1 || k > mesh_.n) fail(Errc::InvalidArgument, "eigenvector_raw: index out of range");
    Vector v(mesh_.n);
    for (Index i = 0; i < mesh_.n; ++i) v(i) = std::sin(static_cast<double>(k) * mesh_.node(i));
    return v;
  }

  /// Max deviation between the closed-form eigenvalues and a dense solve.
  double verify_closed_form() const {
    Eigen::SelfAdjointEigenSolver<Matrix> es(dense(), Eigen::EigenvaluesOnly);
    double err = 0.0;
    for (Index k = 1; k <= mesh_.n; ++k)
      err = std::max(err, std::abs(es.eigenvalues()(k - 1) - eigenvalue(k)));
    return err;
  }

 private:
  MeshSpec mesh_;
};

/// Piecewise-linear asymptotics f(x) = ell_plus * x for x >= 0, ell_minus * x
/// for x < 0, applied componentwise. Zero counts as the positive side.
struct PLNonlinearity {
  double ell_minus = 0.0;
  double ell_plus = 0.0;

  double value(double x) const { return x >= 0.0 ? ell_plus * x : ell_minus * x; }
  double slope(double x) const { return x >= 0.0 ? ell_plus : ell_minus; }
};

/// Smooth arctangent profile f(x) = a (x arctan x - ln(1+x^2)/2) + b x with
/// derivative f'(x) = a arctan(x) + b, interpolating ell_minus -> ell_plus.
struct ALNonlinearity {
  double a = 0.0;
  double b = 0.0;

  double value(double x) const {
    return a * (x * std::atan(x) - 0.5 * std::log1p(x * x)) + b * x;
  }
  double slope(double x) const { return a * std::atan(x) + b; }
  double ell_minus() const { return -a * M_PI / 2.0 + b; }
  double ell_plus() const { return a * M_PI / 2.0 + b; }
};

inline ALNonlinearity calibrate_arctan(double ell_minus, double ell_plus) {
  if (!(ell_minus < ell_plus))
    fail(Errc::InvalidArgument, "calibrate_arctan: ell_minus must be below ell_plus");
  ALNonlinearity nl;
  nl.a = (ell_plus - ell_minus) / M_PI;
  nl.b = (ell_plus + ell_minus) / 2.0;
  return nl;
}

/// Half-gap ladder for the jumping-nonlinearity family: ell_plus placed between
/// consecutive eigenvalues (k < n), or past the top of the spectrum (k = n).
inline double ladder_ell_plus(const TridiagonalOperator& op, Index k) {
  if (k < 1 || k > op.n()) fail(Errc::InvalidArgument, "ladder_ell_plus: k out of range");
  if (k < op.n()) return 0.5 * (op.eigenvalue(k) + op.eigenvalue(k + 1));
  return op.eigenvalue(op.n()) + 0.5 * op.eigenvalue(1);
}

namespace detail {

template <class Nl>
MapHandle make_sturm_map(const TridiagonalOperator& op, Nl nl, bool piecewise) {
  MapHandle m;
  m.n = op.n();
  m.symmetric = true;
  SpMat A = op.sparse();
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
  if (piecewise) {
    m.line_kinks = [](const Vector& base, const Vector& dir) {
      std::vector<double> s;
      for (Index i = 0; i < base.size(); ++i) {
        if (std::abs(dir(i)) > 1e-14 * (1.0 + std::abs(base(i)))) {
          double si = -base(i) / dir(i);
          if (std::isfinite(si)) s.push_back(si);
        }
      }
      std::sort(s.begin(), s.end());
      return s;
    };
  }
  return m;
}

}  // namespace detail

/// F(u) = A u - f(u) for the piecewise-linear profile.
inline MapHandle make_pl_map(const TridiagonalOperator& op, const PLNonlinearity& nl) {
  return detail::make_sturm_map(op, nl, true);
}

/// F(u) = A u - f(u) for the smooth arctangent profile.
inline MapHandle make_al_map(const TridiagonalOperator& op, const ALNonlinearity& nl) {
  return detail::make_sturm_map(op, nl, false);
}

/// Direction vector sum(coeff * sin(k I_h)) from (mode, coefficient) pairs,
/// in the raw sine scaling.
inline Vector direction_from_modes(const TridiagonalOperator& op,
                                   const std::vector<std::pair<Index, double>>& modes) {
  Vector d = Vector::Zero(op.n());
  for (const auto& [k, c] : modes) d += c * op.eigenvector_raw(k);
  return d;
}

/// Classical seed pair for F(u) = -t sin(I_h): u = t phi_1 / (ell - lambda_1)
/// for each asymptotic slope, valid when the slopes straddle lambda_1.
struct SeedPair {
  Vector positive;  // lies in the all-positive orthant
  Vector negative;  // lies in the all-negative orthant
};

inline SeedPair lazer_mckenna_seeds(const TridiagonalOperator& op, const PLNonlinearity& nl,
                                    double t) {
  double l1 = op.eigenvalue(1);
  if (!(nl.ell_minus < l1 && l1 < nl.ell_plus))
    fail(Errc::EigenvalueStraddle, "lazer_mckenna_seeds: slopes must straddle lambda_1");
  Vector phi1 = op.eigenvector_raw(1);
  SeedPair s;
  s.positive = (t / (nl.ell_plus - l1)) * phi1;
  s.negative = (t / (nl.ell_minus - l1)) * phi1;
  return s;
}

struct CensusItem {
  Vector u;
  std::uint64_t orthant = 0;  // bit i set <=> coordinate i nonnegative
  int morse_index = 0;
  double residue = 0.0;
};

struct OrthantCensus {
  std::vector<CensusItem> solutions;  // deduped, canonically ordered
  std::uint64_t orthants_total = 0;
  std::uint64_t singular_skips = 0;
  std::uint64_t nongeneric_hits = 0;  // solutions with a zero entry (within ztol)
};

struct CensusOptions {
  double ztol = 1e-9;        // zero-entry slack, scaled by (1 + ||u||_inf)
  double dedupe_tol = 1e-8;  // scaled by (1 + ||u||)
  int threads = 1;
  bool with_morse = true;
};

namespace detail {

inline Matrix orthant_jacobian(const Matrix& A, const PLNonlinearity& nl, std::uint64_t bits) {
  Matrix J = A;
  for (Index i = 0; i < A.rows(); ++i)
    J(i, i) -= (bits >> i) & 1ull ? nl.ell_plus : nl.ell_minus;
  return J;
}

struct OrthantHit {
  Vector u;
  std::uint64_t bits;
  bool nongeneric;
};

/// Solve the affine system of one orthant and keep it if the solution's sign
/// pattern is consistent with that orthant.
inline std::optional<OrthantHit> try_orthant(const Matrix& A, const PLNonlinearity& nl,
                                             const Vector& g, std::uint64_t bits, double ztol,
                                             bool* singular) {
  Matrix J = orthant_jacobian(A, nl, bits);
  Eigen::PartialPivLU<Matrix> lu(J);
  if (lu.rcond() < 1e-13) {
    if (singular) *singular = true;
    return std::nullopt;
  }
  Vector u = lu.solve(g);
  if (!u.allFinite()) {
    if (singular) *singular = true;
    return std::nullopt;
  }
  double z = ztol * (1.0 + u.lpNorm<Eigen::Infinity>());
  bool nongeneric = false;
  for (Index i = 0; i < u.size(); ++i) {
    bool plus = (bits >> i) & 1ull;
    if (std::abs(u(i)) <= z) {
      nongeneric = true;
      continue;
    }
    if (plus != (u(i) > 0.0)) return std::nullopt;
  }
  return OrthantHit{std::move(u), bits, nongeneric};
}

inline bool lex_less(const Vector& a, const Vector& b) {
  for (Index i = 0; i < a.size(); ++i) {
    if (a(i) < b(i)) return true;
    if (a(i) > b(i)) return false;
  }
  return false;
}

}  // namespace detail

/// Deduplicate a batch of solution vectors: canonical lexicographic order,
/// then greedy clustering at tol * (1 + ||u||).
inline std::vector<Vector> dedupe_vectors(std::vector<Vector> batch, double tol) {
  std::sort(batch.begin(), batch.end(), detail::lex_less);
  std::vector<Vector> kept;
  for (const auto& u : batch) {
    bool dup = false;
    for (const auto& v : kept) {
      if ((u - v).norm() <= tol * (1.0 + v.norm())) {
        dup = true;
        break;
      }
    }
    if (!dup) kept.push_back(u);
  }
  return kept;
}

/// Exhaustive orthant census for the piecewise-linear problem (A - D^sigma) u = g:
/// every sign pattern is solved and kept iff the solution lands in its own
/// orthant. Solutions with zero entries appear from both adjacent orthants and
/// are deduped. Deterministic for any thread count (workers own index stripes,
/// results merge in orthant order).
inline OrthantCensus enumerate_pl_solutions(const TridiagonalOperator& op,
                                            const PLNonlinearity& nl, const Vector& g,
                                            const CensusOptions& opt = {}) {
  Index n = op.n();
  if (n > 25) fail(Errc::InvalidArgument, "enumerate_pl_solutions: 2^n orthants is too many");
  if (g.size() != n) fail(Errc::InvalidArgument, "enumerate_pl_solutions: rhs dimension mismatch");
  Matrix A = op.dense();
  std::uint64_t total = 1ull << n;
  int nworkers = std::max(1, opt.threads);
  std::vector<std::vector<detail::OrthantHit>> hits(nworkers);
  std::vector<std::uint64_t> singular(nworkers, 0), nongeneric(nworkers, 0);

  auto work = [&](int w) {
    std::uint64_t lo = total * w / nworkers, hi = total * (w + 1) / nworkers;
    for (std::uint64_t bits = lo; bits < hi; ++bits) {
      bool sing = false;
      auto hit = detail::try_orthant(A, nl, g, bits, opt.ztol, &sing);
      if (sing) ++singular[w];
      if (hit) {
        if (hit->nongeneric) ++nongeneric[w];
        hits[w].push_back(std::move(*hit));
      }
    }
  };
  if (nworkers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < nworkers; ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }

  OrthantCensus census;
  census.orthants_total = total;
  for (int w = 0; w < nworkers; ++w) {
    census.singular_skips += singular[w];
    census.nongeneric_hits += nongeneric[w];
  }

  std::vector<detail::OrthantHit> all;
  for (auto& hw : hits)
    for (auto& h : hw) all.push_back(std::move(h));
  std::sort(all.begin(), all.end(),
            [](const detail::OrthantHit& a, const detail::OrthantHit& b) {
              return detail::lex_less(a.u, b.u);
            });
  MapHandle map = make_pl_map(op, nl);
  for (auto& h : all) {
    bool dup = false;
    for (const auto& kept : census.solutions) {
      if ((h.u - kept.u).norm() <= opt.dedupe_tol * (1.0 + kept.u.norm())) {
        dup = true;
        break;
      }
    }
    if (dup) continue;
    CensusItem item;
    item.u = std::move(h.u);
    item.orthant = h.bits;
    item.residue = residue_of(map, item.u, g);
    if (opt.with_morse) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(detail::orthant_jacobian(A, nl, h.bits),
                                               Eigen::EigenvaluesOnly);
      item.morse_index = static_cast<int>((es.eigenvalues().array() < 0.0).count());
    }
    census.solutions.push_back(std::move(item));
  }
  return census;
}

/// Random orthant probing: draw sign patterns without replacement, solve each,
/// and collect consistent solutions. Deterministic per seed.
inline std::vector<Vector> sample_orthant_seeds(const TridiagonalOperator& op,
                                                const PLNonlinearity& nl, const Vector& g,
                                                std::uint64_t max_draws, std::uint64_t rng_seed,
                                                bool stop_at_first = false,
                                                std::uint64_t* draws_used = nullptr) {
  Index n = op.n();
  if (n > 63) fail(Errc::InvalidArgument, "sample_orthant_seeds: n too large for bit patterns");
  Matrix A = op.dense();
  std::mt19937_64 rng(rng_seed);
  std::unordered_set<std::uint64_t> seen;
  std::uint64_t total = (n >= 64) ? ~0ull : (1ull << n);
  std::vector<Vector> found;
  std::uint64_t draws = 0;
  while (draws < max_draws && seen.size() < total) {
    std::uint64_t bits = rng() & (total - 1);
    if (!seen.insert(bits).second) continue;
    ++draws;
    auto hit = detail::try_orthant(A, nl, g, bits, 1e-9, nullptr);
    if (hit) {
      found.push_back(std::move(hit->u));
      if (stop_at_first) break;
    }
  }
  if (draws_used) *draws_used = draws;
  return found;
}

enum class SlabTest { Fold, NotCritical, Degenerate, SingularAdjacent };

inline const char* slab_test_name(SlabTest t) {
  switch (t) {
    case SlabTest::Fold: return "Fold";
    case SlabTest::NotCritical: return "NotCritical";
    case SlabTest::Degenerate: return "Degenerate";
    case SlabTest::SingularAdjacent: return "SingularAdjacent";
  }
  return "Unknown";
}

/// Exact fold test at a slab wall: a point with one zero coordinate is a fold
/// of the piecewise-linear map iff the Jacobian determinants of the two
/// adjacent orthants have opposite signs.
inline SlabTest slab_fold_test(const TridiagonalOperator& op, const PLNonlinearity& nl,
                               const Vector& u, double ztol = 1e-9) {
  Index n = op.n();
  if (u.size() != n) fail(Errc::InvalidArgument, "slab_fold_test: dimension mismatch");
  double z = ztol * (1.0 + u.lpNorm<Eigen::Infinity>());
  std::vector<Index> zeros;
  for (Index i = 0; i < n; ++i)
    if (std::abs(u(i)) <= z) zeros.push_back(i);
  if (zeros.empty()) return SlabTest::NotCritical;
  if (zeros.size() > 1) return SlabTest::Degenerate;

  Matrix A = op.dense();
  std::uint64_t bits = 0;
  for (Index i = 0; i < n; ++i)
    if (u(i) > z) bits |= 1ull << i;
  auto det_sign = [&](std::uint64_t b) -> int {
    Matrix J = detail::orthant_jacobian(A, nl, b);
    Eigen::PartialPivLU<Matrix> lu(J);
    if (lu.rcond() < 1e-13) return 0;
    double d = lu.determinant();
    return (d > 0.0) - (d < 0.0);
  };
  int s0 = det_sign(bits);                          // zero coordinate on the negative side
  int s1 = det_sign(bits | (1ull << zeros[0]));     // and on the positive side
  if (s0 == 0 || s1 == 0) return SlabTest::SingularAdjacent;
  return (s0 != s1) ? SlabTest::Fold : SlabTest::NotCritical;
}

}  // namespace preim
