#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "batchaug/errors.hpp"
#include "batchaug/rng.hpp"

namespace batchaug::dynamics {

// ---------------------------------------------------------------------------
// Dense square matrices (row-major, double)

struct Matrix {
  std::size_t n = 0;
  std::vector<double> a;

  Matrix() = default;
  explicit Matrix(std::size_t size, double fill = 0.0) : n(size), a(size * size, fill) {}

  static Matrix identity(std::size_t size) {
    Matrix m(size);
    for (std::size_t i = 0; i < size; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }

  [[nodiscard]] bool symmetric(double tol = 0.0) const {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (std::abs((*this)(i, j) - (*this)(j, i)) > tol) return false;
    return true;
  }
};

using Vec = std::vector<double>;

inline double dot(const Vec& x, const Vec& y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}
inline double norm(const Vec& x) { return std::sqrt(dot(x, x)); }

inline Vec matvec(const Matrix& m, const Vec& x) {
  Vec y(m.n, 0.0);
  for (std::size_t i = 0; i < m.n; ++i) {
    double s = 0;
    const double* row = &m.a[i * m.n];
    for (std::size_t j = 0; j < m.n; ++j) s += row[j] * x[j];
    y[i] = s;
  }
  return y;
}

inline Matrix matmul(const Matrix& x, const Matrix& y) {
  Matrix z(x.n);
  for (std::size_t i = 0; i < x.n; ++i)
    for (std::size_t k = 0; k < x.n; ++k) {
      const double xik = x(i, k);
      for (std::size_t j = 0; j < x.n; ++j) z(i, j) += xik * y(k, j);
    }
  return z;
}

/// x^T m x
inline double quad_form(const Matrix& m, const Vec& x) { return dot(x, matvec(m, x)); }

// ---------------------------------------------------------------------------
// Symmetric eigensolvers

struct Eigen {
  Vec values;                // ascending
  std::vector<Vec> vectors;  // vectors[i] pairs with values[i], unit norm
};

/// Cyclic Jacobi rotations; intended for n <= 64.
inline Eigen jacobi_eigen(Matrix m, std::size_t max_sweeps = 100) {
  detail::require(m.symmetric(1e-12 * (1.0 + std::abs(*std::max_element(m.a.begin(), m.a.end(),
                                                                         [](double x, double y) {
                                                                           return std::abs(x) < std::abs(y);
                                                                         })))),
                  "jacobi_eigen: matrix is not symmetric");
  const std::size_t n = m.n;
  Matrix v = Matrix::identity(n);
  double frob = 0;
  for (double x : m.a) frob += x * x;
  frob = std::sqrt(frob);
  std::size_t sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += m(p, q) * m(p, q);
    if (std::sqrt(off) <= 1e-15 * frob || frob == 0.0) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m(p, q);
        if (apq == 0.0) continue;
        const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double mkp = m(k, p), mkq = m(k, q);
          m(k, p) = c * mkp - s * mkq;
          m(k, q) = s * mkp + c * mkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double mpk = m(p, k), mqk = m(q, k);
          m(p, k) = c * mpk - s * mqk;
          m(q, k) = s * mpk + c * mqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  if (sweep == max_sweeps) throw NumericalError("jacobi_eigen: no convergence after " + std::to_string(max_sweeps) + " sweeps");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return m(x, x) < m(y, y); });
  Eigen e;
  for (std::size_t i : order) {
    e.values.push_back(m(i, i));
    Vec col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v(k, i);
    e.vectors.push_back(std::move(col));
  }
  return e;
}

struct PowerResult {
  double value = 0;
  Vec vector;
  std::size_t iterations = 0;
};

/// Largest eigenvalue of a symmetric PSD matrix. Converged when the Rayleigh
/// quotient changes by at most tol relative between iterations.
inline PowerResult power_iteration(const Matrix& m, RngStream stream, double tol = 1e-10,
                                   std::size_t max_iter = 100000) {
  PowerResult r;
  Vec x(m.n);
  for (double& v : x) v = stream.normal();
  double nx = norm(x);
  for (double& v : x) v /= nx;
  double prev = 0, delta = 0;
  for (std::size_t it = 1; it <= max_iter; ++it) {
    Vec y = matvec(m, x);
    const double rq = dot(x, y);
    const double ny = norm(y);
    if (ny == 0.0) return {0.0, x, it};
    for (std::size_t i = 0; i < y.size(); ++i) y[i] /= ny;
    x = std::move(y);
    delta = std::abs(rq - prev);
    if (it > 1 && delta <= tol * std::abs(rq)) return {dot(x, matvec(m, x)), x, it};
    prev = rq;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "power_iteration: no convergence in %zu iterations (last change %.3e, estimate %.12g)",
                max_iter, delta, prev);
  throw NumericalError(buf);
}

inline double top_eigenvalue(const Matrix& m, const RngStream& stream = RngStream(0)) {
  if (m.n <= 64) return jacobi_eigen(m).values.back();
  return power_iteration(m, stream).value;
}

// ---------------------------------------------------------------------------
// Quadratic problems

/// Per-sample Hessians H_n = G_n G_n^T over a fixed partition into N/B
/// batches; each factor is d x rank_n, row-major.
struct QuadraticProblem {
  std::size_t d = 0;
  std::size_t batch = 1;
  std::vector<std::size_t> ranks;     // per sample
  std::vector<Vec> factors;           // per sample, d * rank
  std::vector<std::vector<std::size_t>> partition;

  [[nodiscard]] std::size_t samples() const noexcept { return factors.size(); }
  [[nodiscard]] std::size_t batches() const noexcept { return partition.size(); }

  void validate() const {
    detail::require(d >= 1, "QuadraticProblem: d must be >= 1");
    detail::require(batch >= 1 && samples() % batch == 0, "QuadraticProblem: B must divide N");
    detail::require(ranks.size() == samples(), "QuadraticProblem: rank list mismatch");
    for (std::size_t n = 0; n < samples(); ++n)
      detail::require(factors[n].size() == d * ranks[n], "QuadraticProblem: factor shape mismatch");
    std::vector<char> seen(samples(), 0);
    detail::require(partition.size() == samples() / batch, "QuadraticProblem: partition must have N/B batches");
    for (const auto& b : partition) {
      detail::require(b.size() == batch, "QuadraticProblem: batch of wrong size");
      for (std::size_t i : b) {
        detail::require(i < samples() && !seen[i], "QuadraticProblem: partition is not disjoint");
        seen[i] = 1;
      }
    }
  }
};

/// Consecutive batches: batch k holds samples [kB, (k+1)B).
inline std::vector<std::vector<std::size_t>> contiguous_partition(std::size_t n, std::size_t b) {
  detail::require(b >= 1 && n % b == 0, "contiguous_partition: B must divide N");
  std::vector<std::vector<std::size_t>> p(n / b);
  for (std::size_t k = 0; k < p.size(); ++k)
    for (std::size_t i = 0; i < b; ++i) p[k].push_back(k * b + i);
  return p;
}

inline Matrix sample_hessian(const QuadraticProblem& p, std::size_t n) {
  Matrix h(p.d);
  const std::size_t r = p.ranks[n];
  const Vec& g = p.factors[n];
  for (std::size_t i = 0; i < p.d; ++i)
    for (std::size_t j = 0; j < p.d; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < r; ++c) s += g[i * r + c] * g[j * r + c];
      h(i, j) = s;
    }
  return h;
}

/// (1/B) sum of H_n over batch k, in partition order.
inline Matrix batch_hessian(const QuadraticProblem& p, std::size_t k) {
  detail::require(k < p.batches(), "batch_hessian: batch index out of range");
  Matrix h(p.d);
  for (std::size_t n : p.partition[k]) {
    const Matrix hn = sample_hessian(p, n);
    for (std::size_t i = 0; i < h.a.size(); ++i) h.a[i] += hn.a[i];
  }
  const double inv = 1.0 / static_cast<double>(p.batch);
  for (double& x : h.a) x *= inv;
  return h;
}

struct RandomProblemSpec {
  std::size_t d = 4;
  std::size_t samples = 16;
  std::size_t batch = 4;
  std::size_t rank = 1;  // per-sample factor rank
};

/// Gaussian factors with entries N(0, 1/rank).
inline QuadraticProblem random_problem(const RandomProblemSpec& s, RngStream stream) {
  detail::require(s.rank >= 1, "random_problem: rank must be >= 1");
  QuadraticProblem p;
  p.d = s.d;
  p.batch = s.batch;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.rank));
  for (std::size_t n = 0; n < s.samples; ++n) {
    Vec g(s.d * s.rank);
    for (double& x : g) x = scale * stream.normal();
    p.factors.push_back(std::move(g));
    p.ranks.push_back(s.rank);
  }
  p.partition = contiguous_partition(s.samples, s.batch);
  p.validate();
  return p;
}

/// Re-partition by merging `factor` consecutive batches into one.
inline QuadraticProblem merge_batches(const QuadraticProblem& p, std::size_t factor) {
  detail::require(factor >= 1 && p.batches() % factor == 0, "merge_batches: factor must divide the batch count");
  QuadraticProblem q = p;
  q.batch = p.batch * factor;
  q.partition.clear();
  for (std::size_t k = 0; k < p.batches(); k += factor) {
    std::vector<std::size_t> merged;
    for (std::size_t j = 0; j < factor; ++j)
      merged.insert(merged.end(), p.partition[k + j].begin(), p.partition[k + j].end());
    q.partition.push_back(std::move(merged));
  }
  return q;
}

/// All H_n zero except the samples of one batch, whose averaged Hessian has
/// top eigenvalue lambda. Returns the designated batch index as well.
struct TightProblem {
  QuadraticProblem problem;
  std::size_t active_batch = 0;
};

inline TightProblem tightness_construct(std::size_t d, std::size_t batch, std::size_t samples, double lambda,
                                        std::uint64_t seed) {
  detail::require(lambda > 0, "tightness_construct: lambda must be > 0");
  detail::require(d >= 1 && batch >= 1 && samples % batch == 0, "tightness_construct: B must divide N");
  RngStream s = RngStream(seed).split("tight");
  TightProblem t;
  QuadraticProblem& p = t.problem;
  p.d = d;
  p.batch = batch;
  p.partition = contiguous_partition(samples, batch);
  t.active_batch = s.below(p.batches());
  p.factors.assign(samples, Vec(d, 0.0));
  p.ranks.assign(samples, 1);
  const std::size_t rank = 1 + s.below(d);
  for (std::size_t n : p.partition[t.active_batch]) {
    p.ranks[n] = rank;
    p.factors[n].resize(d * rank);
    for (double& x : p.factors[n]) x = s.normal();
  }
  const double top = top_eigenvalue(batch_hessian(p, t.active_batch));
  detail::require(top > 0, "tightness_construct: degenerate draw");
  const double c = std::sqrt(lambda / top);
  for (std::size_t n : p.partition[t.active_batch])
    for (double& x : p.factors[n]) x *= c;
  p.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Spectral statistics

struct SpectralStats {
  std::vector<Matrix> batch_h;  // <H>_k
  Vec batch_top;                // top eigenvalue per batch
  Matrix mean_h;                // <H>
  Matrix mean_h2;               // mean over k of <H>_k^2
  double lambda_max = 0;        // max over k of batch_top
  double lambda_bar_max = 0;    // top eigenvalue of <H>
  double lambda_min = 0;        // smallest eigenvalue of <H> above the null threshold (0 if none)
  std::vector<Vec> null_basis;  // orthonormal basis of the null space of <H>
  std::vector<Vec> range_basis; // orthonormal basis of its complement
  Matrix projector;             // onto the complement

  [[nodiscard]] Vec project(const Vec& w) const {
    Vec out = w;
    for (const Vec& v : null_basis) {
      const double c = dot(v, w);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] -= c * v[i];
    }
    return out;
  }
};

inline constexpr double kNullThreshold = 1e-10;

inline SpectralStats spectral_stats(const QuadraticProblem& p) {
  p.validate();
  SpectralStats s;
  const std::size_t K = p.batches();
  s.mean_h = Matrix(p.d);
  s.mean_h2 = Matrix(p.d);
  for (std::size_t k = 0; k < K; ++k) {
    Matrix h = batch_hessian(p, k);
    const Matrix h2 = matmul(h, h);
    for (std::size_t i = 0; i < h.a.size(); ++i) {
      s.mean_h.a[i] += h.a[i];
      s.mean_h2.a[i] += h2.a[i];
    }
    const double top = top_eigenvalue(h, RngStream(k));
    s.batch_top.push_back(top);
    s.lambda_max = std::max(s.lambda_max, top);
    s.batch_h.push_back(std::move(h));
  }
  for (double& x : s.mean_h.a) x /= static_cast<double>(K);
  for (double& x : s.mean_h2.a) x /= static_cast<double>(K);

  const Eigen e = jacobi_eigen(s.mean_h);
  s.lambda_bar_max = std::max(0.0, e.values.back());
  const double cut = kNullThreshold * s.lambda_bar_max;
  s.projector = Matrix(p.d);
  for (std::size_t i = 0; i < e.values.size(); ++i) {
    if (s.lambda_bar_max > 0 && e.values[i] >= cut) {
      if (s.range_basis.empty()) s.lambda_min = e.values[i];
      s.range_basis.push_back(e.vectors[i]);
      for (std::size_t r = 0; r < p.d; ++r)
        for (std::size_t c = 0; c < p.d; ++c) s.projector(r, c) += e.vectors[i][r] * e.vectors[i][c];
    } else {
      s.null_basis.push_back(e.vectors[i]);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Linearized SGD

enum class Verdict { converged, diverged, undecided };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::converged: return "converged";
    case Verdict::diverged: return "diverged";
    case Verdict::undecided: return "undecided";
  }
  return "?";
}

struct TrajectoryPoint {
  std::size_t t = 0;
  double norm = 0;
  double proj_norm = 0;
};

struct SimOptions {
  std::size_t max_steps = 100000;
  std::size_t record_every = 0;  // 0: record only the first and last points
  double diverge_factor = 1e8;
  double converge_factor = 1e-8;
};

struct SimResult {
  Verdict verdict = Verdict::undecided;
  std::size_t steps = 0;
  std::vector<TrajectoryPoint> trajectory;
  Vec final_w;
  double trend = 0;  // log(|P w_T| / |P w_{T/2}|); sign tells the drift of undecided runs

  [[nodiscard]] bool looks_divergent() const {
    return verdict == Verdict::diverged || (verdict == Verdict::undecided && trend > 0);
  }
};

/// w_{t+1} = w_t - eta <H>_{k(t)} w_t with k(t) uniform over batches.
inline SimResult simulate(const QuadraticProblem& p, const SpectralStats& s, double eta, const Vec& w0,
                          RngStream stream, const SimOptions& opt = {}) {
  detail::require(eta > 0, "simulate: eta must be > 0");
  detail::require(w0.size() == p.d, "simulate: w0 has the wrong dimension");
  SimResult r;
  Vec w = w0;
  const double n0 = norm(w0), pn0 = norm(s.project(w0));
  r.trajectory.push_back({0, n0, pn0});
  if (pn0 == 0.0) {
    r.verdict = Verdict::converged;
    r.final_w = w;
    return r;
  }
  const std::size_t K = p.batches();
  double mid_norm = pn0, pn = pn0;
  std::size_t t = 0;
  while (t < opt.max_steps) {
    const Matrix& h = s.batch_h[stream.below(K)];
    const Vec hw = matvec(h, w);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= eta * hw[i];
    ++t;
    pn = norm(s.project(w));
    const double nw = norm(w);
    if (opt.record_every && t % opt.record_every == 0) r.trajectory.push_back({t, nw, pn});
    if (t == opt.max_steps / 2) mid_norm = pn;
    if (!(nw <= opt.diverge_factor * n0)) {
      r.verdict = Verdict::diverged;
      break;
    }
    if (pn < opt.converge_factor * pn0) {
      r.verdict = Verdict::converged;
      break;
    }
  }
  r.steps = t;
  if (r.trajectory.back().t != t) r.trajectory.push_back({t, norm(w), pn});
  if (r.verdict == Verdict::undecided) r.trend = std::log(pn / mid_norm);
  r.final_w = std::move(w);
  return r;
}

inline SimResult simulate(const QuadraticProblem& p, double eta, const Vec& w0, RngStream stream,
                          const SimOptions& opt = {}) {
  return simulate(p, spectral_stats(p), eta, w0, stream, opt);
}

enum class Prediction { stable, unstable_possible };

inline const char* to_string(Prediction v) { return v == Prediction::stable ? "stable" : "unstable-possible"; }

inline Prediction predict_stability(double lambda_max, double eta) {
  return lambda_max < 2.0 / eta ? Prediction::stable : Prediction::unstable_possible;
}
inline Prediction predict_stability(const SpectralStats& s, double eta) { return predict_stability(s.lambda_max, eta); }

/// Bisection on eta between a convergent `lo` and a divergent `hi`; returns
/// the bracket midpoint once (hi - lo) <= rel_tol * lo.
inline double bisect_boundary(const QuadraticProblem& p, const SpectralStats& s, double lo, double hi, const Vec& w0,
                              const RngStream& stream, double rel_tol = 1e-4, const SimOptions& opt = {}) {
  detail::require(0 < lo && lo < hi, "bisect_boundary: need 0 < lo < hi");
  for (std::size_t it = 0; hi - lo > rel_tol * lo && it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (simulate(p, s, mid, w0, stream.split(it), opt).looks_divergent())
      hi = mid;
    else
      lo = mid;
  }
  return 0.5 * (lo + hi);
}

/// I - 2 eta <H> + eta^2 <H^2>
inline Matrix second_moment_operator(const SpectralStats& s, double eta) {
  Matrix m = Matrix::identity(s.mean_h.n);
  for (std::size_t i = 0; i < m.a.size(); ++i) m.a[i] += -2.0 * eta * s.mean_h.a[i] + eta * eta * s.mean_h2.a[i];
  return m;
}

/// Exact one-step expectation of |w_{t+1}|^2 given w_t = w.
inline double second_moment_form(const SpectralStats& s, double eta, const Vec& w) {
  return quad_form(second_moment_operator(s, eta), w);
}

struct SecondMomentCheck {
  double max_value = 0;  // max over unit v in the complement of v^T M v
  bool holds = false;
};

inline SecondMomentCheck second_moment_condition(const SpectralStats& s, double eta) {
  SecondMomentCheck c;
  const std::size_t m = s.range_basis.size();
  if (m == 0) return c;
  const Matrix op = second_moment_operator(s, eta);
  Matrix restricted(m);
  for (std::size_t i = 0; i < m; ++i) {
    const Vec oi = matvec(op, s.range_basis[i]);
    for (std::size_t j = 0; j < m; ++j) restricted(i, j) = dot(s.range_basis[j], oi);
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) restricted(i, j) = restricted(j, i) = 0.5 * (restricted(i, j) + restricted(j, i));
  c.max_value = jacobi_eigen(restricted).values.back();
  c.holds = c.max_value < 1.0;
  return c;
}

/// Upper bound on E|P w_t|^2 when lambda_max < 2/eta.
inline double rate_bound(const SpectralStats& s, double eta, std::size_t t, const Vec& w0) {
  if (!(s.lambda_max < 2.0 / eta)) throw ContractViolation("rate_bound: requires lambda_max < 2/eta");
  const double factor = 1.0 - eta * (2.0 - eta * s.lambda_max) * s.lambda_min;
  const double p0 = norm(s.project(w0));
  return std::pow(factor, static_cast<double>(t)) * p0 * p0;
}

/// (I - eta <H>)^t w0: the exact mean of w_t.
inline Vec first_moment(const SpectralStats& s, double eta, std::size_t t, const Vec& w0) {
  Vec w = w0;
  for (std::size_t i = 0; i < t; ++i) {
    const Vec hw = matvec(s.mean_h, w);
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= eta * hw[j];
  }
  return w;
}

inline Vec random_vector(std::size_t d, RngStream stream) {
  Vec w(d);
  for (double& x : w) x = stream.normal();
  return w;
}

inline void write_trajectory_csv(std::ostream& os, const std::vector<SimResult>& trials) {
  os << "trial,t,norm,proj_norm\n";
  char buf[128];
  for (std::size_t i = 0; i < trials.size(); ++i)
    for (const auto& pt : trials[i].trajectory) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.12g,%.12g\n", i, pt.t, pt.norm, pt.proj_norm);
      os << buf;
    }
}

}  // namespace batchaug::dynamics
