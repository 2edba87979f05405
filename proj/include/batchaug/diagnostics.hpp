#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "batchaug/augment.hpp"
#include "batchaug/dataio.hpp"
#include "batchaug/errors.hpp"
#include "batchaug/model.hpp"
#include "batchaug/optim.hpp"
#include "batchaug/rng.hpp"

namespace batchaug {

/// Pearson correlation of two equal-length vectors, accumulated in double.
template <typename T>
double pearson(std::span<const T> u, std::span<const T> v) {
  detail::require(u.size() == v.size(), "pearson: dimension mismatch");
  detail::require(u.size() >= 2, "pearson: need at least two coordinates");
  const double n = static_cast<double>(u.size());
  double mu = 0, mv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    mu += static_cast<double>(u[i]);
    mv += static_cast<double>(v[i]);
  }
  mu /= n;
  mv /= n;
  double suv = 0, suu = 0, svv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double a = static_cast<double>(u[i]) - mu, b = static_cast<double>(v[i]) - mv;
    suv += a * b;
    suu += a * a;
    svv += b * b;
  }
  if (suu == 0.0 || svv == 0.0) throw UndefinedCorrelation("pearson: constant input");
  // sqrt of a rounded square is exact, so identical inputs give exactly 1.
  return std::clamp(suv / std::sqrt(suu * svv), -1.0, 1.0);
}

template <typename T>
double pearson(const std::vector<T>& u, const std::vector<T>& v) {
  return pearson(std::span<const T>(u), std::span<const T>(v));
}

inline double median(std::vector<double> x) {
  detail::require(!x.empty(), "median: empty input");
  std::sort(x.begin(), x.end());
  const std::size_t h = x.size() / 2;
  return x.size() % 2 ? x[h] : 0.5 * (x[h - 1] + x[h]);
}

/// Median absolute deviation from the median (unscaled).
inline double mad(const std::vector<double>& x) {
  const double m = median(x);
  std::vector<double> dev(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) dev[i] = std::abs(x[i] - m);
  return median(std::move(dev));
}

// ---------------------------------------------------------------------------
// Correlation study

struct CategoryStats {
  std::vector<double> rho;  // one per pair, in pair-index order
  double median = 0;
  double mad = 0;
};

struct CorrelationReport {
  CategoryStats augmented;   // rho(x, T(x))
  CategoryStats same_class;  // rho(x, y), label(x) == label(y)
  CategoryStats cross_class; // rho(z, w), label(z) != label(w)
  std::size_t pairs = 0;
  std::string state;

  [[nodiscard]] bool ordered() const {
    return augmented.median > same_class.median && same_class.median > cross_class.median;
  }
};

namespace detail {

inline CategoryStats summarize(std::vector<double> rho) {
  CategoryStats s;
  s.median = median(rho);
  s.mad = mad(rho);
  s.rho = std::move(rho);
  return s;
}

struct PairPlan {
  std::size_t a = 0, b = 0;
};

/// Pair draws depend only on (stream, category, pair index).
inline PairPlan draw_pair(const LabeledDataset& ds, const std::vector<std::vector<std::size_t>>& by_class,
                          RngStream s, bool same) {
  const std::size_t n = ds.size();
  if (same) {
    std::vector<std::size_t> eligible;
    for (std::size_t k = 0; k < by_class.size(); ++k)
      if (by_class[k].size() >= 2) eligible.push_back(k);
    if (eligible.empty()) throw ContractViolation("correlation study: no class has two samples");
    const auto& members = by_class[eligible[s.below(eligible.size())]];
    const std::size_t i = s.below(members.size());
    std::size_t j = s.below(members.size() - 1);
    if (j >= i) ++j;
    return {members[i], members[j]};
  }
  std::size_t present = 0;
  for (const auto& c : by_class) present += c.empty() ? 0 : 1;
  if (present < 2) throw ContractViolation("correlation study: need two populated classes");
  const std::size_t a = s.below(n);
  for (;;) {
    const std::size_t b = s.below(n);
    if (ds.labels[b] != ds.labels[a]) return {a, b};
  }
}

inline std::vector<std::vector<std::size_t>> index_by_class(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  return by_class;
}

/// Per-sample gradients of arbitrary (possibly augmented) rows.
template <typename T>
std::vector<std::vector<T>> grads_of(const ModelParams<T>& params, const ModelSpec& spec, const Tensor<T>& images,
                                     const std::vector<Label>& labels) {
  return per_sample_grads(params, spec, images, std::span<const Label>(labels));
}

}  // namespace detail

/// Pearson correlations between flattened per-sample gradients for three pair
/// categories, S pairs each. Per-sample gradients use batch norm on running
/// statistics so that samples do not interact.
template <typename T>
CorrelationReport correlation_study(const ModelParams<T>& params, const ModelSpec& spec, const LabeledDataset& ds,
                                    const TransformSpec& transform, std::size_t pairs, const RngStream& stream,
                                    std::string state = "init") {
  detail::require(pairs >= 1, "correlation_study: S must be >= 1");
  detail::require(ds.size() >= 2, "correlation_study: dataset too small");
  detail::validate_spec(transform, ds.image_shape());
  const auto by_class = detail::index_by_class(ds);

  // Rows: for pair p, augmented uses (x_p, T(x_p)); same/cross use two samples.
  Shape s = ds.image_shape();
  s.insert(s.begin(), 6 * pairs);
  Tensor<T> rows(s);
  std::vector<Label> labels(6 * pairs);
  const std::size_t item = shape_size(ds.image_shape());
  auto put = [&](std::size_t row, std::size_t sample) {
    auto src = ds.images.item(sample);
    auto dst = rows.item(row);
    for (std::size_t e = 0; e < item; ++e) dst[e] = static_cast<T>(src[e]);
    labels[row] = ds.labels[sample];
  };
  const RngStream aug_s = stream.split("augmented"), same_s = stream.split("same_class"),
                  cross_s = stream.split("cross_class");
  for (std::size_t p = 0; p < pairs; ++p) {
    RngStream ps = aug_s.split(p);
    const std::size_t n = ps.below(ds.size());
    put(6 * p, n);
    RngStream draw_stream = ps.split("draw");
    const TransformDraw d = draw_transform(transform, ds.image_shape(), draw_stream);
    auto src = rows.item(6 * p);
    std::vector<T> original(src.begin(), src.end());
    apply<T>(d, std::span<const T>(original), rows.item(6 * p + 1));
    labels[6 * p + 1] = labels[6 * p];

    const auto sp = detail::draw_pair(ds, by_class, same_s.split(p), true);
    put(6 * p + 2, sp.a);
    put(6 * p + 3, sp.b);
    const auto cp = detail::draw_pair(ds, by_class, cross_s.split(p), false);
    put(6 * p + 4, cp.a);
    put(6 * p + 5, cp.b);
  }
  const auto g = detail::grads_of(params, spec, rows, labels);

  std::vector<double> ra(pairs), rs(pairs), rc(pairs);
  for (std::size_t p = 0; p < pairs; ++p) {
    ra[p] = pearson(g[6 * p], g[6 * p + 1]);
    rs[p] = pearson(g[6 * p + 2], g[6 * p + 3]);
    rc[p] = pearson(g[6 * p + 4], g[6 * p + 5]);
  }
  CorrelationReport r;
  r.augmented = detail::summarize(std::move(ra));
  r.same_class = detail::summarize(std::move(rs));
  r.cross_class = detail::summarize(std::move(rc));
  r.pairs = pairs;
  r.state = std::move(state);
  return r;
}

inline void write_correlation_csv(std::ostream& os, const CorrelationReport& r) {
  os << "category,pair_index,rho\n";
  char buf[128];
  const std::pair<const char*, const CategoryStats*> cats[] = {
      {"augmented", &r.augmented}, {"same_class", &r.same_class}, {"cross_class", &r.cross_class}};
  for (const auto& [name, st] : cats)
    for (std::size_t p = 0; p < st->rho.size(); ++p) {
      std::snprintf(buf, sizeof buf, "%s,%zu,%.9g\n", name, p, st->rho[p]);
      os << buf;
    }
  for (const auto& [name, st] : cats) {
    std::snprintf(buf, sizeof buf, "%s,median,%.9g\n", name, st->median);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Gradient-norm study

struct GradNormEntry {
  std::size_t repeat = 0;
  std::size_t replicas = 0;
  double norm = 0;
};

struct GradNormTrace {
  std::vector<GradNormEntry> entries;

  /// Median norm per replica count, in ascending M.
  [[nodiscard]] std::map<std::size_t, double> medians() const {
    std::map<std::size_t, std::vector<double>> by;
    for (const auto& e : entries) by[e.replicas].push_back(e.norm);
    std::map<std::size_t, double> out;
    for (auto& [m, v] : by) out[m] = median(std::move(v));
    return out;
  }

  [[nodiscard]] bool strictly_decreasing() const {
    const auto m = medians();
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& [k, v] : m) {
      if (!(v < prev)) return false;
      prev = v;
    }
    return true;
  }
};

struct GradNormOptions {
  std::size_t batch = 32;
  std::size_t repeats = 5;
  std::size_t ghost_size = 0;  // 0: group = B, one group per replica
  Mode mode = Mode::train;
};

/// Norm of the BA mean gradient at fixed parameters. Each repeat fixes one
/// B-batch and compares every M on it with fresh augmentation draws.
template <typename T>
GradNormTrace grad_norm_study(const ModelParams<T>& params, const ModelSpec& spec, const LabeledDataset& ds,
                              const TransformSpec& transform, const std::vector<std::size_t>& replica_list,
                              const GradNormOptions& opt, const RngStream& stream) {
  detail::require(!replica_list.empty(), "grad_norm_study: empty M list");
  detail::require(opt.repeats >= 1, "grad_norm_study: repeats must be >= 1");
  for (std::size_t m : replica_list) detail::require(m >= 1, "grad_norm_study: M must be >= 1");
  const std::size_t B = std::min(opt.batch, ds.size());
  const std::size_t ghost = opt.ghost_size == 0 ? B : opt.ghost_size;
  GradNormTrace trace;
  for (std::size_t r = 0; r < opt.repeats; ++r) {
    Sampler sampler(ds.size(), stream.split("batch", r));
    const Batch<T> batch = sample_batch<T>(ds, sampler, B);
    for (std::size_t m : replica_list) {
      RngStream aug = stream.split("augment", r).split(m);
      Batch<T> expanded = expand_batch(batch, transform, m, aug);
      auto g = ba_gradient(params, spec, expanded, ghost, opt.mode, aug.split("dropout"));
      trace.entries.push_back({r, m, grad_l2(g.grad)});
    }
  }
  return trace;
}

inline void write_grad_norm_csv(std::ostream& os, const GradNormTrace& t) {
  os << "M,repeat,grad_norm\n";
  char buf[96];
  for (const auto& e : t.entries) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.12g\n", e.replicas, e.repeat, e.norm);
    os << buf;
  }
  for (const auto& [m, v] : t.medians()) {
    std::snprintf(buf, sizeof buf, "%zu,median,%.12g\n", m, v);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Correlation assumption and per-coordinate variance

struct AssumptionResult {
  double lhs = 0;  // mean over n of rho(g(x_n), g(T(x_n)))
  double rhs = 0;  // mean over n != m of rho(g(x_n), g(x_m))
  bool holds = false;
};

template <typename T>
AssumptionResult assumption_check(const ModelParams<T>& params, const ModelSpec& spec, const LabeledDataset& ds,
                                  const TransformSpec& transform, std::size_t samples, const RngStream& stream) {
  detail::require(samples >= 2, "assumption_check: need at least two samples");
  detail::require(ds.size() >= samples, "assumption_check: dataset smaller than S");
  Sampler pick(ds.size(), stream.split("samples"));
  const Batch<T> base = sample_batch<T>(ds, pick, samples);
  RngStream aug = stream.split("augment");
  const Batch<T> moved = expand_batch(base, transform, 1, aug);
  const auto g = detail::grads_of(params, spec, base.images, base.labels);
  const auto gt = detail::grads_of(params, spec, moved.images, moved.labels);
  AssumptionResult r;
  double cross = 0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < samples; ++n) {
    r.lhs += pearson(g[n], gt[n]);
    for (std::size_t m = 0; m < samples; ++m)
      if (m != n) {
        cross += pearson(g[n], g[m]);
        ++count;
      }
  }
  r.lhs /= static_cast<double>(samples);
  r.rhs = cross / static_cast<double>(count);
  r.holds = r.lhs > r.rhs;
  return r;
}

struct CoordinateVariance {
  std::vector<double> variance;  // unbiased, per coordinate
  double total = 0;              // sum over coordinates (trace of the covariance)
};

/// Per-coordinate sample variance across a set of gradient vectors.
template <typename T>
CoordinateVariance coordinate_variance(const std::vector<std::vector<T>>& grads) {
  detail::require(grads.size() >= 2, "coordinate_variance: need at least two gradients");
  const std::size_t d = grads.front().size();
  CoordinateVariance out;
  out.variance.assign(d, 0.0);
  std::vector<double> mean(d, 0.0);
  for (const auto& g : grads) {
    detail::require(g.size() == d, "coordinate_variance: dimension mismatch");
    for (std::size_t i = 0; i < d; ++i) mean[i] += static_cast<double>(g[i]);
  }
  const double n = static_cast<double>(grads.size());
  for (double& m : mean) m /= n;
  for (const auto& g : grads)
    for (std::size_t i = 0; i < d; ++i) {
      const double e = static_cast<double>(g[i]) - mean[i];
      out.variance[i] += e * e;
    }
  for (double& v : out.variance) {
    v /= n - 1.0;
    out.total += v;
  }
  return out;
}

}  // namespace batchaug
