// One PASS/FAIL line per acceptance criterion. Arguments select criteria by
// number; no arguments runs all of them. Exit status is 0 only if every
// selected criterion passes within its runtime budget.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "batchaug/batchaug.hpp"
#include "batchaug/runner.hpp"

using namespace batchaug;
namespace dyn = batchaug::dynamics;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// max |a - b| / max |b|: whole-vector relative error that tolerates entries whose true value is zero.
double vec_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, scale = 1e-300;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

std::vector<double> minus(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

// ---------------------------------------------------------------------------
// Linearized dynamics

// d <= 16, N <= 64, B | N, factor rank <= d.
dyn::QuadraticProblem draw_problem(RngStream& r) {
  const std::size_t d = 1 + r.below(16);
  const std::size_t B = 1 + r.below(8);
  const std::size_t N = B * (1 + r.below(64 / B));
  return dyn::random_problem({.d = d, .samples = N, .batch = B, .rank = 1 + r.below(d)}, r.split("problem"));
}

Outcome sufficiency() {
  const RngStream root(101);
  std::size_t runs = 0, converged = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    RngStream r = root.split(i);
    const auto p = draw_problem(r);
    const auto s = dyn::spectral_stats(p);
    const auto w0 = dyn::random_vector(p.d, r.split("w0"));
    std::size_t e = 0;
    for (double frac : {0.2, 0.5, 0.8, 0.95, 0.99}) {
      const double eta = frac * 2.0 / s.lambda_max;
      if (dyn::predict_stability(s, eta) != dyn::Prediction::stable) return {false, "grid point not predicted stable"};
      ++runs;
      converged += dyn::simulate(p, s, eta, w0, r.split("sim", e++)).verdict == dyn::Verdict::converged;
    }
  }
  return {converged == runs, fmt("%zu/%zu runs converged", converged, runs)};
}

Outcome tightness() {
  const RngStream root(202);
  double worst = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    RngStream r = root.split(i);
    const std::size_t d = 1 + r.below(16);
    const double lambda = r.uniform(0.5, 4.0);
    const std::size_t B = 1 + r.below(8);
    const std::size_t N = B * (1 + r.below(64 / B));
    const auto t = dyn::tightness_construct(d, B, N, lambda, r.split("construct").seed());
    const auto s = dyn::spectral_stats(t.problem);
    const double edge = 2.0 / s.lambda_max;
    const double found =
        dyn::bisect_boundary(t.problem, s, 0.5 * edge, 1.5 * edge, dyn::random_vector(d, r.split("w0")), r.split("b"));
    worst = std::max(worst, std::abs(found - edge) / edge);
  }
  return {worst <= 5e-3, fmt("worst boundary error %.3g%% over 20 (d, lambda) pairs", 100 * worst)};
}

Outcome second_moment() {
  const RngStream root(303);
  double worst = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    RngStream r = root.split(i);
    const auto p = draw_problem(r);
    const auto s = dyn::spectral_stats(p);
    const double eta = r.uniform(0.05, 0.99) * 2.0 / s.lambda_max;
    const auto w = dyn::random_vector(p.d, r.split("w"));
    RngStream draw = r.split("draws");
    double acc = 0;
    const int n = 100000;
    for (int k = 0; k < n; ++k) {
      const auto hw = dyn::matvec(s.batch_h[draw.below(p.batches())], w);
      double sq = 0;
      for (std::size_t j = 0; j < p.d; ++j) sq += (w[j] - eta * hw[j]) * (w[j] - eta * hw[j]);
      acc += sq;
    }
    const double want = dyn::second_moment_form(s, eta, w);
    worst = std::max(worst, std::abs(acc / n - want) / want);
  }
  return {worst <= 0.01, fmt("worst relative gap %.3g%% over 20 states", 100 * worst)};
}

Outcome rate_bound() {
  const RngStream root(404);
  double worst = 0;  // max over problems and t of empirical / bound
  for (std::size_t i = 0; i < 20; ++i) {
    RngStream r = root.split(i);
    const auto p = draw_problem(r);
    const auto s = dyn::spectral_stats(p);
    const double eta = r.uniform(0.05, 0.99) * 2.0 / s.lambda_max;
    const auto w0 = dyn::random_vector(p.d, r.split("w0"));
    const std::size_t T = 200;
    const int trials = 10000;
    std::vector<double> mean_sq(T + 1, 0.0);
    for (int k = 0; k < trials; ++k) {
      RngStream pick = r.split("traj", static_cast<std::uint64_t>(k));
      auto w = w0;
      for (std::size_t t = 0; t <= T; ++t) {
        const double pn = dyn::norm(s.project(w));
        mean_sq[t] += pn * pn / trials;
        if (t == T) break;
        const auto hw = dyn::matvec(s.batch_h[pick.below(p.batches())], w);
        for (std::size_t j = 0; j < p.d; ++j) w[j] -= eta * hw[j];
      }
    }
    for (std::size_t t = 0; t <= T; ++t) {
      const double bound = dyn::rate_bound(s, eta, t, w0);
      if (mean_sq[t] > 1.01 * bound) return {false, fmt("problem %zu, t=%zu: %.6g exceeds bound %.6g", i, t, mean_sq[t], bound)};
      if (bound > 1e-250) worst = std::max(worst, mean_sq[t] / bound);
    }
  }
  return {true, fmt("empirical/bound at most %.4f over 20 problems, t <= 200", worst)};
}

// ---------------------------------------------------------------------------
// Gradients

const char* layer_kind(const LayerSpec& l) {
  return std::visit(
      [](const auto& x) -> const char* {
        using L = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<L, Linear>) return "linear";
        else if constexpr (std::is_same_v<L, Conv2d>) return "conv";
        else if constexpr (std::is_same_v<L, GhostBatchNorm>) return "gbn";
        else return "other";
      },
      l);
}

// Central differences at step 1e-5; error relative to max(|fd|, |bp|, 1e-4).
double fd_worst(const ModelSpec& spec, Mode mode, const std::vector<std::size_t>& coords, std::uint64_t seed) {
  auto p = init_params<double>(spec, RngStream(seed));
  RngStream jitter(seed + 1);
  for (auto& v : p.values) v += 0.1 * jitter.normal();
  for (auto& run : p.running) {
    for (auto& m : run.mean) m = 0.2 * jitter.normal();
    for (auto& v : run.var) v = 0.5 + jitter.uniform();
  }
  const std::size_t N = 8;
  Shape s = spec.input;
  s.insert(s.begin(), N);
  RngStream data(seed + 2);
  const auto x = rng_uniform<double>(data, s, -1.0, 1.0);
  std::vector<Label> y(N);
  for (auto& l : y) l = static_cast<Label>(data.below(spec.classes));
  const RngStream stream(seed + 3);
  const auto g = loss_and_grad(p, spec, x, y, mode, stream).grad;
  const auto loss = [&](const ModelParams<double>& q) {
    return loss_softmax_xent(forward(q, spec, x, mode, stream).logits, y).loss;
  };
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t i : coords) {
    auto plus = p, minus_p = p;
    plus.values[i] += h;
    minus_p.values[i] -= h;
    const double fd = (loss(plus) - loss(minus_p)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-4}));
  }
  return worst;
}

Outcome finite_differences() {
  // conv -> GBN -> ReLU -> pool -> flatten -> linear -> GBN -> ReLU -> dropout -> linear
  ModelSpec spec;
  spec.input = {2, 6, 6};
  spec.classes = 4;
  spec.layers = {Conv2d{2, 4, 3}, GhostBatchNorm{4, 4}, ReLU{}, AvgPool2d{2}, Flatten{}, Linear{36, 12},
                 GhostBatchNorm{12, 4}, ReLU{}, Dropout{0.3}, Linear{12, 4}};
  const auto lay = param_layout(spec);
  std::size_t dropout_layer = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (std::holds_alternative<Dropout>(spec.layers[i])) dropout_layer = i;
  std::vector<std::size_t> by_kind[3], upstream;
  const std::string kinds[3] = {"linear", "conv", "gbn"};
  for (const auto& seg : lay.segments)
    for (std::size_t k = 0; k < seg.size; ++k) {
      const std::string kind = layer_kind(spec.layers[seg.layer]);
      for (int t = 0; t < 3; ++t)
        if (kind == kinds[t]) by_kind[t].push_back(seg.offset + k);
      if (seg.layer < dropout_layer) upstream.push_back(seg.offset + k);
    }
  RngStream pick(55);
  const auto choose = [&](std::vector<std::size_t> v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[pick.below(i)]);
    v.resize(std::min<std::size_t>(v.size(), 40));
    return v;
  };
  std::string detail;
  bool pass = true;
  const auto check = [&](const std::string& label, const std::vector<std::size_t>& coords, Mode mode) {
    const double w = fd_worst(spec, mode, coords, 7);
    pass = pass && coords.size() >= 20 && w <= 1e-6;
    detail += fmt("%s %zu coords %.2g; ", label.c_str(), coords.size(), w);
  };
  for (int t = 0; t < 3; ++t) check(kinds[t], choose(by_kind[t]), Mode::train);
  check("dropout-eval", choose(upstream), Mode::eval);
  detail.resize(detail.size() - 2);
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// Update-rule equivalences

const LabeledDataset& small_images() {
  static const auto ds = gen_synthetic(SyntheticSpec{.classes = 4, .per_class = 32, .height = 8, .width = 8}, 5);
  return ds;
}

TrainConfig step_config(TransformSpec t) {
  TrainConfig c;
  c.base_lr = 0.05;
  c.momentum = 0.9;
  c.weight_decay = 5e-4;
  c.transform = std::move(t);
  return c;
}

Batch<double> batch_at(std::size_t B, std::uint64_t seed) {
  Sampler s(small_images().size(), RngStream(seed));
  return sample_batch<double>(small_images(), s, B);
}

Outcome identity_degeneration() {
  const auto& ds = small_images();
  double worst = 0;
  std::string where;
  // BN decoupled two ways: absent, or normalizing with running statistics.
  for (bool bn : {false, true}) {
    const auto spec = parse_model("cnn:4,8", ds.image_shape(), 4, {.batchnorm = bn});
    auto cfg = step_config(Identity{});
    cfg.freeze_bn = bn;
    const auto p0 = init_params<double>(spec, RngStream(3));
    // Oracle: three plain SGD steps on the raw batches.
    auto plain = p0;
    OptState<double> sp(plain.dim());
    for (std::uint64_t step = 0; step < 3; ++step) {
      const auto batch = batch_at(8, 40 + step);
      const auto g = loss_and_grad(plain, spec, batch.images, batch.labels, step_mode(cfg), RngStream(step));
      sgd_step(plain, std::span<const double>(g.grad), sp, cfg.base_lr, cfg, decay_mask(spec));
    }
    for (std::size_t M : {1u, 2u, 8u}) {
      auto p = p0;
      OptState<double> s(p.dim());
      RngStream r(9);
      for (std::uint64_t step = 0; step < 3; ++step) ba_step(p, spec, batch_at(8, 40 + step), M, r, s, cfg.base_lr, cfg);
      const double e = vec_rel(minus(p.values, p0.values), minus(plain.values, p0.values));
      if (e >= worst) {
        worst = e;
        where = fmt("M=%zu %s", M, bn ? "frozen BN" : "no BN");
      }
    }
  }
  return {worst <= 1e-12, fmt("worst relative update difference %.3g (%s)", worst, where.c_str())};
}

Outcome accumulation_equivalence() {
  const auto& ds = small_images();
  const auto spec = parse_model("cnn:4,8", ds.image_shape(), 4, {.batchnorm = true});
  auto cfg = step_config(parse_transform("padcrop:2,hflip:0.5"));
  cfg.ghost_size = 8;  // = B
  const auto p0 = init_params<double>(spec, RngStream(11));
  double worst = 0;
  for (std::size_t M : {2u, 4u}) {
    auto a = p0, b = p0;
    OptState<double> sa(a.dim()), sb(b.dim());
    RngStream ra(12), rb(12);
    for (std::uint64_t step = 0; step < 3; ++step) {
      const auto batch = batch_at(8, 60 + step);
      ba_step(a, spec, batch, M, ra, sa, cfg.base_lr, cfg);
      ba_step_accumulate(b, spec, batch, M, rb, sb, cfg.base_lr, cfg);
    }
    worst = std::max(worst, vec_rel(minus(b.values, p0.values), minus(a.values, p0.values)));
    for (std::size_t l = 0; l < a.running.size(); ++l) {
      worst = std::max(worst, vec_rel(b.running[l].mean, a.running[l].mean));
      worst = std::max(worst, vec_rel(b.running[l].var, a.running[l].var));
    }
  }
  return {worst <= 1e-12, fmt("worst relative difference %.3g (updates and running stats, M in {2,4})", worst)};
}

ExperimentConfig desk(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  return c;
}

Outcome distributed_equivalence() {
  auto c = desk(1);
  c.model.dropout = 0.2;
  c.distsim.workers = 8;
  c.distsim.replicas = 4;
  c.distsim.local_batch = 16;
  const auto [train_set, val_set] = load_datasets(c);
  const auto spec = model_spec(c, train_set);
  const std::uint64_t base = c.resolve(c.distsim.seed, "distsim");
  const auto workers = assign_seeds(8, 4, base, 16);
  const auto rep = equivalence_check(workers, initial_params<double>(c, spec), spec, train_set, train_config(c), 50, base);
  return {rep.bit_exact && rep.steps == 50,
          fmt("%s over %zu steps, max |diff| %.3g, checksum %016llx", rep.bit_exact ? "bit-exact" : "MISMATCH", rep.steps,
              rep.max_abs_diff, static_cast<unsigned long long>(rep.final_checksum))};
}

Outcome transform_count() {
  const auto t = parse_transform("padcrop:4,hflip:0.5");
  const Shape shape{3, 32, 32};
  const auto counted = enumerate_space(t, shape);
  // Independent oracle: distinct outputs of random draws applied to a random image.
  RngStream r(9);
  const auto image = rng_uniform<float>(r, shape, 0.1f, 1.0f);
  std::set<std::vector<float>> seen;
  for (int i = 0; i < 20000; ++i) {
    const auto out = apply(draw_transform(t, shape, r), image);
    seen.insert(std::vector<float>(out.values().begin(), out.values().end()));
  }
  return {counted == 162 && seen.size() == 162,
          fmt("enumerate_space = %llu, distinct outputs of 20000 draws = %zu", static_cast<unsigned long long>(counted),
              seen.size())};
}

// ---------------------------------------------------------------------------
// Desk-scale studies on the synthetic 10-class set (5k train / 1k val)

ModelParams<float> partially_trained(const ExperimentConfig& c, const LabeledDataset& tr, const LabeledDataset& va,
                                     const ModelSpec& spec, double epochs) {
  auto tc = train_config(c);
  tc.epochs = epochs;
  return train<float>(tr, va, spec, tc, parse_train_mode(c.train.mode)).params;
}

Outcome correlation_ordering() {
  int ordered = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = desk(seed);
    const auto [tr, va] = load_datasets(c);
    const auto spec = model_spec(c, tr);
    const auto params = partially_trained(c, tr, va, spec, c.diagnostics.partial_epochs);
    const auto rep = correlation_study(params, spec, tr, train_config(c).transform, 100,
                                       RngStream(c.resolve(c.diagnostics.seed, "diagnostics")).split("partial"));
    ordered += rep.ordered();
    detail += fmt("%s%.2f>%.2f>%.2f", seed == 1 ? "" : " ", rep.augmented.median, rep.same_class.median,
                  rep.cross_class.median);
  }
  return {ordered >= 4, fmt("%d/5 seeds ordered (medians aug>same>cross: %s)", ordered, detail.c_str())};
}

Outcome grad_norm_reduction() {
  int decreasing = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto c = desk(100 + seed);
    const auto [tr, va] = load_datasets(c);
    const auto spec = model_spec(c, tr);
    // States along training: half after one epoch, half after two.
    const auto params = partially_trained(c, tr, va, spec, 1.0 + static_cast<double>(seed % 2));
    const auto trace = grad_norm_study(params, spec, tr, train_config(c).transform, {1, 2, 4, 8},
                                       {.batch = 32, .repeats = 256}, RngStream(seed).split("norms"));
    decreasing += trace.strictly_decreasing();
    const auto m = trace.medians();
    detail += fmt("%s%.3g/%.3g", seed == 1 ? "" : " ", m.begin()->second, m.rbegin()->second);
  }
  return {decreasing >= 9, fmt("%d/10 states strictly decreasing (median M=1/M=8: %s)", decreasing, detail.c_str())};
}

Outcome generalization() {
  double ba = 0, base = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto c = desk(1000 + seed);
    c.train.epochs = 20;
    c.train.milestones = {12, 16};
    const auto [tr, va] = load_datasets(c);
    const auto spec = model_spec(c, tr);
    auto tc = train_config(c);
    tc.replicas = 4;
    const double e_ba = train<float>(tr, va, spec, tc, TrainMode::ba).final_val_err;
    tc.replicas = 1;
    const double e_base = train<float>(tr, va, spec, tc, TrainMode::plain).final_val_err;
    ba += e_ba / 5;
    base += e_base / 5;
    detail += fmt("%s%.1f/%.1f", seed == 1 ? "" : " ", 100 * e_ba, 100 * e_base);
  }
  return {ba <= base + 0.002,
          fmt("mean val error BA M=4 %.2f%% vs baseline %.2f%% (per seed BA/base: %s)", 100 * ba, 100 * base, detail.c_str())};
}

Outcome throughput_shape() {
  const auto c = desk(1);
  const auto [tr, va] = load_datasets(c);
  const auto spec = model_spec(c, tr);
  const auto rows = measure_throughput(initial_params<float>(c, spec), spec, tr, 32, 10, 1);
  const double at1 = rows.front().median, at32 = rows.back().median;
  return {rows.front().batch == 1 && rows.back().batch == 32 && at32 > at1,
          fmt("%.0f images/s at B=1, %.0f images/s at B=32 (%zu threads)", at1, at32, thread_budget())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "stability-sufficiency", 60, sufficiency},
      {2, "stability-tightness", 60, tightness},
      {3, "second-moment-form", 60, second_moment},
      {4, "rate-bound", 120, rate_bound},
      {5, "gradient-finite-differences", 60, finite_differences},
      {6, "ba-identity-degeneration", 60, identity_degeneration},
      {7, "accumulation-equivalence", 60, accumulation_equivalence},
      {8, "distributed-equivalence", 120, distributed_equivalence},
      {9, "transform-space-count", 60, transform_count},
      {10, "correlation-ordering", 600, correlation_ordering},
      {11, "grad-norm-reduction", 600, grad_norm_reduction},
      {12, "desk-generalization", 1800, generalization},
      {13, "throughput-shape", 300, throughput_shape},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s %2d %-28s %7.1fs/%4.0fs%s  %s\n", pass ? "PASS" : "FAIL", c.id, c.name, secs, c.budget_seconds,
                in_time ? "" : " OVER BUDGET", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
