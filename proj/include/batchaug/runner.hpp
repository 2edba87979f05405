#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "batchaug/config.hpp"
#include "batchaug/dataio.hpp"
#include "batchaug/diagnostics.hpp"
#include "batchaug/distsim.hpp"
#include "batchaug/dynamics.hpp"
#include "batchaug/model.hpp"
#include "batchaug/optim.hpp"
#include "batchaug/parallel.hpp"

#ifndef BATCHAUG_VERSION
#define BATCHAUG_VERSION "0.1.0"
#endif
#ifndef BATCHAUG_GIT_REV
#define BATCHAUG_GIT_REV "unknown"
#endif

namespace batchaug {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDiverged = 3, kEquivalenceFailure = 4 };

using ojson = nlohmann::ordered_json;

/// Output directory plus a manifest that accumulates as the command runs.
class RunContext {
 public:
  RunContext(std::string command, const ExperimentConfig& cfg, std::filesystem::path out)
      : command_(std::move(command)), cfg_(cfg), out_(std::move(out)) {
    std::filesystem::create_directories(out_);
    manifest_["tool"] = "batchaug";
    manifest_["version"] = BATCHAUG_VERSION;
    manifest_["revision"] = BATCHAUG_GIT_REV;
    manifest_["command"] = command_;
    manifest_["seed"] = cfg.seed;
    manifest_["config"] = dump_config(cfg);
    manifest_["started"] = timestamp();
  }

  [[nodiscard]] const ExperimentConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] std::filesystem::path path(const std::string& name) const { return out_ / name; }

  std::ofstream open(const std::string& name) {
    outputs_.push_back(name);
    std::ofstream f(path(name), std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path(name).string());
    return f;
  }

  void write_json(const std::string& name, const ojson& j) {
    auto f = open(name);
    f << j.dump(2) << "\n";
  }

  ojson& manifest() { return manifest_; }

  void finish(int exit_code) {
    manifest_["outputs"] = outputs_;
    manifest_["exit_code"] = exit_code;
    manifest_["finished"] = timestamp();
    std::ofstream f(path("manifest.json"), std::ios::binary);
    f << manifest_.dump(2) << "\n";
  }

 private:
  static std::string timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
  }

  std::string command_;
  ExperimentConfig cfg_;
  std::filesystem::path out_;
  ojson manifest_;
  std::vector<std::string> outputs_;
};

// ---------------------------------------------------------------------------
// Shared setup

/// {train, validation}
inline std::pair<LabeledDataset, LabeledDataset> load_datasets(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  const std::uint64_t seed = c.resolve(d.seed, "dataset");
  LabeledDataset all, val;
  bool have_val = false;
  if (d.source == "synthetic") {
    SyntheticSpec s;
    s.classes = d.classes;
    s.per_class = d.per_class;
    s.height = d.height;
    s.width = d.width;
    s.channels = d.channels;
    s.noise = d.noise;
    all = gen_synthetic(s, seed);
  } else {
    all = load_idx(d.train_images, d.train_labels);
    if (!d.val_images.empty()) {
      val = load_idx(d.val_images, d.val_labels);
      have_val = true;
    }
  }
  if (!have_val) {
    if (d.val_count == 0 || d.val_count >= all.size())
      throw ConfigError("dataset.val_count must be in [1, " + std::to_string(all.size()) + ")");
    auto [tr, va] = split_holdout(all, d.val_count, seed);
    all = std::move(tr);
    val = std::move(va);
  }
  if (d.limit != 0 && d.limit < all.size()) {
    std::vector<std::size_t> idx(d.limit);
    for (std::size_t i = 0; i < d.limit; ++i) idx[i] = i;
    all = subset(all, idx, all.name);
  }
  return {std::move(all), std::move(val)};
}

inline ModelSpec model_spec(const ExperimentConfig& c, const LabeledDataset& ds) {
  ModelOptions opt;
  opt.batchnorm = c.model.batchnorm;
  opt.ghost_size = c.train.ghost_size;
  opt.dropout = c.model.dropout;
  return parse_model(c.model.arch, ds.image_shape(), ds.class_count, opt);
}

template <typename T>
ModelParams<T> initial_params(const ExperimentConfig& c, const ModelSpec& spec) {
  return init_params<T>(spec, RngStream(c.resolve(c.train.init_seed, "init")));
}

// ---------------------------------------------------------------------------
// train

template <typename T>
int cmd_train_t(RunContext& ctx) {
  const auto& c = ctx.config();
  validate(c);
  auto [train_set, val_set] = load_datasets(c);
  const ModelSpec spec = model_spec(c, train_set);
  TrainConfig tc = train_config(c);
  const TrainMode mode = parse_train_mode(c.train.mode);
  ctx.manifest()["seeds"] = {{"dataset", c.resolve(c.dataset.seed, "dataset")},
                             {"sampler", tc.sampler_seed},
                             {"augment", tc.aug_seed},
                             {"init", tc.init_seed}};
  ctx.manifest()["model"] = describe(spec);
  auto rep = train<T>(train_set, val_set, spec, tc, mode);
  {
    auto f = ctx.open("train.csv");
    write_report_csv(f, rep.rows);
  }
  if (c.model.save) save_checkpoint(ctx.path("checkpoint.bin"), spec, rep.params);
  ctx.manifest()["effective"] = {{"mode", to_string(mode)},
                                 {"batch_size", rep.effective.batch_size},
                                 {"replicas", rep.effective.replicas},
                                 {"epochs", rep.effective.epochs},
                                 {"total_steps", rep.total_steps}};
  ctx.manifest()["final_val_err"] = rep.final_val_err;
  ctx.manifest()["params_checksum"] = params_checksum(rep.params);
  ctx.manifest()["wall_seconds"] = rep.wall_seconds;
  return kOk;
}

inline int cmd_train(RunContext& ctx) {
  return ctx.config().model.scalar == "f64" ? cmd_train_t<double>(ctx) : cmd_train_t<float>(ctx);
}

// ---------------------------------------------------------------------------
// dynamics

inline int cmd_dynamics(RunContext& ctx) {
  using namespace dynamics;
  const auto& c = ctx.config();
  validate(c);
  const auto& dc = c.dynamics;
  const RngStream root(c.resolve(dc.seed, "dynamics"));
  SimOptions opt;
  opt.max_steps = dc.max_steps;
  opt.record_every = dc.trajectory_every;

  ojson points = ojson::array(), boundaries = ojson::array();
  std::vector<SimResult> trials;
  std::size_t violations = 0, stable_points = 0;
  for (std::size_t p = 0; p < dc.problems; ++p) {
    const RngStream ps = root.split("random", p);
    const QuadraticProblem q = random_problem({dc.d, dc.samples, dc.batch, dc.rank}, ps.split("problem"));
    const SpectralStats st = spectral_stats(q);
    const Vec w0 = random_vector(dc.d, ps.split("w0"));
    for (std::size_t e = 0; e < dc.eta_fractions.size(); ++e) {
      const double eta = dc.eta_fractions[e] * 2.0 / st.lambda_max;
      const Prediction pred = predict_stability(st, eta);
      SimResult r = simulate(q, st, eta, w0, ps.split("sim", e), opt);
      if (pred == Prediction::stable) {
        ++stable_points;
        if (r.verdict != Verdict::converged) ++violations;
      }
      points.push_back({{"eta", eta},
                        {"lambda_max", st.lambda_max},
                        {"predicted", to_string(pred)},
                        {"observed", to_string(r.verdict)},
                        {"kind", "random"},
                        {"problem", p},
                        {"steps", r.steps}});
      trials.push_back(std::move(r));
    }
  }
  double worst = 0;
  for (std::size_t i = 0; i < dc.tight_problems; ++i) {
    const RngStream ts = root.split("tight", i);
    RngStream draw = ts.split("shape");
    const std::size_t d = 1 + draw.below(dc.d);
    const double lambda = draw.uniform(0.5, 4.0);
    const TightProblem tp = tightness_construct(d, dc.batch, dc.samples, lambda, ts.split("construct").seed());
    const SpectralStats st = spectral_stats(tp.problem);
    const Vec w0 = random_vector(d, ts.split("w0"));
    const double bound = 2.0 / st.lambda_max;
    const double eta_star = bisect_boundary(tp.problem, st, 0.5 * bound, 1.5 * bound, w0, ts.split("bisect"), 1e-4, opt);
    const double rel = std::abs(eta_star - bound) / bound;
    worst = std::max(worst, rel);
    boundaries.push_back({{"eta", eta_star},
                          {"lambda_max", st.lambda_max},
                          {"predicted", bound},
                          {"observed", rel <= 5e-3 ? "boundary-matched" : "boundary-missed"},
                          {"relative_error", rel},
                          {"d", d}});
  }
  {
    auto f = ctx.open("trajectories.csv");
    write_trajectory_csv(f, trials);
  }
  ojson summary = {{"stable_points", stable_points},
                   {"sufficiency_violations", violations},
                   {"tight_problems", dc.tight_problems},
                   {"max_boundary_relative_error", worst}};
  ctx.write_json("verdicts.json", {{"points", points}, {"boundaries", boundaries}, {"summary", summary}});
  ctx.manifest()["summary"] = summary;
  return kOk;
}

// ---------------------------------------------------------------------------
// correlate

template <typename T>
int cmd_correlate_t(RunContext& ctx) {
  const auto& c = ctx.config();
  validate(c);
  auto [train_set, val_set] = load_datasets(c);
  ModelSpec spec = model_spec(c, train_set);
  const TrainConfig tc = train_config(c);
  const RngStream root(c.resolve(c.diagnostics.seed, "diagnostics"));
  ojson summary = ojson::object();
  for (const auto& state : c.diagnostics.states) {
    ModelParams<T> params;
    if (state == "init") {
      params = initial_params<T>(c, spec);
    } else if (state == "partial") {
      TrainConfig partial = tc;
      partial.epochs = c.diagnostics.partial_epochs;
      params = train<T>(train_set, val_set, spec, partial, parse_train_mode(c.train.mode)).params;
    } else {
      if (c.model.checkpoint.empty()) throw ConfigError("diagnostics state 'checkpoint' needs model.checkpoint");
      auto [loaded_spec, loaded] = load_checkpoint<T>(c.model.checkpoint);
      if (loaded_spec.input != train_set.image_shape() || loaded_spec.classes != train_set.class_count)
        throw ConfigError("checkpoint model does not match the dataset");
      spec = loaded_spec;
      params = std::move(loaded);
    }
    const RngStream ss = root.split(state);
    const auto rep = correlation_study(params, spec, train_set, tc.transform, c.diagnostics.pairs, ss.split("pairs"), state);
    {
      auto f = ctx.open("correlation_" + state + ".csv");
      write_correlation_csv(f, rep);
    }
    GradNormOptions gopt;
    gopt.batch = c.diagnostics.grad_norm_batch;
    gopt.repeats = c.diagnostics.grad_norm_repeats;
    const auto trace =
        grad_norm_study(params, spec, train_set, tc.transform, c.diagnostics.grad_norm_replicas, gopt, ss.split("norms"));
    {
      auto f = ctx.open("grad_norm_" + state + ".csv");
      write_grad_norm_csv(f, trace);
    }
    const auto check =
        assumption_check(params, spec, train_set, tc.transform, c.diagnostics.assumption_samples, ss.split("assumption"));
    ojson medians = ojson::object();
    for (const auto& [m, v] : trace.medians()) medians[std::to_string(m)] = v;
    summary[state] = {{"pairs", rep.pairs},
                      {"augmented", {{"median", rep.augmented.median}, {"mad", rep.augmented.mad}}},
                      {"same_class", {{"median", rep.same_class.median}, {"mad", rep.same_class.mad}}},
                      {"cross_class", {{"median", rep.cross_class.median}, {"mad", rep.cross_class.mad}}},
                      {"ordered", rep.ordered()},
                      {"grad_norm_median", medians},
                      {"grad_norm_decreasing", trace.strictly_decreasing()},
                      {"assumption", {{"lhs", check.lhs}, {"rhs", check.rhs}, {"holds", check.holds}}}};
  }
  ctx.write_json("summary.json", summary);
  return kOk;
}

inline int cmd_correlate(RunContext& ctx) {
  return ctx.config().model.scalar == "f64" ? cmd_correlate_t<double>(ctx) : cmd_correlate_t<float>(ctx);
}

// ---------------------------------------------------------------------------
// throughput

struct ThroughputRow {
  std::size_t batch = 0;
  double median = 0;  // images per second
  double stddev = 0;
};

/// Forward+backward images per second at each batch size in 1, 2, 4, ...
template <typename T>
std::vector<ThroughputRow> measure_throughput(const ModelParams<T>& params, const ModelSpec& spec,
                                              const LabeledDataset& ds, std::size_t max_batch, std::size_t repeats,
                                              std::size_t warmup) {
  std::vector<std::size_t> sizes;
  for (std::size_t b = 1; b < max_batch; b *= 2) sizes.push_back(b);
  sizes.push_back(max_batch);
  std::vector<ThroughputRow> rows;
  for (std::size_t b : sizes) {
    std::vector<std::size_t> idx(b);
    for (std::size_t i = 0; i < b; ++i) idx[i] = i % ds.size();
    const Batch<T> batch = gather<T>(ds, idx);
    const ModelSpec s = with_ghost_size(spec, 0);
    std::vector<double> rates;
    for (std::size_t r = 0; r < warmup + repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      auto g = loss_and_grad(params, s, batch.images, std::span<const Label>(batch.labels), Mode::train, RngStream(r));
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (r >= warmup) rates.push_back(static_cast<double>(b) / std::max(dt, 1e-12));
    }
    double mean = 0, var = 0;
    for (double x : rates) mean += x;
    mean /= static_cast<double>(rates.size());
    for (double x : rates) var += (x - mean) * (x - mean);
    const double sd = rates.size() > 1 ? std::sqrt(var / static_cast<double>(rates.size() - 1)) : 0.0;
    rows.push_back({b, median(rates), sd});
  }
  return rows;
}

inline void write_throughput_csv(std::ostream& os, const std::vector<ThroughputRow>& rows) {
  os << "batch,med_imgs_per_sec,std\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6g,%.6g\n", r.batch, r.median, r.stddev);
    os << buf;
  }
}

template <typename T>
int cmd_throughput_t(RunContext& ctx) {
  const auto& c = ctx.config();
  validate(c);
  auto [train_set, val_set] = load_datasets(c);
  const ModelSpec spec = model_spec(c, train_set);
  const auto params = initial_params<T>(c, spec);
  const auto rows =
      measure_throughput(params, spec, train_set, c.throughput.max_batch, c.throughput.repeats, c.throughput.warmup);
  auto f = ctx.open("throughput.csv");
  write_throughput_csv(f, rows);
  ctx.manifest()["threads"] = thread_budget();
  return kOk;
}

inline int cmd_throughput(RunContext& ctx) {
  return ctx.config().model.scalar == "f64" ? cmd_throughput_t<double>(ctx) : cmd_throughput_t<float>(ctx);
}

// ---------------------------------------------------------------------------
// distsim

template <typename T>
int cmd_distsim_t(RunContext& ctx) {
  const auto& c = ctx.config();
  validate(c);
  const auto& dc = c.distsim;
  auto [train_set, val_set] = load_datasets(c);
  const ModelSpec spec = model_spec(c, train_set);
  const TrainConfig tc = train_config(c);
  const auto params = initial_params<T>(c, spec);
  const std::uint64_t base = c.resolve(dc.seed, "distsim");
  const auto workers = assign_seeds(dc.workers, dc.replicas, base, dc.local_batch);

  const auto rep = equivalence_check(workers, params, spec, train_set, tc, dc.steps, base);
  {
    auto f = ctx.open("distsim.csv");
    write_sweep_csv(f, rep.rows);
  }
  const auto io = io_dedup_report(workers, dc.steps);

  ojson parity = ojson::object();
  std::vector<double> parity_medians;
  for (std::size_t m : dc.parity_replicas) {
    if (m == 0 || dc.workers % m != 0) continue;
    auto state = make_dist_state(assign_seeds(dc.workers, m, base, dc.local_batch), params, train_set, base);
    std::vector<double> times;
    for (std::size_t t = 0; t < dc.parity_steps; ++t) times.push_back(dist_step(state, spec, train_set, tc).parallel_seconds());
    if (times.empty()) continue;
    parity_medians.push_back(median(times));
    parity[std::to_string(m)] = parity_medians.back();
  }
  double parity_ratio = 1.0;
  if (parity_medians.size() >= 2) {
    const auto [lo, hi] = std::minmax_element(parity_medians.begin(), parity_medians.end());
    parity_ratio = *hi / *lo;
  }
  const std::size_t groups = dc.workers / dc.replicas;
  ojson summary = {{"verdict", rep.bit_exact ? "bit-exact" : "mismatch"},
                   {"bit_exact", rep.bit_exact},
                   {"first_mismatch_step", rep.first_mismatch_step},
                   {"max_abs_diff", rep.max_abs_diff},
                   {"steps", rep.steps},
                   {"final_checksum", rep.final_checksum},
                   {"distinct_samples_per_step", groups * dc.local_batch},
                   {"effective_batch", groups * dc.local_batch * dc.replicas},
                   {"io", {{"total_loads", io.total_loads}, {"unique_loads", io.unique_loads}}}};
  ctx.write_json("summary.json", summary);
  ctx.manifest()["summary"] = summary;
  // Timings vary run to run, so they stay out of the byte-reproducible outputs.
  ctx.manifest()["timing"] = {{"median_step_seconds", parity}, {"step_time_ratio", parity_ratio}};
  return rep.bit_exact ? kOk : kEquivalenceFailure;
}

inline int cmd_distsim(RunContext& ctx) {
  return ctx.config().distsim.scalar == "f64" ? cmd_distsim_t<double>(ctx) : cmd_distsim_t<float>(ctx);
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"train", "dynamics", "correlate", "throughput", "distsim"};
  return names;
}

/// Runs one subcommand and maps failures onto the exit-code contract.
inline int run_command(const std::string& command, const ExperimentConfig& cfg, const std::filesystem::path& out,
                       std::ostream& err = std::cerr) {
  std::optional<RunContext> ctx;
  int code = kFailure;
  try {
    ctx.emplace(command, cfg, out);
    if (command == "train") code = cmd_train(*ctx);
    else if (command == "dynamics") code = cmd_dynamics(*ctx);
    else if (command == "correlate") code = cmd_correlate(*ctx);
    else if (command == "throughput") code = cmd_throughput(*ctx);
    else if (command == "distsim") code = cmd_distsim(*ctx);
    else throw ConfigError("unknown command '" + command + "'");
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    code = kConfigError;
  } catch (const LoadError& e) {
    err << "input error: " << e.what() << "\n";
    code = kConfigError;
  } catch (const TrainingDiverged& e) {
    err << "diverged: " << e.what() << "\n";
    code = kDiverged;
  } catch (const ConsistencyError& e) {
    err << "equivalence failure: " << e.what() << "\n";
    code = kEquivalenceFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    code = kFailure;
  }
  if (ctx) ctx->finish(code);
  return code;
}

}  // namespace batchaug
