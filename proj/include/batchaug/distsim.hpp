#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "batchaug/augment.hpp"
#include "batchaug/dataio.hpp"
#include "batchaug/errors.hpp"
#include "batchaug/model.hpp"
#include "batchaug/optim.hpp"
#include "batchaug/rng.hpp"

namespace batchaug {

struct WorkerConfig {
  std::size_t worker_id = 0;
  std::size_t group_id = 0;  // worker_id / M
  std::uint64_t sampler_seed = 0;
  std::uint64_t aug_seed = 0;
  std::size_t local_batch = 0;
};

/// Every M consecutive workers form a group sharing one sampler seed; each
/// worker has its own augmentation seed.
inline std::vector<WorkerConfig> assign_seeds(std::size_t workers, std::size_t replicas, std::uint64_t base_seed,
                                              std::size_t local_batch = 1) {
  if (workers < 1 || replicas < 1) throw ConfigError("distsim: W and M must be >= 1");
  if (workers % replicas != 0)
    throw ConfigError("distsim: M = " + std::to_string(replicas) + " does not divide W = " + std::to_string(workers));
  if (local_batch < 1) throw ConfigError("distsim: local batch must be >= 1");
  const RngStream base(base_seed);
  std::vector<WorkerConfig> out;
  std::set<std::uint64_t> aug_seen;
  for (std::size_t w = 0; w < workers; ++w) {
    WorkerConfig c;
    c.worker_id = w;
    c.group_id = w / replicas;
    c.sampler_seed = base.split(c.group_id).seed();
    c.aug_seed = base.split("aug").split(w).seed();
    c.local_batch = local_batch;
    if (!aug_seen.insert(c.aug_seed).second) throw ConsistencyError("distsim: augmentation seed collision");
    out.push_back(c);
  }
  return out;
}

inline std::size_t group_count(const std::vector<WorkerConfig>& workers) {
  std::set<std::size_t> g;
  for (const auto& w : workers) g.insert(w.group_id);
  return g.size();
}

inline std::size_t replicas_of(const std::vector<WorkerConfig>& workers) {
  return workers.size() / group_count(workers);
}

struct IoDedupReport {
  std::uint64_t total_loads = 0;
  std::uint64_t unique_loads = 0;
};

/// Sample loads when each worker reads its batch versus once per sampler seed.
inline IoDedupReport io_dedup_report(const std::vector<WorkerConfig>& workers, std::size_t steps) {
  IoDedupReport r;
  std::set<std::uint64_t> seeds;
  for (const auto& w : workers) {
    r.total_loads += static_cast<std::uint64_t>(steps) * w.local_batch;
    if (seeds.insert(w.sampler_seed).second) r.unique_loads += static_cast<std::uint64_t>(steps) * w.local_batch;
  }
  return r;
}

// ---------------------------------------------------------------------------

template <typename T>
struct StepAggregate {
  std::vector<std::vector<T>> local_grads;  // by worker id
  std::vector<T> mean;                      // summed in ascending worker id, then scaled
  std::vector<double> local_norms;
  double agg_norm = 0;
  double loss = 0;
  std::vector<std::vector<std::size_t>> indices;  // sampled by each worker
  std::vector<double> worker_seconds;
  std::uint64_t checksum = 0;  // of the post-step parameters (equal on every worker)

  /// Simulated wall time of the step: workers run concurrently.
  [[nodiscard]] double parallel_seconds() const {
    double m = 0;
    for (double s : worker_seconds) m = std::max(m, s);
    return m;
  }
};

template <typename T>
struct Worker {
  WorkerConfig config;
  Sampler sampler;
  RngStream aug;
  ModelParams<T> params;
  OptState<T> opt;
};

/// Lockstep in-process workers of synchronous data-parallel BA.
template <typename T>
struct DistState {
  std::vector<Worker<T>> workers;
  std::uint64_t base_seed = 0;
  std::uint64_t step = 0;
};

/// Dropout masks of worker w at step t come from this stream split by w.
inline RngStream dist_dropout_stream(std::uint64_t base_seed, std::uint64_t step) {
  return RngStream(base_seed).split("dropout", step);
}

template <typename T>
DistState<T> make_dist_state(const std::vector<WorkerConfig>& configs, const ModelParams<T>& params,
                             const LabeledDataset& ds, std::uint64_t base_seed) {
  DistState<T> s;
  s.base_seed = base_seed;
  for (const auto& c : configs) {
    if (c.local_batch > ds.size()) throw ConfigError("distsim: local batch larger than the dataset");
    s.workers.push_back(Worker<T>{c, Sampler(ds.size(), RngStream(c.sampler_seed)), RngStream(c.aug_seed), params,
                                  OptState<T>(params.dim())});
  }
  return s;
}

inline double dist_lr(const TrainConfig& cfg, std::uint64_t step, std::size_t dataset_size, std::size_t global_batch) {
  return lr_at(cfg.schedule, cfg.base_lr,
               static_cast<double>(step) / static_cast<double>(steps_per_epoch(dataset_size, global_batch)));
}

/// One synchronous step. Each worker augments its group's batch once with its
/// own stream and normalizes over its local batch; gradients and batch-norm
/// group statistics are combined in ascending worker id.
template <typename T>
StepAggregate<T> dist_step(DistState<T>& state, const ModelSpec& spec, const LabeledDataset& ds,
                           const TrainConfig& cfg) {
  detail::require(!state.workers.empty(), "dist_step: no workers");
  const std::uint64_t tag = params_checksum(state.workers.front().params);
  for (const auto& w : state.workers)
    if (params_checksum(w.params) != tag) throw ConsistencyError("dist_step: workers hold different parameters");

  const std::size_t W = state.workers.size();
  const Mode mode = step_mode(cfg);
  const ModelSpec local = with_ghost_size(spec, 0);
  const RngStream dropout = dist_dropout_stream(state.base_seed, state.step);

  StepAggregate<T> agg;
  agg.local_grads.resize(W);
  agg.local_norms.resize(W);
  agg.indices.resize(W);
  agg.worker_seconds.resize(W);
  std::vector<std::vector<std::vector<GroupStats<T>>>> stats(W);
  std::vector<double> losses(W);
  for (std::size_t w = 0; w < W; ++w) {
    auto& wk = state.workers[w];
    const auto t0 = std::chrono::steady_clock::now();
    Batch<T> batch = sample_batch<T>(ds, wk.sampler, wk.config.local_batch);
    Batch<T> aug = expand_batch(batch, cfg.transform, 1, wk.aug);
    auto r = loss_and_grad(wk.params, local, aug.images, std::span<const Label>(aug.labels), mode, dropout.split(w));
    agg.worker_seconds[w] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    agg.local_norms[w] = grad_l2(r.grad);
    losses[w] = r.loss;
    stats[w] = std::move(r.bn_stats);
    agg.indices[w] = std::move(batch.indices);
    agg.local_grads[w] = std::move(r.grad);
  }

  agg.mean.assign(agg.local_grads.front().size(), T{0});
  std::vector<std::vector<GroupStats<T>>> gathered;
  double loss_sum = 0;
  for (std::size_t w = 0; w < W; ++w) {
    for (std::size_t i = 0; i < agg.mean.size(); ++i) agg.mean[i] += agg.local_grads[w][i];
    loss_sum += losses[w];
    append_stats(gathered, std::move(stats[w]));
  }
  finalize_mean(agg.mean, W);
  agg.loss = loss_sum / static_cast<double>(W);
  agg.agg_norm = grad_l2(agg.mean);

  std::set<std::size_t> groups;
  std::size_t local_rows = 0;
  for (const auto& wk : state.workers) {
    groups.insert(wk.config.group_id);
    local_rows += wk.config.local_batch;
  }
  const std::size_t global_batch = local_rows / (W / groups.size());
  const double lr = dist_lr(cfg, state.step, ds.size(), global_batch);
  const auto mask = decay_mask(spec);
  for (auto& wk : state.workers) {
    if (mode == Mode::train) commit_running_stats(wk.params, spec, gathered);
    sgd_step(wk.params, std::span<const T>(agg.mean), wk.opt, lr, cfg, mask);
  }
  agg.checksum = params_checksum(state.workers.front().params);
  for (const auto& wk : state.workers)
    if (params_checksum(wk.params) != agg.checksum) throw ConsistencyError("dist_step: post-step parameters differ");
  ++state.step;
  return agg;
}

// ---------------------------------------------------------------------------
// Monolithic reference

/// Single-process BA with B = groups * B_local distinct samples and M
/// replicas, reproducing the workers' sample and augmentation streams. The
/// gradient is accumulated chunk-major with ghost size B_local, which visits
/// sub-batches in worker order.
template <typename T>
struct MonolithicBA {
  std::vector<WorkerConfig> configs;
  std::vector<Sampler> samplers;  // one per group
  std::vector<RngStream> aug;     // one per worker
  ModelParams<T> params;
  OptState<T> opt;
  std::uint64_t base_seed = 0;
  std::uint64_t step = 0;

  MonolithicBA(std::vector<WorkerConfig> cfgs, ModelParams<T> p, const LabeledDataset& ds, std::uint64_t seed)
      : configs(std::move(cfgs)), params(std::move(p)), opt(params.dim()), base_seed(seed) {
    const std::size_t M = replicas_of(configs);
    for (std::size_t g = 0; g < group_count(configs); ++g)
      samplers.emplace_back(ds.size(), RngStream(configs[g * M].sampler_seed));
    for (const auto& c : configs) aug.emplace_back(c.aug_seed);
  }

  GradResult<T> gradient(const ModelSpec& spec, const LabeledDataset& ds, const TrainConfig& cfg) {
    const std::size_t M = replicas_of(configs);
    const std::size_t groups = samplers.size();
    const std::size_t G = configs.front().local_batch;
    const std::size_t B = groups * G;
    std::vector<Batch<T>> group_batches;
    for (auto& s : samplers) group_batches.push_back(sample_batch<T>(ds, s, G));

    Shape shape = ds.image_shape();
    shape.insert(shape.begin(), M * B);
    Batch<T> expanded;
    expanded.images = Tensor<T>(shape);
    expanded.labels.resize(M * B);
    expanded.indices.resize(M * B);
    for (std::size_t c = 0; c < groups; ++c)
      for (std::size_t j = 0; j < M; ++j) {
        Batch<T> one = expand_batch(group_batches[c], cfg.transform, 1, aug[c * M + j]);
        for (std::size_t i = 0; i < G; ++i) {
          const std::size_t row = j * B + c * G + i;
          auto src = one.images.item(i);
          std::copy(src.begin(), src.end(), expanded.images.item(row).begin());
          expanded.labels[row] = one.labels[i];
          expanded.indices[row] = one.indices[i];
        }
      }
    return ba_gradient_accumulate(params, spec, expanded, B, M, G, step_mode(cfg),
                                  dist_dropout_stream(base_seed, step));
  }

  void advance(const ModelSpec& spec, const LabeledDataset& ds, const TrainConfig& cfg) {
    auto r = gradient(spec, ds, cfg);
    const std::size_t B = samplers.size() * configs.front().local_batch;
    if (step_mode(cfg) == Mode::train) commit_running_stats(params, spec, r.bn_stats);
    sgd_step(params, std::span<const T>(r.grad), opt, dist_lr(cfg, step, ds.size(), B), cfg, decay_mask(spec));
    ++step;
  }
};

struct SweepRow {
  std::uint64_t step = 0;
  std::size_t worker = 0;
  double local_grad_norm = 0;
  double agg_grad_norm = 0;
  std::uint64_t param_checksum = 0;
};

struct EquivalenceReport {
  bool bit_exact = true;
  std::int64_t first_mismatch_step = -1;
  double max_abs_diff = 0;
  std::size_t steps = 0;
  std::vector<SweepRow> rows;
  std::vector<double> step_seconds;  // simulated parallel step time
  std::uint64_t final_checksum = 0;
};

/// Runs the workers and the monolithic reference side by side and compares
/// parameters after every step.
template <typename T>
EquivalenceReport equivalence_check(const std::vector<WorkerConfig>& configs, const ModelParams<T>& init,
                                    const ModelSpec& spec, const LabeledDataset& ds, const TrainConfig& cfg,
                                    std::size_t steps, std::uint64_t base_seed) {
  for (const auto& c : configs)
    if (c.local_batch != configs.front().local_batch) throw ConfigError("distsim: local batch sizes must agree");
  DistState<T> dist = make_dist_state(configs, init, ds, base_seed);
  MonolithicBA<T> mono(configs, init, ds, base_seed);
  EquivalenceReport rep;
  for (std::size_t t = 0; t < steps; ++t) {
    auto agg = dist_step(dist, spec, ds, cfg);
    mono.advance(spec, ds, cfg);
    for (std::size_t w = 0; w < configs.size(); ++w)
      rep.rows.push_back({t, w, agg.local_norms[w], agg.agg_norm, agg.checksum});
    rep.step_seconds.push_back(agg.parallel_seconds());
    const auto& a = dist.workers.front().params;
    if (!(a == mono.params)) {
      if (rep.bit_exact) rep.first_mismatch_step = static_cast<std::int64_t>(t);
      rep.bit_exact = false;
      for (std::size_t i = 0; i < a.values.size(); ++i)
        rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(static_cast<double>(a.values[i] - mono.params.values[i])));
    }
  }
  rep.steps = steps;
  rep.final_checksum = params_checksum(dist.workers.front().params);
  return rep;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "step,worker,local_grad_norm,agg_grad_norm,param_checksum\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%zu,%.12g,%.12g,%016llx\n", static_cast<unsigned long long>(r.step), r.worker,
                  r.local_grad_norm, r.agg_grad_norm, static_cast<unsigned long long>(r.param_checksum));
    os << buf;
  }
}

}  // namespace batchaug
