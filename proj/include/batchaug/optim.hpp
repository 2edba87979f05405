#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "batchaug/augment.hpp"
#include "batchaug/dataio.hpp"
#include "batchaug/errors.hpp"
#include "batchaug/model.hpp"
#include "batchaug/rng.hpp"

namespace batchaug {

// ---------------------------------------------------------------------------
// Learning-rate schedules

struct StepDecay {
  std::vector<double> milestones;  // epochs, strictly increasing
  double factor = 10.0;            // lr is divided by this at each milestone
};
struct WarmupThenStep {
  double warmup_epochs = 5.0;
  std::vector<double> milestones;
  double factor = 10.0;
};
using ScheduleSpec = std::variant<StepDecay, WarmupThenStep>;

namespace detail {
inline double step_part(const std::vector<double>& milestones, double factor, double base, double epoch) {
  double lr = base;
  for (double m : milestones)
    if (epoch >= m) lr /= factor;
  return lr;
}
inline void check_milestones(const std::vector<double>& m) {
  for (std::size_t i = 1; i < m.size(); ++i)
    if (!(m[i] > m[i - 1])) throw ConfigError("schedule milestones must be strictly increasing");
}
}  // namespace detail

inline void validate_schedule(const ScheduleSpec& s) {
  std::visit(
      [](const auto& v) {
        detail::check_milestones(v.milestones);
        if (!(v.factor > 0)) throw ConfigError("schedule factor must be positive");
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, WarmupThenStep>)
          if (v.warmup_epochs < 0) throw ConfigError("warmup epochs must be >= 0");
      },
      s);
}

/// Learning rate at a fractional epoch. Depends only on the schedule, the base
/// rate and the epoch; never on batch size or replica count.
inline double lr_at(const ScheduleSpec& schedule, double base_lr, double epoch) {
  detail::require(epoch >= 0.0, "lr_at: epoch must be >= 0");
  return std::visit(
      [&](const auto& s) -> double {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, WarmupThenStep>) {
          if (s.warmup_epochs > 0 && epoch < s.warmup_epochs) return base_lr * epoch / s.warmup_epochs;
        }
        return detail::step_part(s.milestones, s.factor, base_lr, epoch);
      },
      schedule);
}

// ---------------------------------------------------------------------------
// Configuration

enum class TrainMode { plain, ba, ba_accumulate, ra };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::plain: return "plain";
    case TrainMode::ba: return "ba";
    case TrainMode::ba_accumulate: return "ba_accumulate";
    case TrainMode::ra: return "ra";
  }
  return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "plain") return TrainMode::plain;
  if (s == "ba") return TrainMode::ba;
  if (s == "ba_accumulate") return TrainMode::ba_accumulate;
  if (s == "ra") return TrainMode::ra;
  throw ConfigError("unknown train mode '" + std::string(s) + "'");
}

struct TrainConfig {
  double base_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 64;
  std::size_t replicas = 1;  // M
  double epochs = 10;
  ScheduleSpec schedule = StepDecay{};
  std::size_t ghost_size = 0;  // 0: one group per forward
  TransformSpec transform = Identity{};
  std::uint64_t sampler_seed = 1;
  std::uint64_t aug_seed = 2;
  std::uint64_t init_seed = 3;
  bool with_replacement = false;
  bool freeze_bn = false;           // batch norm on running statistics during training
  double divergence_factor = 1e4;   // abort when loss exceeds this multiple of the initial loss
  bool per_step_rows = false;
};

/// Ghost group size actually used for an augmented batch of `rows`.
inline std::size_t effective_ghost(const TrainConfig& cfg, std::size_t rows) {
  return cfg.ghost_size == 0 ? rows : cfg.ghost_size;
}

inline void validate(const TrainConfig& cfg) {
  if (!(cfg.base_lr > 0)) throw ConfigError("train: base learning rate must be > 0");
  if (cfg.batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (cfg.replicas < 1) throw ConfigError("train: replicas must be >= 1");
  if (cfg.epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (cfg.momentum < 0 || cfg.momentum >= 1) throw ConfigError("train: momentum must be in [0, 1)");
  if (cfg.weight_decay < 0) throw ConfigError("train: weight decay must be >= 0");
  if (cfg.ghost_size != 0 && (cfg.replicas * cfg.batch_size) % cfg.ghost_size != 0)
    throw ConfigError("train: ghost size " + std::to_string(cfg.ghost_size) + " does not divide M*B = " +
                      std::to_string(cfg.replicas * cfg.batch_size));
  validate_schedule(cfg.schedule);
}

/// Large-batch baseline with matched iteration count: B*M distinct samples,
/// M times the epochs (and milestones), one replica.
inline TrainConfig regime_adaptation(const TrainConfig& cfg, std::size_t replicas) {
  detail::require(replicas >= 1, "regime_adaptation: M must be >= 1");
  TrainConfig out = cfg;
  if (replicas == 1) return out;
  const double m = static_cast<double>(replicas);
  out.batch_size = cfg.batch_size * replicas;
  out.epochs = cfg.epochs * m;
  out.replicas = 1;
  std::visit(
      [&](auto& s) {
        for (double& e : s.milestones) e *= m;
        if constexpr (std::is_same_v<std::decay_t<decltype(s)>, WarmupThenStep>) s.warmup_epochs *= m;
      },
      out.schedule);
  return out;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

inline std::size_t total_iterations(const TrainConfig& cfg, std::size_t n) {
  return static_cast<std::size_t>(std::llround(cfg.epochs * static_cast<double>(steps_per_epoch(n, cfg.batch_size))));
}

// ---------------------------------------------------------------------------
// SGD

template <typename T>
struct OptState {
  std::vector<T> velocity;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;

  OptState() = default;
  explicit OptState(std::size_t dim) : velocity(dim, T{0}) {}
  friend bool operator==(const OptState&, const OptState&) = default;
};

/// 1 where weight decay applies, 0 for batch-norm parameters.
inline std::vector<std::uint8_t> decay_mask(const ModelSpec& spec) {
  const ParamLayout lay = param_layout(spec);
  std::vector<std::uint8_t> mask(lay.dim, 1);
  for (const auto& seg : lay.segments)
    if (!seg.decay) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(seg.offset), seg.size, std::uint8_t{0});
  return mask;
}

/// Heavy-ball update: v <- mu v + (g + wd w), w <- w - lr v.
template <typename T>
void sgd_step(std::vector<T>& weights, std::type_identity_t<std::span<const T>> grad, OptState<T>& state, double lr, double momentum,
              double weight_decay, std::span<const std::uint8_t> mask = {}) {
  detail::require(grad.size() == weights.size(), "sgd_step: gradient dimension differs from parameters");
  if (state.velocity.size() != weights.size()) state.velocity.assign(weights.size(), T{0});
  for (T g : grad)
    if (!std::isfinite(g)) throw TrainingDiverged("non-finite gradient at step " + std::to_string(state.step));
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), eta = static_cast<T>(lr);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    T g = grad[i];
    if (wd != T{0} && (mask.empty() || mask[i])) g += wd * weights[i];
    state.velocity[i] = mu * state.velocity[i] + g;
    weights[i] -= eta * state.velocity[i];
  }
  ++state.step;
}

template <typename T>
void sgd_step(ModelParams<T>& params, std::type_identity_t<std::span<const T>> grad, OptState<T>& state, double lr, const TrainConfig& cfg,
              std::span<const std::uint8_t> mask = {}) {
  sgd_step(params.values, grad, state, lr, cfg.momentum, cfg.weight_decay, mask);
}

// ---------------------------------------------------------------------------
// Batch Augmentation steps

struct StepMetrics {
  double loss = 0.0;
  std::size_t errors = 0;
  std::size_t instances = 0;
  double grad_norm = 0.0;
  std::size_t peak_activations = 0;
  std::size_t passes = 0;
};

template <typename T>
double grad_l2(const std::vector<T>& g) {
  double acc = 0;
  for (T v : g) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

inline Mode step_mode(const TrainConfig& cfg) { return cfg.freeze_bn ? Mode::train_frozen_bn : Mode::train; }

/// Turns an ordered sum of `count` gradients into their mean. Shared by every
/// reduction that must agree bit-for-bit.
template <typename T>
void finalize_mean(std::vector<T>& sum, std::size_t count) {
  const T inv = T{1} / static_cast<T>(count);
  for (T& g : sum) g *= inv;
}

/// Gradient of the mean loss over an already expanded replica-major batch
/// (M*B rows) in one forward/backward, ghost groups of size G.
template <typename T>
GradResult<T> ba_gradient(const ModelParams<T>& params, const ModelSpec& spec, const Batch<T>& augmented,
                          std::size_t ghost, Mode mode, const RngStream& dropout_stream) {
  const ModelSpec s = with_ghost_size(spec, ghost);
  return loss_and_grad(params, s, augmented.images, augmented.labels, mode, dropout_stream);
}

/// Same gradient accumulated over sub-passes of G rows. The loop is
/// chunk-major: for each chunk c of G distinct samples, for each replica j,
/// one pass over rows [j*B + c*G, j*B + (c+1)*G). Pass p = c*M + j draws its
/// dropout masks from dropout_stream.split(p). Gradients are summed in pass
/// order and divided by the pass count.
template <typename T>
GradResult<T> ba_gradient_accumulate(const ModelParams<T>& params, const ModelSpec& spec, const Batch<T>& augmented,
                                     std::size_t batch, std::size_t replicas, std::size_t ghost, Mode mode,
                                     const RngStream& dropout_stream) {
  detail::require(augmented.size() == batch * replicas, "ba_gradient_accumulate: batch is not M*B rows");
  if (ghost == 0) ghost = batch;
  if (batch % ghost != 0)
    throw ConfigError("accumulation needs the ghost size " + std::to_string(ghost) + " to divide B = " +
                      std::to_string(batch));
  const ModelSpec s = with_ghost_size(spec, 0);
  const std::size_t chunks = batch / ghost;
  GradResult<T> total;
  total.grad.assign(param_layout(spec).dim, T{0});
  std::size_t passes = 0;
  double loss_sum = 0;
  for (std::size_t c = 0; c < chunks; ++c)
    for (std::size_t j = 0; j < replicas; ++j) {
      const std::size_t first = j * batch + c * ghost;
      Tensor<T> rows = augmented.images.slice(first, ghost);
      std::span<const Label> labels(augmented.labels.data() + first, ghost);
      auto r = loss_and_grad(params, s, rows, labels, mode, dropout_stream.split(c * replicas + j));
      for (std::size_t i = 0; i < total.grad.size(); ++i) total.grad[i] += r.grad[i];
      loss_sum += r.loss;
      total.errors += r.errors;
      total.activations = std::max(total.activations, r.activations);
      append_stats(total.bn_stats, std::move(r.bn_stats));
      ++passes;
    }
  finalize_mean(total.grad, passes);
  total.loss = loss_sum / static_cast<double>(passes);
  return total;
}

namespace detail {
template <typename T>
StepMetrics finish_step(ModelParams<T>& params, const ModelSpec& spec, GradResult<T>& r, OptState<T>& state, double lr,
                        const TrainConfig& cfg, Mode mode, std::size_t instances, std::size_t passes) {
  if (!std::isfinite(r.loss)) throw TrainingDiverged("non-finite loss at step " + std::to_string(state.step));
  StepMetrics m;
  m.loss = r.loss;
  m.errors = r.errors;
  m.instances = instances;
  m.grad_norm = grad_l2(r.grad);
  m.peak_activations = r.activations;
  m.passes = passes;
  if (mode == Mode::train) commit_running_stats(params, spec, r.bn_stats);
  const auto mask = decay_mask(spec);
  sgd_step(params, std::span<const T>(r.grad), state, lr, cfg, mask);
  return m;
}
}  // namespace detail

/// One Batch Augmentation step: expand the B-batch to M*B, one
/// forward/backward over all of it, one SGD update. With M = 1 this is the
/// plain step on a once-augmented batch.
template <typename T>
StepMetrics ba_step(ModelParams<T>& params, const ModelSpec& spec, const Batch<T>& batch, std::size_t replicas,
                    RngStream& stream, OptState<T>& state, double lr, const TrainConfig& cfg) {
  detail::require(batch.size() >= 1, "ba_step: empty batch");
  Batch<T> aug = expand_batch(batch, cfg.transform, replicas, stream);
  const Mode mode = step_mode(cfg);
  auto r = ba_gradient(params, spec, aug, effective_ghost(cfg, aug.size()), mode, stream.split("dropout"));
  return detail::finish_step(params, spec, r, state, lr, cfg, mode, aug.size(), 1);
}

/// Same update computed as sequential sub-passes (M of size B when G = B),
/// so peak activation memory does not grow with M.
template <typename T>
StepMetrics ba_step_accumulate(ModelParams<T>& params, const ModelSpec& spec, const Batch<T>& batch,
                               std::size_t replicas, RngStream& stream, OptState<T>& state, double lr,
                               const TrainConfig& cfg) {
  Batch<T> aug = expand_batch(batch, cfg.transform, replicas, stream);
  const Mode mode = step_mode(cfg);
  const std::size_t ghost = cfg.ghost_size == 0 ? batch.size() : cfg.ghost_size;
  auto r = ba_gradient_accumulate(params, spec, aug, batch.size(), replicas, ghost, mode, stream.split("dropout"));
  const std::size_t passes = replicas * (batch.size() / ghost);
  return detail::finish_step(params, spec, r, state, lr, cfg, mode, aug.size(), passes);
}

// ---------------------------------------------------------------------------
// Training loop

struct ReportRow {
  double epoch = 0;
  std::uint64_t step = 0;
  double lr = 0;
  double train_loss = 0;
  double train_err = 0;
  double val_err = 0;
  double grad_norm = 0;
  bool per_step = false;
};

template <typename T>
struct TrainReport {
  std::vector<ReportRow> rows;
  ModelParams<T> params;
  TrainConfig effective;
  std::uint64_t total_steps = 0;
  double wall_seconds = 0;
  double final_val_err = 0;
};

inline void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows) {
  os << "epoch,step,lr,train_loss,train_err,val_err,grad_norm\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6g,%llu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch,
                  static_cast<unsigned long long>(r.step), r.lr, r.train_loss, r.train_err, r.val_err, r.grad_norm);
    os << buf;
  }
}

/// Full training run. Validation error is measured in eval mode after every
/// epoch; row 0 holds the initial evaluation.
template <typename T>
TrainReport<T> train(const LabeledDataset& train_set, const LabeledDataset& val_set, const ModelSpec& spec,
                     TrainConfig cfg, TrainMode mode, std::optional<ModelParams<T>> initial = std::nullopt) {
  validate(cfg);
  if (mode == TrainMode::ra) cfg = regime_adaptation(cfg, cfg.replicas);
  if (mode == TrainMode::plain) cfg.replicas = 1;
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();

  TrainReport<T> rep;
  rep.effective = cfg;
  rep.params = initial ? std::move(*initial) : init_params<T>(spec, RngStream(cfg.init_seed));
  OptState<T> state(rep.params.dim());
  Sampler sampler(train_set.size(), RngStream(cfg.sampler_seed).split("sampler"), cfg.with_replacement);
  RngStream aug_stream = RngStream(cfg.aug_seed).split("augment");

  const std::size_t B = std::min(cfg.batch_size, train_set.size());
  const std::size_t steps = steps_per_epoch(train_set.size(), B);
  const auto whole_epochs = static_cast<std::size_t>(std::ceil(cfg.epochs));
  const std::size_t total = total_iterations(cfg, train_set.size());

  {
    auto tr = evaluate(rep.params, spec, train_set);
    auto va = evaluate(rep.params, spec, val_set);
    rep.rows.push_back({0, 0, lr_at(cfg.schedule, cfg.base_lr, 0), tr.loss, tr.error, va.error, 0, false});
    rep.final_val_err = va.error;
  }
  double reference_loss = rep.rows.front().train_loss;

  std::uint64_t step = 0;
  for (std::size_t e = 0; e < whole_epochs && step < total; ++e) {
    double loss_sum = 0, norm_sum = 0;
    std::size_t err_sum = 0, inst_sum = 0, done = 0;
    for (std::size_t s = 0; s < steps && step < total; ++s) {
      const double epoch_frac = static_cast<double>(e) + static_cast<double>(s) / static_cast<double>(steps);
      const double lr = lr_at(cfg.schedule, cfg.base_lr, epoch_frac);
      Batch<T> batch = sample_batch<T>(train_set, sampler, B);
      StepMetrics m = mode == TrainMode::ba_accumulate
                          ? ba_step_accumulate(rep.params, spec, batch, cfg.replicas, aug_stream, state, lr, cfg)
                          : ba_step(rep.params, spec, batch, cfg.replicas, aug_stream, state, lr, cfg);
      ++step;
      if (!(m.loss <= cfg.divergence_factor * std::max(reference_loss, 1e-12)))
        throw TrainingDiverged("loss " + std::to_string(m.loss) + " exceeded the divergence guard at step " +
                               std::to_string(step));
      loss_sum += m.loss;
      norm_sum += m.grad_norm;
      err_sum += m.errors;
      inst_sum += m.instances;
      ++done;
      if (cfg.per_step_rows)
        rep.rows.push_back({epoch_frac, step, lr, m.loss, static_cast<double>(m.errors) / static_cast<double>(m.instances),
                            std::nan(""), m.grad_norm, true});
    }
    state.epoch = e + 1;
    auto va = evaluate(rep.params, spec, val_set);
    rep.final_val_err = va.error;
    rep.rows.push_back({static_cast<double>(e + 1), step, lr_at(cfg.schedule, cfg.base_lr, static_cast<double>(e + 1)),
                        loss_sum / static_cast<double>(done), static_cast<double>(err_sum) / static_cast<double>(inst_sum),
                        va.error, norm_sum / static_cast<double>(done), false});
  }
  rep.total_steps = step;
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace batchaug
