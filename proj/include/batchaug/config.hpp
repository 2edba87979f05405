#pragma once

#include <charconv>
#include <cstdint>
#include <cmath>
#include <cstdio>
#include <type_traits>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "batchaug/augment.hpp"
#include "batchaug/errors.hpp"
#include "batchaug/optim.hpp"
#include "batchaug/rng.hpp"

namespace batchaug {

// Optional seeds print as "auto" and are derived from the run seed.
using SeedOpt = std::optional<std::uint64_t>;

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | idx
  std::size_t classes = 10;
  std::size_t per_class = 600;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  double noise = 0.5;
  SeedOpt seed;
  std::size_t val_count = 1000;  // holdout size when no validation files are given
  std::string train_images, train_labels, val_images, val_labels;
  std::size_t limit = 0;  // 0: use every training sample
  bool operator==(const DatasetConfig&) const = default;
};

struct ModelConfig {
  std::string arch = "cnn:8,16";
  bool batchnorm = true;
  double dropout = 0.0;
  std::string scalar = "f32";  // f32 | f64
  std::string checkpoint;      // load instead of initializing (correlate)
  bool save = false;           // write a checkpoint after training
  bool operator==(const ModelConfig&) const = default;
};

struct AugmentConfig {
  std::string transform = "padcrop:2,hflip:0.5";
  bool operator==(const AugmentConfig&) const = default;
};

struct TrainSection {
  std::string mode = "ba";
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  std::size_t replicas = 4;
  double epochs = 10;
  std::vector<double> milestones{6, 8};
  double decay_factor = 10;
  double warmup_epochs = 0;
  std::size_t ghost_size = 32;
  SeedOpt sampler_seed, aug_seed, init_seed;
  bool with_replacement = false;
  bool freeze_bn = false;
  double divergence_factor = 1e4;
  bool per_step_rows = false;
  bool operator==(const TrainSection&) const = default;
};

struct DiagnosticsConfig {
  std::size_t pairs = 100;
  std::vector<std::string> states{"init", "partial"};  // init | partial | checkpoint
  double partial_epochs = 2;
  std::vector<std::size_t> grad_norm_replicas{1, 2, 4, 8};
  std::size_t grad_norm_repeats = 5;
  std::size_t grad_norm_batch = 32;
  std::size_t assumption_samples = 20;
  SeedOpt seed;
  bool operator==(const DiagnosticsConfig&) const = default;
};

struct DynamicsConfig {
  std::size_t d = 8;
  std::size_t samples = 32;
  std::size_t batch = 4;
  std::size_t rank = 2;
  std::size_t problems = 20;
  std::vector<double> eta_fractions{0.2, 0.5, 0.8, 0.95, 0.99, 1.05, 1.5};  // multiples of 2/lambda_max
  std::size_t tight_problems = 5;
  std::size_t max_steps = 100000;
  std::size_t trajectory_every = 1000;
  SeedOpt seed;
  bool operator==(const DynamicsConfig&) const = default;
};

struct DistsimConfig {
  std::size_t workers = 8;
  std::size_t replicas = 4;
  std::size_t local_batch = 16;
  std::size_t steps = 50;
  std::string scalar = "f64";
  std::vector<std::size_t> parity_replicas{2, 4};
  std::size_t parity_steps = 5;
  SeedOpt seed;
  bool operator==(const DistsimConfig&) const = default;
};

struct ThroughputConfig {
  std::size_t max_batch = 32;
  std::size_t repeats = 10;
  std::size_t warmup = 1;
  bool operator==(const ThroughputConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DatasetConfig dataset;
  ModelConfig model;
  AugmentConfig augment;
  TrainSection train;
  DiagnosticsConfig diagnostics;
  DynamicsConfig dynamics;
  DistsimConfig distsim;
  ThroughputConfig throughput;
  bool operator==(const ExperimentConfig&) const = default;

  /// An explicit seed, or one derived from the run seed and a label.
  [[nodiscard]] std::uint64_t resolve(const SeedOpt& s, std::string_view label) const {
    return s ? *s : RngStream(seed).split(label).seed();
  }
};

// ---------------------------------------------------------------------------
// Value codecs

namespace cfg {

template <typename V>
struct Codec;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <>
struct Codec<std::size_t> {
  static std::optional<std::size_t> parse(std::string_view s) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
  }
  static std::string print(std::size_t v) { return std::to_string(v); }
};

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seeds share the size codec");

template <>
struct Codec<double> {
  static std::optional<double> parse(std::string_view s) {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty() || !std::isfinite(v)) return std::nullopt;
    return v;
  }
  static std::string print(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
    return std::string(buf, p);
  }
};

template <>
struct Codec<bool> {
  static std::optional<bool> parse(std::string_view s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    return std::nullopt;
  }
  static std::string print(bool v) { return v ? "true" : "false"; }
};

template <>
struct Codec<std::string> {
  static std::optional<std::string> parse(std::string_view s) { return std::string(s); }
  static std::string print(const std::string& v) { return v; }
};

template <>
struct Codec<SeedOpt> {
  static std::optional<SeedOpt> parse(std::string_view s) {
    if (s == "auto") return std::optional<SeedOpt>(std::in_place);
    if (auto v = Codec<std::size_t>::parse(s)) return std::optional<SeedOpt>(std::in_place, *v);
    return std::nullopt;
  }
  static std::string print(const SeedOpt& v) { return v ? std::to_string(*v) : "auto"; }
};

template <typename E>
struct Codec<std::vector<E>> {
  static std::optional<std::vector<E>> parse(std::string_view s) {
    std::vector<E> out;
    for (const auto& item : split_list(s)) {
      auto v = Codec<E>::parse(item);
      if (!v) return std::nullopt;
      out.push_back(*v);
    }
    return out;
  }
  static std::string print(const std::vector<E>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + Codec<E>::print(v[i]);
    return out;
  }
};

struct Field {
  std::string section;  // empty for top-level keys
  std::string key;
  std::function<std::string(ExperimentConfig&, std::string_view)> set;  // returns an error message or ""
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename S, typename V>
Field field(std::string section, std::string key, S ExperimentConfig::*sec, V S::*mem,
            std::function<std::string(const V&)> check = {}) {
  Field f;
  f.section = std::move(section);
  f.key = std::move(key);
  f.set = [sec, mem, check](ExperimentConfig& c, std::string_view text) -> std::string {
    auto v = Codec<V>::parse(text);
    if (!v) return "cannot parse '" + std::string(text) + "'";
    if (check) {
      std::string err = check(*v);
      if (!err.empty()) return err;
    }
    (c.*sec).*mem = std::move(*v);
    return {};
  };
  f.get = [sec, mem](const ExperimentConfig& c) { return Codec<V>::print((c.*sec).*mem); };
  return f;
}

template <typename V>
std::function<std::string(const V&)> at_least(V lo) {
  return [lo](const V& v) { return v >= lo ? std::string{} : "must be >= " + Codec<V>::print(lo); };
}
inline std::function<std::string(const double&)> positive() {
  return [](const double& v) { return v > 0 ? std::string{} : std::string("must be > 0"); };
}
inline std::function<std::string(const double&)> in_unit(bool closed_right) {
  return [closed_right](const double& v) {
    const bool ok = v >= 0 && (closed_right ? v <= 1 : v < 1);
    return ok ? std::string{} : std::string(closed_right ? "must be in [0, 1]" : "must be in [0, 1)");
  };
}
inline std::function<std::string(const std::string&)> one_of(std::vector<std::string> options) {
  return [options](const std::string& v) {
    for (const auto& o : options)
      if (v == o) return std::string{};
    std::string all;
    for (const auto& o : options) all += (all.empty() ? "" : "|") + o;
    return "must be one of " + all;
  };
}

inline const std::vector<Field>& fields() {
  using E = ExperimentConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> t;
    {
      Field f;
      f.key = "seed";
      f.set = [](E& c, std::string_view s) -> std::string {
        auto v = Codec<std::size_t>::parse(s);
        if (!v) return "cannot parse '" + std::string(s) + "'";
        c.seed = *v;
        return {};
      };
      f.get = [](const E& c) { return std::to_string(c.seed); };
      t.push_back(f);
    }
    using D = DatasetConfig;
    t.push_back(field<D, std::string>("dataset", "source", &E::dataset, &D::source, one_of({"synthetic", "idx"})));
    t.push_back(field<D, std::size_t>("dataset", "classes", &E::dataset, &D::classes, at_least<std::size_t>(2)));
    t.push_back(field<D, std::size_t>("dataset", "per_class", &E::dataset, &D::per_class, at_least<std::size_t>(1)));
    t.push_back(field<D, std::size_t>("dataset", "height", &E::dataset, &D::height, at_least<std::size_t>(4)));
    t.push_back(field<D, std::size_t>("dataset", "width", &E::dataset, &D::width, at_least<std::size_t>(4)));
    t.push_back(field<D, std::size_t>("dataset", "channels", &E::dataset, &D::channels, at_least<std::size_t>(1)));
    t.push_back(field<D, double>("dataset", "noise", &E::dataset, &D::noise, at_least<double>(0)));
    t.push_back(field<D, SeedOpt>("dataset", "seed", &E::dataset, &D::seed));
    t.push_back(field<D, std::size_t>("dataset", "val_count", &E::dataset, &D::val_count));
    t.push_back(field<D, std::string>("dataset", "train_images", &E::dataset, &D::train_images));
    t.push_back(field<D, std::string>("dataset", "train_labels", &E::dataset, &D::train_labels));
    t.push_back(field<D, std::string>("dataset", "val_images", &E::dataset, &D::val_images));
    t.push_back(field<D, std::string>("dataset", "val_labels", &E::dataset, &D::val_labels));
    t.push_back(field<D, std::size_t>("dataset", "limit", &E::dataset, &D::limit));

    using Mo = ModelConfig;
    t.push_back(field<Mo, std::string>("model", "arch", &E::model, &Mo::arch));
    t.push_back(field<Mo, bool>("model", "batchnorm", &E::model, &Mo::batchnorm));
    t.push_back(field<Mo, double>("model", "dropout", &E::model, &Mo::dropout, in_unit(false)));
    t.push_back(field<Mo, std::string>("model", "scalar", &E::model, &Mo::scalar, one_of({"f32", "f64"})));
    t.push_back(field<Mo, std::string>("model", "checkpoint", &E::model, &Mo::checkpoint));
    t.push_back(field<Mo, bool>("model", "save", &E::model, &Mo::save));

    t.push_back(field<AugmentConfig, std::string>("augment", "transform", &E::augment, &AugmentConfig::transform,
                                                  [](const std::string& s) {
                                                    try {
                                                      (void)parse_transform(s);
                                                      return std::string{};
                                                    } catch (const ConfigError& e) {
                                                      return std::string(e.what());
                                                    }
                                                  }));

    using Tr = TrainSection;
    t.push_back(field<Tr, std::string>("train", "mode", &E::train, &Tr::mode, one_of({"plain", "ba", "ba_accumulate", "ra"})));
    t.push_back(field<Tr, double>("train", "base_lr", &E::train, &Tr::base_lr, positive()));
    t.push_back(field<Tr, double>("train", "momentum", &E::train, &Tr::momentum, in_unit(false)));
    t.push_back(field<Tr, double>("train", "weight_decay", &E::train, &Tr::weight_decay, at_least<double>(0)));
    t.push_back(field<Tr, std::size_t>("train", "batch_size", &E::train, &Tr::batch_size, at_least<std::size_t>(1)));
    t.push_back(field<Tr, std::size_t>("train", "replicas", &E::train, &Tr::replicas, at_least<std::size_t>(1)));
    t.push_back(field<Tr, double>("train", "epochs", &E::train, &Tr::epochs, at_least<double>(0)));
    t.push_back(field<Tr, std::vector<double>>("train", "milestones", &E::train, &Tr::milestones));
    t.push_back(field<Tr, double>("train", "decay_factor", &E::train, &Tr::decay_factor, positive()));
    t.push_back(field<Tr, double>("train", "warmup_epochs", &E::train, &Tr::warmup_epochs, at_least<double>(0)));
    t.push_back(field<Tr, std::size_t>("train", "ghost_size", &E::train, &Tr::ghost_size));
    t.push_back(field<Tr, SeedOpt>("train", "sampler_seed", &E::train, &Tr::sampler_seed));
    t.push_back(field<Tr, SeedOpt>("train", "aug_seed", &E::train, &Tr::aug_seed));
    t.push_back(field<Tr, SeedOpt>("train", "init_seed", &E::train, &Tr::init_seed));
    t.push_back(field<Tr, bool>("train", "with_replacement", &E::train, &Tr::with_replacement));
    t.push_back(field<Tr, bool>("train", "freeze_bn", &E::train, &Tr::freeze_bn));
    t.push_back(field<Tr, double>("train", "divergence_factor", &E::train, &Tr::divergence_factor, positive()));
    t.push_back(field<Tr, bool>("train", "per_step_rows", &E::train, &Tr::per_step_rows));

    using Di = DiagnosticsConfig;
    t.push_back(field<Di, std::size_t>("diagnostics", "pairs", &E::diagnostics, &Di::pairs, at_least<std::size_t>(1)));
    t.push_back(field<Di, std::vector<std::string>>(
        "diagnostics", "states", &E::diagnostics, &Di::states, [](const std::vector<std::string>& v) {
          for (const auto& s : v)
            if (s != "init" && s != "partial" && s != "checkpoint") return "unknown state '" + s + "'";
          return std::string{};
        }));
    t.push_back(field<Di, double>("diagnostics", "partial_epochs", &E::diagnostics, &Di::partial_epochs, at_least<double>(0)));
    t.push_back(field<Di, std::vector<std::size_t>>("diagnostics", "grad_norm_replicas", &E::diagnostics,
                                                    &Di::grad_norm_replicas, [](const std::vector<std::size_t>& v) {
                                                      if (v.empty()) return std::string("must not be empty");
                                                      for (auto m : v)
                                                        if (m < 1) return std::string("entries must be >= 1");
                                                      return std::string{};
                                                    }));
    t.push_back(field<Di, std::size_t>("diagnostics", "grad_norm_repeats", &E::diagnostics, &Di::grad_norm_repeats,
                                       at_least<std::size_t>(1)));
    t.push_back(field<Di, std::size_t>("diagnostics", "grad_norm_batch", &E::diagnostics, &Di::grad_norm_batch,
                                       at_least<std::size_t>(1)));
    t.push_back(field<Di, std::size_t>("diagnostics", "assumption_samples", &E::diagnostics, &Di::assumption_samples,
                                       at_least<std::size_t>(2)));
    t.push_back(field<Di, SeedOpt>("diagnostics", "seed", &E::diagnostics, &Di::seed));

    using Dy = DynamicsConfig;
    t.push_back(field<Dy, std::size_t>("dynamics", "d", &E::dynamics, &Dy::d, at_least<std::size_t>(1)));
    t.push_back(field<Dy, std::size_t>("dynamics", "samples", &E::dynamics, &Dy::samples, at_least<std::size_t>(1)));
    t.push_back(field<Dy, std::size_t>("dynamics", "batch", &E::dynamics, &Dy::batch, at_least<std::size_t>(1)));
    t.push_back(field<Dy, std::size_t>("dynamics", "rank", &E::dynamics, &Dy::rank, at_least<std::size_t>(1)));
    t.push_back(field<Dy, std::size_t>("dynamics", "problems", &E::dynamics, &Dy::problems));
    t.push_back(field<Dy, std::vector<double>>("dynamics", "eta_fractions", &E::dynamics, &Dy::eta_fractions,
                                               [](const std::vector<double>& v) {
                                                 for (double x : v)
                                                   if (!(x > 0)) return std::string("entries must be > 0");
                                                 return std::string{};
                                               }));
    t.push_back(field<Dy, std::size_t>("dynamics", "tight_problems", &E::dynamics, &Dy::tight_problems));
    t.push_back(field<Dy, std::size_t>("dynamics", "max_steps", &E::dynamics, &Dy::max_steps, at_least<std::size_t>(1)));
    t.push_back(field<Dy, std::size_t>("dynamics", "trajectory_every", &E::dynamics, &Dy::trajectory_every));
    t.push_back(field<Dy, SeedOpt>("dynamics", "seed", &E::dynamics, &Dy::seed));

    using Ds = DistsimConfig;
    t.push_back(field<Ds, std::size_t>("distsim", "workers", &E::distsim, &Ds::workers, at_least<std::size_t>(1)));
    t.push_back(field<Ds, std::size_t>("distsim", "replicas", &E::distsim, &Ds::replicas, at_least<std::size_t>(1)));
    t.push_back(field<Ds, std::size_t>("distsim", "local_batch", &E::distsim, &Ds::local_batch, at_least<std::size_t>(1)));
    t.push_back(field<Ds, std::size_t>("distsim", "steps", &E::distsim, &Ds::steps));
    t.push_back(field<Ds, std::string>("distsim", "scalar", &E::distsim, &Ds::scalar, one_of({"f32", "f64"})));
    t.push_back(field<Ds, std::vector<std::size_t>>("distsim", "parity_replicas", &E::distsim, &Ds::parity_replicas));
    t.push_back(field<Ds, std::size_t>("distsim", "parity_steps", &E::distsim, &Ds::parity_steps));
    t.push_back(field<Ds, SeedOpt>("distsim", "seed", &E::distsim, &Ds::seed));

    using Th = ThroughputConfig;
    t.push_back(field<Th, std::size_t>("throughput", "max_batch", &E::throughput, &Th::max_batch, at_least<std::size_t>(1)));
    t.push_back(field<Th, std::size_t>("throughput", "repeats", &E::throughput, &Th::repeats, at_least<std::size_t>(1)));
    t.push_back(field<Th, std::size_t>("throughput", "warmup", &E::throughput, &Th::warmup));
    return t;
  }();
  return table;
}

/// Top-level shorthands accepted outside any section.
inline std::string alias(std::string_view key) {
  if (key == "model") return "model.arch";
  if (key == "augment") return "augment.transform";
  if (key == "mode") return "train.mode";
  if (key == "M") return "train.replicas";
  if (key == "B") return "train.batch_size";
  return {};
}

}  // namespace cfg

/// Sets one dotted key ("train.replicas", or "seed"). Throws ConfigError.
inline void set_key(ExperimentConfig& c, std::string_view dotted, std::string_view value, const std::string& where = {}) {
  std::string key(dotted);
  if (auto a = cfg::alias(key); !a.empty()) key = a;
  const auto dot = key.find('.');
  const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
  const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
  const std::string prefix = where.empty() ? "" : where + ": ";
  for (const auto& f : cfg::fields())
    if (f.section == section && f.key == name) {
      const std::string err = f.set(c, cfg::trim(value));
      if (!err.empty()) throw ConfigError(prefix + key + " " + err);
      return;
    }
  throw ConfigError(prefix + "unknown key '" + key + "'");
}

/// Parses `[section]` headers and `key = value` lines; '#' and ';' start comments.
inline ExperimentConfig parse_config(std::string_view text, const std::string& name = "config") {
  ExperimentConfig c;
  std::istringstream in{std::string(text)};
  std::string line, section;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string where = name + ":" + std::to_string(lineno);
    const auto hash = line.find_first_of("#;");
    std::string s = cfg::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where + ": malformed section header");
      section = cfg::trim(std::string_view(s).substr(1, s.size() - 2));
      bool known = false;
      for (const auto& f : cfg::fields()) known = known || (!f.section.empty() && f.section == section);
      if (!known) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = cfg::trim(std::string_view(s).substr(0, eq));
    const std::string value = cfg::trim(std::string_view(s).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    set_key(c, section.empty() ? key : section + "." + key, value, where);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

/// Canonical form: every field, fixed order; parse_config(dump(c)) == c.
inline std::string dump_config(const ExperimentConfig& c) {
  std::ostringstream os;
  std::string section = "\x01";
  for (const auto& f : cfg::fields()) {
    if (f.section != section) {
      if (!f.section.empty()) os << (os.tellp() > 0 ? "\n" : "") << "[" << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.get(c) << "\n";
  }
  return os.str();
}

/// Cross-field checks that cannot be tied to one line.
inline void validate(const ExperimentConfig& c) {
  const auto& t = c.train;
  if (t.ghost_size != 0 && (t.batch_size * t.replicas) % t.ghost_size != 0)
    throw ConfigError("train.ghost_size " + std::to_string(t.ghost_size) + " does not divide batch_size*replicas = " +
                      std::to_string(t.batch_size * t.replicas));
  for (std::size_t i = 1; i < t.milestones.size(); ++i)
    if (!(t.milestones[i] > t.milestones[i - 1])) throw ConfigError("train.milestones must be strictly increasing");
  if (c.dataset.source == "idx" && (c.dataset.train_images.empty() || c.dataset.train_labels.empty()))
    throw ConfigError("dataset.source = idx needs train_images and train_labels");
  if (c.dynamics.samples % c.dynamics.batch != 0) throw ConfigError("dynamics.batch must divide dynamics.samples");
  if (c.distsim.workers % c.distsim.replicas != 0)
    throw ConfigError("distsim.replicas " + std::to_string(c.distsim.replicas) + " does not divide workers " +
                      std::to_string(c.distsim.workers));
}

/// TrainConfig with resolved seeds.
inline TrainConfig train_config(const ExperimentConfig& c) {
  TrainConfig t;
  t.base_lr = c.train.base_lr;
  t.momentum = c.train.momentum;
  t.weight_decay = c.train.weight_decay;
  t.batch_size = c.train.batch_size;
  t.replicas = c.train.replicas;
  t.epochs = c.train.epochs;
  if (c.train.warmup_epochs > 0)
    t.schedule = WarmupThenStep{c.train.warmup_epochs, c.train.milestones, c.train.decay_factor};
  else
    t.schedule = StepDecay{c.train.milestones, c.train.decay_factor};
  t.ghost_size = c.train.ghost_size;
  t.transform = parse_transform(c.augment.transform);
  t.sampler_seed = c.resolve(c.train.sampler_seed, "sampler");
  t.aug_seed = c.resolve(c.train.aug_seed, "augment");
  t.init_seed = c.resolve(c.train.init_seed, "init");
  t.with_replacement = c.train.with_replacement;
  t.freeze_bn = c.train.freeze_bn;
  t.divergence_factor = c.train.divergence_factor;
  t.per_step_rows = c.train.per_step_rows;
  return t;
}

}  // namespace batchaug
