#pragma once

// Sequential networks with explicit forward/backward passes.
//
// Trainable values live in one flat vector (the flat view) whose layout is
// fixed by the ModelSpec: per layer, in order, weight then bias (Linear,
// Conv2d) or gamma then beta (GhostBatchNorm). Batch-norm running statistics
// are buffers, kept beside the flat view and never differentiated.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "batchaug/dataio.hpp"
#include "batchaug/errors.hpp"
#include "batchaug/parallel.hpp"
#include "batchaug/rng.hpp"
#include "batchaug/tensor.hpp"

namespace batchaug {

struct Linear {
  std::size_t in = 0, out = 0;
};
struct Conv2d {
  std::size_t in = 0, out = 0, k = 3;  // stride 1, "same" zero padding, odd k
};
struct AvgPool2d {
  std::size_t k = 2;
};
struct ReLU {};
struct GhostBatchNorm {
  std::size_t features = 0;
  std::size_t ghost_size = 0;  // 0: the whole batch is one group
  double momentum = 0.1;
  double eps = 1e-5;
};
struct Dropout {
  double p = 0.5;
};
struct Flatten {};

using LayerSpec = std::variant<Linear, Conv2d, AvgPool2d, ReLU, GhostBatchNorm, Dropout, Flatten>;

struct ModelSpec {
  Shape input;  // C x H x W (or a single feature extent)
  std::size_t classes = 0;
  std::vector<LayerSpec> layers;
};

enum class Mode {
  train,            // batch statistics in ghost groups, dropout active
  eval,             // running statistics, dropout off
  train_frozen_bn,  // running statistics, dropout active: samples decouple
};

// ---------------------------------------------------------------------------
// Shapes and parameter layout

/// Per-sample shapes: element i is the input shape of layer i; the last is the logits shape.
inline std::vector<Shape> infer_shapes(const ModelSpec& spec) {
  std::vector<Shape> shapes{spec.input};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Shape& s = shapes.back();
    const std::string where = "layer " + std::to_string(i) + ": ";
    Shape next = std::visit(
        [&](const auto& l) -> Shape {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Linear>) {
            if (s.size() != 1 || s[0] != l.in)
              throw ConfigError(where + "linear expects flat input of " + std::to_string(l.in) + ", got " + shape_str(s));
            return {l.out};
          } else if constexpr (std::is_same_v<L, Conv2d>) {
            if (s.size() != 3 || s[0] != l.in)
              throw ConfigError(where + "conv2d expects " + std::to_string(l.in) + " channels, got " + shape_str(s));
            if (l.k % 2 == 0) throw ConfigError(where + "conv2d kernel must be odd");
            return {l.out, s[1], s[2]};
          } else if constexpr (std::is_same_v<L, AvgPool2d>) {
            if (s.size() != 3 || l.k == 0 || s[1] % l.k || s[2] % l.k)
              throw ConfigError(where + "avgpool window must divide the spatial extent " + shape_str(s));
            return {s[0], s[1] / l.k, s[2] / l.k};
          } else if constexpr (std::is_same_v<L, GhostBatchNorm>) {
            if (s.empty() || s[0] != l.features)
              throw ConfigError(where + "batchnorm expects " + std::to_string(l.features) + " features, got " + shape_str(s));
            return s;
          } else if constexpr (std::is_same_v<L, Dropout>) {
            if (l.p < 0.0 || l.p >= 1.0) throw ConfigError(where + "dropout p must be in [0, 1)");
            return s;
          } else if constexpr (std::is_same_v<L, Flatten>) {
            return {shape_size(s)};
          } else {
            return s;
          }
        },
        spec.layers[i]);
    shapes.push_back(std::move(next));
  }
  if (shapes.back() != Shape{spec.classes})
    throw ConfigError("model output " + shape_str(shapes.back()) + " does not match class count " +
                      std::to_string(spec.classes));
  return shapes;
}

struct ParamSegment {
  std::size_t layer = 0;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool decay = true;  // false for batch-norm parameters
  std::string name;
};

struct ParamLayout {
  std::vector<ParamSegment> segments;
  std::vector<std::size_t> layer_offset;  // first flat index of each layer (== d for parameterless ones)
  std::vector<std::size_t> bn_index;      // ordinal among GhostBatchNorm layers, or npos
  std::size_t bn_layers = 0;
  std::size_t dim = 0;
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

inline ParamLayout param_layout(const ModelSpec& spec) {
  ParamLayout lay;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    lay.layer_offset.push_back(lay.dim);
    lay.bn_index.push_back(ParamLayout::npos);
    auto add = [&](std::size_t n, bool decay, std::string name) {
      lay.segments.push_back({i, lay.dim, n, decay, std::move(name)});
      lay.dim += n;
    };
    const std::string tag = std::to_string(i);
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Linear>) {
            add(l.out * l.in, true, tag + ".linear.weight");
            add(l.out, true, tag + ".linear.bias");
          } else if constexpr (std::is_same_v<L, Conv2d>) {
            add(l.out * l.in * l.k * l.k, true, tag + ".conv.weight");
            add(l.out, true, tag + ".conv.bias");
          } else if constexpr (std::is_same_v<L, GhostBatchNorm>) {
            lay.bn_index.back() = lay.bn_layers++;
            add(l.features, false, tag + ".gbn.gamma");
            add(l.features, false, tag + ".gbn.beta");
          }
        },
        spec.layers[i]);
  }
  return lay;
}

template <typename T>
struct BnRunning {
  std::vector<T> mean;
  std::vector<T> var;
  friend bool operator==(const BnRunning&, const BnRunning&) = default;
};

template <typename T>
struct ModelParams {
  std::vector<T> values;  // the flat view, dimension d
  std::vector<BnRunning<T>> running;

  [[nodiscard]] std::size_t dim() const noexcept { return values.size(); }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

template <typename T>
ModelParams<T> init_params(const ModelSpec& spec, RngStream stream) {
  infer_shapes(spec);
  const ParamLayout lay = param_layout(spec);
  ModelParams<T> p;
  p.values.assign(lay.dim, T{0});
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    RngStream s = stream.split("init", i);
    const std::size_t off = lay.layer_offset[i];
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Linear> || std::is_same_v<L, Conv2d>) {
            std::size_t fan_in = l.in, count = l.in * l.out;
            if constexpr (std::is_same_v<L, Conv2d>) {
              fan_in *= l.k * l.k;
              count *= l.k * l.k;
            }
            const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (std::size_t e = 0; e < count; ++e) p.values[off + e] = static_cast<T>(sd * s.normal());
          } else if constexpr (std::is_same_v<L, GhostBatchNorm>) {
            for (std::size_t e = 0; e < l.features; ++e) p.values[off + e] = T{1};
            p.running.push_back({std::vector<T>(l.features, T{0}), std::vector<T>(l.features, T{1})});
          }
        },
        spec.layers[i]);
  }
  return p;
}

template <typename U, typename T>
ModelParams<U> cast_params(const ModelParams<T>& p) {
  ModelParams<U> out;
  out.values.assign(p.values.begin(), p.values.end());
  for (const auto& r : p.running)
    out.running.push_back({std::vector<U>(r.mean.begin(), r.mean.end()), std::vector<U>(r.var.begin(), r.var.end())});
  return out;
}

/// FNV-1a over the bytes of the flat view and running statistics.
template <typename T>
std::uint64_t params_checksum(const ModelParams<T>& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&](const std::vector<T>& v) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
    for (std::size_t i = 0; i < v.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  eat(p.values);
  for (const auto& r : p.running) {
    eat(r.mean);
    eat(r.var);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
struct GroupStats {
  std::vector<T> mean;
  std::vector<T> var;  // unbiased
};

template <typename T>
struct LayerCache {
  Tensor<T> input;             // Linear, ReLU (pre-activation)
  std::vector<T> cols;         // Conv2d: im2col per sample, concatenated
  std::vector<T> xhat;         // GhostBatchNorm
  std::vector<T> inv_std;      // GhostBatchNorm: per (group, feature) in train, per feature otherwise
  std::vector<T> mask;         // Dropout: scaled keep mask
  bool batch_stats = false;    // GhostBatchNorm normalized with batch statistics
  std::size_t group = 0;       // GhostBatchNorm group size used
};

template <typename T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  std::vector<Shape> shapes;
  std::size_t batch = 0;
  Mode mode = Mode::eval;
  std::uint64_t params_tag = 0;
  /// Per GhostBatchNorm layer (by ordinal), the statistics of each ghost group in batch order.
  std::vector<std::vector<GroupStats<T>>> bn_stats;

  /// Number of stored activation values; instrumentation for memory bounds.
  [[nodiscard]] std::size_t activation_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.input.size() + l.cols.size() + l.xhat.size() + l.mask.size();
    return n;
  }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // batch x K
  ForwardCache<T> cache;
};

namespace detail {

template <typename T>
void im2col(std::span<const T> img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* cols) {
  const long pad = static_cast<long>(k / 2);
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y + ky) - pad;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x + kx) - pad;
            row[y * W + x] = (sy >= 0 && sx >= 0 && sy < static_cast<long>(H) && sx < static_cast<long>(W))
                                 ? img[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)]
                                 : T{0};
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::span<T> img) {
  const long pad = static_cast<long>(k / 2);
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y + ky) - pad;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x + kx) - pad;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            img[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)] += row[y * W + x];
          }
        }
      }
}

template <typename T>
std::uint64_t tag_of(const ModelParams<T>& p) {
  return params_checksum(p) ^ (static_cast<std::uint64_t>(p.values.size()) * 0x9e3779b97f4a7c15ULL);
}

}  // namespace detail

/// Runs the network on `input` (N x input shape). The stream only feeds
/// dropout masks, each row drawing from its own child stream; it is never advanced.
template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, const ModelSpec& spec, const Tensor<T>& input, Mode mode,
                         const RngStream& stream) {
  const std::vector<Shape> shapes = infer_shapes(spec);
  const ParamLayout lay = param_layout(spec);
  detail::require(params.values.size() == lay.dim, "forward: parameter dimension differs from spec");
  detail::require(input.rank() >= 1 && input.size() == input.extent(0) * shape_size(spec.input),
                  "forward: input shape " + shape_str(input.shape()) + " does not match model input " + shape_str(spec.input));
  const std::size_t N = input.extent(0);
  detail::require(N > 0, "forward: empty batch");

  ForwardResult<T> res;
  ForwardCache<T>& cache = res.cache;
  cache.layers.resize(spec.layers.size());
  cache.shapes = shapes;
  cache.batch = N;
  cache.mode = mode;
  cache.params_tag = detail::tag_of(params);
  cache.bn_stats.resize(lay.bn_layers);

  Shape first{N};
  first.insert(first.end(), spec.input.begin(), spec.input.end());
  Tensor<T> x(first, input.values());
  const T* P = params.values.data();

  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    LayerCache<T>& lc = cache.layers[li];
    const Shape& in_s = shapes[li];
    const Shape& out_s = shapes[li + 1];
    Shape out_full{N};
    out_full.insert(out_full.end(), out_s.begin(), out_s.end());
    const std::size_t off = lay.layer_offset[li];

    x = std::visit(
        [&](const auto& l) -> Tensor<T> {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Linear>) {
            Tensor<T> y(out_full);
            const T* Wt = P + off;
            const T* b = Wt + l.out * l.in;
            kernel::gemm_nt(N, l.out, l.in, x.data().data(), Wt, y.data().data(), false);
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t o = 0; o < l.out; ++o) y[n * l.out + o] += b[o];
            lc.input = std::move(x);
            return y;
          } else if constexpr (std::is_same_v<L, Conv2d>) {
            const std::size_t H = in_s[1], Wd = in_s[2], HW = H * Wd, ck = l.in * l.k * l.k;
            Tensor<T> y(out_full);
            lc.cols.assign(N * ck * HW, T{0});
            const T* Wt = P + off;
            const T* b = Wt + l.out * ck;
            parallel_for(N, [&](std::size_t n) {
              T* cols = lc.cols.data() + n * ck * HW;
              detail::im2col<T>(x.item(n), l.in, H, Wd, l.k, cols);
              T* yn = y.item(n).data();
              kernel::gemm_nn(l.out, HW, ck, Wt, cols, yn, false);
              for (std::size_t o = 0; o < l.out; ++o)
                for (std::size_t p = 0; p < HW; ++p) yn[o * HW + p] += b[o];
            });
            return y;
          } else if constexpr (std::is_same_v<L, AvgPool2d>) {
            const std::size_t C = in_s[0], H = in_s[1], Wd = in_s[2], Ho = H / l.k, Wo = Wd / l.k;
            Tensor<T> y(out_full);
            const T scale = T{1} / static_cast<T>(l.k * l.k);
            for (std::size_t n = 0; n < N; ++n) {
              auto xi = x.item(n);
              auto yi = y.item(n);
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t oy = 0; oy < Ho; ++oy)
                  for (std::size_t ox = 0; ox < Wo; ++ox) {
                    T acc{0};
                    for (std::size_t ky = 0; ky < l.k; ++ky)
                      for (std::size_t kx = 0; kx < l.k; ++kx) acc += xi[(c * H + oy * l.k + ky) * Wd + ox * l.k + kx];
                    yi[(c * Ho + oy) * Wo + ox] = acc * scale;
                  }
            }
            return y;
          } else if constexpr (std::is_same_v<L, ReLU>) {
            Tensor<T> y = x;
            for (auto& v : y.data()) v = v > T{0} ? v : T{0};
            lc.input = std::move(x);
            return y;
          } else if constexpr (std::is_same_v<L, GhostBatchNorm>) {
            const std::size_t F = l.features;
            const std::size_t S = shape_size(in_s) / F;  // spatial positions per feature
            const T* gamma = P + off;
            const T* beta = gamma + F;
            const std::size_t bn = lay.bn_index[li];
            Tensor<T> y(out_full);
            lc.xhat.assign(x.size(), T{0});
            const bool use_batch = mode == Mode::train;
            lc.batch_stats = use_batch;
            if (use_batch) {
              const std::size_t G = l.ghost_size == 0 ? N : l.ghost_size;
              if (N % G != 0)
                throw ConfigError("ghost batch size " + std::to_string(G) + " does not divide batch " + std::to_string(N));
              lc.group = G;
              const std::size_t groups = N / G;
              const T m = static_cast<T>(G * S);
              lc.inv_std.assign(groups * F, T{0});
              for (std::size_t g = 0; g < groups; ++g) {
                GroupStats<T> st{std::vector<T>(F), std::vector<T>(F)};
                for (std::size_t f = 0; f < F; ++f) {
                  T sum{0};
                  for (std::size_t n = g * G; n < (g + 1) * G; ++n)
                    for (std::size_t s = 0; s < S; ++s) sum += x[(n * F + f) * S + s];
                  const T mean = sum / m;
                  T sq{0};
                  for (std::size_t n = g * G; n < (g + 1) * G; ++n)
                    for (std::size_t s = 0; s < S; ++s) {
                      const T d = x[(n * F + f) * S + s] - mean;
                      sq += d * d;
                    }
                  const T var = sq / m;
                  const T inv = T{1} / std::sqrt(var + static_cast<T>(l.eps));
                  lc.inv_std[g * F + f] = inv;
                  for (std::size_t n = g * G; n < (g + 1) * G; ++n)
                    for (std::size_t s = 0; s < S; ++s) {
                      const std::size_t e = (n * F + f) * S + s;
                      const T xh = (x[e] - mean) * inv;
                      lc.xhat[e] = xh;
                      y[e] = gamma[f] * xh + beta[f];
                    }
                  st.mean[f] = mean;
                  st.var[f] = m > T{1} ? sq / (m - T{1}) : var;
                }
                cache.bn_stats[bn].push_back(std::move(st));
              }
            } else {
              const BnRunning<T>& run = params.running.at(bn);
              lc.group = N;
              lc.inv_std.assign(F, T{0});
              for (std::size_t f = 0; f < F; ++f) lc.inv_std[f] = T{1} / std::sqrt(run.var[f] + static_cast<T>(l.eps));
              for (std::size_t n = 0; n < N; ++n)
                for (std::size_t f = 0; f < F; ++f)
                  for (std::size_t s = 0; s < S; ++s) {
                    const std::size_t e = (n * F + f) * S + s;
                    const T xh = (x[e] - run.mean[f]) * lc.inv_std[f];
                    lc.xhat[e] = xh;
                    y[e] = gamma[f] * xh + beta[f];
                  }
            }
            return y;
          } else if constexpr (std::is_same_v<L, Dropout>) {
            if (mode == Mode::eval || l.p == 0.0) return std::move(x);
            const std::size_t per = shape_size(in_s);
            lc.mask.assign(x.size(), T{0});
            const T keep_scale = static_cast<T>(1.0 / (1.0 - l.p));
            const RngStream layer_stream = stream.split("dropout", li);
            for (std::size_t n = 0; n < N; ++n) {
              RngStream rs = layer_stream.split(n);
              for (std::size_t e = 0; e < per; ++e) lc.mask[n * per + e] = rs.bernoulli(1.0 - l.p) ? keep_scale : T{0};
            }
            for (std::size_t e = 0; e < x.size(); ++e) x[e] *= lc.mask[e];
            return std::move(x);
          } else {
            x.reshape(out_full);
            return std::move(x);
          }
        },
        spec.layers[li]);
  }
  x.reshape({N, spec.classes});
  res.logits = std::move(x);
  return res;
}

/// Reverse pass. Returns d(loss)/d(flat view) given d(loss)/d(logits).
template <typename T>
std::vector<T> backward(const ModelParams<T>& params, const ModelSpec& spec, const ForwardCache<T>& cache,
                        const Tensor<T>& dlogits) {
  detail::require(cache.layers.size() == spec.layers.size(), "backward: cache was produced by another model");
  detail::require(cache.params_tag == detail::tag_of(params), "backward: stale cache, parameters changed since forward");
  const std::size_t N = cache.batch;
  detail::require(dlogits.size() == N * spec.classes, "backward: dlogits shape mismatch");
  const ParamLayout lay = param_layout(spec);
  const auto& shapes = cache.shapes;
  std::vector<T> grad(lay.dim, T{0});
  const T* P = params.values.data();

  Tensor<T> dy(Shape{N, spec.classes}, dlogits.values());
  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const LayerCache<T>& lc = cache.layers[li];
    const Shape& in_s = shapes[li];
    Shape in_full{N};
    in_full.insert(in_full.end(), in_s.begin(), in_s.end());
    const std::size_t off = lay.layer_offset[li];
    T* G = grad.data() + off;

    dy = std::visit(
        [&](const auto& l) -> Tensor<T> {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Linear>) {
            const T* Wt = P + off;
            kernel::gemm_tn(l.out, l.in, N, dy.data().data(), lc.input.data().data(), G, false);
            T* gb = G + l.out * l.in;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t o = 0; o < l.out; ++o) gb[o] += dy[n * l.out + o];
            Tensor<T> dx(in_full);
            kernel::gemm_nn(N, l.in, l.out, dy.data().data(), Wt, dx.data().data(), false);
            return dx;
          } else if constexpr (std::is_same_v<L, Conv2d>) {
            const std::size_t H = in_s[1], Wd = in_s[2], HW = H * Wd, ck = l.in * l.k * l.k;
            const T* Wt = P + off;
            Tensor<T> dx(in_full);
            std::vector<T> per_sample(N * l.out * ck);
            std::vector<T> per_bias(N * l.out, T{0});
            parallel_for(N, [&](std::size_t n) {
              const T* dyn = dy.item(n).data();
              const T* cols = lc.cols.data() + n * ck * HW;
              kernel::gemm_nt(l.out, ck, HW, dyn, cols, per_sample.data() + n * l.out * ck, false);
              for (std::size_t o = 0; o < l.out; ++o) {
                T acc{0};
                for (std::size_t p = 0; p < HW; ++p) acc += dyn[o * HW + p];
                per_bias[n * l.out + o] = acc;
              }
              std::vector<T> dcols(ck * HW);
              kernel::gemm_tn(ck, HW, l.out, Wt, dyn, dcols.data(), false);
              detail::col2im_add<T>(dcols.data(), l.in, H, Wd, l.k, dx.item(n));
            });
            for (std::size_t n = 0; n < N; ++n) {
              for (std::size_t e = 0; e < l.out * ck; ++e) G[e] += per_sample[n * l.out * ck + e];
              for (std::size_t o = 0; o < l.out; ++o) G[l.out * ck + o] += per_bias[n * l.out + o];
            }
            return dx;
          } else if constexpr (std::is_same_v<L, AvgPool2d>) {
            const std::size_t C = in_s[0], H = in_s[1], Wd = in_s[2], Ho = H / l.k, Wo = Wd / l.k;
            Tensor<T> dx(in_full);
            const T scale = T{1} / static_cast<T>(l.k * l.k);
            for (std::size_t n = 0; n < N; ++n) {
              auto di = dx.item(n);
              auto go = dy.item(n);
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < H; ++y)
                  for (std::size_t x = 0; x < Wd; ++x) di[(c * H + y) * Wd + x] = go[(c * Ho + y / l.k) * Wo + x / l.k] * scale;
            }
            return dx;
          } else if constexpr (std::is_same_v<L, ReLU>) {
            Tensor<T> dx(in_full);
            for (std::size_t e = 0; e < dx.size(); ++e) dx[e] = lc.input[e] > T{0} ? dy[e] : T{0};
            return dx;
          } else if constexpr (std::is_same_v<L, GhostBatchNorm>) {
            const std::size_t F = l.features;
            const std::size_t S = shape_size(in_s) / F;
            const T* gamma = P + off;
            T* ggamma = G;
            T* gbeta = G + F;
            Tensor<T> dx(in_full);
            if (lc.batch_stats) {
              const std::size_t Gs = lc.group, groups = N / Gs;
              const T m = static_cast<T>(Gs * S);
              for (std::size_t g = 0; g < groups; ++g)
                for (std::size_t f = 0; f < F; ++f) {
                  T sum_dy{0}, sum_dy_xhat{0};
                  for (std::size_t n = g * Gs; n < (g + 1) * Gs; ++n)
                    for (std::size_t s = 0; s < S; ++s) {
                      const std::size_t e = (n * F + f) * S + s;
                      sum_dy += dy[e];
                      sum_dy_xhat += dy[e] * lc.xhat[e];
                    }
                  ggamma[f] += sum_dy_xhat;
                  gbeta[f] += sum_dy;
                  const T k = gamma[f] * lc.inv_std[g * F + f] / m;
                  for (std::size_t n = g * Gs; n < (g + 1) * Gs; ++n)
                    for (std::size_t s = 0; s < S; ++s) {
                      const std::size_t e = (n * F + f) * S + s;
                      dx[e] = k * (m * dy[e] - sum_dy - lc.xhat[e] * sum_dy_xhat);
                    }
                }
            } else {
              for (std::size_t f = 0; f < F; ++f) {
                T sum_dy{0}, sum_dy_xhat{0};
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t s = 0; s < S; ++s) {
                    const std::size_t e = (n * F + f) * S + s;
                    sum_dy += dy[e];
                    sum_dy_xhat += dy[e] * lc.xhat[e];
                    dx[e] = dy[e] * gamma[f] * lc.inv_std[f];
                  }
                ggamma[f] += sum_dy_xhat;
                gbeta[f] += sum_dy;
              }
            }
            return dx;
          } else if constexpr (std::is_same_v<L, Dropout>) {
            if (lc.mask.empty()) return std::move(dy);
            for (std::size_t e = 0; e < dy.size(); ++e) dy[e] *= lc.mask[e];
            dy.reshape(in_full);
            return std::move(dy);
          } else {
            dy.reshape(in_full);
            return std::move(dy);
          }
        },
        spec.layers[li]);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
struct LossResult {
  double loss = 0.0;       // mean negative log-likelihood
  std::size_t errors = 0;  // top-1 mistakes
  Tensor<T> dlogits;       // gradient of the mean loss
};

template <typename T>
LossResult<T> loss_softmax_xent(const Tensor<T>& logits, std::span<const Label> labels) {
  detail::require(logits.rank() == 2 && logits.extent(0) == labels.size(), "loss: logits/labels batch mismatch");
  const std::size_t N = logits.extent(0), K = logits.extent(1);
  LossResult<T> r;
  r.dlogits = Tensor<T>({N, K});
  T total{0};
  for (std::size_t n = 0; n < N; ++n) {
    detail::require(labels[n] < K, "loss: label out of range");
    const T* z = &logits[n * K];
    std::size_t arg = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (z[k] > z[arg]) arg = k;
    const T zmax = z[arg];
    T sum{0};
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - zmax);
    const T log_sum = std::log(sum);
    total += log_sum - (z[labels[n]] - zmax);
    if (arg != labels[n]) ++r.errors;
    for (std::size_t k = 0; k < K; ++k) {
      const T prob = std::exp(z[k] - zmax - log_sum);
      r.dlogits[n * K + k] = (prob - (k == labels[n] ? T{1} : T{0})) / static_cast<T>(N);
    }
  }
  r.loss = static_cast<double>(total) / static_cast<double>(N);
  return r;
}

// ---------------------------------------------------------------------------
// Composite helpers

template <typename T>
struct GradResult {
  double loss = 0.0;
  std::size_t errors = 0;
  std::vector<T> grad;
  std::vector<std::vector<GroupStats<T>>> bn_stats;
  std::size_t activations = 0;
};

template <typename T>
GradResult<T> loss_and_grad(const ModelParams<T>& params, const ModelSpec& spec, const Tensor<T>& images,
                            std::span<const Label> labels, Mode mode, const RngStream& stream) {
  auto fwd = forward(params, spec, images, mode, stream);
  auto lr = loss_softmax_xent(fwd.logits, labels);
  GradResult<T> out;
  out.loss = lr.loss;
  out.errors = lr.errors;
  out.grad = backward(params, spec, fwd.cache, lr.dlogits);
  out.activations = fwd.cache.activation_count();
  out.bn_stats = std::move(fwd.cache.bn_stats);
  return out;
}

/// Folds ghost-group statistics into the running estimates: the mean of the
/// per-group statistics (in the given order) enters an exponential average.
template <typename T>
void commit_running_stats(ModelParams<T>& params, const ModelSpec& spec,
                          const std::vector<std::vector<GroupStats<T>>>& stats) {
  const ParamLayout lay = param_layout(spec);
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const std::size_t bn = lay.bn_index[li];
    if (bn == ParamLayout::npos || bn >= stats.size() || stats[bn].empty()) continue;
    const auto& l = std::get<GhostBatchNorm>(spec.layers[li]);
    const auto& groups = stats[bn];
    BnRunning<T>& run = params.running[bn];
    const T mom = static_cast<T>(l.momentum);
    for (std::size_t f = 0; f < l.features; ++f) {
      T m{0}, v{0};
      for (const auto& g : groups) {
        m += g.mean[f];
        v += g.var[f];
      }
      m /= static_cast<T>(groups.size());
      v /= static_cast<T>(groups.size());
      run.mean[f] = (T{1} - mom) * run.mean[f] + mom * m;
      run.var[f] = (T{1} - mom) * run.var[f] + mom * v;
    }
  }
}

/// Appends group statistics of `more` behind those already in `into`.
template <typename T>
void append_stats(std::vector<std::vector<GroupStats<T>>>& into, std::vector<std::vector<GroupStats<T>>>&& more) {
  if (into.size() < more.size()) into.resize(more.size());
  for (std::size_t i = 0; i < more.size(); ++i)
    for (auto& g : more[i]) into[i].push_back(std::move(g));
}

/// One gradient per sample, each from a single-sample pass with batch norm on
/// running statistics and dropout disabled, so samples do not interact.
template <typename T>
std::vector<std::vector<T>> per_sample_grads(const ModelParams<T>& params, const ModelSpec& spec,
                                             const Tensor<T>& images, std::span<const Label> labels) {
  const std::size_t N = images.extent(0);
  detail::require(labels.size() == N, "per_sample_grads: labels/images mismatch");
  std::vector<std::vector<T>> out(N);
  parallel_for(N, [&](std::size_t n) {
    Tensor<T> one = images.slice(n, 1);
    auto r = loss_and_grad(params, spec, one, labels.subspan(n, 1), Mode::eval, RngStream{});
    out[n] = std::move(r.grad);
  });
  return out;
}

/// Forward of M copies of the batch (replica-major), each row with its own
/// dropout mask. In eval mode this is a single plain forward.
template <typename T>
ForwardResult<T> dropout_replicas(const ModelParams<T>& params, const ModelSpec& spec, const Tensor<T>& batch,
                                  std::size_t replicas, const RngStream& stream, Mode mode = Mode::train) {
  detail::require(replicas >= 1, "dropout_replicas: M must be >= 1");
  const bool has_dropout =
      std::any_of(spec.layers.begin(), spec.layers.end(), [](const auto& l) { return std::holds_alternative<Dropout>(l); });
  detail::require(has_dropout, "dropout_replicas: model has no dropout layer");
  if (mode == Mode::eval) return forward(params, spec, batch, mode, stream);
  Shape s = batch.shape();
  s[0] *= replicas;
  std::vector<T> tiled;
  tiled.reserve(batch.size() * replicas);
  for (std::size_t j = 0; j < replicas; ++j) tiled.insert(tiled.end(), batch.values().begin(), batch.values().end());
  return forward(params, spec, Tensor<T>(s, std::move(tiled)), mode, stream);
}

template <typename T>
struct EvalResult {
  double loss = 0.0;
  double error = 0.0;  // top-1 error fraction
};

template <typename T>
EvalResult<T> evaluate(const ModelParams<T>& params, const ModelSpec& spec, const LabeledDataset& ds,
                       std::size_t chunk = 256) {
  EvalResult<T> r;
  if (ds.size() == 0) return r;
  double loss_sum = 0.0;
  std::size_t errors = 0;
  for (std::size_t first = 0; first < ds.size(); first += chunk) {
    const std::size_t count = std::min(chunk, ds.size() - first);
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
    Batch<T> b = gather<T>(ds, std::move(idx));
    auto fwd = forward(params, spec, b.images, Mode::eval, RngStream{});
    auto l = loss_softmax_xent(fwd.logits, b.labels);
    loss_sum += l.loss * static_cast<double>(count);
    errors += l.errors;
  }
  r.loss = loss_sum / static_cast<double>(ds.size());
  r.error = static_cast<double>(errors) / static_cast<double>(ds.size());
  return r;
}

// ---------------------------------------------------------------------------
// Textual model description

struct ModelOptions {
  bool batchnorm = true;
  std::size_t ghost_size = 0;
  double dropout = 0.0;
};

/// "mlp:256[,128...]" or "cnn:16,32". Each CNN block is conv3x3 [+GBN] + ReLU + 2x2 average pool;
/// each MLP hidden layer is linear [+GBN] + ReLU [+dropout].
inline ModelSpec parse_model(std::string_view text, const Shape& input, std::size_t classes, const ModelOptions& opt = {}) {
  const std::string t(text);
  const auto colon = t.find(':');
  const std::string kind = t.substr(0, colon);
  std::vector<std::size_t> widths;
  if (colon != std::string::npos) {
    std::istringstream in(t.substr(colon + 1));
    std::string item;
    while (std::getline(in, item, ',')) {
      try {
        const long v = std::stol(item);
        if (v <= 0) throw ConfigError("model widths must be positive");
        widths.push_back(static_cast<std::size_t>(v));
      } catch (const std::logic_error&) {
        throw ConfigError("bad model width '" + item + "' in '" + t + "'");
      }
    }
  }
  ModelSpec spec;
  spec.input = input;
  spec.classes = classes;
  if (kind == "mlp" || kind == "linear") {
    if (kind == "linear") widths.clear();
    spec.layers.emplace_back(Flatten{});
    std::size_t prev = shape_size(input);
    for (std::size_t w : widths) {
      spec.layers.emplace_back(Linear{prev, w});
      if (opt.batchnorm) spec.layers.emplace_back(GhostBatchNorm{w, opt.ghost_size});
      spec.layers.emplace_back(ReLU{});
      if (opt.dropout > 0.0) spec.layers.emplace_back(Dropout{opt.dropout});
      prev = w;
    }
    spec.layers.emplace_back(Linear{prev, classes});
  } else if (kind == "cnn") {
    if (input.size() != 3) throw ConfigError("cnn requires C x H x W input");
    if (widths.empty()) throw ConfigError("cnn requires at least one channel width");
    std::size_t c = input[0], h = input[1], w = input[2];
    for (std::size_t out : widths) {
      spec.layers.emplace_back(Conv2d{c, out, 3});
      if (opt.batchnorm) spec.layers.emplace_back(GhostBatchNorm{out, opt.ghost_size});
      spec.layers.emplace_back(ReLU{});
      if (h % 2 == 0 && w % 2 == 0) {
        spec.layers.emplace_back(AvgPool2d{2});
        h /= 2;
        w /= 2;
      }
      c = out;
    }
    spec.layers.emplace_back(Flatten{});
    if (opt.dropout > 0.0) spec.layers.emplace_back(Dropout{opt.dropout});
    spec.layers.emplace_back(Linear{c * h * w, classes});
  } else {
    throw ConfigError("unknown model kind '" + kind + "' (expected mlp:..., cnn:... or linear)");
  }
  infer_shapes(spec);
  return spec;
}

inline ModelSpec with_ghost_size(ModelSpec spec, std::size_t ghost_size) {
  for (auto& l : spec.layers)
    if (auto* bn = std::get_if<GhostBatchNorm>(&l)) bn->ghost_size = ghost_size;
  return spec;
}

inline bool has_batchnorm(const ModelSpec& spec) {
  return std::any_of(spec.layers.begin(), spec.layers.end(),
                     [](const auto& l) { return std::holds_alternative<GhostBatchNorm>(l); });
}

/// Canonical layer list, e.g. "input=1x16x16;classes=10;conv(1,8,3);gbn(8,32);relu;...".
inline std::string describe(const ModelSpec& spec) {
  std::ostringstream os;
  os << "input=";
  for (std::size_t i = 0; i < spec.input.size(); ++i) os << (i ? "x" : "") << spec.input[i];
  os << ";classes=" << spec.classes;
  os.precision(17);
  for (const auto& layer : spec.layers) {
    os << ';';
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Linear>) os << "linear(" << l.in << ',' << l.out << ')';
          else if constexpr (std::is_same_v<L, Conv2d>) os << "conv(" << l.in << ',' << l.out << ',' << l.k << ')';
          else if constexpr (std::is_same_v<L, AvgPool2d>) os << "avgpool(" << l.k << ')';
          else if constexpr (std::is_same_v<L, ReLU>) os << "relu";
          else if constexpr (std::is_same_v<L, GhostBatchNorm>)
            os << "gbn(" << l.features << ',' << l.ghost_size << ',' << l.momentum << ',' << l.eps << ')';
          else if constexpr (std::is_same_v<L, Dropout>) os << "dropout(" << l.p << ')';
          else os << "flatten";
        },
        layer);
  }
  return os.str();
}

inline ModelSpec parse_description(std::string_view text) {
  ModelSpec spec;
  std::istringstream in{std::string(text)};
  std::string tok;
  auto args = [](const std::string& t) {
    std::vector<double> v;
    const auto a = t.find('('), b = t.rfind(')');
    if (a == std::string::npos || b == std::string::npos || b < a) throw ConfigError("malformed layer '" + t + "'");
    std::istringstream as(t.substr(a + 1, b - a - 1));
    std::string x;
    while (std::getline(as, x, ',')) v.push_back(std::stod(x));
    return v;
  };
  auto z = [](double v) { return static_cast<std::size_t>(v); };
  while (std::getline(in, tok, ';')) {
    if (tok.rfind("input=", 0) == 0) {
      std::istringstream ss(tok.substr(6));
      std::string d;
      while (std::getline(ss, d, 'x')) spec.input.push_back(std::stoul(d));
    } else if (tok.rfind("classes=", 0) == 0) {
      spec.classes = std::stoul(tok.substr(8));
    } else if (tok.rfind("linear(", 0) == 0) {
      auto a = args(tok);
      spec.layers.emplace_back(Linear{z(a.at(0)), z(a.at(1))});
    } else if (tok.rfind("conv(", 0) == 0) {
      auto a = args(tok);
      spec.layers.emplace_back(Conv2d{z(a.at(0)), z(a.at(1)), z(a.at(2))});
    } else if (tok.rfind("avgpool(", 0) == 0) {
      spec.layers.emplace_back(AvgPool2d{z(args(tok).at(0))});
    } else if (tok == "relu") {
      spec.layers.emplace_back(ReLU{});
    } else if (tok.rfind("gbn(", 0) == 0) {
      auto a = args(tok);
      spec.layers.emplace_back(GhostBatchNorm{z(a.at(0)), z(a.at(1)), a.at(2), a.at(3)});
    } else if (tok.rfind("dropout(", 0) == 0) {
      spec.layers.emplace_back(Dropout{args(tok).at(0)});
    } else if (tok == "flatten") {
      spec.layers.emplace_back(Flatten{});
    } else if (!tok.empty()) {
      throw ConfigError("unknown layer token '" + tok + "'");
    }
  }
  infer_shapes(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Checkpoints: text header, blank line, then little-endian blocks
//   u64 d, d scalars (flat view), u64 r, r scalars (running mean/var per BN layer)

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ModelParams<T>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << "batchaug-checkpoint v1\n"
      << "scalar: " << (sizeof(T) == 8 ? "f64" : "f32") << "\n"
      << "model: " << describe(spec) << "\n\n";
  auto put_u64 = [&](std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
  };
  auto put_block = [&](const std::vector<T>& v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  };
  put_u64(params.values.size());
  put_block(params.values);
  std::vector<T> running;
  for (const auto& r : params.running) {
    running.insert(running.end(), r.mean.begin(), r.mean.end());
    running.insert(running.end(), r.var.begin(), r.var.end());
  }
  put_u64(running.size());
  put_block(running);
}

template <typename T>
std::pair<ModelSpec, ModelParams<T>> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  std::string line, model_line, scalar;
  std::getline(in, line);
  if (line != "batchaug-checkpoint v1") throw LoadError("not a batchaug checkpoint: " + path.string());
  while (std::getline(in, line) && !line.empty()) {
    if (line.rfind("model: ", 0) == 0) model_line = line.substr(7);
    if (line.rfind("scalar: ", 0) == 0) scalar = line.substr(8);
  }
  if (scalar != (sizeof(T) == 8 ? "f64" : "f32")) throw LoadError("checkpoint precision mismatch");
  ModelSpec spec = parse_description(model_line);
  auto get_u64 = [&] {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw LoadError("truncated checkpoint");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
    return v;
  };
  auto get_block = [&](std::uint64_t n) {
    std::vector<T> v(n);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T))))
      throw LoadError("truncated checkpoint");
    return v;
  };
  ModelParams<T> p;
  p.values = get_block(get_u64());
  if (p.values.size() != param_layout(spec).dim) throw LoadError("checkpoint dimension does not match its model");
  std::vector<T> running = get_block(get_u64());
  std::size_t pos = 0;
  for (const auto& l : spec.layers)
    if (const auto* bn = std::get_if<GhostBatchNorm>(&l)) {
      if (pos + 2 * bn->features > running.size()) throw LoadError("checkpoint running statistics truncated");
      BnRunning<T> r;
      r.mean.assign(running.begin() + static_cast<std::ptrdiff_t>(pos), running.begin() + static_cast<std::ptrdiff_t>(pos + bn->features));
      pos += bn->features;
      r.var.assign(running.begin() + static_cast<std::ptrdiff_t>(pos), running.begin() + static_cast<std::ptrdiff_t>(pos + bn->features));
      pos += bn->features;
      p.running.push_back(std::move(r));
    }
  return {std::move(spec), std::move(p)};
}

}  // namespace batchaug
