#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "batchaug/dataio.hpp"
#include "batchaug/errors.hpp"
#include "batchaug/rng.hpp"
#include "batchaug/tensor.hpp"

namespace batchaug {

struct Identity {};
struct PadCrop {
  std::size_t pad = 4;
};
struct HFlip {
  double p = 0.5;
};
struct Cutout {
  std::size_t size = 8;
};

struct TransformSpec;
struct Compose {
  std::vector<TransformSpec> parts;
};

struct TransformSpec {
  std::variant<Identity, PadCrop, HFlip, Cutout, Compose> op;

  TransformSpec() = default;
  template <typename Op>
    requires(!std::is_same_v<std::decay_t<Op>, TransformSpec>)
  TransformSpec(Op o) : op(std::move(o)) {}  // NOLINT(google-explicit-constructor)
};

/// Concrete sampled parameters for one primitive.
struct CropDraw {
  std::size_t pad = 0, dy = 0, dx = 0;
};
struct FlipDraw {
  bool flip = false;
};
struct CutoutDraw {
  std::size_t size = 0, cy = 0, cx = 0;
};
using PrimitiveDraw = std::variant<CropDraw, FlipDraw, CutoutDraw>;

/// An Identity draw has no steps.
struct TransformDraw {
  Shape image_shape;
  std::vector<PrimitiveDraw> steps;
};

namespace detail {

inline void validate_spec(const TransformSpec& spec, const Shape& shape) {
  require(shape.size() == 3, "transform: image shape must be C x H x W");
  const std::size_t side = std::min(shape[1], shape[2]);
  std::visit(
      [&](const auto& op) {
        using Op = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<Op, HFlip>) {
          require(op.p >= 0.0 && op.p <= 1.0, "hflip: probability must be in [0, 1]");
        } else if constexpr (std::is_same_v<Op, Cutout>) {
          require(op.size > 0 && op.size <= side, "cutout: size must be in (0, min(H, W)]");
        } else if constexpr (std::is_same_v<Op, Compose>) {
          for (const auto& p : op.parts) validate_spec(p, shape);
        }
      },
      spec.op);
}

inline void draw_into(const TransformSpec& spec, const Shape& shape, RngStream& stream,
                      std::vector<PrimitiveDraw>& out) {
  std::visit(
      [&](const auto& op) {
        using Op = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<Op, PadCrop>) {
          const std::uint64_t span = 2 * op.pad + 1;
          const auto dy = static_cast<std::size_t>(stream.below(span));
          const auto dx = static_cast<std::size_t>(stream.below(span));
          out.emplace_back(CropDraw{op.pad, dy, dx});
        } else if constexpr (std::is_same_v<Op, HFlip>) {
          out.emplace_back(FlipDraw{stream.bernoulli(op.p)});
        } else if constexpr (std::is_same_v<Op, Cutout>) {
          const auto cy = static_cast<std::size_t>(stream.below(shape[1]));
          const auto cx = static_cast<std::size_t>(stream.below(shape[2]));
          out.emplace_back(CutoutDraw{op.size, cy, cx});
        } else if constexpr (std::is_same_v<Op, Compose>) {
          for (const auto& p : op.parts) draw_into(p, shape, stream, out);
        }
      },
      spec.op);
}

template <typename T>
void apply_step(const PrimitiveDraw& step, std::size_t C, std::size_t H, std::size_t W, std::span<const T> in,
                std::span<T> out) {
  std::visit(
      [&](const auto& d) {
        using D = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<D, CropDraw>) {
          // Crop window of the zero-padded image starting at (dy, dx).
          const long oy = static_cast<long>(d.dy) - static_cast<long>(d.pad);
          const long ox = static_cast<long>(d.dx) - static_cast<long>(d.pad);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y) {
              const long sy = static_cast<long>(y) + oy;
              for (std::size_t x = 0; x < W; ++x) {
                const long sx = static_cast<long>(x) + ox;
                const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(H) && sx < static_cast<long>(W);
                out[(c * H + y) * W + x] = inside ? in[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)] : T{0};
              }
            }
        } else if constexpr (std::is_same_v<D, FlipDraw>) {
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
              for (std::size_t x = 0; x < W; ++x)
                out[(c * H + y) * W + x] = in[(c * H + y) * W + (d.flip ? W - 1 - x : x)];
        } else {
          std::copy(in.begin(), in.end(), out.begin());
          const long half = static_cast<long>(d.size / 2);
          const long y0 = std::max(0L, static_cast<long>(d.cy) - half);
          const long x0 = std::max(0L, static_cast<long>(d.cx) - half);
          const long y1 = std::min(static_cast<long>(H), static_cast<long>(d.cy) - half + static_cast<long>(d.size));
          const long x1 = std::min(static_cast<long>(W), static_cast<long>(d.cx) - half + static_cast<long>(d.size));
          for (std::size_t c = 0; c < C; ++c)
            for (long y = y0; y < y1; ++y)
              for (long x = x0; x < x1; ++x) out[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)] = T{0};
        }
      },
      step);
}

}  // namespace detail

/// Samples concrete parameters; all randomness of augmentation happens here.
inline TransformDraw draw_transform(const TransformSpec& spec, const Shape& image_shape, RngStream& stream) {
  detail::validate_spec(spec, image_shape);
  TransformDraw d;
  d.image_shape = image_shape;
  detail::draw_into(spec, image_shape, stream, d.steps);
  return d;
}

/// Applies a draw to one C x H x W image held in `in`, writing `out`.
template <typename T>
void apply(const TransformDraw& draw, std::span<const T> in, std::span<T> out) {
  const Shape& s = draw.image_shape;
  detail::require(in.size() == shape_size(s) && out.size() == in.size(), "apply: image size differs from draw");
  if (draw.steps.empty()) {
    std::copy(in.begin(), in.end(), out.begin());
    return;
  }
  std::vector<T> scratch(in.begin(), in.end());
  for (const auto& step : draw.steps) {
    detail::apply_step<T>(step, s[0], s[1], s[2], std::span<const T>(scratch), out);
    std::copy(out.begin(), out.end(), scratch.begin());
  }
}

template <typename T>
Tensor<T> apply(const TransformDraw& draw, const Tensor<T>& image) {
  detail::require(image.shape() == draw.image_shape, "apply: image shape differs from draw");
  Tensor<T> out(image.shape());
  apply<T>(draw, image.data(), out.data());
  return out;
}

/// Number of distinct parameter draws. Flips count 2 outcomes regardless of p;
/// cutout centers range over the full H x W grid.
inline std::uint64_t enumerate_space(const TransformSpec& spec, const Shape& image_shape) {
  detail::validate_spec(spec, image_shape);
  return std::visit(
      [&](const auto& op) -> std::uint64_t {
        using Op = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<Op, Identity>) {
          return 1;
        } else if constexpr (std::is_same_v<Op, PadCrop>) {
          return (2 * op.pad + 1) * (2 * op.pad + 1);
        } else if constexpr (std::is_same_v<Op, HFlip>) {
          return 2;
        } else if constexpr (std::is_same_v<Op, Cutout>) {
          return image_shape[1] * image_shape[2];
        } else {
          std::uint64_t n = 1;
          for (const auto& p : op.parts) n *= enumerate_space(p, image_shape);
          return n;
        }
      },
      spec.op);
}

/// Replica-major expansion: output[j * B + n] = T_j(images[n]).
template <typename T>
Batch<T> expand_batch(const Batch<T>& batch, const TransformSpec& spec, std::size_t replicas, RngStream& stream) {
  detail::require(replicas >= 1, "expand_batch: M must be >= 1");
  detail::require(batch.images.rank() == 4, "expand_batch: images must be B x C x H x W");
  const std::size_t B = batch.size();
  const Shape img{batch.images.extent(1), batch.images.extent(2), batch.images.extent(3)};
  Batch<T> out;
  Shape s = batch.images.shape();
  s[0] = replicas * B;
  out.images = Tensor<T>(s);
  out.labels.reserve(replicas * B);
  out.indices.reserve(replicas * B);
  for (std::size_t j = 0; j < replicas; ++j)
    for (std::size_t n = 0; n < B; ++n) {
      const TransformDraw d = draw_transform(spec, img, stream);
      apply<T>(d, batch.images.item(n), out.images.item(j * B + n));
      out.labels.push_back(batch.labels[n]);
      out.indices.push_back(batch.indices.empty() ? n : batch.indices[n]);
    }
  return out;
}

/// Parses "padcrop:4,hflip:0.5,cutout:8" (or "identity"/"none").
inline TransformSpec parse_transform(std::string_view text) {
  std::vector<TransformSpec> parts;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    const std::string name = item.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : item.substr(colon + 1);
    try {
      if (name == "identity" || name == "none") {
        parts.emplace_back(Identity{});
      } else if (name == "padcrop") {
        const long v = arg.empty() ? 4 : std::stol(arg);
        if (v < 0) throw ConfigError("padcrop: pad must be >= 0");
        parts.emplace_back(PadCrop{static_cast<std::size_t>(v)});
      } else if (name == "hflip") {
        const double p = arg.empty() ? 0.5 : std::stod(arg);
        if (p < 0 || p > 1) throw ConfigError("hflip: probability must be in [0, 1]");
        parts.emplace_back(HFlip{p});
      } else if (name == "cutout") {
        const long v = arg.empty() ? 8 : std::stol(arg);
        if (v <= 0) throw ConfigError("cutout: size must be > 0");
        parts.emplace_back(Cutout{static_cast<std::size_t>(v)});
      } else {
        throw ConfigError("unknown transform '" + name + "'");
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad transform argument in '" + item + "'");
    }
  }
  if (parts.empty()) return Identity{};
  if (parts.size() == 1) return parts.front();
  return Compose{std::move(parts)};
}

inline std::string to_string(const TransformSpec& spec) {
  return std::visit(
      [](const auto& op) -> std::string {
        using Op = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<Op, Identity>) {
          return "identity";
        } else if constexpr (std::is_same_v<Op, PadCrop>) {
          return "padcrop:" + std::to_string(op.pad);
        } else if constexpr (std::is_same_v<Op, HFlip>) {
          std::ostringstream os;
          os << "hflip:" << op.p;
          return os.str();
        } else if constexpr (std::is_same_v<Op, Cutout>) {
          return "cutout:" + std::to_string(op.size);
        } else {
          std::string s;
          for (const auto& p : op.parts) s += (s.empty() ? "" : ",") + to_string(p);
          return s;
        }
      },
      spec.op);
}

inline bool is_identity(const TransformSpec& spec) {
  if (std::holds_alternative<Identity>(spec.op)) return true;
  if (const auto* c = std::get_if<Compose>(&spec.op))
    return std::all_of(c->parts.begin(), c->parts.end(), [](const auto& p) { return is_identity(p); });
  return false;
}

}  // namespace batchaug
