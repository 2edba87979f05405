#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "batchaug/errors.hpp"
#include "batchaug/rng.hpp"
#include "batchaug/tensor.hpp"

namespace batchaug {

using Label = std::uint32_t;

/// Images are stored at 32-bit with values in [0, 1]; batches are cast to the
/// training precision when sampled.
struct LabeledDataset {
  Tensor<float> images;  // N x C x H x W
  std::vector<Label> labels;
  std::size_t class_count = 0;
  std::string name;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] std::size_t channels() const { return images.extent(1); }
  [[nodiscard]] std::size_t height() const { return images.extent(2); }
  [[nodiscard]] std::size_t width() const { return images.extent(3); }
  [[nodiscard]] Shape image_shape() const { return {channels(), height(), width()}; }

  void validate() const {
    detail::require(images.rank() == 4, "dataset images must be N x C x H x W");
    detail::require(images.extent(0) == labels.size(), "dataset: label count differs from image count");
    for (Label l : labels) detail::require(l < class_count, "dataset: label out of range");
  }
};

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 500;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  double noise = 0.08;
};

namespace detail {

// Ten mirror-symmetric (about the vertical axis) shape families so that a
// horizontal flip never changes the class.
inline bool shape_mask(std::size_t family, double dy, double dx, double r) {
  const double ay = std::abs(dy), ax = std::abs(dx);
  const double d = std::sqrt(dy * dy + dx * dx);
  const double box = std::max(ay, ax);
  switch (family) {
    case 0: return d <= r;
    case 1: return d <= r && d >= 0.55 * r;
    case 2: return box <= 0.8 * r;
    case 3: return box <= 0.85 * r && box >= 0.5 * r;
    case 4: return (ay <= 0.25 * r && ax <= r) || (ax <= 0.25 * r && ay <= r);
    case 5: return std::abs(ay - ax) <= 0.3 * r && box <= 0.85 * r;
    case 6: return ay <= 0.3 * r && ax <= r;
    case 7: return ax <= 0.3 * r && ay <= r;
    case 8: return dy >= -r && dy <= 0.8 * r && ax <= 0.5 * (dy + r);
    default: return dy <= r && dy >= -0.8 * r && ax <= 0.5 * (r - dy);
  }
}

}  // namespace detail

/// Procedural images: class k draws shape family k % 10 at size level k / 10,
/// with jittered position, intensity, channel gains and pixel noise.
inline LabeledDataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  detail::require(spec.classes > 0 && spec.per_class > 0 && spec.height > 0 && spec.width > 0 && spec.channels > 0,
                  "gen_synthetic: all extents must be positive");
  const std::size_t n = spec.classes * spec.per_class;
  const std::size_t C = spec.channels, H = spec.height, W = spec.width;
  LabeledDataset ds;
  ds.images = Tensor<float>({n, C, H, W});
  ds.labels.resize(n);
  ds.class_count = spec.classes;
  ds.name = "synthetic-k" + std::to_string(spec.classes);

  const RngStream root = RngStream(seed).split("gen_synthetic");
  const double side = static_cast<double>(std::min(H, W));
  const long jitter = std::max(1L, static_cast<long>(side / 8));
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<Label>(i % spec.classes);  // interleaved, so any prefix is balanced
    ds.labels[i] = k;
    RngStream s = root.split(i);
    const double cy = (static_cast<double>(H) - 1) / 2 + static_cast<double>(static_cast<long>(s.below(2 * jitter + 1)) - jitter);
    const double cx = (static_cast<double>(W) - 1) / 2 + static_cast<double>(static_cast<long>(s.below(2 * jitter + 1)) - jitter);
    const double level = static_cast<double>(k / 10);
    const double r = side * 0.26 * (1.0 + 0.2 * level) * s.uniform(0.85, 1.15);
    const double amp = s.uniform(0.6, 1.0);
    const double bg = s.uniform(0.0, 0.2);
    auto img = ds.images.item(i);
    for (std::size_t c = 0; c < C; ++c) {
      const double gain = C == 1 ? 1.0 : s.uniform(0.7, 1.0);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const bool on = detail::shape_mask(k % 10, static_cast<double>(y) - cy, static_cast<double>(x) - cx, r);
          double v = bg + (on ? amp * gain : 0.0) + spec.noise * s.normal();
          img[(c * H + y) * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
  }
  return ds;
}

namespace detail {

inline std::vector<unsigned char> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct IdxHeader {
  std::vector<std::size_t> dims;
  std::size_t payload_offset = 0;
};

inline IdxHeader parse_idx_header(const std::vector<unsigned char>& bytes, const std::string& what) {
  if (bytes.size() < 4) throw IdxTruncatedError(what + ": shorter than the IDX magic number");
  if (bytes[0] != 0 || bytes[1] != 0) throw IdxFormatError(what + ": bad IDX magic");
  if (bytes[2] != 0x08) throw IdxFormatError(what + ": only unsigned-byte IDX payloads are supported");
  const std::size_t ndim = bytes[3];
  if (ndim == 0) throw IdxFormatError(what + ": zero dimensions");
  IdxHeader h;
  h.payload_offset = 4 + 4 * ndim;
  if (bytes.size() < h.payload_offset) throw IdxTruncatedError(what + ": truncated dimension table");
  for (std::size_t d = 0; d < ndim; ++d) {
    const unsigned char* p = bytes.data() + 4 + 4 * d;
    h.dims.push_back((std::size_t{p[0]} << 24) | (std::size_t{p[1]} << 16) | (std::size_t{p[2]} << 8) | p[3]);
  }
  const std::size_t payload = shape_size(h.dims);
  if (bytes.size() < h.payload_offset + payload) throw IdxTruncatedError(what + ": truncated payload");
  return h;
}

}  // namespace detail

/// Reads an IDX image file (N x H x W, or N x C x H x W) and a 1-D label file.
inline LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img_bytes = detail::read_all(images_path);
  const auto lbl_bytes = detail::read_all(labels_path);
  const auto ih = detail::parse_idx_header(img_bytes, images_path.string());
  const auto lh = detail::parse_idx_header(lbl_bytes, labels_path.string());
  if (ih.dims.size() != 3 && ih.dims.size() != 4) throw IdxFormatError("image file must have 3 or 4 dimensions");
  if (lh.dims.size() != 1) throw IdxFormatError("label file must have 1 dimension");
  const std::size_t n = ih.dims[0];
  if (lh.dims[0] != n)
    throw IdxCountMismatch("label count " + std::to_string(lh.dims[0]) + " != image count " + std::to_string(n));

  Shape shape = ih.dims.size() == 3 ? Shape{n, 1, ih.dims[1], ih.dims[2]} : Shape{n, ih.dims[1], ih.dims[2], ih.dims[3]};
  LabeledDataset ds;
  ds.images = Tensor<float>(shape);
  for (std::size_t i = 0; i < ds.images.size(); ++i)
    ds.images[i] = static_cast<float>(img_bytes[ih.payload_offset + i]) / 255.0f;
  ds.labels.resize(n);
  Label max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lbl_bytes[lh.payload_offset + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.class_count = n ? max_label + 1 : 0;
  ds.name = images_path.filename().string();
  return ds;
}

/// Subset by index list (copies).
inline LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& idx, std::string name = {}) {
  LabeledDataset out;
  Shape s = ds.images.shape();
  s[0] = idx.size();
  out.images = Tensor<float>(s);
  out.labels.reserve(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    auto src = ds.images.item(idx[j]);
    std::copy(src.begin(), src.end(), out.images.item(j).begin());
    out.labels.push_back(ds.labels[idx[j]]);
  }
  out.class_count = ds.class_count;
  out.name = name.empty() ? ds.name : std::move(name);
  return out;
}

class Sampler {
 public:
  Sampler(std::size_t population, RngStream stream, bool with_replacement = false)
      : population_(population), stream_(stream), with_replacement_(with_replacement) {
    detail::require(population > 0, "Sampler: empty population");
  }

  [[nodiscard]] bool with_replacement() const noexcept { return with_replacement_; }
  [[nodiscard]] std::size_t population() const noexcept { return population_; }
  [[nodiscard]] std::size_t epochs_started() const noexcept { return epochs_; }
  [[nodiscard]] const RngStream& stream() const noexcept { return stream_; }

  /// Without replacement, batches may straddle an epoch boundary; each
  /// permutation is still consumed exactly once.
  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (with_replacement_) {
        out.push_back(static_cast<std::size_t>(stream_.below(population_)));
        continue;
      }
      if (cursor_ == permutation_.size()) reshuffle();
      out.push_back(permutation_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    permutation_.resize(population_);
    for (std::size_t i = 0; i < population_; ++i) permutation_[i] = i;
    for (std::size_t i = population_; i > 1; --i) std::swap(permutation_[i - 1], permutation_[stream_.below(i)]);
    cursor_ = 0;
    ++epochs_;
  }

  std::size_t population_;
  RngStream stream_;
  bool with_replacement_;
  std::vector<std::size_t> permutation_;
  std::size_t cursor_ = 0;
  std::size_t epochs_ = 0;
};

template <typename T>
struct Batch {
  std::vector<std::size_t> indices;
  Tensor<T> images;
  std::vector<Label> labels;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
};

template <typename T>
Batch<T> gather(const LabeledDataset& ds, std::vector<std::size_t> idx) {
  Batch<T> b;
  Shape s = ds.images.shape();
  s[0] = idx.size();
  b.images = Tensor<T>(s);
  b.labels.reserve(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    detail::require(idx[j] < ds.size(), "gather: index out of range");
    auto src = ds.images.item(idx[j]);
    auto dst = b.images.item(j);
    for (std::size_t e = 0; e < src.size(); ++e) dst[e] = static_cast<T>(src[e]);
    b.labels.push_back(ds.labels[idx[j]]);
  }
  b.indices = std::move(idx);
  return b;
}

template <typename T>
Batch<T> sample_batch(const LabeledDataset& ds, Sampler& sampler, std::size_t batch_size) {
  detail::require(batch_size <= ds.size(), "sample_batch: batch larger than dataset");
  detail::require(sampler.population() == ds.size(), "sample_batch: sampler population differs from dataset");
  return gather<T>(ds, sampler.next(batch_size));
}

/// Random holdout split: returns {train, val}.
inline std::pair<LabeledDataset, LabeledDataset> split_holdout(const LabeledDataset& ds, std::size_t val_count,
                                                               std::uint64_t seed) {
  detail::require(val_count < ds.size(), "split_holdout: holdout must leave training samples");
  Sampler perm(ds.size(), RngStream(seed).split("holdout"));
  auto order = perm.next(ds.size());
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(val_count));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(val_count), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {subset(ds, train, ds.name + "-train"), subset(ds, val, ds.name + "-val")};
}

}  // namespace batchaug
