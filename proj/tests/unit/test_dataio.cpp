#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include <gtest/gtest.h>

#include "batchaug/dataio.hpp"

using namespace batchaug;

namespace {

std::string fixture(const std::string& name) { return std::string(FIXTURE_DIR) + "/" + name; }

}  // namespace

TEST(Synthetic, SameSeedSameDataset) {
  SyntheticSpec s{.classes = 2, .per_class = 1};
  auto a = gen_synthetic(s, 7), b = gen_synthetic(s, 7);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(gen_synthetic(s, 8).images, a.images);
}

TEST(Synthetic, BalancedAndWellFormed) {
  auto ds = gen_synthetic(SyntheticSpec{.classes = 10, .per_class = 500}, 1);
  EXPECT_EQ(ds.size(), 5000u);
  EXPECT_EQ(ds.class_count, 10u);
  ds.validate();
  std::vector<int> counts(10, 0);
  for (auto l : ds.labels) ++counts[l];
  for (int c : counts) EXPECT_EQ(c, 500);
  for (float v : ds.images.values()) {
    ASSERT_GE(v, 0.f);
    ASSERT_LE(v, 1.f);
  }
}

TEST(Synthetic, MultiChannelShape) {
  auto ds = gen_synthetic(SyntheticSpec{.classes = 3, .per_class = 2, .height = 8, .width = 12, .channels = 3}, 2);
  EXPECT_EQ(ds.images.shape(), (Shape{6, 3, 8, 12}));
}

// Nearest-centroid probe: a linear classifier fitted in closed form.
TEST(Synthetic, LinearProbeBeatsChance) {
  auto ds = gen_synthetic(SyntheticSpec{.classes = 10, .per_class = 120}, 3);
  auto [train, val] = split_holdout(ds, 200, 5);
  const std::size_t D = shape_size(train.image_shape()), K = train.class_count;
  std::vector<double> centroid(K * D, 0.0);
  std::vector<int> count(K, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto x = train.images.item(i);
    for (std::size_t e = 0; e < D; ++e) centroid[train.labels[i] * D + e] += x[e];
    ++count[train.labels[i]];
  }
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t e = 0; e < D; ++e) centroid[k * D + e] /= count[k];
  int correct = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    auto x = val.images.item(i);
    double best = INFINITY;
    std::size_t arg = 0;
    for (std::size_t k = 0; k < K; ++k) {
      double d = 0;
      for (std::size_t e = 0; e < D; ++e) d += (x[e] - centroid[k * D + e]) * (x[e] - centroid[k * D + e]);
      if (d < best) best = d, arg = k;
    }
    correct += arg == val.labels[i];
  }
  EXPECT_GT(correct / double(val.size()), 2.0 / K);
}

TEST(Idx, LoadsFixture) {
  auto ds = load_idx(fixture("four-images.idx3"), fixture("four-labels.idx1"));
  ASSERT_EQ(ds.size(), 4u);
  ASSERT_EQ(ds.images.shape(), (Shape{4, 1, 3, 2}));
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 2; ++c)
        EXPECT_FLOAT_EQ(ds.images.item(n)[r * 2 + c], (40.f * n + 10.f * r + c) / 255.f);
  EXPECT_EQ(ds.labels, (std::vector<Label>{3, 1, 4, 1}));
  EXPECT_EQ(ds.class_count, 5u);
  ds.validate();
}

TEST(Idx, CountMismatch) {
  EXPECT_THROW(load_idx(fixture("four-images.idx3"), fixture("three-labels.idx1")), IdxCountMismatch);
}

TEST(Idx, BadMagicAndUnsupportedType) {
  EXPECT_THROW(load_idx(fixture("bad-magic.idx3"), fixture("four-labels.idx1")), IdxFormatError);
  EXPECT_THROW(load_idx(fixture("float-type.idx3"), fixture("four-labels.idx1")), IdxFormatError);
}

TEST(Idx, Truncated) {
  EXPECT_THROW(load_idx(fixture("truncated.idx3"), fixture("four-labels.idx1")), IdxTruncatedError);
}

TEST(Idx, MissingFile) { EXPECT_THROW(load_idx(fixture("nope.idx3"), fixture("four-labels.idx1")), LoadError); }

TEST(Sampler, FullBatchIsPermutation) {
  auto ds = gen_synthetic(SyntheticSpec{.classes = 2, .per_class = 2}, 1);
  Sampler s(4, RngStream(3));
  auto b = sample_batch<float>(ds, s, 4);
  std::vector<std::size_t> idx = b.indices;
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 2, 3}));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(b.labels[j], ds.labels[b.indices[j]]);
}

TEST(Sampler, EqualSeedsGiveEqualStreams) {
  Sampler a(100, RngStream(9)), b(100, RngStream(9));
  RngStream unrelated(1);
  for (int i = 0; i < 50; ++i) {
    unrelated.next_u64();  // other RNG use does not leak into sampler streams
    EXPECT_EQ(a.next(7), b.next(7));
  }
}

TEST(Sampler, EveryIndexOncePerEpoch) {
  const std::size_t n = 37;
  Sampler s(n, RngStream(4));
  for (int epoch = 0; epoch < 5; ++epoch) {
    auto idx = s.next(n);
    std::set<std::size_t> seen(idx.begin(), idx.end());
    EXPECT_EQ(seen.size(), n);
  }
  EXPECT_EQ(s.epochs_started(), 5u);
}

TEST(Sampler, BatchesStraddleEpochsWithoutLoss) {
  const std::size_t n = 10;
  Sampler s(n, RngStream(4));
  std::vector<std::size_t> all;
  for (int i = 0; i < 10; ++i) {  // 10 batches of 3 = exactly 3 epochs
    auto b = s.next(3);
    all.insert(all.end(), b.begin(), b.end());
  }
  for (std::size_t e = 0; e < 3; ++e) {
    std::set<std::size_t> seen(all.begin() + e * n, all.begin() + (e + 1) * n);
    EXPECT_EQ(seen.size(), n);
  }
}

TEST(Sampler, WithReplacementFrequenciesAreUniform) {
  const std::size_t n = 10, draws = 100000;
  Sampler s(n, RngStream(12), true);
  std::vector<int> count(n, 0);
  for (std::size_t i : s.next(draws)) ++count[i];
  const double p = 1.0 / n, sigma = std::sqrt(draws * p * (1 - p));
  for (int c : count) EXPECT_LT(std::abs(c - draws * p), 3 * sigma);
}

TEST(Sampler, BatchLargerThanDatasetRejected) {
  auto ds = gen_synthetic(SyntheticSpec{.classes = 2, .per_class = 1}, 1);
  Sampler s(2, RngStream(1));
  EXPECT_THROW(sample_batch<float>(ds, s, 3), ContractViolation);
}

TEST(Holdout, DisjointAndComplete) {
  auto ds = gen_synthetic(SyntheticSpec{.classes = 4, .per_class = 25}, 1);
  auto [tr, va] = split_holdout(ds, 30, 2);
  EXPECT_EQ(tr.size(), 70u);
  EXPECT_EQ(va.size(), 30u);
  tr.validate();
  va.validate();
  EXPECT_THROW(split_holdout(ds, 100, 2), ContractViolation);
}
