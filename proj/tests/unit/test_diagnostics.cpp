#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "batchaug/diagnostics.hpp"

using namespace batchaug;

namespace {

std::vector<double> random_vec(std::size_t n, RngStream& r) {
  std::vector<double> v(n);
  for (auto& x : v) x = r.normal();
  return v;
}

const LabeledDataset& images() {
  static const auto ds = gen_synthetic(SyntheticSpec{.classes = 10, .per_class = 20}, 3);
  return ds;
}

ModelSpec desk_cnn() { return parse_model("cnn:8,16", images().image_shape(), 10, {.batchnorm = true}); }

}  // namespace

TEST(Pearson, IdentityAndNegation) {
  RngStream r(1);
  auto v = random_vec(50, r);
  std::vector<double> neg(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) neg[i] = -v[i];
  EXPECT_NEAR(pearson(v, v), 1.0, 1e-15);
  EXPECT_NEAR(pearson(v, neg), -1.0, 1e-15);
}

TEST(Pearson, HandComputedZero) {
  EXPECT_EQ(pearson(std::vector<double>{1, 0, -1}, std::vector<double>{0, 1, 0}), 0.0);
}

TEST(Pearson, ConstantInputIsUndefined) {
  EXPECT_THROW(pearson(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}), UndefinedCorrelation);
  EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), ContractViolation);
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), ContractViolation);
}

TEST(Pearson, SymmetricScaleInvariantAndBounded) {
  RngStream r(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + r.below(30);
    auto u = random_vec(n, r), v = random_vec(n, r);
    const double rho = pearson(u, v);
    ASSERT_GE(rho, -1.0);
    ASSERT_LE(rho, 1.0);
    EXPECT_EQ(rho, pearson(v, u));
    const double a = (r.uniform() < 0.5 ? -1 : 1) * (0.1 + 10 * r.uniform()), b = 5 * r.normal();
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = a * u[i] + b;
    EXPECT_NEAR(pearson(w, v), (a > 0 ? 1 : -1) * rho, 1e-12);
  }
}

TEST(Pearson, AgreesAcrossPrecisions) {
  RngStream r(3);
  auto u = random_vec(100, r), v = random_vec(100, r);
  std::vector<float> uf(u.begin(), u.end()), vf(v.begin(), v.end());
  EXPECT_NEAR(pearson(uf, vf), pearson(u, v), 1e-6);
}

TEST(Robust, MedianAndMad) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_EQ(mad({1, 2, 3, 4, 100}), 1.0);
}

TEST(CorrelationStudy, IdentityTransformGivesPerfectCorrelation) {
  auto spec = desk_cnn();
  auto p = init_params<double>(spec, RngStream(1));
  auto rep = correlation_study(p, spec, images(), Identity{}, 10, RngStream(4));
  for (double rho : rep.augmented.rho) EXPECT_EQ(rho, 1.0);
  EXPECT_EQ(rep.augmented.median, 1.0);
  EXPECT_EQ(rep.pairs, 10u);
}

TEST(CorrelationStudy, PairDrawsDoNotDependOnPairCount) {
  auto spec = desk_cnn();
  auto p = init_params<double>(spec, RngStream(1));
  const auto t = parse_transform("padcrop:2,hflip:0.5");
  auto small = correlation_study(p, spec, images(), t, 4, RngStream(5));
  auto large = correlation_study(p, spec, images(), t, 8, RngStream(5));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(small.augmented.rho[i], large.augmented.rho[i]);
    EXPECT_EQ(small.same_class.rho[i], large.same_class.rho[i]);
    EXPECT_EQ(small.cross_class.rho[i], large.cross_class.rho[i]);
  }
}

TEST(CorrelationStudy, InitialNetworkSeparatesSameAndCrossClass) {
  auto spec = desk_cnn();
  auto p = init_params<double>(spec, RngStream(7));
  auto rep = correlation_study(p, spec, images(), parse_transform("padcrop:2,hflip:0.5"), 40, RngStream(8), "init");
  EXPECT_GT(rep.same_class.median, 0.3);
  EXPECT_GT(rep.same_class.median, rep.cross_class.median);
  for (const auto* c : {&rep.augmented, &rep.same_class, &rep.cross_class}) {
    EXPECT_GE(c->median, -1.0);
    EXPECT_LE(c->median, 1.0);
    EXPECT_GE(c->mad, 0.0);
  }
  std::ostringstream os;
  write_correlation_csv(os, rep);
  EXPECT_EQ(os.str().rfind("category,pair_index,rho\n", 0), 0u);
  EXPECT_NE(os.str().find("same_class,median,"), std::string::npos);
}

TEST(GradNormStudy, IdentityNormIndependentOfM) {
  auto spec = desk_cnn();
  auto p = init_params<double>(spec, RngStream(2));
  auto trace = grad_norm_study(p, spec, images(), Identity{}, {1, 2, 4, 8}, {.batch = 8, .repeats = 2}, RngStream(3));
  ASSERT_EQ(trace.entries.size(), 8u);
  for (const auto& e : trace.entries) {
    const auto& ref = trace.entries[e.repeat * 4];
    EXPECT_NEAR(e.norm, ref.norm, 1e-12 * ref.norm) << "M=" << e.replicas;
    EXPECT_GE(e.norm, 0.0);
  }
}

TEST(GradNormStudy, SameSeedSameNorm) {
  auto spec = desk_cnn();
  auto p = init_params<double>(spec, RngStream(2));
  const auto t = parse_transform("padcrop:2,hflip:0.5");
  auto a = grad_norm_study(p, spec, images(), t, {1}, {.batch = 8, .repeats = 1}, RngStream(3));
  auto b = grad_norm_study(p, spec, images(), t, {1}, {.batch = 8, .repeats = 1}, RngStream(3));
  EXPECT_EQ(a.entries[0].norm, b.entries[0].norm);
}

TEST(GradNormStudy, AugmentationShrinksNormWithM) {
  auto spec = desk_cnn();
  auto p = init_params<double>(spec, RngStream(4));
  auto trace = grad_norm_study(p, spec, images(), parse_transform("padcrop:2,hflip:0.5"), {1, 2, 4, 8},
                               {.batch = 16, .repeats = 5}, RngStream(5));
  EXPECT_TRUE(trace.strictly_decreasing());
  std::ostringstream os;
  write_grad_norm_csv(os, trace);
  EXPECT_EQ(os.str().rfind("M,repeat,grad_norm\n", 0), 0u);
}

TEST(GradNormTrace, StrictlyDecreasingDetectsTies) {
  GradNormTrace t{{{0, 1, 3.0}, {0, 2, 2.0}, {0, 4, 2.0}}};
  EXPECT_FALSE(t.strictly_decreasing());
  t.entries[2].norm = 1.0;
  EXPECT_TRUE(t.strictly_decreasing());
}

TEST(Assumption, IdentityTransformHolds) {
  auto spec = desk_cnn();
  auto p = init_params<double>(spec, RngStream(6));
  auto r = assumption_check(p, spec, images(), Identity{}, 8, RngStream(7));
  EXPECT_EQ(r.lhs, 1.0);
  EXPECT_LE(r.rhs, 1.0);
  EXPECT_TRUE(r.holds);
}

TEST(Assumption, RandomLabelsStillComputable) {
  auto ds = images();
  RngStream r(9);
  for (auto& l : ds.labels) l = static_cast<Label>(r.below(ds.class_count));
  auto spec = desk_cnn();
  auto p = init_params<double>(spec, RngStream(6));
  auto res = assumption_check(p, spec, ds, parse_transform("padcrop:2,hflip:0.5"), 8, RngStream(7));
  EXPECT_TRUE(std::isfinite(res.lhs));
  EXPECT_TRUE(std::isfinite(res.rhs));
}

TEST(CoordinateVariance, MatchesHandComputation) {
  std::vector<std::vector<double>> g{{1, 0}, {3, 0}, {5, 3}};
  auto v = coordinate_variance(g);
  EXPECT_DOUBLE_EQ(v.variance[0], 4.0);
  EXPECT_DOUBLE_EQ(v.variance[1], 3.0);
  EXPECT_DOUBLE_EQ(v.total, 7.0);
}
