#include <gtest/gtest.h>

#include <cmath>

#include "aitl/adam.hpp"
#include "aitl/gradcheck.hpp"
#include "aitl/rng.hpp"
#include "aitl/tensor.hpp"

using namespace aitl;

TEST(RngStream, SameSeedSameSequence) {
  RngStream a(42, 7), b(42, 7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngStream, DistinctStreamsDiffer) {
  RngStream a(42, 0), b(42, 1);
  int equal = 0;
  for (int i = 0; i < 64; ++i) equal += a.next_u64() == b.next_u64();
  EXPECT_LT(equal, 4);
}

TEST(RngStream, UniformBounds) {
  RngStream r(3);
  for (int i = 0; i < 10000; ++i) {
    float v = r.uniform(-2.5f, 1.5f);
    ASSERT_GE(v, -2.5f);
    ASSERT_LE(v, 1.5f);
  }
}

TEST(RngStream, UniformIntBounds) {
  RngStream r(11);
  std::vector<int> counts(12, 0);
  for (int i = 0; i < 12000; ++i) counts[r.uniform_int(12)]++;
  for (int c : counts) EXPECT_GT(c, 700);  // roughly uniform
}

TEST(RngStream, ForkIsDeterministicAndIndependent) {
  RngStream base(99, 5);
  RngStream c1 = base.fork(3), c2 = base.fork(3), c3 = base.fork(4);
  EXPECT_EQ(c1.next_u64(), c2.next_u64());
  RngStream c4 = base.fork(3);
  c4.next_u64();
  EXPECT_NE(c4.next_u64(), c3.next_u64());
}

TEST(RngStream, NormalMoments) {
  RngStream r(17);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = r.normal();
    sum += v;
    sq += v * v;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.03);
  EXPECT_NEAR(sq / n, 1.0, 0.05);
}

TEST(Adam, ZeroGradientLeavesParams) {
  Tensor p({4}, {1.0f, -2.0f, 0.5f, 3.0f});
  Tensor g = Tensor::zeros({4});
  AdamState st(p.shape);
  Tensor before = p;
  adam_update(p, g, st, 1e-3f);
  EXPECT_EQ(st.step, 1);
  EXPECT_EQ(max_abs_diff(before, p), 0.0);
}

TEST(Adam, ScalarFirstStepMatchesHandEvaluation) {
  // m_hat = 1, v_hat = 1 at step 1, so the step is lr / (1 + eps)
  Tensor p({1}, {0.25f});
  Tensor g({1}, {1.0f});
  AdamState st(p.shape);
  adam_update(p, g, st, 1e-3f);
  EXPECT_NEAR(p.data[0], 0.25f - 1e-3f, 1e-6f);
}

TEST(Adam, RepeatedGradientStepDoesNotGrow) {
  Tensor p({1}, {0.0f});
  Tensor g({1}, {0.7f});
  AdamState st(p.shape);
  adam_update(p, g, st, 1e-3f);
  float step1 = std::fabs(p.data[0]);
  float prev = p.data[0];
  adam_update(p, g, st, 1e-3f);
  float step2 = std::fabs(p.data[0] - prev);
  EXPECT_LE(step2, step1 * 1.01f);
}

TEST(Adam, DeterministicGivenInputs) {
  auto run = [] {
    Tensor p({3}, {0.1f, 0.2f, 0.3f});
    Tensor g({3}, {0.5f, -0.5f, 0.25f});
    AdamState st(p.shape);
    for (int i = 0; i < 5; ++i) adam_update(p, g, st, 3e-4f);
    return p;
  };
  Tensor a = run(), b = run();
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(Adam, RejectsNonFiniteGradientNamingBlock) {
  Tensor p({2}, {0.0f, 0.0f});
  Tensor g({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  AdamState st(p.shape);
  try {
    adam_update(p, g, st, 1e-3f, "conv1.weight");
    FAIL() << "expected rejection";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("conv1.weight"), std::string::npos);
  }
}

TEST(FiniteDiff, IdentityMapIsExact) {
  DifferentiableMap id;
  id.forward = [](const Tensor& x) { return x; };
  id.vjp = [](const Tensor&, const Tensor& w) { return w; };
  RngStream rng(5);
  Tensor x({16}, std::vector<float>(16, 0.3f));
  auto rep = finite_diff_check(id, x, 8, 2e-3, rng);
  EXPECT_TRUE(rep.ok);
  EXPECT_LT(rep.max_rel_err, 1e-5);
}

TEST(FiniteDiff, HalvingMapMatches) {
  DifferentiableMap half;
  half.forward = [](const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data) v *= 0.5f;
    return y;
  };
  half.vjp = [](const Tensor&, const Tensor& w) {
    Tensor y = w;
    for (float& v : y.data) v *= 0.5f;
    return y;
  };
  RngStream rng(6);
  Tensor x({32});
  for (auto& v : x.data) v = rng.uniform(0.0f, 1.0f);
  auto rep = finite_diff_check(half, x, 16, 2e-3, rng);
  EXPECT_TRUE(rep.ok);
  EXPECT_LT(rep.max_rel_err, 5e-5);
}

TEST(FiniteDiff, DetectsWrongVjp) {
  DifferentiableMap bad;
  bad.forward = [](const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data) v = v * v;
    return y;
  };
  bad.vjp = [](const Tensor&, const Tensor& w) { return w; };  // wrong on purpose
  RngStream rng(7);
  Tensor x({8}, std::vector<float>(8, 0.7f));
  auto rep = finite_diff_check(bad, x, 8, 2e-3, rng);
  EXPECT_TRUE(rep.ok);
  EXPECT_GT(rep.max_rel_err, 0.1);
}

TEST(FiniteDiff, NonFiniteForwardReportsFailure) {
  DifferentiableMap nan_map;
  nan_map.forward = [](const Tensor& x) {
    Tensor y = x;
    y.data[0] = std::numeric_limits<float>::quiet_NaN();
    return y;
  };
  nan_map.vjp = [](const Tensor&, const Tensor& w) { return w; };
  RngStream rng(8);
  Tensor x({4}, std::vector<float>(4, 0.5f));
  auto rep = finite_diff_check(nan_map, x, 4, 2e-3, rng);
  EXPECT_FALSE(rep.ok);
  EXPECT_FALSE(rep.note.empty());
}

TEST(FiniteDiff, VjpLinearInUpstream) {
  DifferentiableMap half;
  half.forward = [](const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data) v *= 0.5f;
    return y;
  };
  half.vjp = [](const Tensor&, const Tensor& w) {
    Tensor y = w;
    for (float& v : y.data) v *= 0.5f;
    return y;
  };
  RngStream rng(9);
  Tensor x({8}), w({8});
  for (auto& v : x.data) v = rng.uniform(0.0f, 1.0f);
  for (auto& v : w.data) v = rng.normal();
  Tensor g1 = half.vjp(x, w);
  Tensor w2 = w;
  for (float& v : w2.data) v *= 3.0f;
  Tensor g2 = half.vjp(x, w2);
  for (size_t i = 0; i < g1.data.size(); ++i) EXPECT_NEAR(g2.data[i], 3.0f * g1.data[i], 1e-6f);
}
