#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dptlab/loss.hpp"
#include "gradcheck.hpp"

using namespace dptlab;

namespace {

ModelConfig gc_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 4;
  c.max_len = 6;
  c.vocab = 5;
  c.seed = 3;
  c.init_std = 0.5;
  return c;
}

SoftLabelField random_labels(std::size_t n, int vocab, std::uint64_t seed, double scale = 2.0) {
  Rng rng(seed);
  SoftLabelField f;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> z(vocab);
    for (auto& x : z) x = rng.normal(0.0, scale);
    f.push_dense(softmax(z));
  }
  return f;
}

}  // namespace

TEST(Loss, TwoPositionHandComputedValueAndGradient) {
  LogitMatrix logits(2, 2);
  logits << 0.0, 0.0, std::log(3.0), 0.0;
  std::vector<TokenId> targets{0, 1};
  SoftLabelField labels;
  labels.push_dense(std::vector<double>{0.5, 0.5});
  labels.push_dense(std::vector<double>{0.75, 0.25});
  LossSpec spec;
  spec.alpha = 0.5;
  LogitMatrix d(2, 2);
  auto res = distill_loss(logits, targets, &labels, spec, &d);
  EXPECT_NEAR(res.loss, 0.8337309667146473, 1e-15);
  EXPECT_NEAR(d(0, 0), -0.125, 1e-15);
  EXPECT_NEAR(d(0, 1), 0.125, 1e-15);
  EXPECT_NEAR(d(1, 0), 0.1875, 1e-15);
  EXPECT_NEAR(d(1, 1), -0.1875, 1e-15);
}

TEST(Loss, AlphaZeroIsCrossEntropy) {
  LogitMatrix logits(3, 4);
  logits << 1, 2, 3, 4, 0, 0, 0, 0, -1, 5, 2, 0;
  std::vector<TokenId> t{3, 1, 0};
  LossSpec spec;
  spec.alpha = 0.0;
  double ce = 0.0;
  for (int j = 0; j < 3; ++j) {
    std::vector<double> z(logits.row(j).begin(), logits.row(j).end());
    ce -= std::log(softmax(z)[t[j]]);
  }
  EXPECT_NEAR(distill_loss(logits, t, nullptr, spec).loss, ce / 3, 1e-14);
}

TEST(Loss, ClassicalModeScalesBySquaredTemperature) {
  LogitMatrix logits(1, 3);
  logits << 0.3, -1.0, 2.0;
  std::vector<TokenId> t{0};
  SoftLabelField l;
  l.push_dense(std::vector<double>{0.2, 0.3, 0.5});
  LossSpec spec;
  spec.alpha = 1.0;
  spec.temperature = 2.0;
  spec.classical = true;
  std::vector<double> z{0.15, -0.5, 1.0};
  auto q = softmax(z);
  double want = -4.0 * (0.2 * std::log(q[0]) + 0.3 * std::log(q[1]) + 0.5 * std::log(q[2]));
  EXPECT_NEAR(distill_loss(logits, t, &l, spec).loss, want, 1e-13);
}

TEST(Loss, ValidatesInputs) {
  LogitMatrix logits = LogitMatrix::Zero(2, 3);
  std::vector<TokenId> t{0, 1};
  LossSpec spec;
  spec.alpha = 0.5;
  EXPECT_THROW(distill_loss(logits, t, nullptr, spec), ValidationError);
  spec.alpha = 1.5;
  EXPECT_THROW(distill_loss(logits, t, nullptr, spec), ValidationError);
  spec.alpha = 0.0;
  std::vector<TokenId> bad{0, 7};
  EXPECT_THROW(distill_loss(logits, bad, nullptr, spec), ValidationError);
}

TEST(Routing, MatchesSortOracle) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    auto labels = random_labels(63, 8, seed);
    auto got = route_tokens(labels, 0.15);
    ASSERT_EQ(got.size(), 9u);  // floor(0.15 * 63)
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t j = 0; j < labels.size(); ++j) order.emplace_back(labels.entropy[j], j);
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> want;
    for (int i = 0; i < 9; ++i) want.push_back(order[i].second);
    std::sort(want.begin(), want.end());
    EXPECT_EQ(got, want) << "seed " << seed;
  }
}

TEST(Routing, CountsAndTies) {
  SoftLabelField f;
  for (int j = 0; j < 20; ++j) f.push_dense(std::vector<double>{0.5, 0.5});
  EXPECT_EQ(route_tokens(f, 0.15).size(), 3u);
  EXPECT_EQ(route_tokens(f, 0.15), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_TRUE(route_tokens(f, 0.0).empty());
  EXPECT_EQ(route_tokens(f, 1.0).size(), 20u);
}

TEST(Routing, RoutedPositionsCarryOnlyTheHardGradient) {
  LogitMatrix logits(10, 6);
  Rng rng(4);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal(0, 1);
  std::vector<TokenId> t{0, 1, 2, 3, 4, 5, 0, 1, 2, 3};
  auto labels = random_labels(10, 6, 8, 3.0);
  LossSpec kd;
  kd.alpha = 0.5;
  kd.routing_fraction = 0.3;
  LossSpec ce;
  ce.alpha = 0.0;
  LogitMatrix dk(10, 6), dc(10, 6);
  auto rk = distill_loss(logits, t, &labels, kd, &dk);
  distill_loss(logits, t, nullptr, ce, &dc);
  auto routed = route_tokens(labels, 0.3);
  ASSERT_EQ(routed.size(), 3u);
  for (std::size_t j = 0; j < 10; ++j) {
    const bool r = std::find(routed.begin(), routed.end(), j) != routed.end();
    EXPECT_EQ(rk.positions[j].routed, r);
    if (r) {
      EXPECT_EQ(rk.positions[j].soft, 0.0);
      for (int v = 0; v < 6; ++v) EXPECT_NEAR(dk(j, v), 0.5 * dc(j, v), 1e-15);
    }
  }
}

TEST(Sparsify, AllIsBitIdentical) {
  auto labels = random_labels(12, 7, 2);
  EXPECT_EQ(sparsify_labels(labels, SparsityMode::top_k, 0, 0, 7), labels);
  EXPECT_EQ(sparsify_labels(labels, SparsityMode::sample_k, 0, 0, 7), labels);
  EXPECT_EQ(sparsify_labels(labels, SparsityMode::dense, 3, 0, 7), labels);
}

TEST(Sparsify, TopOneIsTheArgmax) {
  auto labels = random_labels(30, 7, 5);
  auto top = sparsify_labels(labels, SparsityMode::top_k, 1, 0, 7);
  for (std::size_t j = 0; j < labels.size(); ++j) {
    ASSERT_EQ(top.nnz(j), 1u);
    EXPECT_EQ(top.indices(j)[0], static_cast<std::int32_t>(argmax(labels.probs(j))));
    EXPECT_EQ(top.probs(j)[0], 1.0);
    EXPECT_EQ(top.entropy[j], 0.0);
  }
}

TEST(Sparsify, TopKRenormalizes) {
  SoftLabelField f;
  f.push_dense(std::vector<double>{0.1, 0.4, 0.2, 0.3});
  auto s = sparsify_labels(f, SparsityMode::top_k, 2, 0, 4);
  ASSERT_EQ(s.nnz(0), 2u);
  EXPECT_EQ(s.indices(0)[0], 1);
  EXPECT_EQ(s.indices(0)[1], 3);
  EXPECT_NEAR(s.probs(0)[0], 4.0 / 7, 1e-15);
  EXPECT_NEAR(s.probs(0)[1], 3.0 / 7, 1e-15);
}

TEST(Sparsify, SampledInclusionMatchesEnumeration) {
  // Draws without replacement: P(a kept) = p_a + sum_{b != a} p_b p_a / (1 - p_b).
  const double want[3] = {0.8392857142857143, 0.675, 0.4857142857142857};
  const int n = 40000;
  SoftLabelField f;
  for (int j = 0; j < n; ++j) f.push_dense(std::vector<double>{0.5, 0.3, 0.2});
  auto s = sparsify_labels(f, SparsityMode::sample_k, 2, 17, 3);
  int hits[3] = {0, 0, 0};
  for (int j = 0; j < n; ++j) {
    ASSERT_EQ(s.nnz(j), 2u);
    for (auto i : s.indices(j)) ++hits[i];
  }
  for (int a = 0; a < 3; ++a) {
    const double sd = std::sqrt(want[a] * (1 - want[a]) / n);
    EXPECT_NEAR(hits[a] / static_cast<double>(n), want[a], 4 * sd) << "token " << a;
  }
}

TEST(Sparsify, SampledIsSeeded) {
  auto labels = random_labels(20, 6, 3);
  EXPECT_EQ(sparsify_labels(labels, SparsityMode::sample_k, 2, 5, 6), sparsify_labels(labels, SparsityMode::sample_k, 2, 5, 6));
}

TEST(LabelCache, RoundTripsDenseAndSparse) {
  LabelCache c;
  c.teacher_id = "abc";
  c.temperature = 2.0;
  c.vocab = 6;
  c.sequences = {random_labels(5, 6, 1), random_labels(5, 6, 2)};
  for (auto& f : c.sequences) {
    f.teacher_id = c.teacher_id;
    f.temperature = c.temperature;
  }
  EXPECT_EQ(LabelCache::deserialize(c.serialize()), c);
  c.mode = SparsityMode::top_k;
  c.sparsity_k = 2;
  for (auto& f : c.sequences) f = sparsify_labels(f, SparsityMode::top_k, 2, 0, 6);
  EXPECT_EQ(LabelCache::deserialize(c.serialize()), c);
}

TEST(LabelCache, CorruptBytesAreRejected) {
  LabelCache c;
  c.vocab = 4;
  c.sequences = {random_labels(3, 4, 1)};
  auto bytes = c.serialize();
  EXPECT_ANY_THROW(LabelCache::deserialize(bytes.substr(0, bytes.size() - 3)));
  EXPECT_ANY_THROW(LabelCache::deserialize("XXXXXXXX" + bytes.substr(8)));
}

TEST(Labels, TeacherSoftLabelsUseTemperature) {
  auto P = ModelParams<double>::initialized(gc_config());
  std::vector<TokenId> t{1, 2, 3, 4};
  auto l1 = teacher_soft_labels(P, t, 1.0);
  auto l2 = teacher_soft_labels(P, t, 2.0);
  ASSERT_EQ(l1.size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_GT(l2.entropy[j], l1.entropy[j]);
  EXPECT_NO_THROW(l2.validate(5));
}

// Every loss variant on the reference instance.
struct GradCase {
  double alpha;
  double routing;
  SparsityMode mode;
  int k;
};

class LossGradient : public ::testing::TestWithParam<GradCase> {};

TEST_P(LossGradient, MatchesFiniteDifferences) {
  const auto gcse = GetParam();
  dptlab::testing::GradCheckCase c{ModelParams<double>::initialized(gc_config()), {0, 3, 1, 4, 2, 3}, {}, {}, {}};
  c.targets = shifted_targets(c.tokens);
  c.labels = sparsify_labels(random_labels(5, 5, 7), gcse.mode, gcse.k, 11, 5);
  c.spec.alpha = gcse.alpha;
  c.spec.routing_fraction = gcse.routing;
  c.spec.temperature = 2.0;
  c.spec.sparsity_mode = gcse.mode;
  c.spec.sparsity_k = gcse.k;
  c.spec.rescale_routed = gcse.alpha == 1.0 && gcse.routing == 1.0;  // otherwise the loss is identically zero
  auto rep = dptlab::testing::finite_difference_check(c);
  EXPECT_LT(rep.max_rel_error, 1e-4) << "worst coordinate " << rep.worst_index;
}

std::vector<GradCase> all_grad_cases() {
  std::vector<GradCase> out;
  for (double a : {0.0, 0.5, 1.0})
    for (double x : {0.0, 0.15, 1.0}) {
      out.push_back({a, x, SparsityMode::dense, 0});
      out.push_back({a, x, SparsityMode::top_k, 1});
      out.push_back({a, x, SparsityMode::sample_k, 2});
    }
  return out;
}

INSTANTIATE_TEST_SUITE_P(Variants, LossGradient, ::testing::ValuesIn(all_grad_cases()));
