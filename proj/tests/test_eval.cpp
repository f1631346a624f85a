#include <gtest/gtest.h>

#include <cmath>

#include "dptlab/eval.hpp"

using namespace dptlab;

namespace {

struct World {
  TransitionMatrix m;
  TriggerSpec triggers;
  SequenceDataset eval;
};

World world(std::size_t n = 400) {
  World w;
  w.m = build_matrix(32, mixed_plan(32, 1.0 / 3, 1.0 / 3, 4), 4);
  w.triggers = TriggerSpec::random(32, 4, 5);
  w.eval = build_eval_set(w.m, w.triggers, 6, n, 48);
  return w;
}

// Returns fixed logits at every position.
class ConstantPredictor {
 public:
  explicit ConstantPredictor(std::vector<double> z) : z_(std::move(z)) {}
  int vocab() const { return static_cast<int>(z_.size()); }
  LogitMatrix logits(std::span<const TokenId> t) const {
    LogitMatrix out(static_cast<Eigen::Index>(t.size()), vocab());
    for (Eigen::Index j = 0; j < out.rows(); ++j)
      for (int v = 0; v < vocab(); ++v) out(j, v) = z_[v];
    return out;
  }

 private:
  std::vector<double> z_;
};

}  // namespace

TEST(Induction, OracleIsPerfectAndUniformIsNot) {
  auto w = world();
  auto oracle = induction_accuracy(InductionOracle(w.m, w.triggers), w.eval);
  ASSERT_GT(oracle.eligible, 100);
  EXPECT_EQ(*oracle.accuracy(), 1.0);
  auto uni = induction_accuracy(UniformPredictor(32), w.eval);
  EXPECT_EQ(uni.eligible, oracle.eligible);
  EXPECT_LT(*uni.accuracy(), 0.2);
}

TEST(Induction, FirstOccurrencesAreExcluded) {
  auto w = world();
  auto r = induction_accuracy(InductionOracle(w.m, w.triggers), w.eval);
  EXPECT_EQ(r.eligible + r.excluded_first, r.all_total);
  std::int64_t seqs_with_trigger = 0;
  for (std::size_t s = 0; s < w.eval.size(); ++s) {
    auto seq = w.eval.sequence(s);
    seqs_with_trigger += std::any_of(seq.begin(), seq.end(), [&](TokenId t) { return w.triggers.contains(t); });
  }
  EXPECT_EQ(r.excluded_first, seqs_with_trigger);
  EXPECT_LE(r.unfiltered_accuracy().value(), 1.0);
}

TEST(Induction, NoTriggersMeansNoEligiblePositions) {
  auto m = build_matrix(16, mixed_plan(16, 0.5, 0.25, 1), 1);
  auto ds = build_eval_set(m, {}, 1, 20, 16);
  EXPECT_FALSE(induction_accuracy(UniformPredictor(16), ds).accuracy().has_value());
}

TEST(RowKL, TrueMatrixHasZeroKL) {
  auto w = world();
  auto r = row_kl(MatrixPredictor(w.m), w.m, w.eval);
  for (int c = 0; c < 3; ++c) {
    EXPECT_GT(r.rows(static_cast<EntropyClass>(c)), 0);
    EXPECT_NEAR(r.mean(static_cast<EntropyClass>(c)), 0.0, 1e-12);
  }
}

TEST(RowKL, UniformModelGivesLogKMinusEntropy) {
  auto w = world();
  auto r = row_kl(UniformPredictor(32), w.m, w.eval);
  for (int i = 0; i < 32; ++i) {
    if (w.triggers.contains(i)) {
      EXPECT_TRUE(std::isnan(r.kl[i]));
      continue;
    }
    if (r.probes[i] == 0) continue;
    EXPECT_NEAR(r.kl[i], std::log(32.0) - w.m.row_entropy(i), 1e-12) << "row " << i;
  }
}

TEST(RowKL, MissingSupportIsInfinite) {
  auto w = world();
  std::vector<double> z(32, 0.0);
  z[0] = -kInf;
  auto r = row_kl(ConstantPredictor(z), w.m, w.eval);
  bool some_inf = false;
  for (int i = 0; i < 32; ++i)
    if (!w.triggers.contains(i) && r.probes[i] > 0 && w.m(i, 0) > 0.0) some_inf = some_inf || std::isinf(r.kl[i]);
  EXPECT_TRUE(some_inf);
}

TEST(EvalSet, DisjointFromTrainingDraws) {
  auto w = world(2000);
  auto train = sample_sequences(w.m, w.triggers, 2000, 48, derive_seed(6, "train"));
  EXPECT_EQ(count_overlap(train, w.eval), 0u);
  EXPECT_NO_THROW(assert_disjoint(train, w.eval));
  EXPECT_THROW(assert_disjoint(w.eval, w.eval), StageError);
  EXPECT_EQ(w.eval.size(), 2000u);
}

TEST(EvalSet, DefaultSizeAndStableId) {
  EXPECT_EQ(kDefaultEvalSize, 4000u);
  auto a = world(), b = world();
  EXPECT_EQ(dataset_id(a.eval), dataset_id(b.eval));
  auto rep = evaluate(UniformPredictor(32), a.m, a.eval, "u");
  EXPECT_EQ(rep.eval_set_id, dataset_id(a.eval));
  EXPECT_EQ(rep.checkpoint_id, "u");
}

TEST(PassKItems, CopyItemsPrecedeRowItems) {
  auto w = world();
  auto items = build_passk_items(w.eval, w.m, 50, 60);
  ASSERT_EQ(items.size(), 110u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(items[i].kind, ItemKind::trigger_copy);
    EXPECT_EQ(items[i].correct.size(), 1u);
  }
  for (std::size_t i = 50; i < items.size(); ++i) {
    EXPECT_EQ(items[i].kind, ItemKind::row_support);
    const auto cur = w.eval.sequence(items[i].sequence)[items[i].position];
    EXPECT_EQ(w.m.entropy_class(cur), EntropyClass::medium);
    EXPECT_EQ(static_cast<int>(items[i].correct.size()), w.m.row_sparsity(cur));
  }
}

TEST(SampleAndScore, OracleSolvesCopyItemsAtEveryTemperature) {
  auto w = world();
  auto items = build_passk_items(w.eval, w.m, 100, 0);
  auto il = gather_item_logits(InductionOracle(w.m, w.triggers), w.eval, items);
  for (double T : {0.0, 0.5, 1.5}) {
    auto c = sample_and_score(il, {1, 4}, 8, T, 3);
    EXPECT_EQ(c.at(1), 1.0);
    EXPECT_EQ(c.at(4), 1.0);
  }
}

TEST(SampleAndScore, UniformModelMatchesBinomialRate) {
  auto w = world();
  auto items = build_passk_items(w.eval, w.m, 400, 0);
  auto il = gather_item_logits(UniformPredictor(32), w.eval, items);
  auto c = sample_and_score(il, {1, 2}, 16, 1.0, 4);
  const double se = std::sqrt((1.0 / 32) * (31.0 / 32) / (16.0 * items.size()));
  EXPECT_NEAR(c.at(1), 1.0 / 32, 4 * se);
  EXPECT_NEAR(c.at(2), 1.0 - std::pow(31.0 / 32, 2), 0.02);
}

TEST(SampleAndScore, SeededAndValidated) {
  auto w = world();
  auto items = build_passk_items(w.eval, w.m, 30, 30);
  auto il = gather_item_logits(MatrixPredictor(w.m), w.eval, items);
  EXPECT_EQ(sample_and_score(il, {1, 4}, 8, 0.8, 1).correct, sample_and_score(il, {1, 4}, 8, 0.8, 1).correct);
  EXPECT_THROW(sample_and_score(il, {16}, 8, 0.8, 1), ValidationError);
  EXPECT_THROW(sample_and_score(il, {1}, 8, -1.0, 1), ValidationError);
  auto rows = sample_and_score(il, {1}, 8, 1.0, 1, ItemKind::row_support);
  EXPECT_EQ(rows.correct.size(), 30u);
  EXPECT_EQ(rows.at(1), 1.0);  // samples from the true row always land in its support
}
