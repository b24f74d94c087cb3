#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "protodiff/mil.hpp"
#include "test_support.hpp"

using namespace protodiff;

namespace {

SlideBag random_bag(std::size_t n, std::size_t d, Rng& rng, std::string id = "s") {
  SlideBag b;
  b.slide_id = std::move(id);
  b.dim = d;
  b.embeddings = protodiff::testing::random_values(n * d, rng, -2, 2);
  return b;
}

AbmilParams small_model(std::size_t d, std::size_t outputs, Rng& rng) {
  return AbmilParams(AbmilConfig{d, 8, 0, outputs, 0.25}, rng);
}

// Every patch of a class-1 bag sits at x0 > 1, every class-0 patch at x0 < -1.
std::vector<SlideBag> separable_bags(std::size_t count, Rng& rng) {
  std::vector<SlideBag> bags;
  for (std::size_t i = 0; i < count; ++i) {
    auto b = random_bag(3 + uniform_index(rng, 5), 4, rng, "s" + std::to_string(i));
    b.label = i % 2;
    for (std::size_t r = 0; r < b.rows(); ++r) b.embeddings[r * 4] = (i % 2 == 1 ? 2.0 : -2.0) + 0.5 * (uniform01(rng) - 0.5);
    bags.push_back(std::move(b));
  }
  return bags;
}

}  // namespace

TEST(Abmil, SingletonBagHasUnitAttention) {
  Rng rng(1);
  auto model = small_model(3, 2, rng);
  auto out = model.forward(random_bag(1, 3, rng));
  ASSERT_EQ(out.attention.size(), 1u);
  EXPECT_EQ(out.attention[0], 1.0);
}

TEST(Abmil, AttentionIsASimplex) {
  Rng rng(2);
  auto model = small_model(5, 3, rng);
  for (int i = 0; i < 1000; ++i) {
    auto out = model.forward(random_bag(1 + uniform_index(rng, 20), 5, rng));
    double total = 0.0;
    for (double a : out.attention) {
      ASSERT_GE(a, 0.0);
      total += a;
    }
    ASSERT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Abmil, PermutationInvarianceIsExact) {
  Rng rng(3);
  auto model = small_model(4, 3, rng);
  for (int trial = 0; trial < 50; ++trial) {
    auto bag = random_bag(2 + uniform_index(rng, 10), 4, rng);
    std::vector<std::size_t> perm(bag.rows());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    SlideBag shuffled = bag;
    for (std::size_t r = 0; r < perm.size(); ++r)
      std::copy_n(bag.embeddings.begin() + static_cast<std::ptrdiff_t>(perm[r] * 4), 4,
                  shuffled.embeddings.begin() + static_cast<std::ptrdiff_t>(r * 4));
    auto a = model.forward(bag), b = model.forward(shuffled);
    EXPECT_EQ(a.slide.values(), b.slide.values());
    EXPECT_EQ(a.logits.values(), b.logits.values());
    for (std::size_t r = 0; r < perm.size(); ++r) EXPECT_EQ(b.attention[r], a.attention[perm[r]]);
  }
}

TEST(Abmil, SlideEmbeddingIsAttentionWeightedSum) {
  Rng rng(4);
  auto model = small_model(3, 2, rng);
  auto bag = random_bag(2, 3, rng);
  auto out = model.forward(bag);
  const std::size_t h = model.config().hidden;
  for (std::size_t j = 0; j < h; ++j) {
    const double manual = out.attention[0] * out.features[j] + out.attention[1] * out.features[h + j];
    EXPECT_NEAR(out.slide[j], manual, 1e-14);
  }
}

TEST(Abmil, ErrorsAndDropoutOnlyInTraining) {
  Rng rng(5);
  auto model = small_model(3, 2, rng);
  SlideBag empty;
  empty.dim = 3;
  EXPECT_THROW(model.forward(empty), ContractError);
  EXPECT_THROW(model.forward(random_bag(2, 4, rng)), DimensionError);
  auto bag = random_bag(6, 3, rng);
  EXPECT_EQ(model.forward(bag).logits.values(), model.forward(bag).logits.values());
  Rng d1(9), d2(10);
  EXPECT_NE(model.forward(bag, true, &d1).logits.values(), model.forward(bag, true, &d2).logits.values());
}

TEST(Abmil, CheckpointRoundTrip) {
  Rng rng(6);
  auto model = small_model(3, 4, rng);
  auto bytes = model.to_checkpoint().encode();
  auto back = AbmilParams::from_checkpoint(Checkpoint::decode(bytes));
  EXPECT_EQ(back.to_checkpoint().encode(), bytes);
  auto bag = random_bag(5, 3, rng);
  EXPECT_EQ(back.forward(bag).logits.values(), model.forward(bag).logits.values());
}

TEST(Subtyping, SeparableToyReachesFullTrainAccuracy) {
  Rng rng(7);
  auto train = separable_bags(20, rng);
  auto val = separable_bags(6, rng);
  MilTrainConfig cfg;
  cfg.hidden = 16;
  cfg.optimizer.lr = 3e-3;
  cfg.seed = 8;
  auto res = train_subtyping(train, val, 2, cfg);
  EXPECT_LE(res.log.size(), 20u);
  std::size_t correct = 0;
  for (const auto& b : train) {
    auto p = class_probabilities(res.params, b);
    correct += (p[1] > p[0]) == (*b.label == 1);
  }
  EXPECT_EQ(correct, train.size());
}

TEST(Subtyping, FrozenModelStopsAtEpochEleven) {
  Rng rng(9);
  auto train = separable_bags(6, rng);
  auto val = separable_bags(4, rng);
  MilTrainConfig cfg;
  cfg.hidden = 8;
  cfg.optimizer.lr = 0.0;
  auto res = train_subtyping(train, val, 2, cfg);
  EXPECT_TRUE(res.stopped_early);
  ASSERT_EQ(res.log.size(), 11u);
  EXPECT_EQ(res.log.back().epoch, 11u);
  EXPECT_EQ(res.best_epoch, 1u);
}

TEST(Subtyping, RunsAllEpochsWhenImproving) {
  Rng rng(10);
  auto train = separable_bags(10, rng);
  MilTrainConfig cfg;
  cfg.hidden = 8;
  cfg.max_epochs = 5;
  cfg.optimizer.lr = 1e-3;
  auto res = train_subtyping(train, train, 2, cfg);
  EXPECT_EQ(res.log.size(), 5u);
  EXPECT_FALSE(res.stopped_early);
  EXPECT_DOUBLE_EQ(res.log[0].lr, 1e-3);
  EXPECT_LT(res.log[4].lr, res.log[0].lr);
}

TEST(Subtyping, DegenerateInputsAreRejected) {
  Rng rng(11);
  auto bags = separable_bags(4, rng);
  std::vector<SlideBag> one_class;
  for (auto& b : bags)
    if (*b.label == 0) one_class.push_back(b);
  EXPECT_THROW(train_subtyping(one_class, bags, 2, {}), ContractError);
  EXPECT_THROW(train_subtyping(bags, {}, 2, {}), ContractError);
}

TEST(Survival, NllMatchesHandComputedTerms) {
  const std::vector<double> l{0.3, -1.2, 2.0, 0.5};
  auto h = [&](std::size_t b) { return 1.0 / (1.0 + std::exp(-l[b])); };
  Tensor logits({1, 4}, l);
  const double event_bin2 = -(std::log(h(2)) + std::log(1 - h(0)) + std::log(1 - h(1)));
  EXPECT_NEAR(survival_nll(logits, 2, true).item(), event_bin2, 1e-12);
  const double censored_bin2 = -(std::log(1 - h(0)) + std::log(1 - h(1)));
  EXPECT_NEAR(survival_nll(logits, 2, false).item(), censored_bin2, 1e-12);
  EXPECT_EQ(survival_nll(logits, 0, false).item(), 0.0);
  EXPECT_THROW(survival_nll(logits, 4, true), BoundsError);
}

TEST(Survival, CensoredBeyondLastEdgeHasOnlySurvivalTerms) {
  const std::vector<double> edges{1.0, 2.0, 3.0};
  const std::size_t bin = time_bin(10.0, edges);
  EXPECT_EQ(bin, 3u);
  // Moving the last hazard does not change the loss; earlier hazards do.
  Tensor a({1, 4}, {0.1, 0.2, 0.3, -5.0}), b({1, 4}, {0.1, 0.2, 0.3, 5.0});
  EXPECT_EQ(survival_nll(a, bin, false).item(), survival_nll(b, bin, false).item());
  Tensor c({1, 4}, {0.1, 0.2, 1.3, -5.0});
  EXPECT_GT(survival_nll(c, bin, false).item(), survival_nll(a, bin, false).item());
}

TEST(Survival, DegenerateOptimumPushesHazards) {
  // Gradient descent on the logits directly: h_b -> 1, earlier h -> 0.
  std::vector<double> l(4, 0.0);
  for (int it = 0; it < 2000; ++it) {
    Tensor x({1, 4}, l, true);
    backward(survival_nll(x, 2, true));
    for (std::size_t i = 0; i < 4; ++i) l[i] -= 0.5 * x.grad()[i];
  }
  EXPECT_LT(l[0], -4.0);
  EXPECT_LT(l[1], -4.0);
  EXPECT_GT(l[2], 4.0);
  EXPECT_EQ(l[3], 0.0);
}

TEST(Survival, NllGradientMatchesFiniteDifferences) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    auto l = protodiff::testing::random_values(4, rng, -3, 3);
    const std::size_t bin = uniform_index(rng, 4);
    const bool event = uniform01(rng) < 0.5;
    Tensor x({1, 4}, l, true);
    backward(survival_nll(x, bin, event));
    std::vector<double> g(x.grad().begin(), x.grad().end());
    auto fd = protodiff::testing::finite_difference([&](const std::vector<Tensor>& in) { return survival_nll(in[0], bin, event); },
                                                    {Tensor({1, 4}, l)});
    EXPECT_LT(protodiff::testing::relative_error(g, fd[0]), 1e-6);
  }
}

TEST(Survival, RiskIsMonotoneInEachHazard) {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    auto l = protodiff::testing::random_values(4, rng, -30, 30);
    const double base = risk_score(l);
    EXPECT_TRUE(std::isfinite(base));
    auto up = l;
    up[uniform_index(rng, 4)] += 0.5;
    EXPECT_GT(risk_score(up), base);
    double direct = 0.0;
    for (double v : l) direct -= std::log1p(-1.0 / (1.0 + std::exp(-v)));
    if (std::abs(*std::max_element(l.begin(), l.end())) < 20) EXPECT_NEAR(base, direct, 1e-9 * std::max(1.0, direct));
  }
}

TEST(Survival, QuantileEdgesAndTraining) {
  EXPECT_EQ(quantile_bin_edges({1, 2, 3, 4, 5}, 4), (std::vector<double>{2, 3, 4}));
  EXPECT_EQ(time_bin(0.5, {2, 3, 4}), 0u);
  EXPECT_EQ(time_bin(3.0, {2, 3, 4}), 2u);

  Rng rng(14);
  std::vector<SlideBag> bags;
  for (int i = 0; i < 16; ++i) {
    auto b = random_bag(4, 3, rng, "s" + std::to_string(i));
    b.survival = SurvivalRecord{1.0 + i, i % 3 != 0};
    bags.push_back(std::move(b));
  }
  MilTrainConfig cfg;
  cfg.hidden = 8;
  cfg.max_epochs = 3;
  auto res = train_survival(bags, bags, cfg);
  EXPECT_EQ(res.bin_edges.size(), 3u);
  EXPECT_EQ(res.params.config().outputs, 4u);
  EXPECT_TRUE(std::isfinite(survival_risk(res.params, bags[0])));

  for (auto& b : bags) b.survival->event = false;
  EXPECT_THROW(train_survival(bags, bags, cfg), ContractError);
}

TEST(Split, TenPatientsOneClass) {
  std::vector<SplitItem> items;
  for (int i = 0; i < 10; ++i) items.push_back({"p" + std::to_string(i), 0});
  auto s = stratified_split(items, {}, 1);
  EXPECT_EQ(s.train.size(), 7u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 2u);
}

TEST(Split, PatientsNeverSpanSplits) {
  std::vector<SplitItem> items;
  for (int p = 0; p < 30; ++p)
    for (int k = 0; k < 1 + p % 3; ++k) items.push_back({"p" + std::to_string(p), static_cast<std::size_t>(p % 2)});
  auto s = stratified_split(items, {}, 2);
  std::map<std::string, int> where;
  int split_id = 0;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (std::size_t i : *part) {
      auto [it, fresh] = where.emplace(items[i].patient_id, split_id);
      EXPECT_EQ(it->second, split_id);
    }
    ++split_id;
  }
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), items.size());
}

TEST(Split, TwoClassCounts) {
  std::vector<SplitItem> items;
  for (int p = 0; p < 100; ++p) items.push_back({"p" + std::to_string(p), p < 60 ? 0u : 1u});
  auto s = stratified_split(items, {}, 3);
  std::size_t c0 = 0, c1 = 0;
  for (std::size_t i : s.train) (items[i].label == 0 ? c0 : c1)++;
  EXPECT_NEAR(static_cast<double>(c0), 42.0, 1.0);
  EXPECT_NEAR(static_cast<double>(c1), 28.0, 1.0);
}

TEST(Split, RandomCountsWithinOneOfRatios) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<SplitItem> items;
    const std::size_t n = 3 + uniform_index(rng, 60);
    for (std::size_t p = 0; p < n; ++p) items.push_back({"p" + std::to_string(p), 0});
    auto s = stratified_split(items, {}, static_cast<std::uint64_t>(trial));
    EXPECT_LE(std::abs(static_cast<double>(s.train.size()) - 0.7 * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(s.val.size()) - 0.1 * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(s.test.size()) - 0.2 * n), 1.0);
  }
}

TEST(Split, DeterministicAndSlideLevelFallback) {
  std::vector<SplitItem> items;
  for (int i = 0; i < 20; ++i) items.push_back({"", static_cast<std::size_t>(i % 2)});
  auto a = stratified_split(items, {}, 5), b = stratified_split(items, {}, 5);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.train.size(), 14u);
  EXPECT_NE(stratified_split(items, {}, 6).train, a.train);
}

TEST(Split, TinyClassesFillByPriority) {
  std::vector<SplitItem> items{{"a", 0}, {"b", 1}, {"c", 1}};
  auto s = stratified_split(items, {}, 1);
  EXPECT_EQ(s.warnings.size(), 2u);
  EXPECT_EQ(s.train.size(), 2u);
  EXPECT_EQ(s.test.size(), 1u);
  EXPECT_TRUE(s.val.empty());
  EXPECT_THROW(stratified_split(items, {0.5, 0.5, 0.5}, 1), ContractError);
}

TEST(BagTable, ParsesLabelsAndSurvival) {
  auto t = parse_bag_table("slide_id,patient_id,label\ns1,p1,LUSC\ns2,p1,LUAD\ns3,p2,LUSC\n");
  EXPECT_FALSE(t.survival);
  EXPECT_EQ(t.class_names, (std::vector<std::string>{"LUAD", "LUSC"}));
  ASSERT_EQ(t.rows.size(), 3u);
  auto s = parse_bag_table("slide_id,patient_id,duration,event\r\ns1,p1,12.5,1\r\ns2,p2,3,0\r\n");
  EXPECT_TRUE(s.survival);
  EXPECT_EQ(s.rows[0].survival->duration, 12.5);
  EXPECT_FALSE(s.rows[1].survival->event);
  EXPECT_THROW(parse_bag_table("slide_id,patient_id\ns1,p1\n"), ContractError);
  EXPECT_THROW(parse_bag_table("slide_id,duration,event\ns1,-1,1\n"), ContractError);
}

TEST(BagTable, LoadsBagFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "protodiff_bags_test";
  std::filesystem::remove_all(dir);
  save_embeddings(dir / "s1.pemb", EmbeddingCollection("s1", 2, {1, 2, 3, 4}, {"a", "b"}));
  auto table = parse_bag_table("slide_id,patient_id,label\ns1,p1,x\n");
  auto bags = load_bags(dir, table);
  ASSERT_EQ(bags.size(), 1u);
  EXPECT_EQ(bags[0].rows(), 2u);
  EXPECT_EQ(*bags[0].label, 0u);
  EXPECT_THROW(load_bags(dir, parse_bag_table("slide_id,patient_id,label\nzz,p,x\n")), DependencyError);
  std::filesystem::remove_all(dir);
}
