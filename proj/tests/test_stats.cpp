#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <numeric>

#include "protodiff/stats.hpp"
#include "test_support.hpp"

using namespace protodiff;
using protodiff::testing::enumerate_wilcoxon_p;
using protodiff::testing::pair_count_auc;
using protodiff::testing::pair_count_cindex;

namespace {

std::vector<bool> random_labels(std::size_t n, Rng& rng) {
  std::vector<bool> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = uniform01(rng) < 0.5;
  y[0] = true;
  y[1] = false;
  return y;
}

}  // namespace

TEST(Auroc, BasicCases) {
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, {false, false, true, true}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.5, 0.5, 0.5}, {true, false, true}), 0.5);
  const std::vector<double> s{0.3, 0.7, 0.3, 0.9, 0.1, 0.7};
  const std::vector<bool> y{true, false, false, true, false, true};
  EXPECT_EQ(auroc(s, y), pair_count_auc(s, y));
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, {true, true}), UndefinedMetricError);
}

TEST(Auroc, EqualsPairCountingExactly) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 40);
    std::vector<double> s(n);
    for (double& v : s) v = static_cast<double>(uniform_index(rng, 8)) / 4.0;  // many ties
    auto y = random_labels(n, rng);
    ASSERT_EQ(auroc(s, y), pair_count_auc(s, y));
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3 * s[i]) - 7;
    ASSERT_EQ(auroc(t, y), auroc(s, y));
  }
}

TEST(Auroc, MacroOneVsRest) {
  const std::vector<double> p{0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.1, 0.2, 0.7, 0.6, 0.3, 0.1};
  const std::vector<std::size_t> y{0, 1, 2, 0};
  double expect = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> s;
    std::vector<bool> l;
    for (std::size_t i = 0; i < 4; ++i) {
      s.push_back(p[i * 3 + c]);
      l.push_back(y[i] == c);
    }
    expect += pair_count_auc(s, l) / 3.0;
  }
  EXPECT_DOUBLE_EQ(macro_auroc(p, y, 3), expect);
  EXPECT_THROW(macro_auroc(p, {0, 1, 1, 0}, 3), UndefinedMetricError);
}

TEST(MacroF1, PerfectAndZeroConvention) {
  EXPECT_EQ(macro_f1({0, 1, 2}, {0, 1, 2}, 3), 1.0);
  // Class 2 never predicted and never true: contributes 0.
  EXPECT_DOUBLE_EQ(macro_f1({0, 1}, {0, 1}, 3), 2.0 / 3.0);
  EXPECT_THROW(macro_f1({}, {}, 2), ContractError);
}

TEST(MacroF1, ConfusionMatrixExample) {
  // truth: 0 0 0 1 1 2 2 2 2 ; pred: 0 1 0 1 2 2 2 0 1
  const std::vector<std::size_t> truth{0, 0, 0, 1, 1, 2, 2, 2, 2}, pred{0, 1, 0, 1, 2, 2, 2, 0, 1};
  // class 0: tp 2 fp 1 fn 1 -> 4/6 ; class 1: tp 1 fp 2 fn 1 -> 2/5 ; class 2: tp 2 fp 1 fn 2 -> 4/7
  EXPECT_NEAR(macro_f1(pred, truth, 3), (4.0 / 6 + 2.0 / 5 + 4.0 / 7) / 3.0, 1e-15);
}

TEST(CIndex, BasicCases) {
  const std::vector<double> times{1, 2, 3, 4};
  const std::vector<bool> all{true, true, true, true};
  EXPECT_EQ(c_index(std::vector<double>{4, 3, 2, 1}, times, all), 1.0);
  EXPECT_EQ(c_index(std::vector<double>{1, 2, 3, 4}, times, all), 0.0);
  const std::vector<double> r{0.5, 0.9, 0.1, 0.9, 0.4};
  const std::vector<double> t{5, 2, 2, 8, 3};
  const std::vector<bool> e{true, true, false, false, true};
  EXPECT_EQ(c_index(r, t, e), pair_count_cindex(r, t, e));
  EXPECT_THROW(c_index(std::vector<double>{1, 2}, std::vector<double>{1, 2}, {false, false}), UndefinedMetricError);
}

TEST(CIndex, EqualsPairEnumerationExactly) {
  Rng rng(2);
  int checked = 0;
  while (checked < 500) {
    const std::size_t n = 2 + uniform_index(rng, 30);
    std::vector<double> r(n), t(n);
    std::vector<bool> e(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = static_cast<double>(uniform_index(rng, 6));
      t[i] = static_cast<double>(1 + uniform_index(rng, 10));
      e[i] = uniform01(rng) < 0.6;
    }
    if (concordance_counts(r, t, e).comparable == 0) continue;
    ++checked;
    ASSERT_EQ(c_index(r, t, e), pair_count_cindex(r, t, e));
  }
}

TEST(CIndex, ReversalAndMonotoneInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 5 + uniform_index(rng, 30);
    std::vector<double> r(n), t(n), neg(n), warped(n);
    std::vector<bool> e(n, true);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = standard_normal(rng);
      t[i] = static_cast<double>(i);  // distinct times, all events
      e[i] = i % 3 != 0;
      neg[i] = -r[i];
      warped[i] = std::atan(r[i]) * 5 + 1;
    }
    EXPECT_NEAR(c_index(r, t, e) + c_index(neg, t, e), 1.0, 1e-15);
    EXPECT_EQ(c_index(warped, t, e), c_index(r, t, e));
  }
}

TEST(Wilcoxon, ConstantShiftSixPairs) {
  const std::vector<double> b{1.0, 2.5, 0.3, 4.0, 2.2, 9.0};
  std::vector<double> a = b;
  for (double& v : a) v += 0.7;
  auto r = wilcoxon_signed_rank(a, b);
  EXPECT_TRUE(r.exact);
  EXPECT_EQ(r.p_value, 0.03125);
  EXPECT_EQ(wilcoxon_signed_rank(b, a).p_value, r.p_value);
  EXPECT_THROW(wilcoxon_signed_rank(a, a), DegenerateError);
}

TEST(Wilcoxon, ExactMatchesFullEnumeration) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 12);
    std::vector<double> a(n), b(n), d(n);
    for (std::size_t i = 0; i < n; ++i) {
      b[i] = 0.0;
      a[i] = static_cast<double>(static_cast<int>(uniform_index(rng, 7)) - 3) * 0.5;  // ties and zeros
      d[i] = a[i] - b[i];
    }
    if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) continue;
    auto r = wilcoxon_signed_rank(a, b);
    ASSERT_EQ(r.p_value, enumerate_wilcoxon_p(d));
    const double scaled = r.p_value * std::ldexp(1.0, static_cast<int>(r.n_used));
    if (r.p_value < 1.0) ASSERT_EQ(scaled / 2, std::round(scaled / 2));
  }
}

TEST(Wilcoxon, NormalApproximationAgreesAtBoundary) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(25), b(25);
    for (std::size_t i = 0; i < 25; ++i) {
      b[i] = standard_normal(rng);
      a[i] = b[i] + 0.3 * standard_normal(rng) + 0.1;
    }
    const double exact = wilcoxon_signed_rank(a, b, WilcoxonMethod::exact).p_value;
    const double approx = wilcoxon_signed_rank(a, b, WilcoxonMethod::normal).p_value;
    EXPECT_NEAR(exact, approx, 0.01);
  }
  std::vector<double> a(30), b(30, 0.0);
  for (double& v : a) v = standard_normal(rng);
  auto r = wilcoxon_signed_rank(a, b);
  EXPECT_FALSE(r.exact);
  EXPECT_GE(r.p_value, 0.0);
  EXPECT_LE(r.p_value, 1.0);
}

TEST(Delong, IdenticalScoresGivePOne) {
  Rng rng(6);
  auto y = random_labels(30, rng);
  std::vector<double> s(30);
  for (double& v : s) v = standard_normal(rng);
  auto r = delong_test(s, s, y);
  EXPECT_EQ(r.z, 0.0);
  EXPECT_EQ(r.p_value, 1.0);
  EXPECT_EQ(r.auc_a, auroc(s, y));
  EXPECT_THROW(delong_test(s, s, std::vector<bool>(30, true)), UndefinedMetricError);
}

TEST(Delong, LabelFlipAntisymmetry) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto y = random_labels(40, rng);
    std::vector<double> a(40), b(40);
    std::vector<bool> flipped(40);
    for (std::size_t i = 0; i < 40; ++i) {
      a[i] = standard_normal(rng) + (y[i] ? 1.0 : 0.0);
      b[i] = standard_normal(rng) + (y[i] ? 0.4 : 0.0);
      flipped[i] = !y[i];
    }
    auto r = delong_test(a, b, y), f = delong_test(a, b, flipped);
    EXPECT_NEAR(f.auc_a, 1 - r.auc_a, 1e-12);
    EXPECT_NEAR(f.auc_b, 1 - r.auc_b, 1e-12);
    EXPECT_NEAR(std::abs(f.z), std::abs(r.z), 1e-9);
    EXPECT_NEAR(f.p_value, r.p_value, 1e-9);
  }
}

TEST(Report, JsonAndTable) {
  MetricReport r{"lung", "abmil", "auroc", 0.9123, 40, {{"real-only", 0.0312, "DeLong"}}, {}};
  r.validate();
  auto j = r.to_json();
  EXPECT_EQ(j["comparisons"][0]["test"], "DeLong");
  auto table = format_report_table({r, MetricReport{"prad", "abmil", "c_index", 0.7, 30, {}, {}}});
  EXPECT_NE(table.find("0.912"), std::string::npos);
  EXPECT_NE(table.find("0.0312 (DeLong)"), std::string::npos);
  MetricReport bad{"x", "abmil", "auroc", 1.5, 1, {}, {}};
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(Delong, AgreesWithPairedBootstrap) {
  for (std::uint64_t k = 0; k < 10; ++k) {
    auto f = protodiff::testing::delong_fixture(20, 100 + k);
    const double p = delong_test(f.a, f.b, f.labels).p_value;
    const double oracle = protodiff::testing::bootstrap_auc_difference_p(f, 100000, 900 + k);
    std::printf("fixture %llu: delong %.4f bootstrap %.4f\n", static_cast<unsigned long long>(k), p, oracle);
    EXPECT_NEAR(p, oracle, 0.02) << "fixture " << k;
  }
}
