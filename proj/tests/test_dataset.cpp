#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <set>

#include "protodiff/dataset.hpp"
#include "test_support.hpp"

using namespace protodiff;

namespace {

FeatureStats make_stats(std::vector<double> mean, std::vector<double> cov) {
  FeatureStats s;
  s.dim = mean.size();
  s.mean = std::move(mean);
  s.cov = std::move(cov);
  return s;
}

FeatureStats random_psd(std::size_t d, Rng& rng) {
  std::vector<double> g = protodiff::testing::random_values(d * d, rng);
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) cov[i * d + j] += g[i * d + k] * g[j * d + k];
  return make_stats(protodiff::testing::random_values(d, rng, -2, 2), cov);
}

RealPool pool_of(std::vector<std::size_t> sizes) {
  RealPool pool;
  for (std::size_t p = 0; p < sizes.size(); ++p) {
    pool.refs.emplace_back();
    for (std::size_t i = 0; i < sizes[p]; ++i) pool.refs.back().push_back("slide" + std::to_string(p) + "/patch" + std::to_string(i));
  }
  return pool;
}

}  // namespace

TEST(SyntheticCorpus, FullScaleCount) {
  auto m = build_synthetic_corpus(578, 3000, 1);
  EXPECT_EQ(m.size(), 1734000u);
  for (std::size_t c : m.counts_per_prototype()) ASSERT_EQ(c, 3000u);
}

TEST(SyntheticCorpus, SingleEntryAndGeneratorCalls) {
  auto one = build_synthetic_corpus(1, 1, 0);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.entries[0].source, SampleSource::synthetic);
  EXPECT_EQ(one.ref(one.entries[0]), "synthetic/0/0");

  std::vector<std::uint64_t> seeds;
  auto m = build_synthetic_corpus(4, 7, 99, [&](std::size_t p, std::size_t n, std::uint64_t s) {
    EXPECT_EQ(p, seeds.size());
    EXPECT_EQ(n, 7u);
    seeds.push_back(s);
  });
  EXPECT_EQ(m.size(), 28u);
  EXPECT_EQ(seeds.size(), 4u);
  EXPECT_NE(seeds[0], seeds[1]);
  EXPECT_THROW(build_synthetic_corpus(4, 0, 1), ContractError);
}

TEST(HybridCorpus, DoublesWhenPoolsSuffice) {
  auto syn = build_synthetic_corpus(3, 5, 1);
  auto hyb = build_hybrid_corpus(syn, pool_of({9, 5, 20}), 5, 2);
  EXPECT_EQ(hyb.size(), 2 * syn.size());
  EXPECT_EQ(hyb.count(SampleSource::synthetic) + hyb.count(SampleSource::real), hyb.size());
  EXPECT_EQ(hyb.count(SampleSource::real), 15u);
  EXPECT_TRUE(hyb.warnings.empty());
  for (std::size_t c : hyb.counts_per_prototype()) EXPECT_EQ(c, 10u);
  for (const auto& e : hyb.entries) {
    if (e.source == SampleSource::real) EXPECT_EQ(hyb.ref(e).rfind("slide" + std::to_string(e.prototype) + "/", 0), 0u);
  }
  hyb.validate();
}

TEST(HybridCorpus, FullScaleArithmetic) {
  auto syn = build_synthetic_corpus(578, 3000, 1);
  RealPool pool;
  pool.refs.assign(578, std::vector<std::string>(3000, "p"));
  EXPECT_EQ(build_hybrid_corpus(syn, pool, 3000, 2).size(), 3468000u);
}

TEST(HybridCorpus, ZeroRealIsIdentity) {
  auto syn = build_synthetic_corpus(2, 3, 1);
  auto hyb = build_hybrid_corpus(syn, pool_of({4, 4}), 0, 5);
  EXPECT_EQ(hyb.to_json()["entries"], syn.to_json()["entries"]);
}

TEST(HybridCorpus, ShortPoolTakesAllWithWarning) {
  auto syn = build_synthetic_corpus(2, 4, 1);
  auto hyb = build_hybrid_corpus(syn, pool_of({2, 10}), 4, 3);
  EXPECT_EQ(hyb.counts_per_prototype(), (std::vector<std::size_t>{6, 8}));
  ASSERT_EQ(hyb.warnings.size(), 1u);
}

TEST(HybridCorpus, SamplingIsUniformWithoutReplacement) {
  auto syn = build_synthetic_corpus(1, 1, 1);
  std::vector<int> hits(10, 0);
  const int trials = 4000;
  for (int s = 0; s < trials; ++s) {
    auto hyb = build_hybrid_corpus(syn, pool_of({10}), 3, static_cast<std::uint64_t>(s));
    std::set<std::string> seen;
    for (const auto& r : hyb.real_refs) {
      seen.insert(r);
      ++hits[static_cast<std::size_t>(std::stoi(r.substr(r.find("patch") + 5)))];
    }
    ASSERT_EQ(seen.size(), 3u);
  }
  // Each patch is included with probability 3/10.
  const double p = 0.3, sd = std::sqrt(trials * p * (1 - p));
  for (int h : hits) EXPECT_LT(std::abs(h - trials * p), 4 * sd);
}

TEST(Manifest, DeterministicJson) {
  auto a = build_hybrid_corpus(build_synthetic_corpus(3, 4, 7), pool_of({5, 6, 7}), 3, 8);
  auto b = build_hybrid_corpus(build_synthetic_corpus(3, 4, 7), pool_of({5, 6, 7}), 3, 8);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  auto c = build_hybrid_corpus(build_synthetic_corpus(3, 4, 7), pool_of({5, 6, 7}), 3, 9);
  EXPECT_NE(a.to_json().dump(), c.to_json().dump());
  auto j = a.to_json();
  EXPECT_EQ(j["seeds"]["synthetic"], 7);
  EXPECT_EQ(j["seeds"]["hybrid"], 8);
  EXPECT_EQ(j["entries"][0]["source"], "synthetic");
}

TEST(RealPool, GroupsPatchesByNearestPrototype) {
  PrototypeSet lung{"lung", 2, 1, {-1.0, 1.0}, 0.0, 0, {1, 1}};
  PrototypeSet skin{"skin", 1, 1, {0.0}, 0.0, 0, {1}};
  auto table = merge_prototype_sets({lung, skin});
  EmbeddingCollection a("lung", 1, {-0.9, 1.2, 0.8}, {"a0", "a1", "a2"});
  EmbeddingCollection b("skin", 1, {5.0}, {"b0"});
  auto pool = real_pool({a, b}, table);
  ASSERT_EQ(pool.size(), 3u);
  EXPECT_EQ(pool.refs[0], std::vector<std::string>{"a0"});
  EXPECT_EQ(pool.refs[1], (std::vector<std::string>{"a1", "a2"}));
  EXPECT_EQ(pool.refs[2], std::vector<std::string>{"b0"});
}

TEST(FeatureStats, TwoPointsAndConstantRows) {
  const std::vector<double> v{1.0, -2.0, 0.5};
  std::vector<double> rows{v[0], v[1], v[2], -v[0], -v[1], -v[2]};
  auto s = feature_stats(rows, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(s.mean[i], 0.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(s.cov_at(i, j), 2.0 * v[i] * v[j]);
  }
  auto c = feature_stats(std::vector<double>{3, 4, 3, 4, 3, 4}, 2);
  for (double x : c.cov) EXPECT_EQ(x, 0.0);
  EXPECT_THROW(feature_stats(std::vector<double>{1, 2}, 2), ContractError);
}

TEST(FeatureStats, MatchesTwoPassFormula) {
  Rng rng(3);
  const std::size_t n = 500, d = 4;
  auto rows = protodiff::testing::random_values(n * d, rng, -3, 7);
  auto s = feature_stats(rows, d);
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += rows[r * d + j] / n;
  for (std::size_t i = 0; i < d; ++i) {
    EXPECT_NEAR(s.mean[i], mean[i], 1e-10);
    for (std::size_t j = 0; j < d; ++j) {
      double c = 0.0;
      for (std::size_t r = 0; r < n; ++r) c += (rows[r * d + i] - mean[i]) * (rows[r * d + j] - mean[j]);
      EXPECT_NEAR(s.cov_at(i, j), c / (n - 1), 1e-10);
    }
  }
}

TEST(Fid, ClosedFormExamples) {
  auto eye = std::vector<double>{1, 0, 0, 1};
  EXPECT_NEAR(fid(make_stats({0, 0}, eye), make_stats({3, 4}, eye)), 25.0, 1e-6);
  EXPECT_NEAR(fid(make_stats({1, 1}, {1, 0, 0, 4}), make_stats({1, 1}, {4, 0, 0, 1})), 2.0, 1e-6);
}

TEST(Fid, IdentityAndSymmetryOnRandomPsd) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 1 + uniform_index(rng, 6);
    auto a = random_psd(d, rng), b = random_psd(d, rng);
    EXPECT_NEAR(fid(a, a), 0.0, 1e-9);
    const double ab = fid(a, b), ba = fid(b, a);
    EXPECT_NEAR(ab, ba, 1e-9);
    EXPECT_GE(ab, -1e-9);
  }
}

TEST(Fid, MatchesEigenMatrixSqrtOracle) {
  // Oracle: tr((A B)^{1/2}) via the eigenvalues of the (non-symmetric) product.
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    auto a = random_psd(4, rng), b = random_psd(4, rng);
    Eigen::Map<const Eigen::Matrix<double, 4, 4, Eigen::RowMajor>> A(a.cov.data()), B(b.cov.data());
    Eigen::EigenSolver<Eigen::Matrix4d> es(A * B);
    double cross = 0.0;
    for (int k = 0; k < 4; ++k) cross += std::sqrt(std::max(0.0, es.eigenvalues()(k).real()));
    double mean_term = 0.0;
    for (int k = 0; k < 4; ++k) mean_term += (a.mean[k] - b.mean[k]) * (a.mean[k] - b.mean[k]);
    EXPECT_NEAR(fid(a, b), mean_term + A.trace() + B.trace() - 2 * cross, 1e-8);
  }
}

TEST(Fid, RejectsBadCovariances) {
  auto eye = std::vector<double>{1, 0, 0, 1};
  EXPECT_THROW(fid(make_stats({0, 0}, {1, 0.5, 0, 1}), make_stats({0, 0}, eye)), NumericError);
  EXPECT_THROW(fid(make_stats({0, 0}, {1, 0, 0, -1}), make_stats({0, 0}, eye)), NumericError);
  EXPECT_THROW(fid(make_stats({0}, {1}), make_stats({0, 0}, eye)), DimensionError);
  // Tiny negative eigenvalues from rounding are tolerated.
  EXPECT_NEAR(fid(make_stats({0, 0}, {1, 0, 0, -1e-10}), make_stats({0, 0}, {1, 0, 0, 0})), 0.0, 1e-9);
}
