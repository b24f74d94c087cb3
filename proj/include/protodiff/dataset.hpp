#pragma once

#include <Eigen/Dense>
#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "protodiff/embeddings.hpp"
#include "protodiff/errors.hpp"
#include "protodiff/prototypes.hpp"
#include "protodiff/random.hpp"

namespace protodiff {

enum class SampleSource : std::uint8_t { synthetic, real };

inline const char* source_name(SampleSource s) { return s == SampleSource::synthetic ? "synthetic" : "real"; }

// Entries are stored compactly; synthetic refs are derived from
// (prototype, index), real refs point into real_refs.
struct CorpusEntry {
  std::uint32_t prototype = 0;
  SampleSource source = SampleSource::synthetic;
  std::uint64_t index = 0;
};

struct CorpusManifest {
  std::size_t prototype_count = 0;
  std::vector<CorpusEntry> entries;
  std::vector<std::string> real_refs;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::string> warnings;

  std::size_t size() const { return entries.size(); }

  std::string ref(const CorpusEntry& e) const {
    if (e.source == SampleSource::real) return real_refs.at(e.index);
    return "synthetic/" + std::to_string(e.prototype) + "/" + std::to_string(e.index);
  }

  std::vector<std::size_t> counts_per_prototype() const {
    std::vector<std::size_t> c(prototype_count, 0);
    for (const auto& e : entries) ++c.at(e.prototype);
    return c;
  }

  std::size_t count(SampleSource s) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [s](const CorpusEntry& e) { return e.source == s; }));
  }

  void validate() const {
    for (const auto& e : entries) {
      if (e.prototype >= prototype_count) throw ContractError("manifest entry has invalid prototype id");
      if (e.source == SampleSource::real && e.index >= real_refs.size()) {
        throw ContractError("manifest real entry points past the reference list");
      }
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["prototype_count"] = prototype_count;
    auto& arr = j["entries"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
      arr.push_back({{"ref", ref(e)}, {"prototype", e.prototype}, {"source", source_name(e.source)}});
    }
    j["counts"] = counts_per_prototype();
    j["seeds"] = nlohmann::ordered_json(seeds);
    j["warnings"] = warnings;
    return j;
  }
};

// Calls generate(prototype, n_per, seed) once per prototype in id order; the
// per-prototype seed depends only on (seed, prototype).
template <typename Generator>
CorpusManifest build_synthetic_corpus(std::size_t prototype_count, std::size_t n_per, std::uint64_t seed,
                                      Generator&& generate) {
  if (n_per < 1) throw ContractError("build_synthetic_corpus: n_per must be >= 1");
  if (prototype_count == 0) throw ContractError("build_synthetic_corpus: no prototypes");
  CorpusManifest m;
  m.prototype_count = prototype_count;
  m.seeds["synthetic"] = seed;
  m.entries.reserve(prototype_count * n_per);
  for (std::size_t p = 0; p < prototype_count; ++p) {
    generate(p, n_per, stream_seed(seed, {p}));
    for (std::size_t i = 0; i < n_per; ++i) m.entries.push_back({static_cast<std::uint32_t>(p), SampleSource::synthetic, i});
  }
  return m;
}

inline CorpusManifest build_synthetic_corpus(std::size_t prototype_count, std::size_t n_per, std::uint64_t seed) {
  return build_synthetic_corpus(prototype_count, n_per, seed, [](std::size_t, std::size_t, std::uint64_t) {});
}

// Real patch references grouped by global prototype id.
struct RealPool {
  std::vector<std::vector<std::string>> refs;

  std::size_t size() const { return refs.size(); }
};

// Labels every real patch with its nearest prototype within its own cohort.
inline RealPool real_pool(const std::vector<EmbeddingCollection>& collections, const PrototypeTable& table) {
  RealPool pool;
  pool.refs.resize(table.size());
  for (const auto& c : collections) {
    const auto ids = table.assign(c);
    for (std::size_t i = 0; i < c.rows(); ++i) pool.refs[ids[i]].push_back(c.patch_refs[i]);
  }
  return pool;
}

// Adds up to n_per_real uniformly drawn real patches per prototype. A short
// pool contributes everything it has and leaves a warning.
inline CorpusManifest build_hybrid_corpus(const CorpusManifest& synthetic, const RealPool& pool,
                                          std::size_t n_per_real, std::uint64_t seed) {
  if (pool.size() != synthetic.prototype_count) {
    throw ContractError("build_hybrid_corpus: real pool covers " + std::to_string(pool.size()) +
                        " prototypes, manifest has " + std::to_string(synthetic.prototype_count));
  }
  CorpusManifest m = synthetic;
  m.seeds["hybrid"] = seed;
  if (n_per_real == 0) return m;
  for (std::size_t p = 0; p < pool.size(); ++p) {
    const auto& refs = pool.refs[p];
    std::vector<std::size_t> order(refs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t take = std::min(n_per_real, refs.size());
    if (take < n_per_real) {
      m.warnings.push_back("prototype " + std::to_string(p) + ": real pool has " + std::to_string(refs.size()) +
                           " patches, wanted " + std::to_string(n_per_real) + "; taking all");
    }
    Rng rng = make_stream(seed, {p});
    for (std::size_t i = 0; i < take; ++i) std::swap(order[i], order[i + uniform_index(rng, refs.size() - i)]);
    for (std::size_t i = 0; i < take; ++i) {
      m.real_refs.push_back(refs[order[i]]);
      m.entries.push_back({static_cast<std::uint32_t>(p), SampleSource::real, m.real_refs.size() - 1});
    }
  }
  return m;
}

struct FeatureStats {
  std::size_t dim = 0;
  std::vector<double> mean;
  std::vector<double> cov;  // dim x dim, row-major

  double cov_at(std::size_t i, std::size_t j) const { return cov[i * dim + j]; }
};

// Sample mean and unbiased covariance in one pass.
inline FeatureStats feature_stats(std::span<const double> rows, std::size_t dim) {
  if (dim == 0 || rows.size() % dim != 0) throw DimensionError("feature_stats: data is not a multiple of dim");
  const std::size_t n = rows.size() / dim;
  if (n < 2) throw ContractError("feature_stats: need at least 2 rows");
  FeatureStats s;
  s.dim = dim;
  s.mean.assign(dim, 0.0);
  s.cov.assign(dim * dim, 0.0);
  std::vector<double> delta(dim);
  for (std::size_t r = 0; r < n; ++r) {
    const double count = static_cast<double>(r + 1);
    for (std::size_t j = 0; j < dim; ++j) {
      delta[j] = rows[r * dim + j] - s.mean[j];
      s.mean[j] += delta[j] / count;
    }
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) s.cov[i * dim + j] += delta[i] * (rows[r * dim + j] - s.mean[j]);
  }
  for (double& c : s.cov) c /= static_cast<double>(n - 1);
  return s;
}

inline FeatureStats feature_stats(const EmbeddingCollection& c) { return feature_stats(c.data, c.dim); }

namespace detail {

inline Eigen::MatrixXd to_matrix(const FeatureStats& s) {
  Eigen::MatrixXd m(s.dim, s.dim);
  for (std::size_t i = 0; i < s.dim; ++i)
    for (std::size_t j = 0; j < s.dim; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s.cov_at(i, j);
  return m;
}

constexpr double kPsdTolerance = 1e-8;

inline Eigen::VectorXd clamped_eigenvalues(const Eigen::VectorXd& ev, const char* what) {
  Eigen::VectorXd out = ev;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    if (out(i) < -kPsdTolerance) throw NumericError(std::string(what) + " has a negative eigenvalue");
    out(i) = std::max(out(i), 0.0);
  }
  return out;
}

inline void check_covariance(const Eigen::MatrixXd& m, const char* what) {
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > kPsdTolerance) throw NumericError(std::string(what) + " is not symmetric");
}

}  // namespace detail

// Frechet distance between Gaussians (mu_a, cov_a) and (mu_b, cov_b). The
// cross term uses tr sqrt(sqrt(A) B sqrt(A)), which equals tr sqrt(A B).
inline double fid(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim != b.dim || a.mean.size() != a.dim || b.mean.size() != b.dim || a.cov.size() != a.dim * a.dim ||
      b.cov.size() != b.dim * b.dim) {
    throw DimensionError("fid: feature statistics differ in dimension");
  }
  const Eigen::MatrixXd A = detail::to_matrix(a), B = detail::to_matrix(b);
  detail::check_covariance(A, "first covariance");
  detail::check_covariance(B, "second covariance");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(0.5 * (A + A.transpose()));
  const Eigen::VectorXd la = detail::clamped_eigenvalues(ea.eigenvalues(), "first covariance");
  detail::clamped_eigenvalues(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(0.5 * (B + B.transpose()),
                                                                             Eigen::EigenvaluesOnly)
                                  .eigenvalues(),
                              "second covariance");
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  const Eigen::MatrixXd inner = sqrt_a * B * sqrt_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double cross = detail::clamped_eigenvalues(ei.eigenvalues(), "covariance product").cwiseSqrt().sum();
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.dim; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const double value = mean_term + A.trace() + B.trace() - 2.0 * cross;
  return std::max(value, 0.0);
}

}  // namespace protodiff
