#pragma once

// Prototype discovery: uniform subsampling, k-means (k-means++ seeding,
// best of several Lloyd restarts), WCSS curves with nested seeding, elbow
// selection, nearest-prototype assignment and merging of per-cohort sets into
// one global prototype table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "protodiff/checkpoint.hpp"
#include "protodiff/embeddings.hpp"
#include "protodiff/errors.hpp"
#include "protodiff/io.hpp"
#include "protodiff/parallel.hpp"
#include "protodiff/random.hpp"

namespace protodiff {

struct PrototypeSet {
  std::string cohort_id;
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k x dim
  double wcss = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> member_counts;

  std::span<const double> centroid(std::size_t i) const { return {centroids.data() + i * dim, dim}; }
};

struct KMeansOptions {
  std::size_t restarts = 32;
  std::size_t max_iter = 300;
  double tol = 1e-10;
};

// One Lloyd run. history[i] is the WCSS after the i-th assignment step.
struct LloydRun {
  std::vector<double> centroids;
  std::vector<std::size_t> labels;
  double wcss = 0.0;
  std::vector<double> history;
};

struct KMeansResult {
  PrototypeSet prototypes;
  std::vector<std::size_t> labels;  // final assignment of the clustered rows
  std::size_t best_restart = 0;
  std::vector<LloydRun> runs;
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Nearest centroid, ties to the lowest index.
inline std::size_t nearest(std::span<const double> x, const std::vector<double>& centroids, std::size_t dim,
                           double* best_d = nullptr) {
  const std::size_t k = centroids.size() / dim;
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double d = squared_distance(x, {centroids.data() + c * dim, dim});
    if (d < bd) {
      bd = d;
      best = c;
    }
  }
  if (best_d) *best_d = bd;
  return best;
}

inline double total_wcss(const EmbeddingCollection& pts, const std::vector<double>& centroids,
                         const std::vector<std::size_t>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < pts.rows(); ++i)
    s += squared_distance(pts.row(i), {centroids.data() + labels[i] * pts.dim, pts.dim});
  return s;
}

// Assigns every row to its nearest centroid, then gives each empty cluster the
// row currently farthest from its own centroid.
inline std::vector<std::size_t> assign_and_repair(const EmbeddingCollection& pts, std::vector<double>& centroids,
                                                  std::size_t k) {
  const std::size_t n = pts.rows(), dim = pts.dim;
  std::vector<std::size_t> labels(n);
  std::vector<double> dist(n);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = nearest(pts.row(i), centroids, dim, &dist[i]);
    ++counts[labels[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] > 0) continue;
    std::size_t far = n;
    double fd = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (counts[labels[i]] > 1 && dist[i] > fd) {
        fd = dist[i];
        far = i;
      }
    }
    if (far == n) throw ContractError("kmeans: cannot repair empty cluster (k exceeds rows)");
    --counts[labels[far]];
    labels[far] = c;
    counts[c] = 1;
    dist[far] = 0.0;
    auto r = pts.row(far);
    std::copy(r.begin(), r.end(), centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
  }
  return labels;
}

inline std::vector<double> cluster_means(const EmbeddingCollection& pts, const std::vector<std::size_t>& labels,
                                         const std::vector<double>& previous, std::size_t k) {
  const std::size_t dim = pts.dim;
  std::vector<double> sums(k * dim, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    auto r = pts.row(i);
    for (std::size_t j = 0; j < dim; ++j) sums[labels[i] * dim + j] += r[j];
    ++counts[labels[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) {
      std::copy_n(previous.begin() + static_cast<std::ptrdiff_t>(c * dim), dim,
                  sums.begin() + static_cast<std::ptrdiff_t>(c * dim));
      continue;
    }
    for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] /= static_cast<double>(counts[c]);
  }
  return sums;
}

inline std::vector<double> kmeans_plus_plus(const EmbeddingCollection& pts, std::size_t k, Rng& rng) {
  const std::size_t n = pts.rows(), dim = pts.dim;
  std::vector<double> centroids;
  centroids.reserve(k * dim);
  auto push = [&](std::size_t i) {
    auto r = pts.row(i);
    centroids.insert(centroids.end(), r.begin(), r.end());
  };
  push(uniform_index(rng, n));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(pts.row(i), {centroids.data(), dim});
  while (centroids.size() < k * dim) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = uniform_index(rng, n);
    } else {
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > u && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    push(pick);
    const std::size_t c = centroids.size() / dim - 1;
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(pts.row(i), {centroids.data() + c * dim, dim}));
  }
  return centroids;
}

}  // namespace detail

// Lloyd iterations from the given initial centroids. Stops when the
// assignment is unchanged or the relative WCSS decrease falls to tol.
inline LloydRun lloyd(const EmbeddingCollection& pts, std::vector<double> centroids, const KMeansOptions& opt) {
  const std::size_t k = centroids.size() / pts.dim;
  LloydRun run;
  run.labels = detail::assign_and_repair(pts, centroids, k);
  run.wcss = detail::total_wcss(pts, centroids, run.labels);
  run.history.push_back(run.wcss);
  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    std::vector<double> next = detail::cluster_means(pts, run.labels, centroids, k);
    std::vector<std::size_t> labels = detail::assign_and_repair(pts, next, k);
    const double w = detail::total_wcss(pts, next, labels);
    const bool same = labels == run.labels;
    const bool stalled = run.wcss - w <= opt.tol * run.wcss;
    centroids = std::move(next);
    run.labels = std::move(labels);
    run.wcss = w;
    run.history.push_back(w);
    if (same || stalled) break;
  }
  run.centroids = std::move(centroids);
  return run;
}

inline PrototypeSet make_prototype_set(const EmbeddingCollection& pts, const LloydRun& run, std::uint64_t seed) {
  PrototypeSet p;
  p.cohort_id = pts.cohort_id;
  p.dim = pts.dim;
  p.k = run.centroids.size() / pts.dim;
  p.centroids = run.centroids;
  p.wcss = run.wcss;
  p.seed = seed;
  p.member_counts.assign(p.k, 0);
  for (std::size_t l : run.labels) ++p.member_counts[l];
  return p;
}

inline KMeansResult kmeans_detailed(const EmbeddingCollection& pts, std::size_t k, std::uint64_t seed,
                                    const KMeansOptions& opt = {}) {
  if (k == 0) throw ContractError("kmeans: k must be >= 1");
  if (k > pts.rows()) {
    throw BoundsError("kmeans: k=" + std::to_string(k) + " exceeds " + std::to_string(pts.rows()) + " rows");
  }
  if (!(opt.tol > 0.0)) throw ContractError("kmeans: tol must be > 0");
  if (opt.restarts == 0) throw ContractError("kmeans: restarts must be >= 1");
  KMeansResult result;
  result.runs.resize(opt.restarts);
  parallel_for(opt.restarts, [&](std::size_t r) {
    Rng rng = make_stream(seed, {static_cast<std::uint64_t>(r)});
    result.runs[r] = lloyd(pts, detail::kmeans_plus_plus(pts, k, rng), opt);
  });
  for (std::size_t r = 1; r < result.runs.size(); ++r)
    if (result.runs[r].wcss < result.runs[result.best_restart].wcss) result.best_restart = r;
  const LloydRun& best = result.runs[result.best_restart];
  result.prototypes = make_prototype_set(pts, best, seed);
  result.labels = best.labels;
  return result;
}

inline PrototypeSet kmeans(const EmbeddingCollection& pts, std::size_t k, std::uint64_t seed,
                           const KMeansOptions& opt = {}) {
  return kmeans_detailed(pts, k, seed, opt).prototypes;
}

inline EmbeddingCollection subsample_uniform(const EmbeddingCollection& c, std::size_t m, std::uint64_t seed) {
  if (m < 1 || m > c.rows()) {
    throw BoundsError("subsample_uniform: m=" + std::to_string(m) + " outside [1, " + std::to_string(c.rows()) + "]");
  }
  std::vector<std::size_t> idx(c.rows());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  // Partial Fisher-Yates: the first m slots are a uniform m-subset in random order.
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> dist(i, idx.size() - 1);
    std::swap(idx[i], idx[dist(rng)]);
  }
  idx.resize(m);
  return c.select(idx);
}

struct WcssEntry {
  std::size_t k = 0;
  double wcss = 0.0;
};

struct WcssCurve {
  std::vector<WcssEntry> entries;
  std::vector<PrototypeSet> solutions;  // parallel to entries

  const PrototypeSet& solution_for(std::size_t k) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].k == k) return solutions[i];
    throw BoundsError("no WCSS entry for k=" + std::to_string(k));
  }
};

// kmeans for every k in [k_min, k_max]. For k > k_min the previous solution
// plus the row farthest from its centroid is also refined with Lloyd and kept
// if better, so the curve is non-increasing in k.
inline WcssCurve wcss_curve(const EmbeddingCollection& pts, std::size_t k_min, std::size_t k_max, std::uint64_t seed,
                            const KMeansOptions& opt = {}) {
  if (k_min < 1 || k_min > k_max || k_max > pts.rows()) {
    throw BoundsError("wcss_curve: need 1 <= k_min <= k_max <= rows, got [" + std::to_string(k_min) + ", " +
                      std::to_string(k_max) + "] with " + std::to_string(pts.rows()) + " rows");
  }
  WcssCurve curve;
  std::vector<std::size_t> prev_labels;
  for (std::size_t k = k_min; k <= k_max; ++k) {
    KMeansResult fresh = kmeans_detailed(pts, k, seed, opt);
    PrototypeSet chosen = fresh.prototypes;
    std::vector<std::size_t> labels = fresh.labels;
    if (!curve.solutions.empty()) {
      const PrototypeSet& prev = curve.solutions.back();
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < pts.rows(); ++i) {
        const double d = detail::squared_distance(pts.row(i), prev.centroid(prev_labels[i]));
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      std::vector<double> init = prev.centroids;
      auto r = pts.row(far);
      init.insert(init.end(), r.begin(), r.end());
      LloydRun nested = lloyd(pts, std::move(init), opt);
      if (nested.wcss < chosen.wcss) {
        chosen = make_prototype_set(pts, nested, seed);
        labels = nested.labels;
      }
    }
    curve.entries.push_back({k, chosen.wcss});
    curve.solutions.push_back(std::move(chosen));
    prev_labels = std::move(labels);
  }
  return curve;
}

struct ElbowResult {
  std::size_t k = 0;
  bool distinct = false;  // false: curve has no curvature above threshold
  double score = 0.0;     // normalised second difference at k
};

// Kneedle-style elbow: WCSS normalised to [0, 1] by the curve range, then the
// interior k with the largest change of slope (per unit k). Ties go to the
// smaller k. Curves without positive curvature report the first k with
// distinct = false.
inline ElbowResult select_elbow(const WcssCurve& curve, double flat_threshold = 1e-9) {
  const auto& e = curve.entries;
  if (e.size() < 3) throw ContractError("select_elbow: need at least 3 curve entries");
  for (std::size_t i = 1; i < e.size(); ++i)
    if (e[i].k <= e[i - 1].k) throw ContractError("select_elbow: k must be strictly increasing");
  double hi = -std::numeric_limits<double>::infinity(), lo = std::numeric_limits<double>::infinity();
  for (const auto& x : e) {
    hi = std::max(hi, x.wcss);
    lo = std::min(lo, x.wcss);
  }
  ElbowResult out{e.front().k, false, 0.0};
  if (!(hi > lo)) return out;
  auto y = [&](std::size_t i) { return (e[i].wcss - lo) / (hi - lo); };
  auto slope = [&](std::size_t i) {  // between i-1 and i
    return (y(i) - y(i - 1)) / static_cast<double>(e[i].k - e[i - 1].k);
  };
  double best = -std::numeric_limits<double>::infinity();
  std::size_t best_i = 0;
  for (std::size_t i = 1; i + 1 < e.size(); ++i) {
    const double d2 = slope(i + 1) - slope(i);
    if (i == 1 || d2 > best + 1e-12 * std::max(1.0, std::abs(best))) {
      best = d2;
      best_i = i;
    }
  }
  if (best <= flat_threshold) return out;
  return {e[best_i].k, true, best};
}

inline std::vector<std::size_t> assign_prototypes(const EmbeddingCollection& c, const PrototypeSet& protos) {
  if (c.dim != protos.dim) {
    throw ContractError("assign_prototypes: embedding dim " + std::to_string(c.dim) + " != prototype dim " +
                        std::to_string(protos.dim));
  }
  std::vector<std::size_t> labels(c.rows());
  for (std::size_t i = 0; i < c.rows(); ++i) labels[i] = detail::nearest(c.row(i), protos.centroids, protos.dim);
  return labels;
}

struct GlobalPrototype {
  std::size_t global_id = 0;
  std::string cohort_id;
  std::size_t local_index = 0;
  std::size_t member_count = 0;
};

// Union of per-cohort prototype sets with globally unique ids.
struct PrototypeTable {
  std::size_t dim = 0;
  std::vector<GlobalPrototype> entries;
  std::vector<double> centroids;  // size() x dim, in global id order
  std::vector<std::pair<std::string, double>> cohort_wcss;

  std::size_t size() const { return entries.size(); }
  std::span<const double> centroid(std::size_t id) const { return {centroids.data() + id * dim, dim}; }

  std::size_t global_id(const std::string& cohort, std::size_t local) const {
    for (const auto& e : entries)
      if (e.cohort_id == cohort && e.local_index == local) return e.global_id;
    throw BoundsError("no prototype " + cohort + "/" + std::to_string(local));
  }

  // Global prototype ids for rows of one cohort's collection.
  std::vector<std::size_t> assign(const EmbeddingCollection& c) const {
    if (c.dim != dim) throw ContractError("prototype table dim mismatch");
    std::vector<double> local;
    std::vector<std::size_t> ids;
    for (const auto& e : entries) {
      if (e.cohort_id != c.cohort_id) continue;
      auto r = centroid(e.global_id);
      local.insert(local.end(), r.begin(), r.end());
      ids.push_back(e.global_id);
    }
    if (ids.empty()) throw ContractError("prototype table has no cohort '" + c.cohort_id + "'");
    std::vector<std::size_t> out(c.rows());
    for (std::size_t i = 0; i < c.rows(); ++i) out[i] = ids[detail::nearest(c.row(i), local, dim)];
    return out;
  }
};

inline PrototypeTable merge_prototype_sets(const std::vector<PrototypeSet>& sets) {
  if (sets.empty()) throw ContractError("merge_prototype_sets: no sets");
  PrototypeTable table;
  table.dim = sets.front().dim;
  std::set<std::string> seen;
  for (const auto& s : sets) {
    if (s.dim != table.dim) throw ContractError("merge_prototype_sets: dims differ for cohort '" + s.cohort_id + "'");
    if (!seen.insert(s.cohort_id).second) {
      throw ContractError("merge_prototype_sets: duplicate cohort_id '" + s.cohort_id + "'");
    }
    for (std::size_t i = 0; i < s.k; ++i) {
      table.entries.push_back({table.entries.size(), s.cohort_id, i, s.member_counts.at(i)});
    }
    table.centroids.insert(table.centroids.end(), s.centroids.begin(), s.centroids.end());
    table.cohort_wcss.emplace_back(s.cohort_id, s.wcss);
  }
  return table;
}

// One line per prototype: global_id,cohort_id,local_index,member_count
inline std::string prototype_manifest(const PrototypeTable& t) {
  std::ostringstream os;
  for (const auto& e : t.entries) os << e.global_id << ',' << e.cohort_id << ',' << e.local_index << ',' << e.member_count << '\n';
  return os.str();
}

inline void save_prototype_table(const std::filesystem::path& dir, const PrototypeTable& t) {
  Checkpoint ck;
  ck.set("kind", "prototype_table");
  ck.set("dim", t.dim);
  ck.set("count", t.size());
  for (const auto& [cohort, w] : t.cohort_wcss) ck.set("wcss." + cohort, w);
  ck.add("prototypes.centroids", Tensor({t.size(), t.dim}, t.centroids));
  ck.save(dir / "prototypes.pdck");
  io::write_text(dir / "prototypes.csv", prototype_manifest(t));
}

inline PrototypeTable load_prototype_table(const std::filesystem::path& dir) {
  const Checkpoint ck = Checkpoint::load(dir / "prototypes.pdck");
  PrototypeTable t;
  t.dim = ck.require_u64("dim");
  t.centroids = ck.record("prototypes.centroids").values;
  std::istringstream manifest(io::read_text(dir / "prototypes.csv"));
  for (std::string line; std::getline(manifest, line);) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, cohort, local, count;
    std::getline(ls, id, ',');
    std::getline(ls, cohort, ',');
    std::getline(ls, local, ',');
    std::getline(ls, count, ',');
    t.entries.push_back({std::stoul(id), cohort, std::stoul(local), std::stoul(count)});
  }
  if (t.entries.size() * t.dim != t.centroids.size()) throw ContractError("prototype manifest/checkpoint mismatch");
  for (const auto& [key, value] : ck.metadata)
    if (key.rfind("wcss.", 0) == 0) t.cohort_wcss.emplace_back(key.substr(5), std::stod(value));
  return t;
}

inline std::string wcss_csv(const WcssCurve& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "k,wcss\n";
  for (const auto& e : curve.entries) os << e.k << ',' << e.wcss << '\n';
  return os.str();
}

}  // namespace protodiff
