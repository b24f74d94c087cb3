#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "protodiff/errors.hpp"

namespace protodiff {

namespace detail {

// Midranks (1-based) doubled so that ties stay integral.
inline std::vector<std::int64_t> doubled_midranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<std::int64_t> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const auto doubled = static_cast<std::int64_t>(i + j + 2);  // 2 * average of (i+1 .. j+1)
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = doubled;
    i = j + 1;
  }
  return rank;
}

inline void check_finite_scores(std::span<const double> x, const char* what) {
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite score");
}

inline double normal_two_sided_p(double z) { return std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0))); }

}  // namespace detail

// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(equal).
inline double auroc(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("auroc: scores and labels differ in length");
  detail::check_finite_scores(scores, "auroc");
  const auto rank = detail::doubled_midranks(scores);
  std::int64_t pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      ++pos;
      rank_sum += rank[i];
    }
  }
  const std::int64_t neg = static_cast<std::int64_t>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc: labels contain a single class");
  // 2U = sum of doubled ranks - pos (pos + 1); AUC = 2U / (2 pos neg).
  const std::int64_t twice_u = rank_sum - pos * (pos + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * pos * neg);
}

// Unweighted mean of one-vs-rest AUCs; probs is n x classes, row-major.
inline double macro_auroc(std::span<const double> probs, const std::vector<std::size_t>& labels, std::size_t classes) {
  if (classes < 2) throw ContractError("macro_auroc: need at least two classes");
  if (probs.size() != labels.size() * classes) throw DimensionError("macro_auroc: probability matrix has wrong size");
  if (classes == 2) {
    std::vector<double> s(labels.size());
    std::vector<bool> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s[i] = probs[i * 2 + 1];
      y[i] = labels[i] == 1;
    }
    return auroc(s, y);
  }
  double total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> s(labels.size());
    std::vector<bool> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s[i] = probs[i * classes + c];
      y[i] = labels[i] == c;
    }
    total += auroc(s, y);
  }
  return total / static_cast<double>(classes);
}

// Mean over all classes of 2TP / (2TP + FP + FN), with 0 for a zero
// denominator.
inline double macro_f1(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels,
                       std::size_t classes) {
  if (predictions.empty()) throw ContractError("macro_f1: empty input");
  if (predictions.size() != labels.size()) throw DimensionError("macro_f1: predictions and labels differ in length");
  if (classes == 0) throw ContractError("macro_f1: no classes");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] >= classes || labels[i] >= classes) throw ContractError("macro_f1: class index out of range");
    if (predictions[i] == labels[i]) {
      ++tp[labels[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[labels[i]];
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom > 0) total += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return total / static_cast<double>(classes);
}

struct ConcordanceCounts {
  std::uint64_t comparable = 0;
  std::uint64_t concordant = 0;
  std::uint64_t tied = 0;
};

// Harrell's pairs: (i, j) is comparable when i has an event and either
// t_i < t_j, or t_i == t_j and j is censored. A higher risk for i is
// concordant; equal risks count half. O(n log n) with a Fenwick tree.
inline ConcordanceCounts concordance_counts(std::span<const double> risks, std::span<const double> times,
                                            const std::vector<bool>& events) {
  const std::size_t n = risks.size();
  if (times.size() != n || events.size() != n) throw DimensionError("c_index: inputs differ in length");
  detail::check_finite_scores(risks, "c_index");
  detail::check_finite_scores(times, "c_index");
  std::vector<double> sorted_risks(risks.begin(), risks.end());
  std::sort(sorted_risks.begin(), sorted_risks.end());
  sorted_risks.erase(std::unique(sorted_risks.begin(), sorted_risks.end()), sorted_risks.end());
  const std::size_t m = sorted_risks.size();
  auto rank_of = [&](double r) {
    return static_cast<std::size_t>(std::lower_bound(sorted_risks.begin(), sorted_risks.end(), r) - sorted_risks.begin());
  };
  std::vector<std::uint64_t> tree(m + 1, 0);
  auto insert = [&](std::size_t k) {
    for (++k; k <= m; k += k & (~k + 1)) ++tree[k];
  };
  auto prefix = [&](std::size_t k) {  // count of inserted ranks < k
    std::uint64_t s = 0;
    for (; k > 0; k -= k & (~k + 1)) s += tree[k];
    return s;
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });
  ConcordanceCounts c;
  std::uint64_t inserted = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && times[order[j]] == times[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k)
      if (!events[order[k]]) insert(rank_of(risks[order[k]])), ++inserted;
    for (std::size_t k = i; k < j; ++k) {
      if (!events[order[k]]) continue;
      const std::size_t r = rank_of(risks[order[k]]);
      const std::uint64_t below = prefix(r), at_or_below = prefix(r + 1);
      c.comparable += inserted;
      c.concordant += below;
      c.tied += at_or_below - below;
    }
    for (std::size_t k = i; k < j; ++k)
      if (events[order[k]]) insert(rank_of(risks[order[k]])), ++inserted;
    i = j;
  }
  return c;
}

inline double c_index(std::span<const double> risks, std::span<const double> times, const std::vector<bool>& events) {
  const auto c = concordance_counts(risks, times, events);
  if (c.comparable == 0) throw UndefinedMetricError("c_index: no comparable pairs");
  return static_cast<double>(2 * c.concordant + c.tied) / static_cast<double>(2 * c.comparable);
}

enum class WilcoxonMethod { automatic, exact, normal };

struct WilcoxonResult {
  double statistic = 0.0;  // sum of ranks of positive differences
  double p_value = 1.0;
  std::size_t n_used = 0;  // non-zero differences
  bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactLimit = 25;

// Two-sided signed-rank test on paired samples. Zero differences are
// dropped and tied magnitudes share average ranks. The exact null
// distribution enumerates all 2^n sign assignments by dynamic programming
// over doubled ranks; the normal approximation uses tie and continuity
// corrections.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                                           WilcoxonMethod method = WilcoxonMethod::automatic) {
  if (a.size() != b.size()) throw DimensionError("wilcoxon: samples differ in length");
  std::vector<double> mag;
  std::vector<bool> positive;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw NumericError("wilcoxon: non-finite difference");
    if (d != 0.0) {
      mag.push_back(std::abs(d));
      positive.push_back(d > 0.0);
    }
  }
  const std::size_t n = mag.size();
  if (n == 0) throw DegenerateError("wilcoxon: all differences are zero");
  const auto rank = detail::doubled_midranks(mag);
  std::int64_t w2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank[i];
    if (positive[i]) w2 += rank[i];
  }
  WilcoxonResult res;
  res.statistic = static_cast<double>(w2) / 2.0;
  res.n_used = n;
  res.exact = method == WilcoxonMethod::exact || (method == WilcoxonMethod::automatic && n <= kWilcoxonExactLimit);
  if (res.exact) {
    // counts[s] = number of sign assignments whose positive doubled-rank sum is s.
    std::vector<double> counts(static_cast<std::size_t>(total2) + 1, 0.0);
    counts[0] = 1.0;
    std::int64_t reach = 0;
    for (std::size_t i = 0; i < n; ++i) {
      reach += rank[i];
      for (std::int64_t s = reach; s >= rank[i]; --s) counts[static_cast<std::size_t>(s)] += counts[static_cast<std::size_t>(s - rank[i])];
    }
    double lower = 0.0, upper = 0.0;
    for (std::int64_t s = 0; s <= total2; ++s) {
      if (s <= w2) lower += counts[static_cast<std::size_t>(s)];
      if (s >= w2) upper += counts[static_cast<std::size_t>(s)];
    }
    const double all = std::ldexp(1.0, static_cast<int>(n));
    res.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
  } else {
    const double nn = static_cast<double>(n);
    double tie_term = 0.0;
    std::vector<std::int64_t> sorted(rank);
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j < n && sorted[j] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i);
      tie_term += t * t * t - t;
      i = j;
    }
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double diff = res.statistic - mean;
    const double corrected = std::max(0.0, std::abs(diff) - 0.5);
    res.p_value = var > 0.0 ? detail::normal_two_sided_p(corrected / std::sqrt(var)) : 1.0;
  }
  return res;
}

struct DelongResult {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double z = 0.0;
  double p_value = 1.0;
};

// Paired DeLong test for two score sets on the same cases.
inline DelongResult delong_test(std::span<const double> scores_a, std::span<const double> scores_b,
                                const std::vector<bool>& labels) {
  const std::size_t n = labels.size();
  if (scores_a.size() != n || scores_b.size() != n) throw DimensionError("delong: inputs differ in length");
  detail::check_finite_scores(scores_a, "delong");
  detail::check_finite_scores(scores_b, "delong");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < n; ++i) (labels[i] ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw UndefinedMetricError("delong: labels contain a single class");
  const double m = static_cast<double>(pos.size()), k = static_cast<double>(neg.size());

  // Structural components: v10[i] over positives, v01[j] over negatives.
  auto components = [&](std::span<const double> s, std::vector<double>& v10, std::vector<double>& v01) {
    v10.assign(pos.size(), 0.0);
    v01.assign(neg.size(), 0.0);
    for (std::size_t i = 0; i < pos.size(); ++i) {
      for (std::size_t j = 0; j < neg.size(); ++j) {
        const double x = s[pos[i]], y = s[neg[j]];
        const double psi = x > y ? 1.0 : (x == y ? 0.5 : 0.0);
        v10[i] += psi;
        v01[j] += psi;
      }
    }
    double auc = 0.0;
    for (double& v : v10) {
      auc += v;
      v /= k;
    }
    for (double& v : v01) v /= m;
    return auc / (m * k);
  };
  std::vector<double> a10, a01, b10, b01;
  DelongResult r;
  r.auc_a = components(scores_a, a10, a01);
  r.auc_b = components(scores_b, b10, b01);

  auto cov = [](const std::vector<double>& x, const std::vector<double>& y, double mx, double my) {
    if (x.size() < 2) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mx) * (y[i] - my);
    return s / static_cast<double>(x.size() - 1);
  };
  // Variance of the difference from the per-case differences of components.
  std::vector<double> d10(pos.size()), d01(neg.size());
  for (std::size_t i = 0; i < d10.size(); ++i) d10[i] = a10[i] - b10[i];
  for (std::size_t j = 0; j < d01.size(); ++j) d01[j] = a01[j] - b01[j];
  const double diff = r.auc_a - r.auc_b;
  const double var = cov(d10, d10, diff, diff) / m + cov(d01, d01, diff, diff) / k;
  if (var <= 1e-300) {
    r.z = 0.0;
    r.p_value = diff == 0.0 ? 1.0 : 0.0;
    if (diff != 0.0) r.z = diff > 0 ? INFINITY : -INFINITY;
    return r;
  }
  r.z = diff / std::sqrt(var);
  r.p_value = detail::normal_two_sided_p(r.z);
  return r;
}

struct Comparison {
  std::string baseline;
  double p_value = 1.0;
  std::string test;
};

struct MetricReport {
  std::string task;
  std::string model;
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
  std::vector<Comparison> comparisons;
  std::vector<std::string> notes;

  void validate() const {
    if ((metric == "auroc" || metric == "macro_auroc" || metric == "macro_f1" || metric == "c_index") && !(value >= 0.0 && value <= 1.0)) {
      throw ContractError("report: " + metric + " outside [0, 1]");
    }
    for (const auto& c : comparisons)
      if (!(c.p_value >= 0.0 && c.p_value <= 1.0)) throw ContractError("report: p-value outside [0, 1]");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["task"] = task;
    j["model"] = model;
    j["metric"] = metric;
    j["value"] = value;
    j["n"] = n;
    j["comparisons"] = nlohmann::ordered_json::array();
    for (const auto& c : comparisons) j["comparisons"].push_back({{"baseline", c.baseline}, {"p_value", c.p_value}, {"test", c.test}});
    j["notes"] = notes;
    return j;
  }
};

// Aligned plain-text table, one row per (report, comparison).
inline std::string format_report_table(const std::vector<MetricReport>& reports) {
  std::vector<std::array<std::string, 7>> rows{{"task", "model", "metric", "value", "n", "vs", "p (test)"}};
  auto fixed = [](double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
  };
  for (const auto& r : reports) {
    if (r.comparisons.empty()) rows.push_back({r.task, r.model, r.metric, fixed(r.value, 3), std::to_string(r.n), "-", "-"});
    for (const auto& c : r.comparisons) {
      std::string p = c.p_value < 1e-4 ? "<1e-4" : fixed(c.p_value, 4);
      rows.push_back(
          {r.task, r.model, r.metric, fixed(r.value, 3), std::to_string(r.n), c.baseline, p + " (" + c.test + ")"});
    }
  }
  constexpr std::size_t cols = 7;
  std::array<std::size_t, cols> width{};
  for (const auto& row : rows)
    for (std::size_t c = 0; c < cols; ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      os << rows[r][c];
      if (c + 1 < cols) os << std::string(width[c] - rows[r][c].size() + 2, ' ');
    }
    os << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t c = 0; c < cols; ++c) total += width[c] + (c + 1 < cols ? 2 : 0);
      os << std::string(total, '-') << '\n';
    }
  }
  return os.str();
}

}  // namespace protodiff
