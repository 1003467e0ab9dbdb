#pragma once

// Paired tests, effect sizes, rank correlation with confidence intervals,
// dependent-correlation comparison and inter-rater reliability.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "simcbct/core.hpp"

namespace simcbct::stats {

struct StatResult {
  double statistic = 0;
  double p_value = 1;
  std::optional<std::pair<double, double>> ci95;
  std::size_t n = 0;
  std::string method;
};

/// raters x cases; complete matrix.
using RatingMatrix = std::vector<std::vector<double>>;

namespace detail {

inline double clamp_p(double p) { return std::clamp(p, 0.0, 1.0); }

inline double normal_sf2(double z) {
  static const boost::math::normal_distribution<double> nd;
  return clamp_p(2.0 * boost::math::cdf(boost::math::complement(nd, std::abs(z))));
}

inline double normal_quantile(double q) {
  static const boost::math::normal_distribution<double> nd;
  return boost::math::quantile(nd, q);
}

inline double mean(const std::vector<double>& x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Sample variance (n - 1 denominator).
inline double variance(const std::vector<double>& x) {
  const double m = mean(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double mx = mean(x), my = mean(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0) || !(syy > 0)) throw Error(ErrorKind::degenerate_input, "constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace detail

/// 1-based ranks with ties replaced by their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

// ---------------------------------------------------------------------------

inline constexpr std::size_t kWilcoxonExactMax = 12;

/// Two-sided signed-rank test on x - y. Zero differences are dropped. The
/// statistic is min(W+, W-). Exact enumeration over sign patterns up to
/// kWilcoxonExactMax pairs, normal approximation (tie and continuity
/// corrected) above.
inline StatResult wilcoxon_signed_rank(const std::vector<double>& x,
                                       const std::vector<double>& y,
                                       std::optional<bool> force_exact = {}) {
  if (x.size() != y.size()) throw Error(ErrorKind::precondition, "wilcoxon: unpaired samples");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] - y[i] != 0) d.push_back(x[i] - y[i]);
  if (d.empty()) throw Error(ErrorKind::degenerate_input, "wilcoxon: all differences are zero");
  const std::size_t n = d.size();
  if (n < 5) throw Error(ErrorKind::precondition, "wilcoxon: fewer than 5 non-zero differences");

  std::vector<double> mag(n);
  for (std::size_t i = 0; i < n; ++i) mag[i] = std::abs(d[i]);
  const std::vector<double> rank = average_ranks(mag);
  double wplus = 0, total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += rank[i];
    if (d[i] > 0) wplus += rank[i];
  }
  const double wminus = total - wplus;
  const double w = std::min(wplus, wminus);

  StatResult r;
  r.statistic = w;
  r.n = n;
  const bool exact = force_exact ? *force_exact : n <= kWilcoxonExactMax;
  if (exact) {
    if (n > 24) throw Error(ErrorKind::precondition, "wilcoxon: exact enumeration too large");
    // Ranks are multiples of 1/2; doubling keeps the count table integral.
    std::vector<int> r2(n);
    int max_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      r2[i] = static_cast<int>(std::lround(2 * rank[i]));
      max_sum += r2[i];
    }
    std::vector<double> ways(max_sum + 1, 0.0);
    ways[0] = 1;
    for (int v : r2)
      for (int s = max_sum; s >= v; --s) ways[s] += ways[s - v];
    const int w2 = static_cast<int>(std::lround(2 * w));
    double tail = 0;
    for (int s = 0; s <= w2; ++s) tail += ways[s];
    r.p_value = detail::clamp_p(2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
    r.method = "wilcoxon-exact";
  } else {
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1) / 4;
    double tie = 0;
    std::vector<double> sorted = mag;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie += t * t * t - t;
      i = j + 1;
    }
    const double var = nn * (nn + 1) * (2 * nn + 1) / 24 - tie / 48;
    const double z = std::max(0.0, std::abs(wplus - mu) - 0.5) / std::sqrt(var);
    r.p_value = detail::normal_sf2(z);
    r.method = "wilcoxon-normal";
  }
  return r;
}

inline std::vector<double> bonferroni(const std::vector<double>& p,
                                      std::optional<std::size_t> m = {}) {
  const double k = static_cast<double>(m ? *m : p.size());
  std::vector<double> out;
  out.reserve(p.size());
  for (double v : p) {
    if (!(v >= 0 && v <= 1)) throw Error(ErrorKind::domain, "bonferroni: p outside [0,1]");
    out.push_back(std::min(1.0, k * v));
  }
  return out;
}

// ---------------------------------------------------------------------------

enum class EffectMode { independent, paired };

struct EffectSize {
  double d = 0;
  std::string label;
};

inline std::string effect_label(double d) {
  const double a = std::abs(d);
  if (a < 0.2) return "negligible";
  if (a < 0.5) return "small";
  if (a < 0.8) return "medium";
  return "large";
}

/// Independent groups use the pooled SD with n1 + n2 - 2 degrees of freedom.
inline EffectSize cohens_d(const std::vector<double>& x, const std::vector<double>& y,
                           EffectMode mode) {
  if (x.size() < 2 || y.size() < 2)
    throw Error(ErrorKind::precondition, "cohens_d: need n >= 2 per group");
  double d = 0;
  if (mode == EffectMode::paired) {
    if (x.size() != y.size()) throw Error(ErrorKind::precondition, "cohens_d: unpaired samples");
    std::vector<double> diff(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) diff[i] = x[i] - y[i];
    const double sd = std::sqrt(detail::variance(diff));
    if (!(sd > 0)) throw Error(ErrorKind::degenerate_input, "cohens_d: zero SD");
    d = detail::mean(diff) / sd;
  } else {
    const double n1 = static_cast<double>(x.size()), n2 = static_cast<double>(y.size());
    const double pooled =
        std::sqrt(((n1 - 1) * detail::variance(x) + (n2 - 1) * detail::variance(y)) /
                  (n1 + n2 - 2));
    if (!(pooled > 0)) throw Error(ErrorKind::degenerate_input, "cohens_d: zero SD");
    d = (detail::mean(x) - detail::mean(y)) / pooled;
  }
  return {d, effect_label(d)};
}

// ---------------------------------------------------------------------------

/// Spearman rho with t-approximation p and Fisher-z CI95.
inline StatResult spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error(ErrorKind::precondition, "spearman: length mismatch");
  const std::size_t n = x.size();
  if (n < 4) throw Error(ErrorKind::precondition, "spearman: need n >= 4");
  const double rho = detail::pearson(average_ranks(x), average_ranks(y));
  StatResult r;
  r.statistic = rho;
  r.n = n;
  r.method = "spearman";
  const double nn = static_cast<double>(n);
  if (std::abs(rho) >= 1.0) {
    r.p_value = 0.0;
  } else {
    const double t = rho * std::sqrt((nn - 2) / (1 - rho * rho));
    const boost::math::students_t_distribution<double> td(nn - 2);
    r.p_value = detail::clamp_p(2.0 * boost::math::cdf(boost::math::complement(td, std::abs(t))));
  }
  const double zc = detail::normal_quantile(0.975);
  const double z = std::atanh(rho), se = 1.0 / std::sqrt(nn - 3);
  double lo = std::tanh(z - zc * se), hi = std::tanh(z + zc * se);
  if (std::abs(rho) >= 1.0) lo = hi = rho;
  r.ci95 = std::make_pair(lo, hi);
  return r;
}

/// Exact two-sided permutation p for Spearman rho (all n! orderings).
inline double spearman_permutation_p(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n > 8) throw Error(ErrorKind::precondition, "spearman_permutation_p: n > 8");
  const std::vector<double> rx = average_ranks(x), ry = average_ranks(y);
  const double obs = std::abs(detail::pearson(rx, ry));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t hits = 0, total = 0;
  std::vector<double> py(n);
  do {
    for (std::size_t i = 0; i < n; ++i) py[i] = ry[perm[i]];
    if (std::abs(detail::pearson(rx, py)) >= obs - 1e-12) ++hits;
    ++total;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(hits) / static_cast<double>(total);
}

/// Steiger's Z for r_jk vs r_jh sharing variable j, with pooled r-bar in the
/// covariance of the two Fisher-z values.
inline StatResult steiger_z(double r_jk, double r_jh, double r_kh, std::size_t n) {
  for (double r : {r_jk, r_jh, r_kh})
    if (!(std::abs(r) < 1.0))
      throw Error(ErrorKind::domain, "steiger_z: correlations must lie in (-1, 1)");
  if (n < 10) throw Error(ErrorKind::precondition, "steiger_z: need n >= 10");
  const double rbar = 0.5 * (r_jk + r_jh);
  const double rb2 = rbar * rbar;
  const double psi = r_kh * (1 - 2 * rb2) - 0.5 * rb2 * (1 - 2 * rb2 - r_kh * r_kh);
  const double c = psi / ((1 - rb2) * (1 - rb2));
  if (!(c < 1.0))
    throw Error(ErrorKind::domain, "steiger_z: correlations are not jointly consistent");
  const double z =
      (std::atanh(r_jk) - std::atanh(r_jh)) * std::sqrt(static_cast<double>(n) - 3) /
      std::sqrt(2 - 2 * c);
  StatResult r;
  r.statistic = z;
  r.p_value = detail::normal_sf2(z);
  r.n = n;
  r.method = "steiger-z";
  return r;
}

// ---------------------------------------------------------------------------

namespace detail {

inline void check_matrix(const RatingMatrix& m, std::size_t min_raters, std::size_t min_cases,
                         const char* op) {
  if (m.size() < min_raters)
    throw Error(ErrorKind::precondition, std::string(op) + ": too few raters");
  const std::size_t cases = m.front().size();
  if (cases < min_cases) throw Error(ErrorKind::precondition, std::string(op) + ": too few cases");
  for (const auto& row : m)
    if (row.size() != cases)
      throw Error(ErrorKind::precondition, std::string(op) + ": incomplete rating matrix");
}

}  // namespace detail

/// Free-marginal multirater kappa over k categories.
inline double randolph_kappa(const RatingMatrix& ratings, int k) {
  if (k < 2) throw Error(ErrorKind::precondition, "randolph_kappa: k must be >= 2");
  detail::check_matrix(ratings, 2, 1, "randolph_kappa");
  const double raters = static_cast<double>(ratings.size());
  const std::size_t cases = ratings.front().size();
  double po = 0;
  for (std::size_t c = 0; c < cases; ++c) {
    std::map<double, int> counts;
    for (const auto& row : ratings) ++counts[row[c]];
    double agree = 0;
    for (const auto& [label, cnt] : counts) agree += static_cast<double>(cnt) * (cnt - 1);
    po += agree / (raters * (raters - 1));
  }
  po /= static_cast<double>(cases);
  const double pe = 1.0 / k;
  return (po - pe) / (1 - pe);
}

/// ICC(3,k): two-way mixed effects, consistency, average of k raters.
inline double icc(const RatingMatrix& ratings) {
  detail::check_matrix(ratings, 2, 2, "icc");
  const std::size_t k = ratings.size(), n = ratings.front().size();
  double grand = 0;
  for (const auto& row : ratings)
    for (double v : row) grand += v;
  grand /= static_cast<double>(k * n);
  double ssr = 0, ssc = 0, sst = 0;
  for (std::size_t c = 0; c < n; ++c) {
    double m = 0;
    for (std::size_t r = 0; r < k; ++r) m += ratings[r][c];
    m /= static_cast<double>(k);
    ssr += (m - grand) * (m - grand);
  }
  ssr *= static_cast<double>(k);
  for (std::size_t r = 0; r < k; ++r) {
    const double m = detail::mean(ratings[r]);
    ssc += (m - grand) * (m - grand);
    for (double v : ratings[r]) sst += (v - grand) * (v - grand);
  }
  ssc *= static_cast<double>(n);
  const double sse = std::max(0.0, sst - ssr - ssc);
  const double msr = ssr / static_cast<double>(n - 1);
  const double mse = sse / static_cast<double>((n - 1) * (k - 1));
  if (!(msr > 0)) throw Error(ErrorKind::degenerate_input, "icc: zero between-case variance");
  return (msr - mse) / msr;
}

}  // namespace simcbct::stats
