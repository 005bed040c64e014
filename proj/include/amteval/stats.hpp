// Group summaries, Welch's t-test, Cohen's d, Bonferroni correction and a
// two-way ANOVA, with the special functions behind their p-values.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace amteval::stats {

class DegenerateInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Modified Lentz evaluation of the incomplete beta continued fraction.
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw std::runtime_error("incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double reg_inc_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0) || !(x >= 0.0 && x <= 1.0)) {
    throw std::domain_error("reg_inc_beta requires a > 0, b > 0, 0 <= x <= 1");
  }
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  // The fraction converges fastest below the mean; use symmetry above it.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

inline double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw std::domain_error("student t requires df > 0");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
  return t > 0 ? 1.0 - tail : tail;
}

/// P(|T| >= |t|).
inline double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw std::domain_error("student t requires df > 0");
  if (std::isinf(t)) return 0.0;
  return reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
}

inline double f_cdf(double f, double df1, double df2) {
  if (!(df1 > 0.0) || !(df2 > 0.0)) throw std::domain_error("F distribution requires positive df");
  if (f <= 0.0) return 0.0;
  return reg_inc_beta(df1 / 2.0, df2 / 2.0, df1 * f / (df1 * f + df2));
}

/// Upper tail P(F >= f), evaluated directly to keep small p-values accurate.
inline double f_survival(double f, double df1, double df2) {
  if (!(df1 > 0.0) || !(df2 > 0.0)) throw std::domain_error("F distribution requires positive df");
  if (f <= 0.0) return 1.0;
  if (std::isinf(f)) return 0.0;
  return reg_inc_beta(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f));
}

struct GroupSummary {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;  // n - 1 denominator

  void check() const {
    if (n < 2) throw std::invalid_argument("group summary needs n >= 2");
    if (!(sd >= 0.0)) throw std::invalid_argument("group standard deviation must be non-negative");
  }
};

inline GroupSummary summarize(std::span<const double> samples) {
  if (samples.size() < 2) throw std::invalid_argument("summarize needs at least 2 samples");
  // Welford's running update.
  double mean = 0.0, m2 = 0.0;
  std::size_t k = 0;
  for (double x : samples) {
    ++k;
    const double delta = x - mean;
    mean += delta / static_cast<double>(k);
    m2 += delta * (x - mean);
  }
  return {samples.size(), mean, std::sqrt(m2 / static_cast<double>(samples.size() - 1))};
}

struct TestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
  double d = 0.0;  // Cohen's d, pooled
};

inline double pooled_sd(const GroupSummary& g1, const GroupSummary& g2) {
  const double n1 = static_cast<double>(g1.n), n2 = static_cast<double>(g2.n);
  return std::sqrt(((n1 - 1.0) * g1.sd * g1.sd + (n2 - 1.0) * g2.sd * g2.sd) / (n1 + n2 - 2.0));
}

inline double cohens_d(const GroupSummary& g1, const GroupSummary& g2) {
  g1.check();
  g2.check();
  const double sp = pooled_sd(g1, g2);
  if (sp == 0.0) throw DegenerateInput("pooled standard deviation is zero");
  return (g1.mean - g2.mean) / sp;
}

/// Welch's unequal-variance t-test from summary statistics.
inline TestResult welch_t(const GroupSummary& g1, const GroupSummary& g2) {
  g1.check();
  g2.check();
  if (g1.sd == 0.0 && g2.sd == 0.0) throw DegenerateInput("both groups have zero variance");
  const double v1 = g1.sd * g1.sd / static_cast<double>(g1.n);
  const double v2 = g2.sd * g2.sd / static_cast<double>(g2.n);
  TestResult r;
  r.t = (g1.mean - g2.mean) / std::sqrt(v1 + v2);
  r.df = (v1 + v2) * (v1 + v2) /
         (v1 * v1 / static_cast<double>(g1.n - 1) + v2 * v2 / static_cast<double>(g2.n - 1));
  r.p = student_t_two_sided_p(r.t, r.df);
  r.d = cohens_d(g1, g2);
  return r;
}

inline double bonferroni(double p, int comparisons) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("p-value outside [0, 1]");
  if (comparisons < 1) throw std::domain_error("Bonferroni needs at least one comparison");
  return std::min(1.0, p * comparisons);
}

// Two-way ANOVA

enum class SsType { kTypeI, kTypeII };

struct AnovaRecord {
  std::string a;  // factor A level
  std::string b;  // factor B level
  double response = 0.0;
};

struct AnovaRow {
  std::string source;
  double ss = 0.0;
  double df = 0.0;
  double ms = 0.0;
  double f = 0.0;  // 0 for the residual row
  double p = 1.0;
};

struct AnovaTable {
  AnovaRow a, b, interaction, residual;
  double ss_total = 0.0;
  SsType type = SsType::kTypeII;
  std::vector<std::string> a_levels, b_levels;
};

namespace detail {

// Residual sum of squares of y regressed on an intercept plus dummy columns
// for the selected factors (treatment coding).
inline double additive_rss(const std::vector<int>& ia, const std::vector<int>& ib, const Eigen::VectorXd& y,
                           int levels_a, int levels_b) {
  const auto n = static_cast<Eigen::Index>(y.size());
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, 1 + (levels_a - 1) + (levels_b - 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    if (ia[i] > 0) x(i, ia[i]) = 1.0;
    if (ib[i] > 0) x(i, levels_a - 1 + ib[i]) = 1.0;
  }
  const Eigen::VectorXd beta = x.colPivHouseholderQr().solve(y);
  return (y - x * beta).squaredNorm();
}

inline double group_rss(const std::vector<int>& idx, const Eigen::VectorXd& y, int levels) {
  std::vector<double> sum(levels, 0.0);
  std::vector<double> count(levels, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    sum[idx[i]] += y[static_cast<Eigen::Index>(i)];
    count[idx[i]] += 1.0;
  }
  double rss = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double r = y[static_cast<Eigen::Index>(i)] - sum[idx[i]] / count[idx[i]];
    rss += r * r;
  }
  return rss;
}

inline void finish_row(AnovaRow& row, const AnovaRow& residual) {
  row.ss = std::max(0.0, row.ss);
  row.ms = row.ss / row.df;
  if (residual.ms > 0.0) {
    row.f = row.ms / residual.ms;
    row.p = f_survival(row.f, row.df, residual.df);
  } else {
    // Perfect fit: no residual variance to compare against.
    row.f = row.ss > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    row.p = row.ss > 0.0 ? 0.0 : 1.0;
  }
}

}  // namespace detail

/// Full-interaction two-way ANOVA. Type II sums of squares by default (equal
/// to the classical decomposition for balanced designs); Type I enters A
/// before B.
inline AnovaTable two_way_anova(const std::vector<AnovaRecord>& records, SsType type = SsType::kTypeII) {
  std::map<std::string, int> a_index, b_index;
  for (const auto& r : records) {
    a_index.emplace(r.a, 0);
    b_index.emplace(r.b, 0);
  }
  if (a_index.size() < 2 || b_index.size() < 2) {
    throw std::invalid_argument("two-way ANOVA needs at least 2 levels per factor");
  }
  AnovaTable table;
  table.type = type;
  for (auto& [name, i] : a_index) {
    i = static_cast<int>(table.a_levels.size());
    table.a_levels.push_back(name);
  }
  for (auto& [name, i] : b_index) {
    i = static_cast<int>(table.b_levels.size());
    table.b_levels.push_back(name);
  }
  const int la = static_cast<int>(a_index.size()), lb = static_cast<int>(b_index.size());

  const std::size_t n = records.size();
  std::vector<int> ia(n), ib(n), cell(n);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  std::vector<int> cell_count(static_cast<std::size_t>(la * lb), 0);
  for (std::size_t i = 0; i < n; ++i) {
    ia[i] = a_index[records[i].a];
    ib[i] = b_index[records[i].b];
    cell[i] = ia[i] * lb + ib[i];
    ++cell_count[static_cast<std::size_t>(cell[i])];
    y[static_cast<Eigen::Index>(i)] = records[i].response;
  }
  for (int c = 0; c < la * lb; ++c) {
    if (cell_count[static_cast<std::size_t>(c)] == 0) {
      throw std::invalid_argument("empty ANOVA cell (" + table.a_levels[c / lb] + ", " + table.b_levels[c % lb] + ")");
    }
  }
  const double df_res = static_cast<double>(n) - la * lb;
  if (df_res <= 0) throw std::invalid_argument("two-way ANOVA has no residual degrees of freedom");

  const double mean = y.mean();
  table.ss_total = (y.array() - mean).square().sum();
  const double rss_full = detail::group_rss(cell, y, la * lb);
  const double rss_a = detail::group_rss(ia, y, la);
  const double rss_b = detail::group_rss(ib, y, lb);
  const double rss_add = detail::additive_rss(ia, ib, y, la, lb);

  table.a = {"A", type == SsType::kTypeII ? rss_b - rss_add : table.ss_total - rss_a, la - 1.0};
  table.b = {"B", rss_a - rss_add, lb - 1.0};
  table.interaction = {"A:B", rss_add - rss_full, (la - 1.0) * (lb - 1.0)};
  table.residual = {"Residual", rss_full, df_res, rss_full / df_res, 0.0, 1.0};
  detail::finish_row(table.a, table.residual);
  detail::finish_row(table.b, table.residual);
  detail::finish_row(table.interaction, table.residual);
  return table;
}

}  // namespace amteval::stats
