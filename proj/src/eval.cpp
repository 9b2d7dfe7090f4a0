#include "crossmil/eval.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace crossmil {

namespace {

void check_scored(const ScoredLabels& s) {
  if (s.scores.size() != s.labels.size()) throw DataError("scores and labels differ in length");
  std::size_t pos = 0;
  for (Label l : s.labels) pos += l == Label::positive;
  if (pos == 0 || pos == s.labels.size()) throw DataError("AUC needs both classes present");
  for (double v : s.scores)
    if (std::isnan(v)) throw DataError("NaN score");
}

double psi(double pos, double neg) { return pos > neg ? 1.0 : (pos == neg ? 0.5 : 0.0); }

}  // namespace

std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double auc(const ScoredLabels& s) {
  check_scored(s);
  const auto ranks = midranks(s.scores);
  double rank_sum = 0.0, n_pos = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i)
    if (s.labels[i] == Label::positive) {
      rank_sum += ranks[i];
      n_pos += 1.0;
    }
  const double n_neg = double(ranks.size()) - n_pos;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

DeLongComponents delong_components(const ScoredLabels& s) {
  check_scored(s);
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < s.scores.size(); ++i)
    (s.labels[i] == Label::positive ? pos : neg).push_back(s.scores[i]);
  DeLongComponents c;
  c.v10.assign(pos.size(), 0.0);
  c.v01.assign(neg.size(), 0.0);
  for (std::size_t i = 0; i < pos.size(); ++i)
    for (std::size_t j = 0; j < neg.size(); ++j) {
      const double v = psi(pos[i], neg[j]);
      c.v10[i] += v;
      c.v01[j] += v;
    }
  for (double& v : c.v10) v /= double(neg.size());
  for (double& v : c.v01) v /= double(pos.size());
  c.auc = std::accumulate(c.v10.begin(), c.v10.end(), 0.0) / double(pos.size());
  return c;
}

DeLongResult delong_test(const ScoredLabels& a, const ScoredLabels& b) {
  if (a.labels != b.labels) throw DataError("DeLong test needs identical cases for both classifiers");
  const DeLongComponents ca = delong_components(a), cb = delong_components(b);
  const double m = double(ca.v10.size()), n = double(ca.v01.size());

  auto cov = [](const std::vector<double>& x, double mx, const std::vector<double>& y, double my) {
    if (x.size() < 2) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mx) * (y[i] - my);
    return s / double(x.size() - 1);
  };
  DeLongResult r;
  r.auc_a = ca.auc;
  r.auc_b = cb.auc;
  r.var_a = cov(ca.v10, ca.auc, ca.v10, ca.auc) / m + cov(ca.v01, ca.auc, ca.v01, ca.auc) / n;
  r.var_b = cov(cb.v10, cb.auc, cb.v10, cb.auc) / m + cov(cb.v01, cb.auc, cb.v01, cb.auc) / n;
  r.cov_ab = cov(ca.v10, ca.auc, cb.v10, cb.auc) / m + cov(ca.v01, ca.auc, cb.v01, cb.auc) / n;
  const double var_diff = r.var_a + r.var_b - 2.0 * r.cov_ab;
  const double diff = r.auc_a - r.auc_b;
  if (!(var_diff > 1e-300)) {
    if (diff == 0.0) {
      r.z = 0.0;
      r.p = 1.0;
    } else {
      r.z = diff > 0 ? INFINITY : -INFINITY;
      r.p = 0.0;
    }
    return r;
  }
  r.z = diff / std::sqrt(var_diff);
  r.p = std::erfc(std::abs(r.z) / std::sqrt(2.0));
  return r;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DataError("spearman inputs differ in length");
  if (x.size() < 3) throw DataError("spearman needs at least 3 pairs");
  const auto rx = midranks(x), ry = midranks(y);
  const double n = double(rx.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw DataError("spearman undefined for zero rank variance");
  return sxy / std::sqrt(sxx * syy);
}

double nemenyi_q(int k, double alpha) {
  // q_alpha = studentized range quantile / sqrt(2), infinite degrees of freedom.
  static constexpr std::array<double, 9> q05{1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164};
  static constexpr std::array<double, 9> q10{1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920};
  if (k < 2 || k > 10) throw ConfigError("Nemenyi table covers 2 to 10 methods");
  if (alpha == 0.05) return q05[static_cast<std::size_t>(k - 2)];
  if (alpha == 0.10) return q10[static_cast<std::size_t>(k - 2)];
  throw ConfigError("Nemenyi table covers alpha 0.05 and 0.10 only");
}

FriedmanNemenyi friedman_nemenyi(const RankTable& t, double alpha) {
  const std::size_t n_rows = t.rows.size();
  if (n_rows < 2) throw DataError("rank table needs at least 2 rows");
  const std::size_t k = t.rows.front().size();
  if (k < 2) throw DataError("rank table needs at least 2 methods");
  FriedmanNemenyi out;
  out.average_ranks.assign(k, 0.0);
  for (const auto& row : t.rows) {
    if (row.size() != k) throw DataError("rank table rows differ in length");
    std::vector<double> negated(k);
    for (std::size_t j = 0; j < k; ++j) {
      if (!std::isfinite(row[j])) throw DataError("rank table has a missing entry");
      negated[j] = -row[j];
    }
    const auto r = midranks(negated);
    for (std::size_t j = 0; j < k; ++j) out.average_ranks[j] += r[j];
  }
  const double N = double(n_rows), K = double(k);
  double sum_sq = 0.0;
  for (double& r : out.average_ranks) {
    r /= N;
    sum_sq += r * r;
  }
  out.statistic = 12.0 * N / (K * (K + 1.0)) * (sum_sq - K * (K + 1.0) * (K + 1.0) / 4.0);
  if (out.statistic < 0.0) out.statistic = 0.0;
  out.p = boost::math::gamma_q((K - 1.0) / 2.0, out.statistic / 2.0);
  out.critical_difference = nemenyi_q(static_cast<int>(k), alpha) * std::sqrt(K * (K + 1.0) / (6.0 * N));
  return out;
}

double sign_test_one_sided(std::span<const double> differences) {
  int n = 0, wins = 0;
  for (double d : differences) {
    if (d == 0.0 || std::isnan(d)) continue;
    ++n;
    wins += d > 0.0;
  }
  if (n == 0) return 1.0;
  double p = 0.0;
  for (int i = wins; i <= n; ++i) {
    double c = 1.0;
    for (int j = 0; j < i; ++j) c = c * double(n - j) / double(j + 1);
    p += c * std::pow(0.5, n);
  }
  return std::min(p, 1.0);
}

}  // namespace crossmil
