#pragma once

#include "crossmil/core.hpp"

#include <span>
#include <vector>

namespace crossmil {

struct ScoredLabels {
  std::vector<double> scores;
  std::vector<Label> labels;
};

// Mann-Whitney estimate with ties counted 1/2.
double auc(const ScoredLabels& s);

// Structural components: v10[i] for each positive, v01[j] for each negative.
struct DeLongComponents {
  std::vector<double> v10;
  std::vector<double> v01;
  double auc = 0.0;
};

DeLongComponents delong_components(const ScoredLabels& s);

struct DeLongResult {
  double auc_a = 0.0, auc_b = 0.0;
  double var_a = 0.0, var_b = 0.0, cov_ab = 0.0;
  double z = 0.0;
  double p = 1.0;  // two-sided
};

// Paired comparison of two score sets on the same cases.
DeLongResult delong_test(const ScoredLabels& a, const ScoredLabels& b);

// Pearson correlation of midranks.
double spearman(std::span<const double> x, std::span<const double> y);

// Average ranks (1 = smallest) with ties sharing the mean rank.
std::vector<double> midranks(std::span<const double> values);

// rows = experiment cells, columns = methods; higher values are better.
struct RankTable {
  std::vector<std::vector<double>> rows;
};

struct FriedmanNemenyi {
  std::vector<double> average_ranks;  // rank 1 = best
  double statistic = 0.0;             // chi-square with k-1 dof
  double p = 1.0;
  double critical_difference = 0.0;
};

FriedmanNemenyi friedman_nemenyi(const RankTable& t, double alpha = 0.05);

// Studentized-range based Nemenyi constant for k methods (k = 2..10, alpha 0.05 or 0.10).
double nemenyi_q(int k, double alpha = 0.05);

// P(at least `successes` of the nonzero differences are positive) under a fair coin.
double sign_test_one_sided(std::span<const double> differences);

}  // namespace crossmil
