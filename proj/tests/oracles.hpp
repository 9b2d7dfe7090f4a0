#pragma once

// Slow reference implementations used only by the tests. None of them share
// code with the library.

#include "crossmil/core.hpp"
#include "crossmil/synthvol.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace oracle {

// Plain triple sum out[p] = sum_t kx[tx] ky[ty] kz[tz] in[p - t], zero outside.
inline std::vector<double> dense_convolution(const std::vector<double>& in, crossmil::Dims d,
                                             const std::vector<double>& kx, const std::vector<double>& ky,
                                             const std::vector<double>& kz) {
  const int rx = int(kx.size() / 2), ry = int(ky.size() / 2), rz = int(kz.size() / 2);
  std::vector<double> out(d.count(), 0.0);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        double acc = 0.0;
        for (int tz = -rz; tz <= rz; ++tz)
          for (int ty = -ry; ty <= ry; ++ty)
            for (int tx = -rx; tx <= rx; ++tx) {
              const int sx = x - tx, sy = y - ty, sz = z - tz;
              if (!d.contains(sx, sy, sz)) continue;
              acc += kx[tx + rx] * ky[ty + ry] * kz[tz + rz] * in[d.index(sx, sy, sz)];
            }
        out[d.index(x, y, z)] = acc;
      }
  return out;
}

// Roots of the characteristic polynomial of a symmetric 3x3 matrix by the
// trigonometric formula, sorted by descending magnitude.
inline std::array<double, 3> symmetric_eigenvalues(const double a[3][3]) {
  const double p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
  std::array<double, 3> ev;
  if (p1 == 0.0) {
    ev = {a[0][0], a[1][1], a[2][2]};
  } else {
    const double q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    const double p2 = (a[0][0] - q) * (a[0][0] - q) + (a[1][1] - q) * (a[1][1] - q) + (a[2][2] - q) * (a[2][2] - q) +
                      2.0 * p1;
    const double p = std::sqrt(p2 / 6.0);
    double b[3][3];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) b[i][j] = (a[i][j] - (i == j ? q : 0.0)) / p;
    const double det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) -
                       b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0]) +
                       b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    const double r = std::clamp(det / 2.0, -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    ev[0] = q + 2.0 * p * std::cos(phi);
    ev[2] = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
    ev[1] = 3.0 * q - ev[0] - ev[2];
  }
  std::sort(ev.begin(), ev.end(), [](double u, double v) { return std::abs(u) > std::abs(v); });
  return ev;
}

inline double pair_count_auc(const std::vector<double>& s, const std::vector<crossmil::Label>& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != crossmil::Label::positive || y[j] != crossmil::Label::negative) continue;
      den += 1.0;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return num / den;
}

// Variance of the pair-counting AUC over stratified case resamples.
inline double bootstrap_auc_variance(const std::vector<double>& s, const std::vector<crossmil::Label>& y,
                                     int replicates, std::uint64_t seed) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < s.size(); ++i) (y[i] == crossmil::Label::positive ? pos : neg).push_back(s[i]);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pp(0, pos.size() - 1), pn(0, neg.size() - 1);
  double sum = 0.0, sum_sq = 0.0;
  std::vector<double> rs(s.size());
  std::vector<crossmil::Label> ry(s.size());
  for (int r = 0; r < replicates; ++r) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < pos.size(); ++i, ++k) {
      rs[k] = pos[pp(rng)];
      ry[k] = crossmil::Label::positive;
    }
    for (std::size_t j = 0; j < neg.size(); ++j, ++k) {
      rs[k] = neg[pn(rng)];
      ry[k] = crossmil::Label::negative;
    }
    double num = 0.0;
    for (std::size_t i = 0; i < pos.size(); ++i)
      for (std::size_t j = pos.size(); j < rs.size(); ++j) num += rs[i] > rs[j] ? 1.0 : (rs[i] == rs[j] ? 0.5 : 0.0);
    const double a = num / double(pos.size() * neg.size());
    sum += a;
    sum_sq += a * a;
  }
  const double m = sum / replicates;
  return (sum_sq / replicates - m * m) * replicates / (replicates - 1.0);
}

// rank = (#smaller) + (#equal + 1) / 2
inline std::vector<double> count_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double w : v) {
      if (w < v[i]) ++less;
      if (w == v[i]) ++equal;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(count_ranks(x), count_ranks(y));
}

inline double nearest_sq(const crossmil::RowMatrix& pts, Eigen::Index row, const crossmil::RowMatrix& other) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < other.rows(); ++k) {
    double d = 0.0;
    for (Eigen::Index c = 0; c < pts.cols(); ++c) {
      const double t = pts(row, c) - other(k, c);
      d += t * t;
    }
    best = std::min(best, d);
  }
  return best;
}

inline double brute_s2t(const crossmil::RowMatrix& x, const crossmil::RowMatrix& z) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) s += nearest_sq(x, i, z);
  return s / double(x.rows());
}

// Direct kernel sum at every grid point, normalized to sum 1.
inline std::vector<double> naive_kde(const std::vector<double>& values, double h, double lo, double hi, int points) {
  std::vector<double> out(points, 0.0);
  double total = 0.0;
  for (int g = 0; g < points; ++g) {
    const double t = lo + (hi - lo) * g / (points - 1);
    for (double v : values) out[g] += std::exp(-0.5 * ((t - v) / h) * ((t - v) / h));
    total += out[g];
  }
  for (double& o : out) o /= total;
  return out;
}

// Population mean/std column by column with two passes.
inline void two_pass_stats(const std::vector<std::vector<double>>& rows, std::vector<double>& mean,
                           std::vector<double>& sd) {
  const std::size_t m = rows.front().size();
  mean.assign(m, 0.0);
  sd.assign(m, 0.0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < m; ++c) mean[c] += r[c];
  for (double& v : mean) v /= double(rows.size());
  for (const auto& r : rows)
    for (std::size_t c = 0; c < m; ++c) sd[c] += (r[c] - mean[c]) * (r[c] - mean[c]);
  for (double& v : sd) v = std::sqrt(v / double(rows.size()));
}

inline crossmil::RowMatrix random_matrix(std::mt19937_64& rng, int rows, int cols, double scale = 1.0,
                                         double shift = 0.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  crossmil::RowMatrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = shift + scale * n(rng);
  return m;
}

// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("crossmil_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace oracle
