#include "crossmil/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace crossmil {

std::string_view weight_method_name(WeightMethod m) {
  switch (m) {
    case WeightMethod::none: return "none";
    case WeightMethod::s2t: return "s2t";
    case WeightMethod::t2s: return "t2s";
    case WeightMethod::log: return "log";
  }
  return "unknown";
}

WeightMethod parse_weight_method(std::string_view name) {
  for (WeightMethod m : {WeightMethod::none, WeightMethod::s2t, WeightMethod::t2s, WeightMethod::log})
    if (weight_method_name(m) == name) return m;
  throw ConfigError("unknown weighting method '" + std::string(name) + "'");
}

namespace {

// Mean over rows of `from` of the squared distance to the nearest row of `to`.
double mean_nearest_sq(const RowMatrix& from, const RowMatrix& to) {
  if (from.rows() == 0 || to.rows() == 0) throw DataError("bag distance needs nonempty bags");
  if (from.cols() != to.cols()) throw DataError("dimension mismatch between bags");
  const Eigen::Index m = from.cols();
  double total = 0.0;
  for (Eigen::Index i = 0; i < from.rows(); ++i) {
    const double* a = from.row(i).data();
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < to.rows(); ++k) {
      const double* b = to.row(k).data();
      double d = 0.0;
      for (Eigen::Index c = 0; c < m; ++c) {
        const double t = a[c] - b[c];
        d += t * t;
      }
      best = std::min(best, d);
    }
    total += best;
  }
  return total / double(from.rows());
}

}  // namespace

double dist_s2t(const RowMatrix& source, const RowMatrix& target) { return mean_nearest_sq(source, target); }

double dist_t2s(const RowMatrix& source, const RowMatrix& target) { return mean_nearest_sq(target, source); }

BagWeights scale_distance_weights(std::span<const double> distances, WeightMethod method) {
  if (distances.empty()) throw DataError("no source distances to scale");
  for (double d : distances)
    if (std::isnan(d)) throw DataError("NaN bag distance");
  const auto [lo, hi] = std::minmax_element(distances.begin(), distances.end());
  BagWeights out;
  out.method = method;
  out.weights.resize(distances.size(), 1.0);
  if (*hi == *lo) return out;
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < distances.size(); ++i) out.weights[i] = (*hi - distances[i]) / range;
  return out;
}

BagWeights logistic_weights(std::span<const RowMatrix* const> source, const RowMatrix& target, double lambda,
                            const TrainConfig& cfg) {
  if (source.empty()) throw DataError("logistic weights need at least one source bag");
  if (target.rows() == 0) throw DataError("target bag is empty");
  Eigen::Index rows = target.rows();
  for (const RowMatrix* b : source) {
    if (b->cols() != target.cols()) throw DataError("dimension mismatch between source and target bags");
    if (b->rows() == 0) throw DataError("empty source bag");
    rows += b->rows();
  }
  RowMatrix x(rows, target.cols());
  std::vector<int> y;
  y.reserve(static_cast<std::size_t>(rows));
  Eigen::Index r = 0;
  for (const RowMatrix* b : source) {
    x.middleRows(r, b->rows()) = *b;
    r += b->rows();
    y.insert(y.end(), static_cast<std::size_t>(b->rows()), -1);
  }
  x.middleRows(r, target.rows()) = target;
  y.insert(y.end(), static_cast<std::size_t>(target.rows()), 1);
  const std::vector<double> s(y.size(), 1.0);

  const TrainResult domain = train_weighted_logistic(x, y, s, lambda, cfg);
  BagWeights out;
  out.method = WeightMethod::log;
  if (domain.degenerate) {
    out.weights.assign(source.size(), 1.0);
    out.fallback = true;
    return out;
  }
  for (const RowMatrix* b : source) out.weights.push_back(instance_posteriors(domain.model, *b).mean());
  return out;
}

BagWeights compute_bag_weights(WeightMethod method, std::span<const RowMatrix* const> source,
                               const RowMatrix& target, double lambda, const TrainConfig& cfg) {
  switch (method) {
    case WeightMethod::none: {
      if (source.empty()) throw DataError("no source bags");
      return BagWeights{WeightMethod::none, std::vector<double>(source.size(), 1.0), false};
    }
    case WeightMethod::s2t:
    case WeightMethod::t2s: {
      std::vector<double> d;
      d.reserve(source.size());
      for (const RowMatrix* b : source)
        d.push_back(method == WeightMethod::s2t ? dist_s2t(*b, target) : dist_t2s(*b, target));
      return scale_distance_weights(d, method);
    }
    case WeightMethod::log: return logistic_weights(source, target, lambda, cfg);
  }
  throw ConfigError("unknown weighting method");
}

}  // namespace crossmil
