#pragma once

#include "crossmil/classifier.hpp"
#include "crossmil/core.hpp"

#include <span>
#include <string_view>
#include <vector>

namespace crossmil {

enum class WeightMethod { none, s2t, t2s, log };

std::string_view weight_method_name(WeightMethod m);
WeightMethod parse_weight_method(std::string_view name);

// Raw per-source-bag weights in source order.
struct BagWeights {
  WeightMethod method = WeightMethod::none;
  std::vector<double> weights;
  bool fallback = false;  // degenerate input, uniform weights substituted
};

// Mean over source instances of the squared distance to the nearest target
// instance. Bags are instance matrices (one row per instance).
double dist_s2t(const RowMatrix& source, const RowMatrix& target);
// Mean over target instances of the squared distance to the nearest source instance.
double dist_t2s(const RowMatrix& source, const RowMatrix& target);

// (d_max - d_i) / (d_max - d_min); all ones when every distance is equal.
BagWeights scale_distance_weights(std::span<const double> distances, WeightMethod method = WeightMethod::s2t);

// Mean target-class posterior of a source(-1) vs target(+1) logistic model
// over each source bag's instances.
BagWeights logistic_weights(std::span<const RowMatrix* const> source, const RowMatrix& target, double lambda = 1.0,
                            const TrainConfig& cfg = {});

// Target bags enter as instances only; their labels are never seen here.
BagWeights compute_bag_weights(WeightMethod method, std::span<const RowMatrix* const> source,
                               const RowMatrix& target, double lambda = 1.0, const TrainConfig& cfg = {});

}  // namespace crossmil
