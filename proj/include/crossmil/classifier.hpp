#pragma once

#include "crossmil/core.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <span>
#include <string>
#include <vector>

namespace crossmil {

struct LogisticModel {
  Eigen::VectorXd w;
  double intercept = 0.0;
  double lambda = 1.0;

  std::size_t dim() const { return static_cast<std::size_t>(w.size()); }
};

struct TrainConfig {
  int max_iterations = 500;
  double gradient_tolerance = 1e-6;  // on the infinity norm
};

struct TrainResult {
  LogisticModel model;
  bool converged = false;
  bool degenerate = false;  // single-class input, model scores the prior
  int iterations = 0;
  std::vector<double> objective_trace;  // one entry per accepted iterate
};

// (1/ln 2) ln(1 + exp(-y (w.x + b))), overflow-safe.
double logistic_loss(const LogisticModel& model, std::span<const double> x, Label y);

struct ObjectiveValue {
  double value = 0.0;
  Eigen::VectorXd grad_w;
  double grad_intercept = 0.0;
};

// sum_i s_i L(w, x_i, y_i) + lambda |w|^2 with an unregularized intercept.
ObjectiveValue weighted_logistic_objective(const RowMatrix& x, std::span<const int> y, std::span<const double> s,
                                           double lambda, const Eigen::VectorXd& w, double intercept);

// Rescales weights so they sum to their count.
std::vector<double> normalize_weights(std::span<const double> raw);

// Limited-memory BFGS from zero with a monotone backtracking line search.
// `y` holds +1/-1; `s` is expected to be normalized to sum N.
TrainResult train_weighted_logistic(const RowMatrix& x, std::span<const int> y, std::span<const double> s,
                                    double lambda, const TrainConfig& cfg = {});

double instance_posterior(const LogisticModel& model, std::span<const double> x);
Eigen::VectorXd instance_posteriors(const LogisticModel& model, const RowMatrix& x);

inline constexpr double kPosteriorClamp = 1e-12;

enum class BagRule { average, noisy_or };

std::string_view bag_rule_name(BagRule r);
BagRule parse_bag_rule(std::string_view name);

// Bag posterior from instance posteriors (clamped to [1e-12, 1 - 1e-12]).
double combine_average(std::span<const double> p);
double combine_noisy_or(std::span<const double> p);

double bag_posterior_average(const LogisticModel& model, const RowMatrix& bag);
double bag_posterior_noisyor(const LogisticModel& model, const RowMatrix& bag);
double bag_posterior(const LogisticModel& model, const RowMatrix& bag, BagRule rule);

// Instances inherit their bag's label and weight; weights are renormalized
// to sum N before training.
TrainResult simplemil_fit(std::span<const Bag* const> bags, std::span<const double> bag_weights, double lambda,
                          const TrainConfig& cfg = {});
TrainResult simplemil_fit(const std::vector<Bag>& bags, std::span<const double> bag_weights, double lambda,
                          const TrainConfig& cfg = {});

nlohmann::ordered_json to_json(const LogisticModel& m, const std::string& feature_spec_id,
                               const std::string& trained_on);
LogisticModel logistic_model_from_json(const nlohmann::ordered_json& j);

}  // namespace crossmil
