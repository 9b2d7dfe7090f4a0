#include "crossmil/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>

namespace crossmil {

using json = nlohmann::ordered_json;

namespace {

constexpr double kInvLn2 = 1.0 / std::numbers::ln2;

// ln(1 + exp(t)) without overflow.
double softplus(double t) { return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t))); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_training_inputs(const RowMatrix& x, std::span<const int> y, std::span<const double> s) {
  if (x.rows() == 0) throw DataError("empty training set");
  if (static_cast<std::size_t>(x.rows()) != y.size() || y.size() != s.size())
    throw DataError("training data, labels and weights differ in length");
  if (!x.allFinite()) throw DataError("NaN or Inf in training features");
  for (int v : y)
    if (v != 1 && v != -1) throw DataError("training labels must be +1 or -1");
  for (double v : s)
    if (!std::isfinite(v) || v < 0) throw DataError("instance weights must be finite and nonnegative");
}

}  // namespace

double logistic_loss(const LogisticModel& model, std::span<const double> x, Label y) {
  if (x.size() != model.dim()) throw DataError("dimension mismatch between model and instance");
  const double z = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())).dot(model.w) +
                   model.intercept;
  return kInvLn2 * softplus(-to_int(y) * z);
}

namespace {

// Value accumulated in extended precision: near the optimum the decrease per
// step falls below one ulp of a double-valued sum.
long double objective_extended(const RowMatrix& x, std::span<const int> y, std::span<const double> s, double lambda,
                               const Eigen::VectorXd& w, double intercept, Eigen::VectorXd& grad_w,
                               double& grad_intercept) {
  const Eigen::VectorXd z = (x * w).array() + intercept;
  Eigen::VectorXd dz(z.size());
  long double loss = 0.0L;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double yi = y[static_cast<std::size_t>(i)], si = s[static_cast<std::size_t>(i)];
    const double margin = yi * z(i);
    const long double t = -static_cast<long double>(margin);
    loss += si * (std::max(t, 0.0L) + std::log1p(std::exp(-std::abs(t))));
    dz(i) = -si * yi * sigmoid(-margin) * kInvLn2;
  }
  grad_w = x.transpose() * dz + 2.0 * lambda * w;
  grad_intercept = dz.sum();
  return loss / std::numbers::ln2_v<long double> + static_cast<long double>(lambda) * w.squaredNorm();
}

}  // namespace

ObjectiveValue weighted_logistic_objective(const RowMatrix& x, std::span<const int> y, std::span<const double> s,
                                           double lambda, const Eigen::VectorXd& w, double intercept) {
  ObjectiveValue out;
  out.value = static_cast<double>(objective_extended(x, y, s, lambda, w, intercept, out.grad_w, out.grad_intercept));
  return out;
}

std::vector<double> normalize_weights(std::span<const double> raw) {
  double sum = 0.0;
  for (double v : raw) {
    if (!std::isfinite(v) || v < 0) throw DataError("weights must be finite and nonnegative");
    sum += v;
  }
  std::vector<double> out(raw.size(), 1.0);
  if (sum <= 0.0) return out;
  const double scale = double(raw.size()) / sum;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] * scale;
  return out;
}

TrainResult train_weighted_logistic(const RowMatrix& x, std::span<const int> y, std::span<const double> s,
                                    double lambda, const TrainConfig& cfg) {
  check_training_inputs(x, y, s);
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (cfg.max_iterations < 1 || !(cfg.gradient_tolerance > 0)) throw ConfigError("invalid training configuration");

  const Eigen::Index m = x.cols();
  TrainResult result;
  result.model.lambda = lambda;
  result.model.w = Eigen::VectorXd::Zero(m);

  double pos = 0.0, total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    total += s[i];
    if (y[i] == 1) pos += s[i];
  }
  if (pos <= 0.0 || pos >= total) {
    result.degenerate = true;
    result.converged = true;
    const double prior = (pos + 1.0) / (total + 2.0);
    result.model.intercept = std::log(prior / (1.0 - prior));
    return result;
  }

  // theta = [w; intercept]
  const Eigen::Index n = m + 1;
  auto evaluate = [&](const Eigen::VectorXd& theta, Eigen::VectorXd& grad) {
    Eigen::VectorXd gw;
    double gb = 0.0;
    const long double v = objective_extended(x, y, s, lambda, theta.head(m), theta(m), gw, gb);
    grad.resize(n);
    grad.head(m) = gw;
    grad(m) = gb;
    return v;
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(n), grad;
  long double f = evaluate(theta, grad);
  result.objective_trace.push_back(static_cast<double>(f));

  constexpr std::size_t kMemory = 10;
  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;

  int it = 0;
  for (; it < cfg.max_iterations; ++it) {
    if (grad.lpNorm<Eigen::Infinity>() < cfg.gradient_tolerance) {
      result.converged = true;
      break;
    }
    // Two-loop recursion.
    Eigen::VectorXd q = grad;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t k = s_hist.size(); k-- > 0;) {
      alpha[k] = rho_hist[k] * s_hist[k].dot(q);
      q -= alpha[k] * y_hist[k];
    }
    if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      const double beta = rho_hist[k] * y_hist[k].dot(q);
      q += (alpha[k] - beta) * s_hist[k];
    }
    Eigen::VectorXd dir = -q;
    double slope = grad.dot(dir);
    if (!(slope < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -grad;
      slope = -grad.squaredNorm();
    }

    double step = s_hist.empty() ? std::min(1.0, 1.0 / grad.norm()) : 1.0;
    Eigen::VectorXd next, next_grad;
    long double f_next = f;
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries) {
      next = theta + step * dir;
      f_next = evaluate(next, next_grad);
      if (std::isfinite(static_cast<double>(f_next)) && f_next < f && f_next <= f + 1e-4L * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    Eigen::VectorXd sk = next - theta;
    if (!accepted) {
      // A stale curvature memory can yield a direction along which no
      // representable step makes progress; retry from steepest descent.
      if (s_hist.empty()) break;
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      continue;
    }

    Eigen::VectorXd yk = next_grad - grad;
    const double sy = sk.dot(yk);
    if (sy > 1e-12 * sk.norm() * yk.norm()) {
      if (s_hist.size() == kMemory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
      s_hist.push_back(std::move(sk));
      y_hist.push_back(std::move(yk));
      rho_hist.push_back(1.0 / sy);
    }
    theta = std::move(next);
    grad = std::move(next_grad);
    f = f_next;
    result.objective_trace.push_back(static_cast<double>(f));
  }
  if (!result.converged && grad.lpNorm<Eigen::Infinity>() < cfg.gradient_tolerance) result.converged = true;

  result.iterations = it;
  result.model.w = theta.head(m);
  result.model.intercept = theta(m);
  return result;
}

double instance_posterior(const LogisticModel& model, std::span<const double> x) {
  if (x.size() != model.dim()) throw DataError("dimension mismatch between model and instance");
  const double z = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())).dot(model.w) +
                   model.intercept;
  return sigmoid(z);
}

Eigen::VectorXd instance_posteriors(const LogisticModel& model, const RowMatrix& x) {
  if (static_cast<std::size_t>(x.cols()) != model.dim())
    throw DataError("dimension mismatch between model and instances");
  Eigen::VectorXd z = (x * model.w).array() + model.intercept;
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = sigmoid(z(i));
  return z;
}

std::string_view bag_rule_name(BagRule r) { return r == BagRule::average ? "average" : "noisy-or"; }

BagRule parse_bag_rule(std::string_view name) {
  if (name == "average") return BagRule::average;
  if (name == "noisy-or") return BagRule::noisy_or;
  throw ConfigError("unknown aggregation rule '" + std::string(name) + "'");
}

namespace {

double clamp_posterior(double p) { return std::clamp(p, kPosteriorClamp, 1.0 - kPosteriorClamp); }

}  // namespace

double combine_average(std::span<const double> p) {
  if (p.empty()) throw DataError("empty bag");
  double odds = 0.0;
  for (double v : p) {
    const double c = clamp_posterior(v);
    odds += c / (1.0 - c);
  }
  odds /= double(p.size());
  return odds / (1.0 + odds);
}

double combine_noisy_or(std::span<const double> p) {
  if (p.empty()) throw DataError("empty bag");
  // odds = (1 - prod(1 - p)) / prod(1 - p), so the probability is 1 - prod(1 - p).
  double all_negative = 1.0, best = 0.0;
  for (double v : p) {
    const double c = clamp_posterior(v);
    all_negative *= 1.0 - c;
    best = std::max(best, c);
  }
  return std::max(1.0 - all_negative, best);
}

double bag_posterior_average(const LogisticModel& model, const RowMatrix& bag) {
  if (bag.rows() == 0) throw DataError("empty bag");
  const Eigen::VectorXd p = instance_posteriors(model, bag);
  return combine_average(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
}

double bag_posterior_noisyor(const LogisticModel& model, const RowMatrix& bag) {
  if (bag.rows() == 0) throw DataError("empty bag");
  const Eigen::VectorXd p = instance_posteriors(model, bag);
  return combine_noisy_or(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
}

double bag_posterior(const LogisticModel& model, const RowMatrix& bag, BagRule rule) {
  return rule == BagRule::average ? bag_posterior_average(model, bag) : bag_posterior_noisyor(model, bag);
}

TrainResult simplemil_fit(std::span<const Bag* const> bags, std::span<const double> bag_weights, double lambda,
                          const TrainConfig& cfg) {
  if (bags.empty()) throw DataError("empty training set");
  if (bags.size() != bag_weights.size()) throw DataError("one weight per training bag is required");
  Eigen::Index rows = 0;
  const Eigen::Index m = bags.front()->instances.cols();
  for (const Bag* b : bags) {
    if (b->instances.cols() != m) throw DataError("dimension mismatch between training bags");
    rows += b->instances.rows();
  }
  RowMatrix x(rows, m);
  std::vector<int> y;
  std::vector<double> raw;
  y.reserve(static_cast<std::size_t>(rows));
  raw.reserve(static_cast<std::size_t>(rows));
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const Bag& b = *bags[i];
    x.middleRows(r, b.instances.rows()) = b.instances;
    r += b.instances.rows();
    for (Eigen::Index j = 0; j < b.instances.rows(); ++j) {
      y.push_back(to_int(b.label));
      raw.push_back(bag_weights[i]);
    }
  }
  const std::vector<double> s = normalize_weights(raw);
  return train_weighted_logistic(x, y, s, lambda, cfg);
}

TrainResult simplemil_fit(const std::vector<Bag>& bags, std::span<const double> bag_weights, double lambda,
                          const TrainConfig& cfg) {
  std::vector<const Bag*> ptrs;
  ptrs.reserve(bags.size());
  for (const auto& b : bags) ptrs.push_back(&b);
  return simplemil_fit(ptrs, bag_weights, lambda, cfg);
}

json to_json(const LogisticModel& m, const std::string& feature_spec_id, const std::string& trained_on) {
  json j;
  j["lambda"] = m.lambda;
  j["intercept"] = m.intercept;
  j["w"] = std::vector<double>(m.w.data(), m.w.data() + m.w.size());
  j["feature_spec_id"] = feature_spec_id;
  j["trained_on"] = trained_on;
  return j;
}

LogisticModel logistic_model_from_json(const json& j) {
  try {
    LogisticModel m;
    m.lambda = j.at("lambda").get<double>();
    m.intercept = j.at("intercept").get<double>();
    const auto w = j.at("w").get<std::vector<double>>();
    m.w = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed model JSON: ") + e.what());
  }
}

}  // namespace crossmil
