#include <doctest.h>

#include "crossmil/classifier.hpp"
#include "oracles.hpp"

#include <numbers>
#include <random>

using namespace crossmil;

namespace {

struct Problem {
  RowMatrix x;
  std::vector<int> y;
  std::vector<double> s;
};

Problem random_problem(std::mt19937_64& rng, int n, int m) {
  Problem p;
  p.x = oracle::random_matrix(rng, n, m);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int i = 0; i < n; ++i) {
    p.y.push_back(p.x(i, 0) + 0.5 * u(rng) > 0.5 ? 1 : -1);
    p.s.push_back(u(rng));
  }
  p.s = normalize_weights(p.s);
  return p;
}

double objective_at(const Problem& p, double lambda, const Eigen::VectorXd& w, double b) {
  return weighted_logistic_objective(p.x, p.y, p.s, lambda, w, b).value;
}

Bag bag(std::string id, RowMatrix x, Label y) {
  Bag b;
  b.id = std::move(id);
  b.instances = std::move(x);
  b.label = y;
  b.domain = DomainId("A");
  return b;
}

}  // namespace

TEST_CASE("loss values") {
  LogisticModel zero{Eigen::VectorXd::Zero(2), 0.0, 1.0};
  std::vector<double> x{3.0, -1.0};
  CHECK(logistic_loss(zero, x, Label::positive) == 1.0);
  CHECK(logistic_loss(zero, x, Label::negative) == 1.0);

  LogisticModel m{Eigen::VectorXd::Zero(1), 0.0, 1.0};
  m.w(0) = 1000.0;
  std::vector<double> one{1.0};
  const double big = logistic_loss(m, one, Label::negative);
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(1000.0 / std::numbers::ln2).epsilon(1e-12));
  const double small = logistic_loss(m, one, Label::positive);
  CHECK(small >= 0.0);
  CHECK(small < 1e-300);
  CHECK_THROWS_AS(logistic_loss(m, x, Label::positive), DataError);
}

TEST_CASE("analytic gradient matches central differences") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n(0.0, 0.5);
  for (int point = 0; point < 20; ++point) {
    auto p = random_problem(rng, 40, 6);
    Eigen::VectorXd w(6);
    for (int j = 0; j < 6; ++j) w(j) = n(rng);
    const double b = n(rng);
    const double lambda = 0.5 + point * 0.1;
    auto g = weighted_logistic_objective(p.x, p.y, p.s, lambda, w, b);
    for (int j = 0; j <= 6; ++j) {
      const double h = 1e-5;
      Eigen::VectorXd wp = w, wm = w;
      double bp = b, bm = b;
      if (j < 6) {
        wp(j) += h;
        wm(j) -= h;
      } else {
        bp += h;
        bm -= h;
      }
      const double fd = (objective_at(p, lambda, wp, bp) - objective_at(p, lambda, wm, bm)) / (2 * h);
      const double an = j < 6 ? g.grad_w(j) : g.grad_intercept;
      CHECK(std::abs(fd - an) / std::max(1.0, std::abs(an)) < 1e-5);
    }
  }
}

TEST_CASE("objective is convex along random chords") {
  std::mt19937_64 rng(8);
  auto p = random_problem(rng, 60, 4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd wa = 3.0 * Eigen::VectorXd::Random(4), wb = 3.0 * Eigen::VectorXd::Random(4);
    const double ba = 2 * u(rng) - 1, bb = 2 * u(rng) - 1, t = u(rng);
    const double fc = objective_at(p, 1.0, t * wa + (1 - t) * wb, t * ba + (1 - t) * bb);
    CHECK(fc <= t * objective_at(p, 1.0, wa, ba) + (1 - t) * objective_at(p, 1.0, wb, bb) + 1e-9);
  }
}

TEST_CASE("training converges with a monotone objective") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = random_problem(rng, 200, 8);
    auto r = train_weighted_logistic(p.x, p.y, p.s, 1.0);
    CHECK(r.converged);
    CHECK_FALSE(r.degenerate);
    REQUIRE(r.objective_trace.size() >= 2);
    for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
      CHECK(r.objective_trace[i] <= r.objective_trace[i - 1]);
    auto g = weighted_logistic_objective(p.x, p.y, p.s, 1.0, r.model.w, r.model.intercept);
    CHECK(std::max(g.grad_w.cwiseAbs().maxCoeff(), std::abs(g.grad_intercept)) < 1e-6);
  }
}

TEST_CASE("huge lambda shrinks the coefficients") {
  std::mt19937_64 rng(4);
  auto p = random_problem(rng, 100, 5);
  for (int i = 0; i < 100; ++i) p.y[i] = i % 2 ? 1 : -1;
  auto r = train_weighted_logistic(p.x, p.y, p.s, 1e9);
  CHECK(r.model.w.norm() < 1e-3);
}

TEST_CASE("weight scaling invariance") {
  std::mt19937_64 rng(6);
  std::vector<Bag> bags;
  std::vector<double> raw;
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (int i = 0; i < 10; ++i) {
    bags.push_back(bag("b" + std::to_string(i), oracle::random_matrix(rng, 5, 4, 1.0, i % 2 ? 0.7 : -0.7),
                       i % 2 ? Label::positive : Label::negative));
    raw.push_back(u(rng));
  }
  auto base = simplemil_fit(bags, raw, 1.0);
  for (double c : {1e-3, 0.5, 7.0, 1e4}) {
    std::vector<double> scaled;
    for (double w : raw) scaled.push_back(c * w);
    auto r = simplemil_fit(bags, scaled, 1.0);
    CHECK((r.model.w - base.model.w).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(std::abs(r.model.intercept - base.model.intercept) < 1e-8);
  }
}

TEST_CASE("weight normalization") {
  auto w = normalize_weights(std::vector<double>{1, 1, 1, 0, 0, 0});
  CHECK(w == std::vector<double>{2, 2, 2, 0, 0, 0});
  auto v = normalize_weights(std::vector<double>{0.3, 0.1, 5.0, 2.2});
  double s = 0.0;
  for (double x : v) s += x;
  CHECK(std::abs(s - 4.0) < 1e-9);
  CHECK_THROWS_AS(normalize_weights(std::vector<double>{1.0, -1.0}), DataError);
}

TEST_CASE("SimpleMIL propagates bag labels and weights") {
  std::mt19937_64 rng(10);
  std::vector<Bag> bags{bag("p", oracle::random_matrix(rng, 3, 2, 1.0, 1.0), Label::positive),
                        bag("n", oracle::random_matrix(rng, 3, 2, 1.0, -1.0), Label::negative),
                        bag("q", oracle::random_matrix(rng, 3, 2, 1.0, 0.5), Label::positive)};
  auto mil = simplemil_fit(bags, std::vector<double>{2.0, 1.0, 0.0}, 1.0);
  RowMatrix x(9, 2);
  for (int b = 0; b < 3; ++b) x.middleRows(3 * b, 3) = bags[b].instances;
  std::vector<int> y{1, 1, 1, -1, -1, -1, 1, 1, 1};
  std::vector<double> s{2, 2, 2, 1, 1, 1, 0, 0, 0};
  auto direct = train_weighted_logistic(x, y, normalize_weights(s), 1.0);
  CHECK((mil.model.w - direct.model.w).cwiseAbs().maxCoeff() == 0.0);
  CHECK(mil.model.intercept == direct.model.intercept);

  auto uniform = simplemil_fit(std::vector<Bag>{bags[0], bags[1]}, std::vector<double>{1.0, 1.0}, 1.0);
  CHECK(uniform.converged);
}

TEST_CASE("single-class training scores the prior") {
  std::mt19937_64 rng(3);
  std::vector<Bag> bags{bag("a", oracle::random_matrix(rng, 4, 3), Label::positive),
                        bag("b", oracle::random_matrix(rng, 4, 3), Label::positive)};
  auto r = simplemil_fit(bags, std::vector<double>{1.0, 1.0}, 1.0);
  CHECK(r.degenerate);
  CHECK(r.model.w.isZero());
  const double p = instance_posterior(r.model, std::vector<double>{1, 2, 3});
  CHECK(p == doctest::Approx(9.0 / 10.0));  // smoothed prior (8 + 1) / (8 + 2)
  CHECK(std::isfinite(r.model.intercept));
}

TEST_CASE("training input validation") {
  RowMatrix x = RowMatrix::Zero(2, 2);
  std::vector<int> y{1, -1};
  std::vector<double> s{1, 1};
  CHECK_THROWS_AS(train_weighted_logistic(RowMatrix(0, 2), {}, {}, 1.0), DataError);
  RowMatrix bad = x;
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train_weighted_logistic(bad, y, s, 1.0), DataError);
  CHECK_THROWS_AS(train_weighted_logistic(x, std::vector<int>{1, 0}, s, 1.0), DataError);
  CHECK_THROWS_AS(train_weighted_logistic(x, y, s, -1.0), ConfigError);
}

TEST_CASE("instance posteriors") {
  LogisticModel m{Eigen::VectorXd::Zero(3), 0.0, 1.0};
  CHECK(instance_posterior(m, std::vector<double>{1, 2, 3}) == 0.5);
  m.intercept = 100.0;
  CHECK(1.0 - instance_posterior(m, std::vector<double>{1, 2, 3}) < 1e-40);
  m.intercept = -100.0;
  CHECK(instance_posterior(m, std::vector<double>{1, 2, 3}) < 1e-40);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int i = 0; i < 1000; ++i) {
    m.w = Eigen::Vector3d(n(rng), n(rng), n(rng));
    m.intercept = n(rng);
    std::vector<double> x{n(rng) / 5, n(rng) / 5, n(rng) / 5};
    const double z = m.w(0) * x[0] + m.w(1) * x[1] + m.w(2) * x[2] + m.intercept;
    CHECK(instance_posterior(m, x) == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-15).scale(0.0));
  }
}

TEST_CASE("bag rules on hand cases") {
  CHECK(combine_average(std::vector<double>{0.5, 0.5}) == 0.5);
  CHECK(combine_average(std::vector<double>{0.5, 0.75}) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(combine_average(std::vector<double>{0.3}) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(combine_noisy_or(std::vector<double>{0.5, 0.5}) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(combine_noisy_or(std::vector<double>{0.2, 1.0, 0.1}) > 1.0 - 1e-9);
  CHECK(combine_noisy_or(std::vector<double>{0.0, 0.0}) < 1e-9);
  CHECK_THROWS_AS(combine_average(std::vector<double>{}), DataError);
  CHECK_THROWS_AS(combine_noisy_or(std::vector<double>{}), DataError);
}

TEST_CASE("identical instances collapse to the instance posterior") {
  LogisticModel m{Eigen::Vector2d(0.4, -1.1), 0.2, 1.0};
  RowMatrix b(5, 2);
  for (int i = 0; i < 5; ++i) b.row(i) << 0.7, 0.3;
  const double p = instance_posterior(m, std::vector<double>{0.7, 0.3});
  CHECK(bag_posterior_average(m, b) == doctest::Approx(p).epsilon(1e-14));
  CHECK(bag_posterior(m, b, BagRule::average) == bag_posterior_average(m, b));
  CHECK(bag_posterior(m, b, BagRule::noisy_or) == bag_posterior_noisyor(m, b));
  CHECK(parse_bag_rule(bag_rule_name(BagRule::noisy_or)) == BagRule::noisy_or);
}

TEST_CASE("noisy-or dominates the instance maximum") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> len(1, 30);
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<double> p(len(rng));
    for (double& v : p) v = std::pow(u(rng), 3.0);
    const double mx = std::clamp(*std::max_element(p.begin(), p.end()), kPosteriorClamp, 1.0 - kPosteriorClamp);
    CHECK(combine_noisy_or(p) >= mx);
  }
}

TEST_CASE("model JSON round trip") {
  LogisticModel m{Eigen::Vector3d(0.1, -2.0, 1e-17), -0.3, 1.0};
  auto j = to_json(m, "GSS-t", "A");
  CHECK(j["feature_spec_id"] == "GSS-t");
  CHECK(j["trained_on"] == "A");
  auto back = logistic_model_from_json(j);
  CHECK(back.w == m.w);
  CHECK(back.intercept == m.intercept);
  CHECK(back.lambda == m.lambda);
  CHECK_THROWS_AS(logistic_model_from_json(nlohmann::ordered_json::object()), DataError);
}
