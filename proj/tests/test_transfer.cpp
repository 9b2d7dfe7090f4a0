#include <doctest.h>

#include "crossmil/transfer.hpp"
#include "oracles.hpp"

#include <random>

using namespace crossmil;

namespace {

RowMatrix points(std::initializer_list<std::pair<double, double>> p) {
  RowMatrix m(static_cast<Eigen::Index>(p.size()), 2);
  Eigen::Index i = 0;
  for (auto [a, b] : p) {
    m(i, 0) = a;
    m(i, 1) = b;
    ++i;
  }
  return m;
}

std::vector<const RowMatrix*> ptrs(const std::vector<RowMatrix>& v) {
  std::vector<const RowMatrix*> out;
  for (const auto& m : v) out.push_back(&m);
  return out;
}

}  // namespace

TEST_CASE("bag distances on the hand case") {
  auto x = points({{0, 0}, {1, 0}});
  auto z = points({{0, 0}});
  CHECK(dist_s2t(x, z) == 0.5);
  CHECK(dist_t2s(x, z) == 0.0);
  CHECK(dist_t2s(z, x) == 0.5);
  CHECK(dist_s2t(x, x) == 0.0);
  CHECK(dist_t2s(x, x) == 0.0);
  CHECK_THROWS_AS(dist_s2t(x, RowMatrix(0, 2)), DataError);
  CHECK_THROWS_AS(dist_s2t(x, RowMatrix::Zero(1, 3)), DataError);
}

TEST_CASE("bag distances match the brute-force oracle") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = oracle::random_matrix(rng, 5 + trial, 7, 1.0 + trial * 0.1);
    auto z = oracle::random_matrix(rng, 30 - trial, 7, 1.0, 0.3);
    const double s2t = dist_s2t(x, z), t2s = dist_t2s(x, z);
    CHECK(std::abs(s2t - oracle::brute_s2t(x, z)) <= 1e-12 * std::max(1.0, s2t));
    CHECK(std::abs(t2s - oracle::brute_s2t(z, x)) <= 1e-12 * std::max(1.0, t2s));
    CHECK(t2s == dist_s2t(z, x));
  }
}

TEST_CASE("distance weight scaling") {
  auto w = scale_distance_weights(std::vector<double>{0, 1, 2});
  CHECK(w.weights == std::vector<double>{1, 0.5, 0});
  auto shifted = scale_distance_weights(std::vector<double>{10, 11, 12});
  CHECK(shifted.weights == w.weights);
  CHECK(scale_distance_weights(std::vector<double>{3, 3, 3}).weights == std::vector<double>{1, 1, 1});
  CHECK(scale_distance_weights(std::vector<double>{4}).weights == std::vector<double>{1});
  CHECK_THROWS_AS(scale_distance_weights(std::vector<double>{1, std::nan("")}), DataError);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 50);
  std::vector<double> d(17);
  for (double& v : d) v = u(rng);
  auto r = scale_distance_weights(d);
  CHECK(*std::min_element(r.weights.begin(), r.weights.end()) == 0.0);
  CHECK(*std::max_element(r.weights.begin(), r.weights.end()) == 1.0);
}

TEST_CASE("dispatcher") {
  std::vector<RowMatrix> src{points({{0, 0}}), points({{1, 0}}), points({{2, 0}})};
  auto z = points({{0, 0}});
  auto none = compute_bag_weights(WeightMethod::none, ptrs(src), z);
  CHECK(none.weights == std::vector<double>{1, 1, 1});
  auto s2t = compute_bag_weights(WeightMethod::s2t, ptrs(src), z);
  CHECK(s2t.weights == std::vector<double>{1, 0.75, 0});  // squared distances 0, 1, 4
  std::vector<RowMatrix> hand{points({{0, 0}}), points({{1, 0}}), points({{std::sqrt(2.0), 0}})};
  auto h = compute_bag_weights(WeightMethod::t2s, ptrs(hand), z);
  CHECK(h.weights[0] == 1.0);
  CHECK(h.weights[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(h.weights[2] == 0.0);

  std::mt19937_64 rng(2);
  std::vector<RowMatrix> five;
  for (int i = 0; i < 5; ++i) five.push_back(oracle::random_matrix(rng, 10, 3));
  auto t = oracle::random_matrix(rng, 10, 3, 1.0, 0.5);
  CHECK(compute_bag_weights(WeightMethod::none, ptrs(five), t).weights == std::vector<double>(5, 1.0));
  CHECK(compute_bag_weights(WeightMethod::log, ptrs(five), t).weights ==
        logistic_weights(ptrs(five), t).weights);
  for (auto m : {WeightMethod::none, WeightMethod::s2t, WeightMethod::t2s, WeightMethod::log})
    CHECK(parse_weight_method(weight_method_name(m)) == m);
  CHECK_THROWS_AS(parse_weight_method("kmm"), ConfigError);
}

TEST_CASE("logistic weights on exchangeable samples stay near one half") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<RowMatrix> src;
    for (int b = 0; b < 10; ++b) src.push_back(oracle::random_matrix(rng, 50, 5));
    auto target = oracle::random_matrix(rng, 500, 5);
    auto w = logistic_weights(ptrs(src), target);
    CHECK_FALSE(w.fallback);
    for (double v : w.weights) {
      CHECK(v >= 0.35);
      CHECK(v <= 0.65);
    }
  }
}

TEST_CASE("a displaced source bag gets a tiny logistic weight") {
  std::mt19937_64 rng(5);
  std::vector<RowMatrix> src;
  for (int b = 0; b < 6; ++b) src.push_back(oracle::random_matrix(rng, 40, 4));
  src[2].col(1).array() += 100.0;
  auto target = oracle::random_matrix(rng, 100, 4);
  auto w = logistic_weights(ptrs(src), target);
  for (std::size_t b = 0; b < src.size(); ++b) {
    if (b == 2) CHECK(w.weights[b] < 0.05);
    else CHECK(w.weights[b] >= 0.3);
  }
}

TEST_CASE("target as its own source bag scores one half") {
  std::mt19937_64 rng(6);
  auto target = oracle::random_matrix(rng, 60, 4);
  std::vector<RowMatrix> self{target};
  CHECK(std::abs(logistic_weights(ptrs(self), target).weights[0] - 0.5) <= 0.05);
  // Among other source bags the self bag still scores at the class prior.
  std::vector<RowMatrix> mixed{target, oracle::random_matrix(rng, 60, 4), oracle::random_matrix(rng, 60, 4)};
  CHECK(std::abs(logistic_weights(ptrs(mixed), target).weights[0] - 0.25) <= 0.05);
}

TEST_CASE("logistic weights do not depend on source order") {
  std::mt19937_64 rng(7);
  std::vector<RowMatrix> src;
  for (int b = 0; b < 5; ++b) src.push_back(oracle::random_matrix(rng, 20, 3, 1.0, 0.2 * b));
  auto target = oracle::random_matrix(rng, 30, 3, 1.0, 0.5);
  auto w = logistic_weights(ptrs(src), target);
  std::vector<RowMatrix> rev(src.rbegin(), src.rend());
  auto r = logistic_weights(ptrs(rev), target);
  for (std::size_t b = 0; b < src.size(); ++b) CHECK(r.weights[src.size() - 1 - b] == doctest::Approx(w.weights[b]).epsilon(1e-6));
}

TEST_CASE("normalized weights sum to N for every method") {
  std::mt19937_64 rng(8);
  std::vector<RowMatrix> src;
  for (int b = 0; b < 6; ++b) src.push_back(oracle::random_matrix(rng, 4 + b, 3, 1.0, 0.3 * b));
  auto target = oracle::random_matrix(rng, 8, 3);
  for (auto m : {WeightMethod::none, WeightMethod::s2t, WeightMethod::t2s, WeightMethod::log}) {
    auto bw = compute_bag_weights(m, ptrs(src), target);
    std::vector<double> inst;
    for (std::size_t b = 0; b < src.size(); ++b) inst.insert(inst.end(), std::size_t(src[b].rows()), bw.weights[b]);
    auto n = normalize_weights(inst);
    double s = 0.0;
    for (double v : n) s += v;
    CHECK(std::abs(s - double(inst.size())) < 1e-9);
    for (double v : bw.weights) CHECK(v >= 0.0);
  }
}
