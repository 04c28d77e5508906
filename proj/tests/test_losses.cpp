#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "arterialnet/losses.hpp"
#include "doctest.h"

using namespace arterialnet;
using ad::DiffArray;
using losses::LossConfig;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                               double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

double hard_dtw(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size(), m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> R(n + 1, std::vector<double>(m + 1, inf));
  R[0][0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const double d = a[i - 1] - b[j - 1];
      R[i][j] = d * d + std::min({R[i - 1][j - 1], R[i - 1][j], R[i][j - 1]});
    }
  }
  return R[n][m];
}

// All monotone alignment paths from (0,0) to (n-1,m-1) with unit steps.
void enumerate_paths(const std::vector<double>& a, const std::vector<double>& b, std::size_t i,
                     std::size_t j, double cost, std::vector<double>& out) {
  const double d = a[i] - b[j];
  cost += d * d;
  if (i + 1 == a.size() && j + 1 == b.size()) {
    out.push_back(cost);
    return;
  }
  if (i + 1 < a.size()) enumerate_paths(a, b, i + 1, j, cost, out);
  if (j + 1 < b.size()) enumerate_paths(a, b, i, j + 1, cost, out);
  if (i + 1 < a.size() && j + 1 < b.size()) enumerate_paths(a, b, i + 1, j + 1, cost, out);
}

double path_softmin(const std::vector<double>& a, const std::vector<double>& b, double gamma) {
  std::vector<double> costs;
  enumerate_paths(a, b, 0, 0, 0.0, costs);
  const double lo = *std::min_element(costs.begin(), costs.end());
  double s = 0.0;
  for (double c : costs) s += std::exp(-(c - lo) / gamma);
  return lo - gamma * std::log(s);
}

struct Moments {
  double mean, std, skew, min, max;
};

Moments brute_moments(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double m2 = 0.0, m3 = 0.0;
  for (double v : x) {
    m2 += (v - mu) * (v - mu) / n;
    m3 += (v - mu) * (v - mu) * (v - mu) / n;
  }
  return {mu, std::sqrt(m2), m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0,
          *std::min_element(x.begin(), x.end()), *std::max_element(x.begin(), x.end())};
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Zero-mean unit-norm u and v with u . v = 0.
std::pair<std::vector<double>, std::vector<double>> orthonormal_pair(std::size_t n,
                                                                     std::mt19937_64& rng) {
  auto center_normalize = [](std::vector<double>& x) {
    double m = 0;
    for (double v : x) m += v / static_cast<double>(x.size());
    double s = 0;
    for (auto& v : x) {
      v -= m;
      s += v * v;
    }
    for (auto& v : x) v /= std::sqrt(s);
  };
  auto u = random_vec(n, rng);
  auto v = random_vec(n, rng);
  center_normalize(u);
  center_normalize(v);
  double dot = 0;
  for (std::size_t i = 0; i < n; ++i) dot += u[i] * v[i];
  for (std::size_t i = 0; i < n; ++i) v[i] -= dot * u[i];
  center_normalize(v);
  return {u, v};
}

}  // namespace

TEST_CASE("rmse examples") {
  auto y = DiffArray::vector({1.0, -2.0, 3.5});
  CHECK(losses::rmse(y, y).item() == 0.0);
  CHECK(losses::rmse(DiffArray::vector({0, 0}), DiffArray::vector({3, 4})).item() ==
        doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
  CHECK_THROWS_AS(losses::rmse(DiffArray::vector({1, 2}), DiffArray::vector({1, 2, 3})),
                  ad::ShapeError);
}

TEST_CASE("rmse gradient on a random length-32 pair") {
  std::mt19937_64 rng(1);
  auto y = DiffArray::vector(random_vec(32, rng));
  auto r = ad::grad_check([&](const DiffArray& x) { return losses::rmse(x, y); },
                          DiffArray::vector(random_vec(32, rng)), 1e-6, 1e-5);
  CHECK(r.passed);
}

TEST_CASE("rmse gradient is zero at equality") {
  ad::Tape tape;
  auto x = tape.variable(DiffArray::vector({1.0, 2.0}));
  auto l = losses::rmse(x, DiffArray::vector({1.0, 2.0}));
  auto g = tape.backward(l).wrt(x);
  CHECK(g == std::vector<double>{0.0, 0.0});
}

TEST_CASE("stat feature examples") {
  auto s = losses::stat_features(DiffArray::vector({1, 1, 1, 1}));
  CHECK(std::vector<double>(s.values().begin(), s.values().end()) ==
        std::vector<double>{1, 0, 0, 1, 1});

  s = losses::stat_features(DiffArray::vector({1, 2, 3}));
  CHECK(s[losses::kMean] == doctest::Approx(2.0));
  CHECK(s[losses::kStd] == doctest::Approx(0.816496580927726));
  CHECK(s[losses::kSkew] == doctest::Approx(0.0));
  CHECK(s[losses::kMin] == 1.0);
  CHECK(s[losses::kMax] == 3.0);

  const std::vector<double> x{0, 0, 0, 4};
  s = losses::stat_features(DiffArray::vector(x));
  CHECK(s[losses::kSkew] == doctest::Approx(brute_moments(x).skew));
  CHECK(s[losses::kSkew] == doctest::Approx(1.1547005383792515));
  CHECK_THROWS(losses::stat_features(DiffArray::vector({1.0})));
}

TEST_CASE("stat features agree with brute-force moments") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_vec(3 + trial % 17, rng, -5, 5);
    auto s = losses::stat_features(DiffArray::vector(x));
    auto m = brute_moments(x);
    CHECK(s[0] == doctest::Approx(m.mean));
    CHECK(s[1] == doctest::Approx(m.std));
    CHECK(s[2] == doctest::Approx(m.skew));
    CHECK(s[3] == m.min);
    CHECK(s[4] == m.max);
    CHECK(s[3] <= s[0]);
    CHECK(s[0] <= s[4]);
  }
}

TEST_CASE("min and max gradients go to the first index") {
  ad::Tape tape;
  auto x = tape.variable(DiffArray::vector({2.0, 0.0, 5.0, 0.0, 5.0}));
  auto s = losses::stat_features(x);
  auto sel = ad::slice(s, 0, losses::kMin, losses::kMax + 1);
  auto g = tape.backward(ad::sum(sel)).wrt(x);
  CHECK(g == std::vector<double>{0, 1, 1, 0, 0});
}

TEST_CASE("waveform loss") {
  std::mt19937_64 rng(3);
  auto y = DiffArray::vector(random_vec(16, rng));
  auto yh = DiffArray::vector(random_vec(16, rng));
  CHECK(losses::waveform_loss(y, y, 0.7).item() == 0.0);
  CHECK(losses::waveform_loss(yh, y, 0.0).item() == losses::rmse(yh, y).item());
  const double expected =
      0.7 * losses::rmse(yh, y).item() +
      0.3 * losses::rmse(losses::stat_features(yh), losses::stat_features(y)).item();
  CHECK(losses::waveform_loss(yh, y, 0.3).item() == doctest::Approx(expected));
  CHECK(LossConfig{}.alpha == 0.3);
}

TEST_CASE("correlation loss examples") {
  auto y = DiffArray::vector({1.0, 3.0, 2.0, 5.0, 4.0});
  const double c = 1e-8;
  CHECK(losses::correlation_loss(y, y, c).item() == doctest::Approx(1.0 / (4.0 + c)));
  CHECK(losses::correlation_loss(-y, y, c).item() == doctest::Approx(1e8).epsilon(1e-6));

  std::mt19937_64 rng(4);
  auto [u, v] = orthonormal_pair(10, rng);
  REQUIRE(std::abs(pearson(u, v)) < 1e-12);
  CHECK(losses::correlation_loss(DiffArray::vector(u), DiffArray::vector(v), c).item() ==
        doctest::Approx(1.0 / (2.0 + c)));
}

TEST_CASE("correlation loss rejects constant input") {
  auto y = DiffArray::vector({1.0, 3.0, 2.0});
  CHECK_THROWS_WITH_AS(losses::correlation_loss(DiffArray::vector({2, 2, 2}), y, 1e-8),
                       doctest::Contains("correlation undefined"), std::domain_error);
  CHECK_THROWS_AS(losses::correlation_loss(y, DiffArray::vector({0, 0, 0}), 1e-8),
                  std::domain_error);
}

TEST_CASE("correlation loss decreases strictly with r") {
  std::mt19937_64 rng(5);
  auto [u, v] = orthonormal_pair(24, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (double r = -0.99; r <= 1.0 + 1e-9; r += 0.03) {
    const double rr = std::min(r, 1.0);
    std::vector<double> yh(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      yh[i] = rr * u[i] + std::sqrt(std::max(0.0, 1.0 - rr * rr)) * v[i];
    }
    CHECK(pearson(yh, u) == doctest::Approx(rr));
    const double l =
        losses::correlation_loss(DiffArray::vector(yh), DiffArray::vector(u), 1e-8).item();
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("correlation loss is shift and scale invariant, rmse scales linearly") {
  std::mt19937_64 rng(6);
  auto y = DiffArray::vector(random_vec(20, rng));
  auto yh = DiffArray::vector(random_vec(20, rng));
  const double base = losses::correlation_loss(yh, y, 1e-8).item();
  const double rm = losses::rmse(yh, y).item();
  for (double k : {0.5, 3.0, 40.0}) {
    CHECK(losses::correlation_loss(yh * k + 7.0, y * k - 2.0, 1e-8).item() ==
          doctest::Approx(base).epsilon(1e-10));
    CHECK(losses::rmse(yh * k, y * k).item() == doctest::Approx(k * rm).epsilon(1e-12));
  }
}

TEST_CASE("soft-dtw of single samples is the squared difference") {
  CHECK(losses::softdtw_loss(DiffArray::vector({1.5}), DiffArray::vector({-2.0}), 0.1).item() ==
        doctest::Approx(12.25).epsilon(1e-15));
  CHECK_THROWS_AS(losses::softdtw_loss(DiffArray::vector({1.0}), DiffArray::vector({2.0}), 0.0),
                  std::invalid_argument);
}

TEST_CASE("soft-dtw approaches hard dtw for small gamma") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_vec(5, rng);
    auto b = random_vec(7, rng);
    const double soft =
        losses::softdtw_loss(DiffArray::vector(a), DiffArray::vector(b), 1e-3).item();
    CHECK(std::abs(soft - hard_dtw(a, b)) <= 1e-2);
  }
}

TEST_CASE("soft-dtw converges monotonically to hard dtw") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_vec(6, rng);
    auto b = random_vec(5, rng);
    const double hard = hard_dtw(a, b);
    double prev_gap = std::numeric_limits<double>::infinity();
    for (double g : {1.0, 0.1, 0.01, 0.001}) {
      const double soft =
          losses::softdtw_loss(DiffArray::vector(a), DiffArray::vector(b), g).item();
      const double gap = std::abs(hard - soft);
      CHECK(soft <= hard + 1e-12);
      CHECK(gap < prev_gap);
      prev_gap = gap;
    }
  }
}

TEST_CASE("soft-dtw equals the path-enumeration soft minimum") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_vec(4, rng);
    auto b = random_vec(5, rng);
    const double got = losses::softdtw_loss(DiffArray::vector(a), DiffArray::vector(b), 0.5).item();
    CHECK(std::abs(got - path_softmin(a, b, 0.5)) <= 1e-9);
  }
}

TEST_CASE("soft-dtw is symmetric") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = DiffArray::vector(random_vec(6, rng));
    auto b = DiffArray::vector(random_vec(9, rng));
    CHECK(losses::softdtw_loss(a, b, 0.1).item() ==
          doctest::Approx(losses::softdtw_loss(b, a, 0.1).item()).epsilon(1e-12));
  }
}

TEST_CASE("soft-dtw gradient w.r.t. both arguments") {
  std::mt19937_64 rng(11);
  auto a = DiffArray::vector(random_vec(6, rng));
  auto b = DiffArray::vector(random_vec(8, rng));
  auto ra = ad::grad_check([&](const DiffArray& x) { return losses::softdtw_loss(x, b, 0.3); },
                           a, 1e-6, 1e-6);
  auto rb = ad::grad_check([&](const DiffArray& x) { return losses::softdtw_loss(a, x, 0.3); },
                           b, 1e-6, 1e-6);
  CHECK(ra.passed);
  CHECK(rb.passed);
}

TEST_CASE("hybrid loss") {
  const LossConfig def;
  CHECK(def.phi_w == 1.0);
  CHECK(def.phi_r == 10.0);
  CHECK(def.phi_a == 0.01);
  CHECK(def.gamma == 0.1);
  CHECK(def.c == 1e-8);
  CHECK(def.omega == 1.0);

  std::mt19937_64 rng(12);
  auto y = DiffArray::vector(random_vec(12, rng));
  auto yh = DiffArray::vector(random_vec(12, rng));

  LossConfig only_rmse;
  only_rmse.alpha = 0.0;
  only_rmse.phi_r = 0.0;
  only_rmse.phi_a = 0.0;
  CHECK(losses::hybrid_loss(yh, y, only_rmse).total.item() == losses::rmse(yh, y).item());

  auto h = losses::hybrid_loss(yh, y, def);
  CHECK(h.total.item() ==
        doctest::Approx(h.weighted_w + h.weighted_r + h.weighted_a).epsilon(1e-14));
  CHECK(h.weighted_r == doctest::Approx(10.0 * h.lambda_r));
}

TEST_CASE("hybrid loss at identity uses the alignment oracle") {
  const std::vector<double> y{0.3, -1.2, 0.8, 2.0, -0.4};
  const LossConfig cfg;
  auto h = losses::hybrid_loss(DiffArray::vector(y), DiffArray::vector(y), cfg);
  const double la = path_softmin(y, y, cfg.gamma);
  CHECK(h.lambda_w == 0.0);
  CHECK(h.lambda_a == doctest::Approx(la).epsilon(1e-9));
  CHECK(h.total.item() == doctest::Approx(10.0 / (4.0 + cfg.c) + 0.01 * la).epsilon(1e-12));
}

TEST_CASE("cohort regularized loss examples") {
  CHECK(losses::cohort_regularized_loss(DiffArray::vector({2, 2, 2}), 1.0).item() == 6.0);
  CHECK(losses::cohort_regularized_loss(DiffArray::vector({1, 3}), 0.0).item() == 4.0);
  CHECK(losses::cohort_regularized_loss(DiffArray::vector({1, 3}), 2.0).item() ==
        doctest::Approx(6.0));
  for (double w : {0.0, 0.5, 7.0}) {
    CHECK(losses::cohort_regularized_loss(DiffArray::vector({3.25}), w).item() == 3.25);
  }
  CHECK_THROWS(losses::cohort_regularized_loss(std::vector<DiffArray>{}, 1.0));
}

TEST_CASE("cohort loss gradient at equal losses") {
  ad::Tape tape;
  std::vector<DiffArray> ls{tape.variable(DiffArray::scalar(2.0)),
                            tape.variable(DiffArray::scalar(2.0))};
  auto g = tape.backward(losses::cohort_regularized_loss(ls, 1.0));
  CHECK(g.wrt(ls[0]) == std::vector<double>{1.0});
  CHECK(g.wrt(ls[1]) == std::vector<double>{1.0});
}

TEST_CASE("row-wise losses match the single-sequence forms") {
  std::mt19937_64 rng(13);
  auto yh = DiffArray({3, 10}, random_vec(30, rng));
  auto y = DiffArray({3, 10}, random_vec(30, rng));
  auto rows = losses::hybrid_loss_rows(yh, y, LossConfig{});
  for (std::size_t r = 0; r < 3; ++r) {
    auto a = ad::reshape(ad::slice(yh, 0, r, r + 1), {10});
    auto b = ad::reshape(ad::slice(y, 0, r, r + 1), {10});
    auto single = losses::hybrid_loss(a, b, LossConfig{});
    CHECK(rows.total[r] == doctest::Approx(single.total.item()).epsilon(1e-14));
    CHECK(rows.lambda_a[r] == doctest::Approx(single.lambda_a).epsilon(1e-14));
  }
}

TEST_CASE("every loss passes grad_check on 100 random instances") {
  std::mt19937_64 rng(14);
  const LossConfig cfg;
  using Fn = std::function<DiffArray(const DiffArray&, const DiffArray&)>;
  const std::vector<std::pair<const char*, Fn>> fns{
      {"rmse", [](const DiffArray& a, const DiffArray& b) { return losses::rmse(a, b); }},
      {"stat", [](const DiffArray& a, const DiffArray& b) {
         return ad::sum(losses::stat_features(a) * losses::stat_features(b));
       }},
      {"waveform",
       [](const DiffArray& a, const DiffArray& b) { return losses::waveform_loss(a, b, 0.3); }},
      {"correlation",
       [](const DiffArray& a, const DiffArray& b) { return losses::correlation_loss(a, b, 1e-8); }},
      {"softdtw",
       [](const DiffArray& a, const DiffArray& b) { return losses::softdtw_loss(a, b, 0.1); }},
      {"hybrid",
       [&](const DiffArray& a, const DiffArray& b) { return losses::hybrid_loss(a, b, cfg).total; }},
      {"cohort", [](const DiffArray& a, const DiffArray& b) {
         auto rows = losses::hybrid_loss_rows(ad::reshape(a, {2, 4}), ad::reshape(b, {2, 4}),
                                              LossConfig{});
         return losses::cohort_regularized_loss(rows.total, 1.0);
       }},
  };
  for (const auto& [name, fn] : fns) {
    CAPTURE(name);
    int failures = 0;
    for (int trial = 0; trial < 100; ++trial) {
      auto y = DiffArray::vector(random_vec(8, rng, -2, 2));
      auto x = DiffArray::vector(random_vec(8, rng, -2, 2));
      auto r = ad::grad_check([&](const DiffArray& v) { return fn(v, y); }, x, 1e-6, 1e-4);
      if (!r.passed) ++failures;
    }
    CHECK(failures == 0);
  }
}
