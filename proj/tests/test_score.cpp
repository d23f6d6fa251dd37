#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "denoise/score.hpp"
#include "test_util.hpp"

using namespace denoise;

TEST_CASE("project_mean_center") {
  SUBCASE("idempotent; already-centered unchanged") {
    RandomStream rng(1);
    std::vector<double> x(12);
    for (auto& v : x) v = rng.gauss();
    auto p = project_mean_center(x);
    auto pp = project_mean_center(p);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(pp[i] == doctest::Approx(p[i]).epsilon(1e-15));
    CHECK(is_mean_centered(p, 1e-12));
  }
  SUBCASE("all atoms at one point projects to zero") {
    std::vector<double> x = {2, -1, 3, 2, -1, 3, 2, -1, 3};
    auto p = project_mean_center(x);
    for (double v : p) CHECK(std::abs(v) < 1e-15);
  }
  SUBCASE("matches an explicit P_V P_V^T built by Gram-Schmidt") {
    const int n_atoms = 4, d = 12;
    // basis of V: differences e_{3i+c} - e_{3(i+1)+c}, orthonormalized
    std::vector<std::vector<double>> basis;
    for (int i = 0; i + 1 < n_atoms; ++i)
      for (int c = 0; c < 3; ++c) {
        std::vector<double> v(d, 0.0);
        v[static_cast<std::size_t>(3 * i + c)] = 1.0;
        v[static_cast<std::size_t>(3 * (i + 1) + c)] = -1.0;
        basis.push_back(v);
      }
    // Gram-Schmidt
    for (std::size_t a = 0; a < basis.size(); ++a) {
      for (std::size_t b = 0; b < a; ++b) {
        double dot = 0;
        for (int k = 0; k < d; ++k) dot += basis[a][static_cast<std::size_t>(k)] * basis[b][static_cast<std::size_t>(k)];
        for (int k = 0; k < d; ++k) basis[a][static_cast<std::size_t>(k)] -= dot * basis[b][static_cast<std::size_t>(k)];
      }
      double nrm = 0;
      for (int k = 0; k < d; ++k) nrm += basis[a][static_cast<std::size_t>(k)] * basis[a][static_cast<std::size_t>(k)];
      nrm = std::sqrt(nrm);
      for (int k = 0; k < d; ++k) basis[a][static_cast<std::size_t>(k)] /= nrm;
    }
    RandomStream rng(2);
    std::vector<double> x(d);
    for (auto& v : x) v = rng.gauss();
    // P_V P_V^T x
    std::vector<double> proj(d, 0.0);
    for (const auto& b : basis) {
      double dot = 0;
      for (int k = 0; k < d; ++k) dot += b[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(k)];
      for (int k = 0; k < d; ++k) proj[static_cast<std::size_t>(k)] += dot * b[static_cast<std::size_t>(k)];
    }
    auto got = project_mean_center(x);
    for (int k = 0; k < d; ++k)
      CHECK(std::abs(got[static_cast<std::size_t>(k)] - proj[static_cast<std::size_t>(k)]) <= 1e-12);
  }
}

TEST_CASE("single-center score is (x1 - x)/sigma^2") {
  MixtureModel m = random_mixture(1, 3, 0.2, 7);
  RandomStream rng(8);
  std::vector<double> x(static_cast<std::size_t>(m.dim()));
  for (auto& v : x) v = rng.gauss();
  x = project_mean_center(x);
  auto s = mixture_score(m, x);
  for (std::size_t k = 0; k < x.size(); ++k)
    CHECK(s[k] == doctest::Approx((m.centers[0][k] - x[k]) / (0.2 * 0.2)).epsilon(1e-12));
}

TEST_CASE("two centers, midpoint: score vanishes by symmetry") {
  MixtureModel m = random_mixture(2, 3, 0.5, 9);
  std::vector<double> mid(static_cast<std::size_t>(m.dim()));
  for (std::size_t k = 0; k < mid.size(); ++k) mid[k] = 0.5 * (m.centers[0][k] + m.centers[1][k]);
  auto s = mixture_score(m, mid);
  for (double v : s) CHECK(std::abs(v) < 1e-10);
}

TEST_CASE("score requires a mean-centered input") {
  MixtureModel m = random_mixture(2, 3, 0.5, 10);
  std::vector<double> x(static_cast<std::size_t>(m.dim()), 0.0);
  x[0] = 1.0;  // not centered
  CHECK_THROWS_AS(mixture_score(m, x), ContractViolation);
}

TEST_CASE("score lies in V") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MixtureModel m = random_mixture(4, 5, 0.3, seed);
    RandomStream rng(seed + 100);
    std::vector<double> x;
    sample_mixture(m, rng, &x);
    auto s = mixture_score(m, x);
    for (int c = 0; c < 3; ++c) {
      double total = 0;
      for (int i = 0; i < m.n_atoms; ++i) total += s[static_cast<std::size_t>(3 * i + c)];
      CHECK(std::abs(total / m.n_atoms) <= 1e-12);
    }
  }
}

TEST_CASE("analytic score matches subspace finite differences of log q") {
  RandomStream pick(42);
  for (int inst = 0; inst < 20; ++inst) {
    const int n_atoms = 2 + static_cast<int>(pick.bounded(4));   // <= 5
    const int n_centers = 1 + static_cast<int>(pick.bounded(10));  // <= 10
    MixtureModel m = random_mixture(n_centers, n_atoms, 0.3, pick.bits());
    RandomStream rng(pick.bits());
    std::vector<double> x;
    sample_mixture(m, rng, &x);
    const auto score = mixture_score(m, x);

    // FD along a basis of V: directions (e_i - e_j)/sqrt(2) within an axis
    const double h = 1e-6;
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i + 1 < n_atoms; ++i) {
        std::vector<double> dir(x.size(), 0.0);
        dir[static_cast<std::size_t>(3 * i + c)] = 1.0 / std::sqrt(2.0);
        dir[static_cast<std::size_t>(3 * (i + 1) + c)] = -1.0 / std::sqrt(2.0);
        std::vector<double> up(x), dn(x);
        for (std::size_t k = 0; k < x.size(); ++k) {
          up[k] += h * dir[k];
          dn[k] -= h * dir[k];
        }
        const double fd = (log_mixture_density(m, up) - log_mixture_density(m, dn)) / (2 * h);
        double along = 0;
        for (std::size_t k = 0; k < x.size(); ++k) along += score[k] * dir[k];
        CHECK(testutil::rel_err(along, fd) < 1e-6);
      }
    }
  }
}

TEST_CASE("softmax weights become one-hot as sigma -> 0") {
  MixtureModel m = random_mixture(3, 3, 1.0, 11);
  // enforce separation >= 1 between centers
  for (std::size_t i = 0; i < m.centers.size(); ++i)
    for (std::size_t k = 0; k < m.centers[i].size(); ++k) m.centers[i][k] *= 3.0;
  m.sigma = 1e-3;
  std::vector<double> near = m.centers[1];
  near[0] += 1e-4;
  near = project_mean_center(near);
  auto w = mixture_weights(m, near);
  CHECK(w[1] > 1.0 - 1e-9);
  CHECK(w[0] < 1e-9);
  CHECK(w[2] < 1e-9);
}

TEST_CASE("log-sum-exp stays finite at separations up to 1e6 sigma") {
  MixtureModel m;
  m.n_atoms = 2;
  m.sigma = 1e-3;
  std::vector<double> c1 = {1e3, 0, 0, -1e3, 0, 0};  // separation 1e6 * sigma
  std::vector<double> c2(6, 0.0);
  c2[1] = 0.5;
  c2[4] = -0.5;
  m.centers = {project_mean_center(c1), project_mean_center(c2)};
  std::vector<double> x = project_mean_center({1e3, 0.1, 0, -1e3, -0.1, 0});
  CHECK(std::isfinite(log_mixture_density(m, x)));
  auto s = mixture_score(m, x);
  for (double v : s) CHECK(std::isfinite(v));
}

TEST_CASE("projected Gaussian sampling has the right covariance scale") {
  // per-coordinate variance of the projected noise is (1 - 1/N)
  MixtureModel m = random_mixture(1, 4, 1.0, 12);
  RandomStream rng(13);
  double sumsq = 0;
  const int draws = 20000;
  std::vector<double> x;
  for (int i = 0; i < draws; ++i) {
    sample_mixture(m, rng, &x);
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double d = x[k] - m.centers[0][k];
      sumsq += d * d;
    }
  }
  const double var = sumsq / (draws * 12.0);
  CHECK(var == doctest::Approx(1.0 - 0.25).epsilon(0.03));
}

TEST_CASE("J1/J2 gradient gap") {
  SUBCASE("single center: targets coincide pointwise, gap at machine precision") {
    MixtureModel m = random_mixture(1, 3, 0.1, 21);
    GradientGapResult r = j1_j2_gradient_gap(m, 2000, 5);
    CHECK(r.gap <= 1e-12);
  }
  SUBCASE("three centers: gap within 3 standard errors at 1e4 samples") {
    MixtureModel m = random_mixture(3, 4, 0.1, 22);
    GradientGapResult r = j1_j2_gradient_gap(m, 10000, 6);
    INFO("gap=" << r.gap << " se=" << r.gap_se);
    CHECK(r.gap <= 3.0 * r.gap_se);
  }
}
