#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "nmar/kernel.hpp"

using namespace nmar;

TEST(KernelWeight, Examples) {
  EXPECT_DOUBLE_EQ(kernel_weight({KernelFamily::epanechnikov, 1.0}, 0.0), 0.75);
  EXPECT_DOUBLE_EQ(kernel_weight({KernelFamily::epanechnikov, 1.0}, 1.5), 0.0);
  EXPECT_DOUBLE_EQ(kernel_weight({KernelFamily::epanechnikov, 2.0}, 0.0), 0.375);
  EXPECT_DOUBLE_EQ(kernel_weight({KernelFamily::triweight, 1.0}, 0.0), 35.0 / 32.0);
}

TEST(KernelWeight, SymmetricAndPeaked) {
  for (auto fam : {KernelFamily::epanechnikov, KernelFamily::triweight})
    for (double h : {0.3, 1.0, 2.5})
      for (double d : {0.01, 0.2, 0.7, 1.3, 3.0}) {
        const KernelSpec k{fam, h};
        EXPECT_EQ(kernel_weight(k, d), kernel_weight(k, -d));
        EXPECT_LE(kernel_weight(k, d), kernel_weight(k, 0.0));
        if (d >= h) EXPECT_EQ(kernel_weight(k, d), 0.0);
      }
}

TEST(KernelWeight, IntegratesToOne) {
  for (auto fam : {KernelFamily::epanechnikov, KernelFamily::triweight})
    for (double h : {0.1, 0.5, 1.0, 3.0}) {
      const KernelSpec k{fam, h};
      const int N = 20000;
      const double a = -h, step = 2.0 * h / N;
      double sum = 0.0;  // Simpson's rule
      for (int i = 0; i <= N; ++i) {
        const double c = (i == 0 || i == N) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        sum += c * kernel_weight(k, a + i * step);
      }
      EXPECT_NEAR(sum * step / 3.0, 1.0, 1e-6);
    }
}

TEST(Silverman, StandardNormalSample) {
  std::mt19937_64 rng(20240501);
  std::normal_distribution<double> z;
  std::vector<double> v(500);
  for (auto& x : v) x = z(rng);
  const double h = silverman_bandwidth(v);
  EXPECT_NEAR(h, 0.9 * std::pow(500.0, -0.2), 0.03);
}

TEST(Silverman, DegenerateSample) {
  const std::vector<double> v{0.0, 0.0, 0.0};
  try {
    silverman_bandwidth(v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateSample);
  }
}

TEST(Silverman, AffineEquivariance) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> z;
  std::vector<double> v(137), scaled(137), moved(137);
  for (auto& x : v) x = z(rng);
  for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = 4.0 * v[i];
  EXPECT_EQ(silverman_bandwidth(scaled), 4.0 * silverman_bandwidth(v));
  for (std::size_t i = 0; i < v.size(); ++i) moved[i] = 3.0 * v[i] + 1.25;
  EXPECT_NEAR(silverman_bandwidth(moved), 3.0 * silverman_bandwidth(v), 1e-12);
}

TEST(Silverman, ExplicitCount) {
  const std::vector<double> v{0.1, 0.5, 0.9, 1.4, 2.0, 2.2};
  EXPECT_NEAR(silverman_bandwidth(v, 100) / silverman_bandwidth(v), std::pow(100.0 / 6.0, -0.2), 1e-14);
}

TEST(RuleOfThumb, CanonicalBandwidthByQuadrature) {
  // (R(K) / mu2(K)^2)^{1/5} with R = int K^2 and mu2 = int u^2 K
  for (auto fam : {KernelFamily::epanechnikov, KernelFamily::triweight}) {
    const int N = 200000;
    double R = 0.0, mu2 = 0.0;
    for (int i = 0; i < N; ++i) {
      const double u = -1.0 + (i + 0.5) * 2.0 / N, k = kernel_unit(fam, u);
      R += k * k * 2.0 / N;
      mu2 += u * u * k * 2.0 / N;
    }
    EXPECT_NEAR(canonical_bandwidth(fam), std::pow(R / (mu2 * mu2), 0.2), 1e-8);
  }
}

TEST(RuleOfThumb, GaussianEquivalentScaling) {
  // canonical bandwidth of the Gaussian kernel: (1 / (2 sqrt(pi)))^{1/5}
  const std::vector<double> v{0.1, 0.5, 0.9, 1.4, 2.0, 2.2};
  const double gauss = std::pow(0.5 / std::sqrt(std::acos(-1.0)), 0.2);
  EXPECT_NEAR(rule_of_thumb_bandwidth(v, 50, KernelFamily::epanechnikov) / silverman_bandwidth(v, 50),
              std::pow(15.0, 0.2) / gauss, 1e-12);
  EXPECT_NEAR(std::pow(15.0, 0.2) / gauss, 2.2138, 1e-4);
  EXPECT_GT(rule_of_thumb_bandwidth(v, 50, KernelFamily::triweight),
            rule_of_thumb_bandwidth(v, 50, KernelFamily::epanechnikov));
}

TEST(Quantile, Type7) {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  EXPECT_DOUBLE_EQ(quantile_type7(v, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(quantile_type7(v, 0.75), 3.25);
  EXPECT_DOUBLE_EQ(quantile_type7(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile_type7(v, 1.0), 4.0);
}
