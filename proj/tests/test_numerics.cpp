#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <random>

#include "rscope/errors.hpp"
#include "rscope/numerics.hpp"

using namespace rscope;

namespace {

std::vector<double> random_logits(std::mt19937_64& rng, std::size_t n, double amplitude) {
    std::uniform_real_distribution<double> d(-amplitude, amplitude);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

Distribution random_distribution(std::mt19937_64& rng, std::size_t n) {
    auto logits = random_logits(rng, n, 4.0);
    return softmax(logits);
}

}  // namespace

TEST_CASE("softmax examples") {
    const std::vector<double> zeros{0.0, 0.0};
    auto p = softmax(zeros);
    CHECK(p[0] == 0.5);
    CHECK(p[1] == 0.5);

    // 50-digit oracle: e^sqrt2 / (e^sqrt2 + 1)
    const std::vector<double> root2{std::sqrt(2.0), 0.0};
    p = softmax(root2);
    CHECK(std::abs(p[0] - 0.804429682506956905) < 1e-12);
    CHECK(std::abs(p[1] - 0.195570317493043095) < 1e-12);

    const std::vector<double> big{1000.0, 0.0};
    p = softmax(big);
    CHECK(std::isfinite(p[0]));
    CHECK(p[0] == doctest::Approx(1.0));
    CHECK(p[1] < 1e-300);
}

TEST_CASE("softmax rejects bad input") {
    const std::vector<double> empty;
    CHECK_THROWS_AS(softmax(empty), InvalidInput);
    const std::vector<double> nan{0.0, std::nan("")};
    CHECK_THROWS_AS(softmax(nan), InvalidInput);
    const std::vector<double> inf{0.0, INFINITY};
    CHECK_THROWS_AS(softmax(inf), InvalidInput);
}

TEST_CASE("softmax sums to one and is shift invariant") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng() % 600;
        auto z = random_logits(rng, n, 50.0);
        const double c = std::uniform_real_distribution<double>(-100, 100)(rng);
        auto shifted = z;
        for (auto& v : shifted) v += c;
        const auto p = softmax(z);
        const auto q = softmax(shifted);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sum += p[i];
            CHECK(p[i] >= 0.0);
            REQUIRE(std::abs(p[i] - q[i]) < 1e-6);
        }
        REQUIRE(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("rms_normalize examples") {
    const std::vector<float> constant(7, 2.5f);
    for (float v : rms_normalize(constant)) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));

    // RMS of (3, 4) is sqrt(12.5)
    const std::vector<float> x{3.0f, 4.0f};
    const auto y = rms_normalize(x);
    CHECK(std::abs(y[0] - 0.848528137423857) < 1e-6);
    CHECK(std::abs(y[1] - 1.131370849898476) < 1e-6);

    const std::vector<float> zero{0.0f, 0.0f};
    const auto z = rms_normalize(zero, 1e-6);
    CHECK(z[0] == 0.0f);
    CHECK(z[1] == 0.0f);
}

TEST_CASE("rms_normalize is positively scale equivariant") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> scale(0.1, 100.0);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<double> x = random_logits(rng, 1 + rng() % 64, 3.0);
        if (std::sqrt(std::inner_product(x.begin(), x.end(), x.begin(), 0.0)) < 1e-2) continue;
        const double a = scale(rng);
        auto ax = x;
        for (auto& v : ax) v *= a;
        const auto r1 = rms_normalize(std::span<const double>(x));
        const auto r2 = rms_normalize(std::span<const double>(ax));
        for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(std::abs(r1[i] - r2[i]) < 1e-4);
    }
}

TEST_CASE("entropy examples") {
    CHECK(entropy(Distribution::from_probs({0.25, 0.25, 0.25, 0.25})) ==
          doctest::Approx(1.3862943611198906).epsilon(1e-12));
    CHECK(entropy(Distribution::from_probs({0.0, 1.0, 0.0})) == 0.0);
    // direct summation oracle
    CHECK(std::abs(entropy(Distribution::from_probs({0.5, 0.25, 0.25})) - 1.0397207708399179) < 1e-12);
}

TEST_CASE("entropy is bounded by ln|V|") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng() % 300;
        const auto p = random_distribution(rng, n);
        const double h = entropy(p);
        REQUIRE(h >= 0.0);
        REQUIRE(h <= std::log(static_cast<double>(n)) + 1e-9);
    }
}

TEST_CASE("kl_divergence examples") {
    const auto p = Distribution::from_probs({0.2, 0.3, 0.5});
    CHECK(kl_divergence(p, p) == 0.0);
    CHECK(kl_divergence(Distribution::from_probs({1.0, 0.0}), Distribution::from_probs({0.5, 0.5})) ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));
    // direct summation oracle: 0.9 ln 9 + 0.1 ln(1/9)
    CHECK(std::abs(kl_divergence(Distribution::from_probs({0.9, 0.1}), Distribution::from_probs({0.1, 0.9})) -
                   1.7577796618689755) < 1e-12);
    CHECK_THROWS_AS(kl_divergence(p, Distribution::from_probs({0.5, 0.5})), InvalidInput);
}

TEST_CASE("kl_divergence floors zero entries of q") {
    const auto p = Distribution::from_probs({0.5, 0.5});
    const auto q = Distribution::from_probs({1.0, 0.0});
    const double kl = kl_divergence(p, q);
    CHECK(std::isfinite(kl));
    CHECK(kl == doctest::Approx(0.5 * std::log(0.5) + 0.5 * (std::log(0.5) - std::log(1e-12))));
}

TEST_CASE("kl_divergence is non-negative and zero only on identical inputs") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng() % 100;
        const auto p = random_distribution(rng, n);
        const auto q = random_distribution(rng, n);
        REQUIRE(kl_divergence(p, q) > 0.0);
        REQUIRE(kl_divergence(p, p) == 0.0);
    }
}

TEST_CASE("Distribution::from_probs validates") {
    CHECK_THROWS_AS(Distribution::from_probs({0.5, 0.6}), InvalidInput);
    CHECK_THROWS_AS(Distribution::from_probs({-0.1, 1.1}), InvalidInput);
    CHECK_THROWS_AS(Distribution::from_probs({}), InvalidInput);
    CHECK(Distribution::from_probs({0.3, 0.7}).argmax() == 1);
}

TEST_CASE("Matrix shape is checked") {
    CHECK_THROWS_AS(Matrix(2, 3, std::vector<float>(5)), InvalidInput);
    Matrix m(2, 3, std::vector<float>{1, 2, 3, 4, 5, 6});
    const Matrix t = m.transposed();
    CHECK(t.rows() == 3);
    CHECK(t(2, 1) == 6.0f);
    CHECK(t.transposed() == m);
}
