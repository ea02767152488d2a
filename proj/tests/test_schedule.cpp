#include <cmath>

#include "doctest.h"
#include "fusediff/schedule.hpp"

using namespace fusediff;

namespace {

// Geometric test plan with strictly positive beta mass at every step.
NoiseSchedule geometric_schedule(int T, double keep = 0.9, double absorb = 0.05) {
    std::vector<double> ab(size_t(T) + 1), gb(size_t(T) + 1);
    for (int t = 0; t <= T; ++t) {
        ab[size_t(t)] = std::pow(keep, t);
        gb[size_t(t)] = 1.0 - std::pow(1.0 - absorb, t);
    }
    return NoiseSchedule::from_cumulative(ab, gb);
}

} // namespace

TEST_CASE("linear schedule endpoints and monotonicity") {
    const auto s = NoiseSchedule::linear(500);
    CHECK(s.alpha_bar[0] == 1.0);
    CHECK(s.gamma_bar[0] == 0.0);
    CHECK(s.gamma_bar[500] == 1.0);
    CHECK(s.alpha_bar[500] == 0.0);
    for (int t = 1; t <= 500; ++t) {
        CHECK(s.alpha_bar[size_t(t)] <= s.alpha_bar[size_t(t) - 1]);
        CHECK(s.gamma_bar[size_t(t)] >= s.gamma_bar[size_t(t) - 1]);
        CHECK(s.alpha_bar[size_t(t)] + s.gamma_bar[size_t(t)] <= 1.0 + 1e-12);
    }
}

TEST_CASE("one-step schedule fully absorbs") {
    const auto s = NoiseSchedule::linear(1);
    CHECK(s.gamma[1] == 1.0);
    CHECK(s.alpha[1] == 0.0);
    CHECK(s.gamma_bar[1] == 1.0);
}

TEST_CASE("T=4 per-step gammas follow the hand recurrence") {
    const auto s = NoiseSchedule::linear(4);
    CHECK(s.gamma_bar[1] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(s.gamma_bar[2] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s.gamma_bar[3] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(s.gamma_bar[4] == 1.0);
    CHECK(s.gamma[1] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(s.gamma[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(s.gamma[3] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s.gamma[4] == 1.0);
}

TEST_CASE("per-modality beta algebra") {
    const auto layout = ModalityLayout::create({2, 4});

    // alpha=0.8, gamma=0.1, K=2 -> beta=0.05
    std::vector<double> ab = {1.0, 0.8};
    std::vector<double> gb = {0.0, 0.1};
    const auto s = NoiseSchedule::from_cumulative(ab, gb);
    const auto p = step_params(s, 1, layout);
    CHECK(p.alpha == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(p.gamma == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(p.beta[0] == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(p.beta[1] == doctest::Approx(0.025).epsilon(1e-12));

    // identity step and pure absorption leave no beta mass
    const auto ident = NoiseSchedule::from_cumulative({1.0, 1.0}, {0.0, 0.0});
    CHECK(step_params(ident, 1, layout).beta[0] == doctest::Approx(0.0));
    const auto absorb = NoiseSchedule::from_cumulative({1.0, 0.0}, {0.0, 1.0});
    CHECK(step_params(absorb, 1, layout).beta[0] == doctest::Approx(0.0));
}

TEST_CASE("cumulative params: t=0 is clean, t=T is absorbed, T=4 midpoint degenerate") {
    const auto layout = ModalityLayout::create({2, 2});
    const auto s = NoiseSchedule::linear(4);
    const auto c0 = cumulative_params(s, 0, layout);
    CHECK(c0.alpha == 1.0);
    CHECK(c0.gamma == 0.0);
    CHECK(c0.beta[0] == 0.0);

    const auto cT = cumulative_params(s, 4, layout);
    CHECK(cT.alpha == 0.0);
    CHECK(cT.gamma == 1.0);
    CHECK(cT.beta[0] == 0.0);

    const auto c2 = cumulative_params(s, 2, layout);
    CHECK(c2.alpha == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(c2.gamma == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(c2.beta[0] == doctest::Approx(0.0).epsilon(1e-12));

    CHECK_THROWS_AS(cumulative_params(s, 5, layout), error);
    CHECK_THROWS_AS(step_params(s, 0, layout), error);
}

TEST_CASE("column-sum identity per source modality is exact") {
    const auto layout = ModalityLayout::create({2, 7, 31});
    for (const auto& s : {NoiseSchedule::linear(16), geometric_schedule(16)}) {
        for (int t = 0; t <= 16; ++t) {
            for (int m = 0; m < layout.num_modalities(); ++m) {
                const int K = layout.sizes[size_t(m)];
                const double sum =
                    s.alpha_bar[size_t(t)] + s.gamma_bar[size_t(t)] + K * s.beta_bar(t, K);
                CHECK(std::abs(sum - 1.0) <= 1e-12);
            }
        }
    }
}

TEST_CASE("recomposition of cumulative sequences from per-step values") {
    for (const auto& s : {NoiseSchedule::linear(500), geometric_schedule(64)}) {
        double prod_a = 1.0, prod_keep = 1.0;
        for (int t = 1; t <= s.T; ++t) {
            prod_a *= s.alpha[size_t(t)];
            prod_keep *= 1.0 - s.gamma[size_t(t)];
            CHECK(std::abs(prod_a - s.alpha_bar[size_t(t)]) <= 1e-10);
            CHECK(std::abs((1.0 - prod_keep) - s.gamma_bar[size_t(t)]) <= 1e-10);
        }
    }
}

TEST_CASE("construction rejects invalid trajectories") {
    CHECK_THROWS_AS(NoiseSchedule::linear(0), error);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.5), error);
    // increasing alpha_bar
    CHECK_THROWS_AS(NoiseSchedule::from_cumulative({1.0, 0.5, 0.6}, {0.0, 0.1, 0.2}), error);
    // mass above one
    CHECK_THROWS_AS(NoiseSchedule::from_cumulative({1.0, 0.9}, {0.0, 0.2}), error);
    // wrong endpoints
    CHECK_THROWS_AS(NoiseSchedule::from_cumulative({0.9, 0.5}, {0.0, 0.1}), error);
}

TEST_CASE("range parameters collapse multiple steps exactly") {
    const auto s = geometric_schedule(12);
    // one-hop ranges match the per-step arrays
    for (int t = 1; t <= 12; ++t) {
        CHECK(s.alpha_range(t - 1, t) == doctest::Approx(s.alpha[size_t(t)]).epsilon(1e-12));
        CHECK(s.gamma_range(t - 1, t) == doctest::Approx(s.gamma[size_t(t)]).epsilon(1e-12));
    }
    // composition: (s->u) then (u->t) equals (s->t)
    const double a = s.alpha_range(2, 5) * s.alpha_range(5, 9);
    CHECK(a == doctest::Approx(s.alpha_range(2, 9)).epsilon(1e-12));
    const double keep = (1.0 - s.gamma_range(2, 5)) * (1.0 - s.gamma_range(5, 9));
    CHECK(1.0 - keep == doctest::Approx(s.gamma_range(2, 9)).epsilon(1e-12));
}
