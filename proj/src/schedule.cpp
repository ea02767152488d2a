#include "fusediff/schedule.hpp"

#include <cmath>

namespace fusediff {

namespace {

void derive_per_step(NoiseSchedule& s) {
    const int T = s.T;
    s.alpha.assign(size_t(T) + 1, 1.0);
    s.gamma.assign(size_t(T) + 1, 0.0);
    for (int t = 1; t <= T; ++t) {
        const double ab_prev = s.alpha_bar[size_t(t) - 1];
        const double gb_prev = s.gamma_bar[size_t(t) - 1];
        const double ab = s.alpha_bar[size_t(t)];
        const double gb = s.gamma_bar[size_t(t)];
        double a, g;
        if (gb >= 1.0) {
            // Full-absorption step: everything lands on mask, exactly.
            g = 1.0;
            a = 0.0;
        } else {
            if (ab_prev <= 0.0)
                fail(errc::schedule_construction,
                     "alpha_bar vanished before the final step (t=" + std::to_string(t) + ")");
            a = ab / ab_prev;
            g = (gb - gb_prev) / (1.0 - gb_prev);
        }
        if (!(a >= 0.0 && a <= 1.0))
            fail(errc::schedule_construction, "derived alpha out of [0,1] at t=" + std::to_string(t));
        if (!(g >= 0.0 && g <= 1.0))
            fail(errc::schedule_construction, "derived gamma out of [0,1] at t=" + std::to_string(t));
        s.alpha[size_t(t)] = a;
        s.gamma[size_t(t)] = g;
    }
}

void validate_cumulative(const NoiseSchedule& s) {
    if (s.alpha_bar.size() != size_t(s.T) + 1 || s.gamma_bar.size() != size_t(s.T) + 1)
        fail(errc::schedule_construction, "cumulative arrays must have size T+1");
    if (s.alpha_bar[0] != 1.0 || s.gamma_bar[0] != 0.0)
        fail(errc::schedule_construction, "need alpha_bar[0]=1 and gamma_bar[0]=0");
    for (int t = 0; t <= s.T; ++t) {
        const double ab = s.alpha_bar[size_t(t)];
        const double gb = s.gamma_bar[size_t(t)];
        if (!(ab >= 0.0 && ab <= 1.0 && gb >= 0.0 && gb <= 1.0))
            fail(errc::schedule_construction, "cumulative value out of [0,1] at t=" + std::to_string(t));
        if (ab + gb > 1.0 + 1e-12)
            fail(errc::schedule_construction,
                 "alpha_bar + gamma_bar exceeds 1 at t=" + std::to_string(t));
        if (t > 0) {
            if (ab > s.alpha_bar[size_t(t) - 1] + 1e-15)
                fail(errc::schedule_construction, "alpha_bar must be non-increasing");
            if (gb < s.gamma_bar[size_t(t) - 1] - 1e-15)
                fail(errc::schedule_construction, "gamma_bar must be non-decreasing");
        }
    }
}

} // namespace

NoiseSchedule NoiseSchedule::linear(int T, double alpha_floor) {
    if (T < 1) fail(errc::schedule_construction, "T must be >= 1");
    if (!(alpha_floor > 0.0) || alpha_floor * T >= 1.0)
        fail(errc::schedule_construction, "alpha_floor must satisfy 0 < alpha_floor << 1/T");
    NoiseSchedule s;
    s.T = T;
    s.alpha_floor = alpha_floor;
    s.alpha_bar.resize(size_t(T) + 1);
    s.gamma_bar.resize(size_t(T) + 1);
    for (int t = 0; t <= T; ++t) {
        s.gamma_bar[size_t(t)] = double(t) / T;
        s.alpha_bar[size_t(t)] = std::max(1.0 - double(t) / T, alpha_floor);
    }
    s.gamma_bar[size_t(T)] = 1.0;
    s.alpha_bar[size_t(T)] = 0.0; // exact absorbing endpoint
    s.alpha_bar[0] = 1.0;
    validate_cumulative(s);
    derive_per_step(s);
    return s;
}

NoiseSchedule NoiseSchedule::from_cumulative(std::vector<double> alpha_bar,
                                             std::vector<double> gamma_bar,
                                             double alpha_floor) {
    if (alpha_bar.size() < 2 || alpha_bar.size() != gamma_bar.size())
        fail(errc::schedule_construction, "cumulative arrays need matching size >= 2");
    NoiseSchedule s;
    s.T = int(alpha_bar.size()) - 1;
    s.alpha_floor = alpha_floor;
    s.alpha_bar = std::move(alpha_bar);
    s.gamma_bar = std::move(gamma_bar);
    // Interior floor guard: keep division by alpha_bar[t-1] defined for any
    // step that is not yet fully absorbed.
    for (int t = 1; t < s.T; ++t)
        if (s.gamma_bar[size_t(t)] < 1.0 && s.alpha_bar[size_t(t)] < alpha_floor)
            s.alpha_bar[size_t(t)] = alpha_floor;
    validate_cumulative(s);
    derive_per_step(s);
    return s;
}

void NoiseSchedule::check_t(int t, int lo) const {
    if (t < lo || t > T)
        fail(errc::out_of_range, "step t=" + std::to_string(t) + " outside [" +
                                     std::to_string(lo) + "," + std::to_string(T) + "]");
}

double NoiseSchedule::alpha_range(int s, int t) const {
    check_t(s);
    check_t(t);
    if (s > t) fail(errc::out_of_range, "alpha_range needs s <= t");
    if (alpha_bar[size_t(t)] == 0.0) return 0.0;
    return alpha_bar[size_t(t)] / alpha_bar[size_t(s)];
}

double NoiseSchedule::gamma_range(int s, int t) const {
    check_t(s);
    check_t(t);
    if (s > t) fail(errc::out_of_range, "gamma_range needs s <= t");
    const double gs = gamma_bar[size_t(s)];
    const double gt = gamma_bar[size_t(t)];
    if (gt >= 1.0) return 1.0;
    return (gt - gs) / (1.0 - gs);
}

ScheduleParams step_params(const NoiseSchedule& s, int t, const ModalityLayout& layout) {
    s.check_t(t, 1);
    ScheduleParams p;
    p.alpha = s.alpha[size_t(t)];
    p.gamma = s.gamma[size_t(t)];
    for (int K : layout.sizes) p.beta.push_back((1.0 - p.alpha - p.gamma) / K);
    return p;
}

ScheduleParams cumulative_params(const NoiseSchedule& s, int t, const ModalityLayout& layout) {
    s.check_t(t, 0);
    ScheduleParams p;
    p.alpha = s.alpha_bar[size_t(t)];
    p.gamma = s.gamma_bar[size_t(t)];
    for (int K : layout.sizes) p.beta.push_back((1.0 - p.alpha - p.gamma) / K);
    return p;
}

} // namespace fusediff
