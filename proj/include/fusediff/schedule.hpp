#pragma once

#include <vector>

#include "fusediff/errors.hpp"
#include "fusediff/layout.hpp"

namespace fusediff {

// Per-step and cumulative corruption parameters for t in {0..T}.
//
// Cumulative arrays satisfy alpha_bar[0] = 1, gamma_bar[0] = 0, and the chain
// identities alpha_bar[t] = prod alpha[s], 1 - gamma_bar[t] = prod (1 - gamma[s]).
// Per-modality beta values are derived on demand from (alpha, gamma, K) so the
// schedule itself stays layout-independent.
struct NoiseSchedule {
    int T = 0;
    double alpha_floor = 1e-9;
    std::vector<double> alpha_bar; // size T+1
    std::vector<double> gamma_bar; // size T+1
    std::vector<double> alpha;     // size T+1; alpha[0] == 1 by convention
    std::vector<double> gamma;     // size T+1; gamma[0] == 0 by convention

    // Linear plan: gamma_bar[t] = t/T; alpha_bar[t] = 1 - t/T floored at
    // alpha_floor for interior steps. The endpoint is exact: alpha_bar[T] = 0
    // and gamma[T] = 1, so the chain fully absorbs and the stationary
    // distribution is exactly the mask point mass.
    static NoiseSchedule linear(int T, double alpha_floor = 1e-9);

    // Custom cumulative trajectories (tests, truncated schedules). Arrays must
    // have size T+1 with exact endpoints alpha_bar[0] = 1, gamma_bar[0] = 0,
    // alpha_bar non-increasing, gamma_bar non-decreasing, sums <= 1.
    static NoiseSchedule from_cumulative(std::vector<double> alpha_bar,
                                         std::vector<double> gamma_bar,
                                         double alpha_floor = 1e-9);

    void check_t(int t, int lo = 0) const;

    double beta(int t, int K) const { return (1.0 - alpha[size_t(t)] - gamma[size_t(t)]) / K; }
    double beta_bar(int t, int K) const {
        return (1.0 - alpha_bar[size_t(t)] - gamma_bar[size_t(t)]) / K;
    }

    // Effective one-hop parameters for the collapsed kernel from level s to
    // level t (s < t). The cumulative closed form holds between any two levels,
    // which is what strided sampling relies on.
    double alpha_range(int s, int t) const;
    double gamma_range(int s, int t) const;
    double beta_range(int s, int t, int K) const {
        return (1.0 - alpha_range(s, t) - gamma_range(s, t)) / K;
    }
};

// Per-step (alpha_t, gamma_t, beta_t per modality); column sums of the implied
// transition matrix are exactly 1.
struct ScheduleParams {
    double alpha = 0;
    double gamma = 0;
    std::vector<double> beta; // per modality
};

ScheduleParams step_params(const NoiseSchedule& s, int t, const ModalityLayout& layout);
ScheduleParams cumulative_params(const NoiseSchedule& s, int t, const ModalityLayout& layout);

} // namespace fusediff
