#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "fusediff/denoise_fn.hpp"
#include "fusediff/layout.hpp"
#include "fusediff/schedule.hpp"

namespace fusediff {

// Deliberately naive brute-force implementations used as independent checks.
// They rebuild everything from raw schedule arrays and never call the sparse
// kernel paths, so agreement with those paths is meaningful.
namespace oracle {

struct OracleBudget {
    int max_total = 64;     // vocabulary bound for dense matrices
    int max_positions = 8;  // sequence bound for joint enumeration
    int max_T = 16;         // step bound
    long long max_configs = 100000; // joint x_t configurations per step
};

// Dense one-step transition matrix Q_t; (i,j) = q(x_t = i | x_{t-1} = j).
std::vector<double> dense_step(const NoiseSchedule& s, int t, const ModalityLayout& layout,
                               const OracleBudget& budget = {});

// Dense product Q_to * ... * Q_{from+1} (identity when from == to).
std::vector<double> dense_range(const NoiseSchedule& s, int from, int to,
                                const ModalityLayout& layout, const OracleBudget& budget = {});

// Cumulative chain from x_0: Q_t ... Q_1.
std::vector<double> dense_chain(const NoiseSchedule& s, int t, const ModalityLayout& layout,
                                const OracleBudget& budget = {});

// Posterior q(x_from | x_to, x_0) by direct Bayes enumeration over dense
// matrices. Throws zero_probability_evidence when q(x_to | x_0) = 0.
std::vector<double> bayes_posterior(const NoiseSchedule& s, int from, int to, int xt, int x0,
                                    const ModalityLayout& layout, const OracleBudget& budget = {});
std::vector<double> bayes_posterior(const NoiseSchedule& s, int t, int xt, int x0,
                                    const ModalityLayout& layout, const OracleBudget& budget = {});

// Naive O(K^2) mixture sum_i q(x_from | x_to, x0=i) w_i per position, with the
// same unreachable-term conventions as the fast path.
CategoricalField naive_reverse_mixture(const NoiseSchedule& s, int from, int to,
                                       const TokenSequence& xt, const CategoricalField& x0_probs,
                                       const ModalityLayout& layout,
                                       const OracleBudget& budget = {});

// Exact variational bound L_T + sum_t E_{x_t}[term_t] by joint enumeration of
// x_t configurations, with KL/NLL terms computed from bayes posteriors.
double exhaustive_vlb(const TokenSequence& x0, const DenoiseFn& model, const NoiseSchedule& s,
                      const ModalityLayout& layout, const OracleBudget& budget = {});

// Central finite differences of `loss` with respect to the doubles behind
// `coords`, evaluated one coordinate at a time.
std::vector<double> finite_diff(const std::function<double()>& loss,
                                const std::vector<double*>& coords, double step = 1e-4);

// Field verification battery (the `verify` subcommand). Prints one line per
// check; returns true when every check passes.
bool run_verify(std::ostream& out);

} // namespace oracle
} // namespace fusediff
