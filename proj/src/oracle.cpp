#include "fusediff/oracle.hpp"

#include <cmath>

#include "fusediff/errors.hpp"

namespace fusediff {
namespace oracle {

namespace {

size_t at(int i, int j, int n) { return size_t(i) * size_t(n) + size_t(j); }

// Dense products carry ~1e-16 * T rounding noise in cells that are exactly
// zero in the cumulative closed form. Evidence below this cut is treated as
// unreachable so reachability classification matches exact arithmetic.
constexpr double kEvidenceEps = 1e-13;

void check_budget_total(const ModalityLayout& layout, const OracleBudget& b) {
    if (layout.total > b.max_total)
        fail(errc::oracle_budget, "vocabulary " + std::to_string(layout.total) +
                                      " exceeds oracle budget " + std::to_string(b.max_total));
}

std::vector<double> matmul_dense(const std::vector<double>& A, const std::vector<double>& B, int n) {
    std::vector<double> C(size_t(n) * size_t(n), 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double aik = A[at(i, k, n)];
            if (aik == 0.0) continue;
            for (int j = 0; j < n; ++j) C[at(i, j, n)] += aik * B[at(k, j, n)];
        }
    return C;
}

} // namespace

std::vector<double> dense_step(const NoiseSchedule& s, int t, const ModalityLayout& layout,
                               const OracleBudget& budget) {
    check_budget_total(layout, budget);
    s.check_t(t, 1);
    const int n = layout.total;
    const double alpha = s.alpha[size_t(t)];
    const double gamma = s.gamma[size_t(t)];
    std::vector<double> q(size_t(n) * size_t(n), 0.0);
    for (int m = 0; m < layout.num_modalities(); ++m) {
        const int K = layout.sizes[size_t(m)];
        const double beta = (1.0 - alpha - gamma) / K;
        for (int j = layout.segment_begin(m); j < layout.segment_end(m); ++j) {
            for (int i = layout.segment_begin(m); i < layout.segment_end(m); ++i)
                q[at(i, j, n)] = (i == j) ? alpha + beta : beta;
            q[at(layout.mask_index, j, n)] = gamma;
        }
    }
    q[at(layout.mask_index, layout.mask_index, n)] = 1.0;
    return q;
}

std::vector<double> dense_range(const NoiseSchedule& s, int from, int to,
                                const ModalityLayout& layout, const OracleBudget& budget) {
    check_budget_total(layout, budget);
    if (from > to) fail(errc::out_of_range, "dense_range needs from <= to");
    const int n = layout.total;
    std::vector<double> acc(size_t(n) * size_t(n), 0.0);
    for (int i = 0; i < n; ++i) acc[at(i, i, n)] = 1.0;
    for (int t = from + 1; t <= to; ++t) acc = matmul_dense(dense_step(s, t, layout, budget), acc, n);
    return acc;
}

std::vector<double> dense_chain(const NoiseSchedule& s, int t, const ModalityLayout& layout,
                                const OracleBudget& budget) {
    return dense_range(s, 0, t, layout, budget);
}

std::vector<double> bayes_posterior(const NoiseSchedule& s, int from, int to, int xt, int x0,
                                    const ModalityLayout& layout, const OracleBudget& budget) {
    check_budget_total(layout, budget);
    if (from >= to) fail(errc::out_of_range, "bayes_posterior needs from < to");
    const int n = layout.total;
    const std::vector<double> lo = dense_range(s, 0, from, layout, budget);
    const std::vector<double> hop = dense_range(s, from, to, layout, budget);
    const std::vector<double> hi = dense_range(s, 0, to, layout, budget);
    const double evidence = hi[at(xt, x0, n)];
    if (evidence <= kEvidenceEps)
        fail(errc::zero_probability_evidence, "q(x_t|x_0) = 0 in bayes enumeration");
    std::vector<double> out(size_t(n), 0.0);
    for (int j = 0; j < n; ++j) out[size_t(j)] = hop[at(xt, j, n)] * lo[at(j, x0, n)] / evidence;
    return out;
}

std::vector<double> bayes_posterior(const NoiseSchedule& s, int t, int xt, int x0,
                                    const ModalityLayout& layout, const OracleBudget& budget) {
    return bayes_posterior(s, t - 1, t, xt, x0, layout, budget);
}

CategoricalField naive_reverse_mixture(const NoiseSchedule& s, int from, int to,
                                       const TokenSequence& xt, const CategoricalField& x0_probs,
                                       const ModalityLayout& layout, const OracleBudget& budget) {
    check_budget_total(layout, budget);
    const int n = layout.total;
    const std::vector<double> hi = dense_range(s, 0, to, layout, budget);
    CategoricalField out(xt.size(), n);
    for (int p = 0; p < xt.size(); ++p) {
        const int v = xt.indices[size_t(p)];
        const double* w = x0_probs.row(p);
        double* o = out.row(p);
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            if (w[i] <= 0.0) continue;
            if (hi[at(v, i, n)] <= kEvidenceEps) continue; // unreachable clean token: drop
            const std::vector<double> post = bayes_posterior(s, from, to, v, i, layout, budget);
            for (int j = 0; j < n; ++j) o[j] += w[i] * post[size_t(j)];
            total += w[i];
        }
        if (total > 0.0) {
            for (int j = 0; j < n; ++j) o[j] /= total;
        } else {
            const std::vector<double> post = bayes_posterior(s, from, to, v, v, layout, budget);
            for (int j = 0; j < n; ++j) o[j] = post[size_t(j)];
        }
    }
    return out;
}

double exhaustive_vlb(const TokenSequence& x0, const DenoiseFn& model, const NoiseSchedule& s,
                      const ModalityLayout& layout, const OracleBudget& budget) {
    check_budget_total(layout, budget);
    if (x0.size() > budget.max_positions)
        fail(errc::oracle_budget, "positions exceed oracle budget");
    if (s.T > budget.max_T) fail(errc::oracle_budget, "T exceeds oracle budget");
    if (x0.size() == 0) return 0.0;
    const int n = layout.total;
    const int P = x0.size();
    constexpr double log_floor = 1e-30; // contract value shared with the objective

    // L_T against the stationary vector rebuilt from raw schedule arrays,
    // restricted to each position's segment + mask and renormalized (the same
    // per-position convention the objective uses).
    double vlb = 0.0;
    {
        const double aT = s.alpha_bar[size_t(s.T)];
        const double gT = s.gamma_bar[size_t(s.T)];
        const double z = 1.0 - aT;
        const std::vector<double> qT = dense_chain(s, s.T, layout, budget);
        for (int p = 0; p < P; ++p) {
            const int m = layout.modality_of(x0.indices[size_t(p)]);
            if (m == kMaskModality) continue;
            const double prior_tok =
                z > 0.0 ? (1.0 - aT - gT) / layout.sizes[size_t(m)] / z : 0.0;
            const double prior_mask = z > 0.0 ? gT / z : 0.0;
            for (int j = 0; j < n; ++j) {
                const double qj = qT[at(j, x0.indices[size_t(p)], n)];
                if (qj <= kEvidenceEps) continue;
                const double pr = (j == layout.mask_index) ? prior_mask : prior_tok;
                vlb += qj * std::log(qj / std::max(pr, log_floor));
            }
        }
    }

    for (int t = 1; t <= s.T; ++t) {
        const std::vector<double> chain = dense_chain(s, t, layout, budget);
        // per-position support and marginal probs of x_t
        std::vector<std::vector<int>> support;
        std::vector<std::vector<double>> prob;
        support.resize(size_t(P));
        prob.resize(size_t(P));
        long long configs = 1;
        for (int p = 0; p < P; ++p) {
            for (int j = 0; j < n; ++j) {
                const double q = chain[at(j, x0.indices[size_t(p)], n)];
                if (q > kEvidenceEps) {
                    support[size_t(p)].push_back(j);
                    prob[size_t(p)].push_back(q);
                }
            }
            configs *= (long long)support[size_t(p)].size();
            if (configs > budget.max_configs)
                fail(errc::oracle_budget, "joint x_t enumeration exceeds oracle budget");
        }
        std::vector<size_t> odo(size_t(P), 0);
        TokenSequence xt = x0;
        double expect = 0.0;
        for (long long c = 0; c < configs; ++c) {
            double weight = 1.0;
            for (int p = 0; p < P; ++p) {
                xt.indices[size_t(p)] = support[size_t(p)][odo[size_t(p)]];
                weight *= prob[size_t(p)][odo[size_t(p)]];
            }
            const CategoricalField w = model(xt, t);
            double term = 0.0;
            if (t == 1) {
                for (int p = 0; p < P; ++p)
                    term -= std::log(std::max(w.row(p)[x0.indices[size_t(p)]], log_floor));
            } else {
                const CategoricalField mix =
                    naive_reverse_mixture(s, t - 1, t, xt, w, layout, budget);
                for (int p = 0; p < P; ++p) {
                    const std::vector<double> truth = bayes_posterior(
                        s, t - 1, t, xt.indices[size_t(p)], x0.indices[size_t(p)], layout, budget);
                    for (int j = 0; j < n; ++j) {
                        if (truth[size_t(j)] <= 0.0) continue;
                        term += truth[size_t(j)] *
                                std::log(truth[size_t(j)] / std::max(mix.row(p)[j], log_floor));
                    }
                }
            }
            expect += weight * term;
            for (int p = 0; p < P; ++p) {
                if (++odo[size_t(p)] < support[size_t(p)].size()) break;
                odo[size_t(p)] = 0;
            }
        }
        vlb += expect;
    }
    return vlb;
}

std::vector<double> finite_diff(const std::function<double()>& loss,
                                const std::vector<double*>& coords, double step) {
    std::vector<double> grads;
    grads.reserve(coords.size());
    for (double* c : coords) {
        const double keep = *c;
        *c = keep + step;
        const double hi = loss();
        *c = keep - step;
        const double lo = loss();
        *c = keep;
        grads.push_back((hi - lo) / (2.0 * step));
    }
    return grads;
}

} // namespace oracle
} // namespace fusediff
