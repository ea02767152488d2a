#include "fusediff/objective.hpp"

#include <cmath>

#include "fusediff/errors.hpp"

namespace fusediff {

namespace {

double clamped_log(double p) { return std::log(std::max(p, kLogFloor)); }

} // namespace

double l0_term(const TokenSequence& x0, const TokenSequence& x1,
               const CategoricalField& x0_probs) {
    if (x0.size() != x1.size() || x0_probs.positions() != x0.size())
        fail(errc::invalid_prediction, "l0 inputs disagree on position count");
    double nll = 0.0;
    for (int p = 0; p < x0.size(); ++p)
        nll -= clamped_log(x0_probs.row(p)[x0.indices[size_t(p)]]);
    return nll;
}

double l0_term_grad(const TokenSequence& x0, const CategoricalField& x0_probs,
                    CategoricalField& dprobs) {
    double nll = 0.0;
    for (int p = 0; p < x0.size(); ++p) {
        const double w = x0_probs.row(p)[x0.indices[size_t(p)]];
        nll -= clamped_log(w);
        if (w > kLogFloor) dprobs.row(p)[x0.indices[size_t(p)]] -= 1.0 / w;
    }
    return nll;
}

double lt_term(const NoiseSchedule& s, int t, const TokenSequence& x0, const TokenSequence& xt,
               const CategoricalField& x0_probs, const ModalityLayout& layout) {
    if (t < 2 || t > s.T) fail(errc::out_of_range, "lt_term needs 2 <= t <= T");
    const CategoricalField model = reverse_distribution(s, t, xt, x0_probs, layout);
    double kl = 0.0;
    for (int p = 0; p < x0.size(); ++p) {
        const std::vector<double> truth =
            posterior(s, t, xt.indices[size_t(p)], x0.indices[size_t(p)], layout);
        const double* q = truth.data();
        const double* m = model.row(p);
        for (int j = 0; j < layout.total; ++j)
            if (q[j] > 0.0) kl += q[j] * (std::log(q[j]) - clamped_log(m[j]));
    }
    return kl;
}

double lt_term_grad(const NoiseSchedule& s, int t, const TokenSequence& x0,
                    const TokenSequence& xt, const CategoricalField& x0_probs,
                    const ModalityLayout& layout, CategoricalField& dprobs) {
    if (t < 2 || t > s.T) fail(errc::out_of_range, "lt_term needs 2 <= t <= T");
    const CategoricalField model = reverse_distribution(s, t, xt, x0_probs, layout);
    CategoricalField dmodel(xt.size(), layout.total);
    double kl = 0.0;
    for (int p = 0; p < x0.size(); ++p) {
        const std::vector<double> truth =
            posterior(s, t, xt.indices[size_t(p)], x0.indices[size_t(p)], layout);
        const double* q = truth.data();
        const double* m = model.row(p);
        double* dm = dmodel.row(p);
        for (int j = 0; j < layout.total; ++j) {
            if (q[j] <= 0.0) continue;
            kl += q[j] * (std::log(q[j]) - clamped_log(m[j]));
            if (m[j] > kLogFloor) dm[j] = -q[j] / m[j];
        }
    }
    reverse_distribution_backward(s, t - 1, t, xt, x0_probs, dmodel, layout, dprobs);
    return kl;
}

double lT_term(const NoiseSchedule& s, const TokenSequence& x0, const ModalityLayout& layout) {
    const double alpha_T = s.alpha_bar[size_t(s.T)];
    const double gamma_T = s.gamma_bar[size_t(s.T)];
    const double z = 1.0 - alpha_T; // restricted prior mass, same for every segment
    double kl = 0.0;
    for (int p = 0; p < x0.size(); ++p) {
        const int i = x0.indices[size_t(p)];
        const int m = layout.modality_of(i);
        const std::vector<double> q = q_xt_given_x0(s, s.T, i, layout);
        if (m == kMaskModality) continue; // mask input: q is the prior point mass
        const int K = layout.sizes[size_t(m)];
        const double prior_tok = z > 0.0 ? s.beta_bar(s.T, K) / z : 0.0;
        const double prior_mask = z > 0.0 ? gamma_T / z : 0.0;
        for (int j = layout.segment_begin(m); j < layout.segment_end(m); ++j)
            if (q[size_t(j)] > 0.0)
                kl += q[size_t(j)] * (std::log(q[size_t(j)]) - clamped_log(prior_tok));
        const double qm = q[size_t(layout.mask_index)];
        if (qm > 0.0) kl += qm * (std::log(qm) - clamped_log(prior_mask));
    }
    return kl;
}

LossBreakdown vlb_estimate(const TokenSequence& x0, const DenoiseFn& model,
                           const NoiseSchedule& s, const ModalityLayout& layout, Rng& rng) {
    LossBreakdown out;
    if (x0.size() == 0) return out;
    const int t = 1 + std::min(int(uniform01(rng) * s.T), s.T - 1);
    out.t_sampled = t;
    const TokenSequence xt = sample_forward(s, t, x0, layout, rng);
    const CategoricalField probs = model(xt, t);
    if (t == 1)
        out.l0 = l0_term(x0, xt, probs);
    else
        out.lt = lt_term(s, t, x0, xt, probs, layout);
    out.lT = lT_term(s, x0, layout);
    out.total = (t == 1) ? out.l0 : out.lt;
    return out;
}

LossBreakdown vlb_full_sum(const TokenSequence& x0, const DenoiseFn& model,
                           const NoiseSchedule& s, const ModalityLayout& layout, Rng& rng) {
    LossBreakdown out;
    if (x0.size() == 0) return out;
    for (int t = 1; t <= s.T; ++t) {
        const TokenSequence xt = sample_forward(s, t, x0, layout, rng);
        const CategoricalField probs = model(xt, t);
        if (t == 1)
            out.l0 = l0_term(x0, xt, probs);
        else
            out.lt += lt_term(s, t, x0, xt, probs, layout);
    }
    out.lT = lT_term(s, x0, layout);
    out.total = out.l0 + out.lt;
    out.t_sampled = -1;
    return out;
}

} // namespace fusediff
