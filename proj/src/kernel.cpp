#include "fusediff/kernel.hpp"

#include <algorithm>
#include <cmath>

namespace fusediff {

namespace {

// Level-pair parameters entering every kernel formula. The unit step is
// (t-1, t); strided sampling uses wider pairs.
struct LevelPair {
    // cumulative at the lower level
    double A_lo, G_lo;
    // cumulative at the upper level
    double A_hi, G_hi;
    // collapsed one-hop step lower -> upper
    double a, g;

    double B_lo(int K) const { return (1.0 - A_lo - G_lo) / K; }
    double B_hi(int K) const { return (1.0 - A_hi - G_hi) / K; }
    double b(int K) const { return (1.0 - a - g) / K; }
};

LevelPair level_pair(const NoiseSchedule& s, int from, int to) {
    if (from >= to) fail(errc::out_of_range, "level pair needs from < to");
    s.check_t(from);
    s.check_t(to);
    LevelPair lp;
    lp.A_lo = s.alpha_bar[size_t(from)];
    lp.G_lo = s.gamma_bar[size_t(from)];
    lp.A_hi = s.alpha_bar[size_t(to)];
    lp.G_hi = s.gamma_bar[size_t(to)];
    lp.a = s.alpha_range(from, to);
    lp.g = s.gamma_range(from, to);
    return lp;
}

void check_index(const ModalityLayout& layout, int index, const char* what) {
    if (index < 0 || index >= layout.total)
        fail(errc::out_of_range, std::string(what) + " index " + std::to_string(index) +
                                     " outside [0," + std::to_string(layout.total) + ")");
}

} // namespace

SparseColumn range_column(const NoiseSchedule& s, int from, int to, int source,
                          const ModalityLayout& layout) {
    check_index(layout, source, "source");
    SparseColumn col;
    col.source_modality = layout.modality_of(source);
    if (col.source_modality == kMaskModality) return col; // absorbing point mass
    const LevelPair lp = level_pair(s, from, to);
    const int K = layout.sizes[size_t(col.source_modality)];
    col.within = lp.b(K);
    col.stay = lp.a + col.within;
    col.to_mask = lp.g;
    return col;
}

SparseColumn transition_column(const NoiseSchedule& s, int t, int source,
                               const ModalityLayout& layout) {
    s.check_t(t, 1);
    return range_column(s, t - 1, t, source, layout);
}

std::vector<double> q_xt_given_x0(const NoiseSchedule& s, int t, int x0,
                                  const ModalityLayout& layout) {
    s.check_t(t, 0);
    check_index(layout, x0, "x0");
    std::vector<double> out(size_t(layout.total), 0.0);
    const int m = layout.modality_of(x0);
    if (m == kMaskModality) {
        out[size_t(layout.mask_index)] = 1.0;
        return out;
    }
    const int K = layout.sizes[size_t(m)];
    const double A = s.alpha_bar[size_t(t)];
    const double G = s.gamma_bar[size_t(t)];
    const double B = s.beta_bar(t, K);
    for (int j = layout.segment_begin(m); j < layout.segment_end(m); ++j) out[size_t(j)] = B;
    out[size_t(x0)] = A + B;
    out[size_t(layout.mask_index)] = G;
    return out;
}

TokenSequence sample_forward(const NoiseSchedule& s, int t, const TokenSequence& x0,
                             const ModalityLayout& layout, Rng& rng) {
    s.check_t(t, 0);
    TokenSequence xt = x0;
    const double A = s.alpha_bar[size_t(t)];
    const double G = s.gamma_bar[size_t(t)];
    for (size_t p = 0; p < x0.indices.size(); ++p) {
        const int src = x0.indices[p];
        const int m = layout.modality_of(src);
        if (m == kMaskModality) continue; // mask stays mask
        const int K = layout.sizes[size_t(m)];
        const double B = std::max(s.beta_bar(t, K), 0.0);
        const double p_keep = A + B;
        const double p_within = double(K - 1) * B;
        const double total = p_keep + p_within + G;
        const double u = uniform01(rng) * total;
        if (u < p_keep) continue;
        if (u < p_keep + p_within) {
            // uniform over the segment minus the source token
            int j = layout.segment_begin(m) + int(uniform01(rng) * (K - 1));
            j = std::min(j, layout.segment_begin(m) + K - 2);
            if (j >= src) ++j;
            xt.indices[p] = j;
        } else {
            xt.indices[p] = layout.mask_index;
        }
    }
    return xt;
}

std::vector<double> strided_posterior(const NoiseSchedule& s, int from, int to, int xt, int x0,
                                      const ModalityLayout& layout) {
    check_index(layout, xt, "xt");
    check_index(layout, x0, "x0");
    std::vector<double> out(size_t(layout.total), 0.0);
    const int m = layout.modality_of(x0);
    const int mv = layout.modality_of(xt);
    if (m == kMaskModality) {
        if (mv != kMaskModality)
            fail(errc::zero_probability_evidence, "non-mask x_t from a mask x_0");
        out[size_t(layout.mask_index)] = 1.0;
        return out;
    }
    if (mv != kMaskModality && mv != m)
        fail(errc::zero_probability_evidence, "x_t lies in a foreign modality segment");

    const LevelPair lp = level_pair(s, from, to);
    const int K = layout.sizes[size_t(m)];
    const double A_lo = lp.A_lo, G_lo = lp.G_lo, B_lo = lp.B_lo(K);
    const double a = lp.a, g = lp.g, b = lp.b(K);
    const int seg_b = layout.segment_begin(m), seg_e = layout.segment_end(m);

    if (mv == kMaskModality) {
        const double evidence = lp.G_hi;
        if (evidence <= 0.0)
            fail(errc::zero_probability_evidence, "mask x_t before any absorption mass");
        for (int j = seg_b; j < seg_e; ++j) out[size_t(j)] = g * B_lo / evidence;
        out[size_t(x0)] = g * (A_lo + B_lo) / evidence;
        out[size_t(layout.mask_index)] = G_lo / evidence;
        return out;
    }

    const double B_hi = lp.B_hi(K);
    const double evidence = (xt == x0) ? lp.A_hi + B_hi : B_hi;
    if (evidence <= 0.0)
        fail(errc::zero_probability_evidence, "q(x_t|x_0) = 0 for this (x_t, x_0) pair");
    if (xt == x0) {
        for (int j = seg_b; j < seg_e; ++j) out[size_t(j)] = b * B_lo / evidence;
        out[size_t(x0)] = (a + b) * (A_lo + B_lo) / evidence;
    } else {
        for (int j = seg_b; j < seg_e; ++j) out[size_t(j)] = b * B_lo / evidence;
        out[size_t(x0)] = b * (A_lo + B_lo) / evidence;
        out[size_t(xt)] = (a + b) * B_lo / evidence;
    }
    return out;
}

std::vector<double> posterior(const NoiseSchedule& s, int t, int xt, int x0,
                              const ModalityLayout& layout) {
    s.check_t(t, 1);
    return strided_posterior(s, t - 1, t, xt, x0, layout);
}

namespace {

void check_prediction_support(const CategoricalField& w, const TokenSequence& xt,
                              const ModalityLayout& layout) {
    if (w.vocab != layout.total) fail(errc::invalid_prediction, "x0_probs vocabulary mismatch");
    if (w.positions() != xt.size()) fail(errc::invalid_prediction, "x0_probs position count mismatch");
    for (int p = 0; p < xt.size(); ++p) {
        const int m = xt.position_modality[size_t(p)];
        const double* row = w.row(p);
        double sum = 0.0;
        for (int j = 0; j < layout.total; ++j) {
            if (row[j] < 0.0) fail(errc::invalid_prediction, "negative probability in x0_probs");
            if (row[j] != 0.0 && layout.modality_of(j) != m)
                fail(errc::invalid_prediction,
                     "x0_probs mass outside own segment at position " + std::to_string(p));
            sum += row[j];
        }
        // loose enough for finite-difference probes of the mixture
        if (std::abs(sum - 1.0) > 1e-4)
            fail(errc::invalid_prediction, "x0_probs row does not sum to 1");
    }
}

} // namespace

void reverse_mixture_row(const NoiseSchedule& s, int from, int to, int v, int m,
                         const double* w, const ModalityLayout& layout, double* o) {
    const LevelPair lp = level_pair(s, from, to);
    const int K = layout.sizes[size_t(m)];
    const int seg_b = layout.segment_begin(m), seg_e = layout.segment_end(m);
    const double A_lo = lp.A_lo, G_lo = lp.G_lo, B_lo = lp.B_lo(K);
    const double a = lp.a, g = lp.g, b = lp.b(K);

    if (v == layout.mask_index) {
        if (lp.G_hi <= 0.0)
            fail(errc::zero_probability_evidence, "mask x_t before any absorption mass");
        for (int j = seg_b; j < seg_e; ++j) o[j] = g * (B_lo + A_lo * w[j]) / lp.G_hi;
        o[layout.mask_index] = G_lo / lp.G_hi;
        return;
    }
    if (layout.modality_of(v) != m)
        fail(errc::invalid_prediction, "x_t token lies in a foreign segment");

    const double B_hi = lp.B_hi(K);
    const double ev_stay = lp.A_hi + B_hi;
    if (ev_stay <= 0.0 && B_hi <= 0.0)
        fail(errc::zero_probability_evidence, "non-mask x_t with no reachable clean token");
    // r_i = w_i / q(x_to = v | x0 = i); R = sum_i r_i
    double R = 0.0;
    std::vector<double> r(size_t(K), 0.0);
    for (int j = seg_b; j < seg_e; ++j) {
        const double ev = (j == v) ? ev_stay : B_hi;
        if (ev > 0.0) {
            r[size_t(j - seg_b)] = w[j] / ev;
            R += r[size_t(j - seg_b)];
        }
    }
    double total = 0.0;
    for (int j = seg_b; j < seg_e; ++j) {
        const double coef = (j == v) ? a + b : b;
        o[j] = coef * (B_lo * R + A_lo * r[size_t(j - seg_b)]);
        total += o[j];
    }
    if (total > 0.0) {
        for (int j = seg_b; j < seg_e; ++j) o[j] /= total;
    } else {
        // Model mass is entirely on unreachable clean tokens; condition on
        // the one clean token consistent with the evidence (x0 = v).
        const std::vector<double> fb = strided_posterior(s, from, to, v, v, layout);
        for (int j = 0; j < layout.total; ++j) o[j] = fb[size_t(j)];
    }
}

CategoricalField strided_reverse_distribution(const NoiseSchedule& s, int from, int to,
                                              const TokenSequence& xt,
                                              const CategoricalField& x0_probs,
                                              const ModalityLayout& layout) {
    check_prediction_support(x0_probs, xt, layout);
    CategoricalField out(xt.size(), layout.total);
    for (int p = 0; p < xt.size(); ++p)
        reverse_mixture_row(s, from, to, xt.indices[size_t(p)], xt.position_modality[size_t(p)],
                            x0_probs.row(p), layout, out.row(p));
    return out;
}

CategoricalField reverse_distribution(const NoiseSchedule& s, int t, const TokenSequence& xt,
                                      const CategoricalField& x0_probs,
                                      const ModalityLayout& layout) {
    s.check_t(t, 1);
    return strided_reverse_distribution(s, t - 1, t, xt, x0_probs, layout);
}

void reverse_distribution_backward(const NoiseSchedule& s, int from, int to,
                                   const TokenSequence& xt, const CategoricalField& x0_probs,
                                   const CategoricalField& dL_dout, const ModalityLayout& layout,
                                   CategoricalField& dL_dw) {
    const LevelPair lp = level_pair(s, from, to);
    for (int p = 0; p < xt.size(); ++p) {
        const int v = xt.indices[size_t(p)];
        const int m = xt.position_modality[size_t(p)];
        const int K = layout.sizes[size_t(m)];
        const int seg_b = layout.segment_begin(m), seg_e = layout.segment_end(m);
        const double A_lo = lp.A_lo, B_lo = lp.B_lo(K);
        const double a = lp.a, g = lp.g, b = lp.b(K);
        const double* w = x0_probs.row(p);
        const double* dout = dL_dout.row(p);
        double* dw = dL_dw.row(p);

        if (v == layout.mask_index) {
            const double scale = g * A_lo / lp.G_hi;
            for (int j = seg_b; j < seg_e; ++j) dw[j] += dout[j] * scale;
            continue;
        }

        const double B_hi = lp.B_hi(K);
        const double ev_stay = lp.A_hi + B_hi;
        std::vector<double> r(size_t(K), 0.0), ev(size_t(K), 0.0);
        double R = 0.0;
        for (int j = seg_b; j < seg_e; ++j) {
            ev[size_t(j - seg_b)] = (j == v) ? ev_stay : B_hi;
            if (ev[size_t(j - seg_b)] > 0.0) {
                r[size_t(j - seg_b)] = w[j] / ev[size_t(j - seg_b)];
                R += r[size_t(j - seg_b)];
            }
        }
        // Recompute unnormalized mixture and its total.
        std::vector<double> N(size_t(K), 0.0);
        double S = 0.0;
        for (int j = seg_b; j < seg_e; ++j) {
            const double coef = (j == v) ? a + b : b;
            N[size_t(j - seg_b)] = coef * (B_lo * R + A_lo * r[size_t(j - seg_b)]);
            S += N[size_t(j - seg_b)];
        }
        if (S <= 0.0) continue; // fallback branch is constant in w
        double dot = 0.0;
        for (int j = seg_b; j < seg_e; ++j) dot += dout[j] * N[size_t(j - seg_b)] / S;
        double C = 0.0;
        std::vector<double> dN(size_t(K), 0.0);
        for (int j = seg_b; j < seg_e; ++j) {
            const double coef = (j == v) ? a + b : b;
            dN[size_t(j - seg_b)] = (dout[j] - dot) / S;
            C += coef * dN[size_t(j - seg_b)];
        }
        for (int j = seg_b; j < seg_e; ++j) {
            const int i = j - seg_b;
            if (ev[size_t(i)] <= 0.0) continue;
            const double coef = (j == v) ? a + b : b;
            const double dr = B_lo * C + A_lo * coef * dN[size_t(i)];
            dw[j] += dr / ev[size_t(i)];
        }
    }
}

std::vector<double> stationary_prior(const NoiseSchedule& s, const ModalityLayout& layout) {
    std::vector<double> out(size_t(layout.total), 0.0);
    for (int m = 0; m < layout.num_modalities(); ++m) {
        const double B = s.beta_bar(s.T, layout.sizes[size_t(m)]);
        for (int j = layout.segment_begin(m); j < layout.segment_end(m); ++j) out[size_t(j)] = B;
    }
    out[size_t(layout.mask_index)] = s.gamma_bar[size_t(s.T)];
    return out;
}

std::vector<double> dense_qbar(const NoiseSchedule& s, int t, const ModalityLayout& layout,
                               int oracle_bound) {
    s.check_t(t, 0);
    const int n = layout.total;
    if (n > oracle_bound)
        fail(errc::oracle_budget, "vocabulary " + std::to_string(n) + " exceeds dense bound " +
                                      std::to_string(oracle_bound));
    // identity at t = 0
    std::vector<double> acc(size_t(n) * size_t(n), 0.0);
    for (int i = 0; i < n; ++i) acc[size_t(i) * size_t(n) + size_t(i)] = 1.0;
    std::vector<double> q(size_t(n) * size_t(n), 0.0), next(size_t(n) * size_t(n), 0.0);
    for (int step = 1; step <= t; ++step) {
        std::fill(q.begin(), q.end(), 0.0);
        for (int j = 0; j < n; ++j) {
            const SparseColumn col = transition_column(s, step, j, layout);
            if (col.source_modality == kMaskModality) {
                q[size_t(layout.mask_index) * size_t(n) + size_t(j)] = 1.0;
                continue;
            }
            const int m = col.source_modality;
            for (int i = layout.segment_begin(m); i < layout.segment_end(m); ++i)
                q[size_t(i) * size_t(n) + size_t(j)] = (i == j) ? col.stay : col.within;
            q[size_t(layout.mask_index) * size_t(n) + size_t(j)] = col.to_mask;
        }
        // next = q * acc
        std::fill(next.begin(), next.end(), 0.0);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k) {
                const double qik = q[size_t(i) * size_t(n) + size_t(k)];
                if (qik == 0.0) continue;
                for (int j = 0; j < n; ++j)
                    next[size_t(i) * size_t(n) + size_t(j)] += qik * acc[size_t(k) * size_t(n) + size_t(j)];
            }
        acc.swap(next);
    }
    return acc;
}

} // namespace fusediff
