#pragma once

#include <vector>

#include "fusediff/layout.hpp"
#include "fusediff/rng.hpp"
#include "fusediff/schedule.hpp"

namespace fusediff {

// Per-position probability vectors over the full fused vocabulary.
struct CategoricalField {
    int vocab = 0;
    std::vector<double> probs; // positions x vocab, row-major

    CategoricalField() = default;
    CategoricalField(int positions, int vocab_size)
        : vocab(vocab_size), probs(size_t(positions) * size_t(vocab_size), 0.0) {}

    int positions() const { return vocab == 0 ? 0 : int(probs.size() / size_t(vocab)); }
    double* row(int p) { return probs.data() + size_t(p) * size_t(vocab); }
    const double* row(int p) const { return probs.data() + size_t(p) * size_t(vocab); }
};

// One column of the transition matrix, stored sparsely. A non-mask source in
// modality m keeps its token with probability `stay`, moves to each other
// token of the same segment with probability `within`, and absorbs with
// probability `to_mask`. A mask source is a point mass on mask.
struct SparseColumn {
    double stay = 1.0;
    double within = 0.0;
    double to_mask = 0.0;
    int source_modality = kMaskModality;
};

// Column of Q_t for the unit step t-1 -> t.
SparseColumn transition_column(const NoiseSchedule& s, int t, int source,
                               const ModalityLayout& layout);

// Column of the collapsed kernel from level `from` to level `to` (from < to).
SparseColumn range_column(const NoiseSchedule& s, int from, int to, int source,
                          const ModalityLayout& layout);

// Closed-form forward marginal q(x_t | x_0) as a dense vector over the
// vocabulary. A mask x0 yields the mask point mass.
std::vector<double> q_xt_given_x0(const NoiseSchedule& s, int t, int x0,
                                  const ModalityLayout& layout);

// Draw x_t ~ q(x_t | x_0) independently per position.
TokenSequence sample_forward(const NoiseSchedule& s, int t, const TokenSequence& x0,
                             const ModalityLayout& layout, Rng& rng);

// Exact posterior q(x_{t-1} | x_t, x_0). Throws zero_probability_evidence for
// unreachable (x_t, x_0) pairs.
std::vector<double> posterior(const NoiseSchedule& s, int t, int xt, int x0,
                              const ModalityLayout& layout);

// Posterior between arbitrary levels: q(x_from | x_to, x_0), from < to.
std::vector<double> strided_posterior(const NoiseSchedule& s, int from, int to, int xt, int x0,
                                      const ModalityLayout& layout);

// x0-reparameterized reverse distribution, Eq. 7 mixture computed in O(K) per
// position via the stay/within/mask decomposition:
//   p(x_from | x_to) ~ sum_{x0~} q(x_from | x_to, x0~) w(x0~)
// `x0_probs` must put mass only inside each position's own segment.
CategoricalField reverse_distribution(const NoiseSchedule& s, int t, const TokenSequence& xt,
                                      const CategoricalField& x0_probs,
                                      const ModalityLayout& layout);
CategoricalField strided_reverse_distribution(const NoiseSchedule& s, int from, int to,
                                              const TokenSequence& xt,
                                              const CategoricalField& x0_probs,
                                              const ModalityLayout& layout);

// Single-position mixture: current token v at a position of modality m, model
// probabilities w_row over the full vocabulary (own-segment support). Writes
// the level-`from` distribution into out_row.
void reverse_mixture_row(const NoiseSchedule& s, int from, int to, int v, int modality,
                         const double* w_row, const ModalityLayout& layout, double* out_row);

// Gradient of a scalar loss through strided_reverse_distribution: given
// dL/d(output row) for position p, accumulates dL/d(w row). Shapes match the
// forward call; rows correspond position-for-position.
void reverse_distribution_backward(const NoiseSchedule& s, int from, int to,
                                   const TokenSequence& xt, const CategoricalField& x0_probs,
                                   const CategoricalField& dL_dout, const ModalityLayout& layout,
                                   CategoricalField& dL_dw);

// p(x_T): beta_bar_T per token of each segment, gamma_bar_T on mask. Under the
// linear plan this is exactly the mask point mass.
std::vector<double> stationary_prior(const NoiseSchedule& s, const ModalityLayout& layout);

// Dense cumulative matrix by repeated multiplication of production transition
// columns; (i,j) holds q(x_t = i | x_0 = j). Test/inspection use only.
std::vector<double> dense_qbar(const NoiseSchedule& s, int t, const ModalityLayout& layout,
                               int oracle_bound = 64);

} // namespace fusediff
