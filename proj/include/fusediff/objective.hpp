#pragma once

#include "fusediff/denoise_fn.hpp"
#include "fusediff/kernel.hpp"
#include "fusediff/layout.hpp"
#include "fusediff/rng.hpp"
#include "fusediff/schedule.hpp"

namespace fusediff {

// Probabilities are clamped at this floor inside every log, keeping the loss
// finite under softmax underflow. Oracle code uses the same value.
inline constexpr double kLogFloor = 1e-30;

struct LossBreakdown {
    double l0 = 0.0;
    double lt = 0.0;
    double lT = 0.0;
    double total = 0.0; // the term selected by t_sampled; lT stays diagnostic
    int t_sampled = 0;
};

// Reconstruction term at t=1: NLL of the true tokens under the model's clean
// prediction. Both modality terms come from the one fused forward pass.
double l0_term(const TokenSequence& x0, const TokenSequence& x1, const CategoricalField& x0_probs);

// KL(q(x_{t-1}|x_t,x0) || p_theta(x_{t-1}|x_t)) summed over positions; the
// model posterior is the x0-reparameterized mixture with per-modality rows
// coupled positionally.
double lt_term(const NoiseSchedule& s, int t, const TokenSequence& x0, const TokenSequence& xt,
               const CategoricalField& x0_probs, const ModalityLayout& layout);

// Prior-matching constant. The per-position reference is the stationary
// vector restricted to the position's segment + mask, renormalized; exactly 0
// under the linear plan. No parameter dependence.
double lT_term(const NoiseSchedule& s, const TokenSequence& x0, const ModalityLayout& layout);

// One stochastic VLB draw: t ~ U{1..T}, x_t ~ q(x_t|x0), matching term.
LossBreakdown vlb_estimate(const TokenSequence& x0, const DenoiseFn& model,
                           const NoiseSchedule& s, const ModalityLayout& layout, Rng& rng);

// Full-sum mode: iterate every t with one x_t draw each; lt holds the sum of
// the t >= 2 terms and total = l0 + lt ( + nothing else; lT reported).
LossBreakdown vlb_full_sum(const TokenSequence& x0, const DenoiseFn& model,
                           const NoiseSchedule& s, const ModalityLayout& layout, Rng& rng);

// Gradient variants for training: return the loss and accumulate d(loss)/d(x0_probs).
double l0_term_grad(const TokenSequence& x0, const CategoricalField& x0_probs,
                    CategoricalField& dprobs);
double lt_term_grad(const NoiseSchedule& s, int t, const TokenSequence& x0,
                    const TokenSequence& xt, const CategoricalField& x0_probs,
                    const ModalityLayout& layout, CategoricalField& dprobs);

} // namespace fusediff
