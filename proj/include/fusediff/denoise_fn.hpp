#pragma once

#include <functional>

#include "fusediff/kernel.hpp"
#include "fusediff/layout.hpp"

namespace fusediff {

// Any x0-predictor: maps a (possibly masked) sequence at step t to per-position
// clean-token distributions with own-segment support. The transformer denoiser
// provides one; tests substitute exact or synthetic predictors.
using DenoiseFn = std::function<CategoricalField(const TokenSequence& xt, int t)>;

} // namespace fusediff
