#include "fusediff/rng.hpp"

#include <algorithm>

namespace fusediff {

int sample_weights(const double* w, int n, Rng& rng) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += std::max(w[i], 0.0);
    if (total <= 0.0) return 0;
    double u = uniform01(rng) * total;
    for (int i = 0; i < n; ++i) {
        const double wi = std::max(w[i], 0.0);
        if (u < wi) return i;
        u -= wi;
    }
    // rounding spill: last index with nonzero weight
    for (int i = n - 1; i >= 0; --i)
        if (w[i] > 0.0) return i;
    return n - 1;
}

} // namespace fusediff
