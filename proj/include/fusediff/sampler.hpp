#pragma once

#include <string>
#include <vector>

#include "fusediff/denoise_fn.hpp"
#include "fusediff/kernel.hpp"
#include "fusediff/layout.hpp"
#include "fusediff/rng.hpp"
#include "fusediff/schedule.hpp"

namespace fusediff {

enum class Task { pair, t2i, i2t, infill };

Task task_from_name(const std::string& name);
const char* task_name(Task task);

// Truncation readings of "keep top r": cumulative probability mass (nucleus,
// the default) or a fraction of the supported token count.
enum class TruncationMode { mass, count };

struct SamplerConfig {
    int stride = 1;                 // fast sampling skips this many levels per move
    double truncation_rate = 1.0;   // in (0,1]
    TruncationMode truncation_mode = TruncationMode::mass;
    uint64_t seed = 0;
    Task task = Task::pair;
    // study variant: conditioning tokens are re-noised per level instead of
    // held clean at every denoiser input
    bool renoise_known = false;
};

// Conditioning pattern: known positions hold their clean tokens through the
// whole reverse chain; unknown positions start at mask.
struct KnownMask {
    std::vector<uint8_t> known;
    std::vector<int> tokens; // meaningful where known

    static KnownMask none(int positions);
    // t2i: every non-first modality clamps; i2t: modality 0 clamps; pair: none.
    static KnownMask for_task(Task task, const TokenSequence& reference,
                              const ModalityLayout& layout);
    void validate(const ModalityLayout& layout, const TokenSequence& shape_ref) const;
};

// Zero the low-probability tail of one distribution and renormalize.
std::vector<double> truncate(const std::vector<double>& dist, double rate,
                             TruncationMode mode = TruncationMode::mass);

// One reverse move t -> max(t - stride, 0): denoise, truncate, mix with the
// strided posterior, sample each unknown position, re-clamp known positions.
TokenSequence reverse_step(const NoiseSchedule& s, const ModalityLayout& layout, int t, int stride,
                           const TokenSequence& xt, const DenoiseFn& model, const KnownMask& known,
                           const SamplerConfig& config, Rng& rng);

// Full reverse ladder T -> 0. The result never contains mask tokens.
TokenSequence generate(const NoiseSchedule& s, const ModalityLayout& layout,
                       const std::vector<int>& lengths, const DenoiseFn& model,
                       const KnownMask& known, const SamplerConfig& config);

} // namespace fusediff
