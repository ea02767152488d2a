#include "fusediff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fusediff/errors.hpp"

namespace fusediff {

Task task_from_name(const std::string& name) {
    if (name == "pair") return Task::pair;
    if (name == "t2i") return Task::t2i;
    if (name == "i2t") return Task::i2t;
    if (name == "infill") return Task::infill;
    fail(errc::config, "unknown task '" + name + "'");
}

const char* task_name(Task task) {
    switch (task) {
        case Task::pair: return "pair";
        case Task::t2i: return "t2i";
        case Task::i2t: return "i2t";
        case Task::infill: return "infill";
    }
    return "?";
}

KnownMask KnownMask::none(int positions) {
    KnownMask k;
    k.known.assign(size_t(positions), 0);
    k.tokens.assign(size_t(positions), 0);
    return k;
}

KnownMask KnownMask::for_task(Task task, const TokenSequence& reference,
                              const ModalityLayout& layout) {
    KnownMask k = none(reference.size());
    auto clamp_modality = [&](int m, bool invert) {
        for (int p = 0; p < reference.size(); ++p) {
            const bool is_m = reference.position_modality[size_t(p)] == m;
            if (is_m == invert) continue;
            k.known[size_t(p)] = 1;
            k.tokens[size_t(p)] = reference.indices[size_t(p)];
        }
    };
    switch (task) {
        case Task::pair: break;
        case Task::t2i: clamp_modality(0, true); break; // everything but modality 0 is given
        case Task::i2t: clamp_modality(0, false); break;
        case Task::infill:
            fail(errc::config, "infill needs an explicit known mask, not a task preset");
    }
    k.validate(layout, reference);
    return k;
}

void KnownMask::validate(const ModalityLayout& layout, const TokenSequence& shape_ref) const {
    if (int(known.size()) != shape_ref.size() || int(tokens.size()) != shape_ref.size())
        fail(errc::config, "known mask size does not match the sequence");
    for (int p = 0; p < shape_ref.size(); ++p) {
        if (!known[size_t(p)]) continue;
        const int tok = tokens[size_t(p)];
        const int m = layout.modality_of(tok);
        if (m == kMaskModality)
            fail(errc::config, "known position " + std::to_string(p) + " clamps the mask token");
        if (m != shape_ref.position_modality[size_t(p)])
            fail(errc::config, "known token modality mismatch at position " + std::to_string(p));
    }
}

std::vector<double> truncate(const std::vector<double>& dist, double rate, TruncationMode mode) {
    if (!(rate > 0.0) || rate > 1.0) fail(errc::config, "truncation rate must lie in (0,1]");
    if (rate >= 1.0) return dist;
    std::vector<int> order(dist.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dist[size_t(a)] > dist[size_t(b)]; });
    std::vector<double> out(dist.size(), 0.0);
    double kept = 0.0;
    if (mode == TruncationMode::mass) {
        for (int idx : order) {
            if (dist[size_t(idx)] <= 0.0) break;
            out[size_t(idx)] = dist[size_t(idx)];
            kept += dist[size_t(idx)];
            if (kept >= rate - 1e-12) break;
        }
    } else {
        int support = 0;
        for (double v : dist)
            if (v > 0.0) ++support;
        const int keep = std::max(1, int(std::ceil(rate * support)));
        int taken = 0;
        for (int idx : order) {
            if (dist[size_t(idx)] <= 0.0 || taken == keep) break;
            out[size_t(idx)] = dist[size_t(idx)];
            kept += dist[size_t(idx)];
            ++taken;
        }
    }
    if (kept <= 0.0) return dist; // nothing kept: degenerate input, leave unchanged
    for (double& v : out) v /= kept;
    return out;
}

TokenSequence reverse_step(const NoiseSchedule& s, const ModalityLayout& layout, int t, int stride,
                           const TokenSequence& xt, const DenoiseFn& model, const KnownMask& known,
                           const SamplerConfig& config, Rng& rng) {
    if (t < 1 || t > s.T) fail(errc::out_of_range, "reverse_step needs 1 <= t <= T");
    if (stride < 1) fail(errc::config, "stride must be >= 1");
    const int target = std::max(t - stride, 0);

    CategoricalField w = model(xt, t);
    if (config.truncation_rate < 1.0) {
        for (int p = 0; p < xt.size(); ++p) {
            std::vector<double> row(w.row(p), w.row(p) + layout.total);
            const auto kept = truncate(row, config.truncation_rate, config.truncation_mode);
            std::copy(kept.begin(), kept.end(), w.row(p));
        }
    }

    // Mixture rows are only computed for free positions; clamped positions
    // hold clean tokens that the forward process could not have produced at
    // high t, so they must not be treated as chain evidence.
    TokenSequence out = xt;
    std::vector<double> row(size_t(layout.total), 0.0);
    for (int p = 0; p < xt.size(); ++p) {
        if (known.known[size_t(p)]) {
            out.indices[size_t(p)] = known.tokens[size_t(p)];
            continue;
        }
        std::fill(row.begin(), row.end(), 0.0);
        reverse_mixture_row(s, target, t, xt.indices[size_t(p)], xt.position_modality[size_t(p)],
                            w.row(p), layout, row.data());
        out.indices[size_t(p)] = sample_weights(row.data(), layout.total, rng);
    }
    return out;
}

TokenSequence generate(const NoiseSchedule& s, const ModalityLayout& layout,
                       const std::vector<int>& lengths, const DenoiseFn& model,
                       const KnownMask& known, const SamplerConfig& config) {
    TokenSequence x = TokenSequence::all_mask(layout, lengths);
    known.validate(layout, x);
    for (int p = 0; p < x.size(); ++p)
        if (known.known[size_t(p)]) x.indices[size_t(p)] = known.tokens[size_t(p)];

    auto rng = derive_rng(config.seed, {0x5A31ull});
    int t = s.T;
    while (t > 0) {
        if (config.renoise_known) {
            // sample the conditioning tokens at this noise level instead of
            // presenting them clean
            for (int p = 0; p < x.size(); ++p) {
                if (!known.known[size_t(p)]) continue;
                TokenSequence one;
                one.indices = {known.tokens[size_t(p)]};
                one.position_modality = {x.position_modality[size_t(p)]};
                one.lengths.assign(size_t(layout.num_modalities()), 0);
                x.indices[size_t(p)] = sample_forward(s, t, one, layout, rng).indices[0];
            }
        }
        const int step = std::min(config.stride, t);
        x = reverse_step(s, layout, t, step, x, model, known, config, rng);
        t -= step;
    }
    for (int idx : x.indices)
        if (idx == layout.mask_index)
            fail(errc::sampler_incomplete, "mask tokens survived the reverse chain");
    x.validate(layout);
    return x;
}

} // namespace fusediff
