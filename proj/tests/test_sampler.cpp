#include <cmath>
#include <map>

#include "doctest.h"
#include "fusediff/denoiser.hpp"
#include "fusediff/oracle.hpp"
#include "fusediff/sampler.hpp"
#include "test_helpers.hpp"

using namespace fusediff;
using testutil::geometric_schedule;

TEST_CASE("truncation keeps the smallest high-probability prefix") {
    const std::vector<double> dist = {0.6, 0.3, 0.1};
    const auto kept = truncate(dist, 0.88);
    CHECK(kept[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(kept[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(kept[2] == 0.0);

    CHECK(truncate(dist, 1.0) == dist);

    const std::vector<double> point = {0.0, 1.0, 0.0};
    CHECK(truncate(point, 0.5) == point);

    CHECK_THROWS_AS(truncate(dist, 0.0), error);
    CHECK_THROWS_AS(truncate(dist, 1.5), error);
}

TEST_CASE("count-mode truncation keeps a token-count fraction") {
    const std::vector<double> dist = {0.4, 0.3, 0.2, 0.1};
    const auto kept = truncate(dist, 0.5, TruncationMode::count); // ceil(0.5*4) = 2 tokens
    CHECK(kept[0] == doctest::Approx(0.4 / 0.7).epsilon(1e-12));
    CHECK(kept[1] == doctest::Approx(0.3 / 0.7).epsilon(1e-12));
    CHECK(kept[2] == 0.0);
    CHECK(kept[3] == 0.0);
}

namespace {

// Fixed-logit fake model: every position of modality m gets the same
// distribution over its segment.
DenoiseFn fixed_model(const ModalityLayout& layout, std::vector<std::vector<double>> seg_probs) {
    return [=](const TokenSequence& xt, int) {
        CategoricalField f(xt.size(), layout.total);
        for (int p = 0; p < xt.size(); ++p) {
            const int m = xt.position_modality[size_t(p)];
            for (int k = 0; k < layout.sizes[size_t(m)]; ++k)
                f.row(p)[layout.segment_begin(m) + k] = seg_probs[size_t(m)][size_t(k)];
        }
        return f;
    };
}

} // namespace

TEST_CASE("one-shot reverse step samples from the truncated clean prediction") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = NoiseSchedule::linear(6);
    const auto model = fixed_model(layout, {{0.5, 0.3, 0.2}, {0.9, 0.1}});
    SamplerConfig cfg;
    cfg.stride = 6; // T -> 0 in one move
    cfg.truncation_rate = 0.75; // keeps {0.5, 0.3} renormalized for modality 0
    auto xt = TokenSequence::all_mask(layout, {1, 0});
    auto rng = make_rng(4);
    const KnownMask none = KnownMask::none(1);
    std::map<int, int> counts;
    const int n = 40000;
    for (int i = 0; i < n; ++i)
        counts[reverse_step(s, layout, 6, 6, xt, model, none, cfg, rng).indices[0]]++;
    const double p0 = 0.5 / 0.8, p1 = 0.3 / 0.8;
    CHECK(std::abs(counts[0] / double(n) - p0) <= 3.0 * std::sqrt(p0 * (1 - p0) / n));
    CHECK(std::abs(counts[1] / double(n) - p1) <= 3.0 * std::sqrt(p1 * (1 - p1) / n));
    CHECK(counts[2] == 0); // truncated away
    CHECK(counts[layout.mask_index] == 0);
}

TEST_CASE("fully known sequences pass through untouched by the model") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = NoiseSchedule::linear(8);
    const auto model = fixed_model(layout, {{0.1, 0.1, 0.8}, {0.5, 0.5}});
    auto ref = TokenSequence::all_mask(layout, {3, 2});
    ref.indices = {2, 0, 1, 4, 3};
    KnownMask known = KnownMask::none(ref.size());
    for (int p = 0; p < ref.size(); ++p) {
        known.known[size_t(p)] = 1;
        known.tokens[size_t(p)] = ref.indices[size_t(p)];
    }
    SamplerConfig cfg;
    cfg.stride = 3;
    const auto out = generate(s, layout, {3, 2}, model, known, cfg);
    CHECK(out.indices == ref.indices);
}

TEST_CASE("generation finishes with no masks and respects segments at every stride") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = NoiseSchedule::linear(10);
    DenoiserConfig dcfg;
    dcfg.n_blocks = 2;
    dcfg.n_heads = 2;
    dcfg.d_model = 16;
    Denoiser model(layout, {3, 2}, 10, dcfg);
    for (int stride : {1, 3, 4, 10}) {
        SamplerConfig cfg;
        cfg.stride = stride;
        cfg.seed = uint64_t(100 + stride);
        const auto out =
            generate(s, layout, {3, 2}, model.as_fn(), KnownMask::none(5), cfg);
        CHECK(out.size() == 5);
        for (int p = 0; p < out.size(); ++p) {
            CHECK(out.indices[size_t(p)] != layout.mask_index);
            CHECK(layout.modality_of(out.indices[size_t(p)]) == out.position_modality[size_t(p)]);
        }
    }
}

TEST_CASE("t2i clamping preserves the conditioning text bitwise") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = NoiseSchedule::linear(10);
    DenoiserConfig dcfg;
    dcfg.n_blocks = 1;
    dcfg.n_heads = 2;
    dcfg.d_model = 8;
    Denoiser model(layout, {3, 2}, 10, dcfg);
    auto ref = TokenSequence::all_mask(layout, {3, 2});
    ref.indices = {0, 0, 0, 4, 3};
    const auto known = KnownMask::for_task(Task::t2i, ref, layout);
    SamplerConfig cfg;
    cfg.task = Task::t2i;
    cfg.seed = 9;
    const auto out = generate(s, layout, {3, 2}, model.as_fn(), known, cfg);
    CHECK(out.indices[3] == 4);
    CHECK(out.indices[4] == 3);
    for (int p = 0; p < 3; ++p) CHECK(layout.modality_of(out.indices[size_t(p)]) == 0);

    const auto known_i2t = KnownMask::for_task(Task::i2t, ref, layout);
    const auto out2 = generate(s, layout, {3, 2}, model.as_fn(), known_i2t, cfg);
    CHECK(out2.indices[0] == 0);
    CHECK(out2.indices[1] == 0);
    CHECK(out2.indices[2] == 0);
}

TEST_CASE("infill patterns preserve exactly the unmasked positions") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = NoiseSchedule::linear(8);
    DenoiserConfig dcfg;
    dcfg.n_blocks = 1;
    dcfg.n_heads = 2;
    dcfg.d_model = 8;
    Denoiser model(layout, {4, 2}, 8, dcfg);
    KnownMask known = KnownMask::none(6);
    known.known = {1, 0, 0, 1, 0, 1};
    known.tokens = {2, 0, 0, 1, 0, 3};
    SamplerConfig cfg;
    cfg.task = Task::infill;
    cfg.seed = 31;
    const auto out = generate(s, layout, {4, 2}, model.as_fn(), known, cfg);
    CHECK(out.indices[0] == 2);
    CHECK(out.indices[3] == 1);
    CHECK(out.indices[5] == 3);
}

TEST_CASE("renoised clamping still restores clean conditioning tokens") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = NoiseSchedule::linear(8);
    DenoiserConfig dcfg;
    dcfg.n_blocks = 1;
    dcfg.n_heads = 2;
    dcfg.d_model = 8;
    Denoiser model(layout, {3, 2}, 8, dcfg);
    auto ref = TokenSequence::all_mask(layout, {3, 2});
    ref.indices = {1, 2, 0, 3, 4};
    const auto known = KnownMask::for_task(Task::t2i, ref, layout);
    SamplerConfig cfg;
    cfg.renoise_known = true;
    cfg.seed = 12;
    const auto out = generate(s, layout, {3, 2}, model.as_fn(), known, cfg);
    CHECK(out.indices[3] == 3);
    CHECK(out.indices[4] == 4);
}

TEST_CASE("identical seeds reproduce generations bitwise") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = NoiseSchedule::linear(12);
    DenoiserConfig dcfg;
    dcfg.n_blocks = 2;
    dcfg.n_heads = 2;
    dcfg.d_model = 16;
    Denoiser model(layout, {3, 2}, 12, dcfg);
    SamplerConfig cfg;
    cfg.stride = 2;
    cfg.seed = 777;
    const auto a = generate(s, layout, {3, 2}, model.as_fn(), KnownMask::none(5), cfg);
    const auto b = generate(s, layout, {3, 2}, model.as_fn(), KnownMask::none(5), cfg);
    CHECK(a.indices == b.indices);
    cfg.seed = 778;
    const auto c = generate(s, layout, {3, 2}, model.as_fn(), KnownMask::none(5), cfg);
    CHECK(a.indices != c.indices); // overwhelmingly likely under a fresh model
}

namespace {

// Exact per-position clean-token posterior for a tiny known joint prior,
// computed from independent dense-chain oracles.
struct ExactPosteriorModel {
    ModalityLayout layout;
    NoiseSchedule s;
    // joint prior over (modality-0 token, modality-1 token)
    std::map<std::pair<int, int>, double> prior;

    CategoricalField operator()(const TokenSequence& xt, int t) const {
        const auto chain = oracle::dense_chain(s, t, layout);
        const int n = layout.total;
        CategoricalField f(xt.size(), n);
        for (int p = 0; p < xt.size(); ++p) {
            const int m = xt.position_modality[size_t(p)];
            double norm = 0.0;
            for (int i = layout.segment_begin(m); i < layout.segment_end(m); ++i) {
                double w = 0.0;
                for (const auto& [combo, pr] : prior) {
                    const int mine = (m == 0) ? combo.first : combo.second;
                    if (mine != i) continue;
                    double lik = pr;
                    for (int q = 0; q < xt.size(); ++q) {
                        const int x0q = (xt.position_modality[size_t(q)] == 0) ? combo.first
                                                                               : combo.second;
                        lik *= chain[size_t(xt.indices[size_t(q)]) * size_t(n) + size_t(x0q)];
                    }
                    w += lik;
                }
                f.row(p)[i] = w;
                norm += w;
            }
            if (norm > 0.0)
                for (int i = layout.segment_begin(m); i < layout.segment_end(m); ++i)
                    f.row(p)[i] /= norm;
            else
                f.row(p)[layout.segment_begin(m)] = 1.0;
        }
        return f;
    }
};

} // namespace

TEST_CASE("strided chains match unit-stride chains in distribution under the exact posterior") {
    // Independent positions: the per-position mixture is the exact reverse
    // kernel, so collapsing levels through the closed form must not shift the
    // sampling distribution at any stride.
    const auto layout = ModalityLayout::create({2, 2});
    const auto s = geometric_schedule(8, 0.65, 0.3);
    ExactPosteriorModel model{layout, s, {}};
    model.prior[{0, 2}] = 0.7 * 0.6;
    model.prior[{0, 3}] = 0.7 * 0.4;
    model.prior[{1, 2}] = 0.3 * 0.6;
    model.prior[{1, 3}] = 0.3 * 0.4;
    DenoiseFn fn = [&](const TokenSequence& xt, int t) { return model(xt, t); };

    auto run = [&](int stride, uint64_t seed_base) {
        std::map<std::pair<int, int>, double> freq;
        const int n = 10000;
        for (int i = 0; i < n; ++i) {
            SamplerConfig cfg;
            cfg.stride = stride;
            cfg.seed = seed_base + uint64_t(i);
            const auto out = generate(s, layout, {1, 1}, fn, KnownMask::none(2), cfg);
            freq[{out.indices[0], out.indices[1]}] += 1.0 / n;
        }
        return freq;
    };
    const auto unit = run(1, 10000);
    const auto strided = run(4, 20000);
    double tv = 0.0;
    for (int a = 0; a < 2; ++a)
        for (int b = 2; b < 4; ++b) {
            const auto key = std::make_pair(a, b);
            const double fa = unit.count(key) ? unit.at(key) : 0.0;
            const double fb = strided.count(key) ? strided.at(key) : 0.0;
            tv += std::abs(fa - fb);
        }
    tv *= 0.5;
    CHECK(tv < 0.02);
}
