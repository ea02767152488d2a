#include <cmath>

#include "doctest.h"
#include "fusediff/denoiser.hpp"
#include "fusediff/objective.hpp"
#include "fusediff/oracle.hpp"
#include "test_helpers.hpp"

using namespace fusediff;
using testutil::geometric_schedule;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.n_blocks = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.init_seed = 11;
    return cfg;
}

TokenSequence clean_sequence(const ModalityLayout& layout) {
    auto seq = TokenSequence::all_mask(layout, {4, 2});
    seq.indices = {0, 2, 1, 0, 4, 3};
    return seq;
}

CategoricalField point_mass_field(const TokenSequence& truth, const ModalityLayout& layout) {
    CategoricalField f(truth.size(), layout.total);
    for (int p = 0; p < truth.size(); ++p) f.row(p)[truth.indices[size_t(p)]] = 1.0;
    return f;
}

} // namespace

TEST_CASE("l0: perfect prediction scores zero, uniform scores L log K") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto x0 = clean_sequence(layout);
    const auto x1 = x0;

    CHECK(l0_term(x0, x1, point_mass_field(x0, layout)) == doctest::Approx(0.0).epsilon(1e-12));

    CategoricalField uniform(x0.size(), layout.total);
    for (int p = 0; p < x0.size(); ++p) {
        const int m = x0.position_modality[size_t(p)];
        for (int j = layout.segment_begin(m); j < layout.segment_end(m); ++j)
            uniform.row(p)[j] = 1.0 / layout.sizes[size_t(m)];
    }
    const double want = 4 * std::log(3.0) + 2 * std::log(2.0);
    CHECK(l0_term(x0, x1, uniform) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("l0 equals an independent NLL computation on random fields") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto x0 = clean_sequence(layout);
    auto rng = make_rng(5);
    for (int rep = 0; rep < 10; ++rep) {
        const auto w = testutil::random_x0_field(x0, layout, rng);
        double nll = 0.0;
        for (int p = 0; p < x0.size(); ++p)
            nll -= std::log(std::max(w.row(p)[x0.indices[size_t(p)]], 1e-30));
        CHECK(std::abs(l0_term(x0, x0, w) - nll) <= 1e-10);
    }
}

TEST_CASE("lt: exact posterior prediction gives zero KL for every t") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = geometric_schedule(8);
    const auto x0 = clean_sequence(layout);
    auto rng = make_rng(3);
    for (int t = 2; t <= 8; ++t) {
        const auto xt = sample_forward(s, t, x0, layout, rng);
        const double kl = lt_term(s, t, x0, xt, point_mass_field(x0, layout), layout);
        CHECK(std::abs(kl) <= 1e-10);
    }
}

TEST_CASE("lt matches term-by-term enumeration with the naive mixture") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = geometric_schedule(8);
    const auto x0 = clean_sequence(layout);
    auto rng = make_rng(21);
    for (int rep = 0; rep < 10; ++rep) {
        const int t = 2 + int(uniform01(rng) * 7);
        const auto xt = sample_forward(s, t, x0, layout, rng);
        const auto w = testutil::random_x0_field(xt, layout, rng);
        const double got = lt_term(s, t, x0, xt, w, layout);

        const auto mix = oracle::naive_reverse_mixture(s, t - 1, t, xt, w, layout);
        double want = 0.0;
        for (int p = 0; p < x0.size(); ++p) {
            const auto truth =
                oracle::bayes_posterior(s, t - 1, t, xt.indices[size_t(p)], x0.indices[size_t(p)], layout);
            for (int j = 0; j < layout.total; ++j)
                if (truth[size_t(j)] > 0.0)
                    want += truth[size_t(j)] *
                            std::log(truth[size_t(j)] / std::max(mix.row(p)[j], 1e-30));
        }
        CHECK(std::abs(got - want) <= 1e-10);
        CHECK(got >= -1e-12); // Gibbs
    }
}

TEST_CASE("lT vanishes exactly under the linear plan and is model-free") {
    const auto layout = ModalityLayout::create({3, 2});
    const auto x0 = clean_sequence(layout);
    CHECK(lT_term(NoiseSchedule::linear(16), x0, layout) == 0.0);
}

TEST_CASE("lT is positive for a truncated schedule and matches enumeration") {
    const auto layout = ModalityLayout::create({2, 2});
    // gamma_bar_T = 0.9, alpha_bar_T = 0.05, within-mass left over
    const auto s = NoiseSchedule::from_cumulative({1.0, 0.5, 0.05}, {0.0, 0.4, 0.9});
    auto x0 = TokenSequence::all_mask(layout, {1, 1});
    x0.indices = {0, 3};
    const double got = lT_term(s, x0, layout);
    CHECK(got > 0.0);

    // independent enumeration with the restricted, renormalized prior
    double want = 0.0;
    const double z = 1.0 - s.alpha_bar[2];
    for (int p = 0; p < 2; ++p) {
        const int i = x0.indices[size_t(p)];
        const int m = layout.modality_of(i);
        const auto q = q_xt_given_x0(s, 2, i, layout);
        for (int j = 0; j < layout.total; ++j) {
            if (q[size_t(j)] <= 0.0) continue;
            const double prior = (j == layout.mask_index)
                                     ? s.gamma_bar[2] / z
                                     : layout.indicator(j, m) * s.beta_bar(2, layout.sizes[size_t(m)]) / z;
            want += q[size_t(j)] * std::log(q[size_t(j)] / std::max(prior, 1e-30));
        }
    }
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("stochastic VLB mean agrees with the exhaustive oracle") {
    const auto layout = ModalityLayout::create({2, 2});
    const auto s = geometric_schedule(4, 0.8, 0.15);
    auto x0 = TokenSequence::all_mask(layout, {2, 1});
    x0.indices = {0, 1, 3};
    DenoiserConfig cfg = tiny_config();
    Denoiser model(layout, {2, 1}, 4, cfg);
    const auto fn = model.as_fn();

    const double exact = oracle::exhaustive_vlb(x0, fn, s, layout);

    auto rng = make_rng(77);
    const int n = 20000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto draw = vlb_estimate(x0, fn, s, layout, rng);
        const double scaled = draw.total * s.T + draw.lT;
        sum += scaled;
        sumsq += scaled * scaled;
    }
    const double mean = sum / n;
    const double var = std::max(sumsq / n - mean * mean, 0.0);
    const double sigma = std::sqrt(var / n);
    CHECK(std::abs(mean - exact) <= 3.0 * sigma + 1e-9);
}

TEST_CASE("zero-length sequence has zero loss") {
    const auto layout = ModalityLayout::create({2, 2});
    const auto s = NoiseSchedule::linear(4);
    auto x0 = TokenSequence::all_mask(layout, {0, 0});
    auto rng = make_rng(1);
    const auto draw = vlb_estimate(
        x0, [&](const TokenSequence& seq, int) { return CategoricalField(seq.size(), layout.total); },
        s, layout, rng);
    CHECK(draw.total == 0.0);
    CHECK(draw.lT == 0.0);
}

TEST_CASE("full-sum mode touches every step") {
    const auto layout = ModalityLayout::create({2, 2});
    const auto s = geometric_schedule(4, 0.8, 0.15);
    auto x0 = TokenSequence::all_mask(layout, {2, 1});
    x0.indices = {0, 1, 3};
    Denoiser model(layout, {2, 1}, 4, tiny_config());
    auto rng = make_rng(9);
    const auto full = vlb_full_sum(x0, model.as_fn(), s, layout, rng);
    CHECK(full.total == doctest::Approx(full.l0 + full.lt));
    CHECK(full.l0 > 0.0);
    CHECK(full.lt > 0.0);
}

namespace {

// Central-difference check of d(loss)/d(params) through the full model chain.
void objective_grad_check(bool l0_path) {
    const auto layout = ModalityLayout::create({3, 2});
    const auto s = geometric_schedule(6);
    DenoiserConfig cfg = tiny_config();
    cfg.grids = {{2, 2}, {0, 0}};
    Denoiser model(layout, {4, 2}, 6, cfg);
    auto x0 = clean_sequence(layout);
    auto rng = make_rng(13);
    const int t = l0_path ? 1 : 4;
    const auto xt = sample_forward(s, t, x0, layout, rng);

    DenoiserCache cache;
    const auto probs = model.forward(xt, t, cache);
    CategoricalField dprobs(xt.size(), layout.total);
    model.zero_grad();
    if (l0_path)
        l0_term_grad(x0, probs, dprobs);
    else
        lt_term_grad(s, t, x0, xt, probs, layout, dprobs);
    model.backward(cache, dprobs);

    auto loss = [&]() {
        const auto w = model.forward(xt, t);
        return l0_path ? l0_term(x0, xt, w) : lt_term(s, t, x0, xt, w, layout);
    };

    auto coord_rng = make_rng(29);
    model.for_each_param([&](const std::string& name, Tensor& tensor) {
        std::vector<double*> coords;
        std::vector<double> analytic;
        for (int c = 0; c < 3; ++c) {
            const size_t i = size_t(uniform01(coord_rng) * double(tensor.size()));
            coords.push_back(&tensor.v[i]);
            analytic.push_back(tensor.g[i]);
        }
        const auto numeric = oracle::finite_diff(loss, coords, 1e-4);
        for (size_t c = 0; c < coords.size(); ++c) {
            const double denom = std::max({std::abs(numeric[c]), std::abs(analytic[c]), 1e-6});
            const double rel = std::abs(numeric[c] - analytic[c]) / denom;
            CHECK_MESSAGE(rel < 1e-4, name, ": analytic ", analytic[c], " numeric ", numeric[c],
                          (l0_path ? " (l0)" : " (lt)"));
        }
    });
}

} // namespace

TEST_CASE("l0 gradients through the model match finite differences") { objective_grad_check(true); }

TEST_CASE("lt gradients through the model match finite differences") { objective_grad_check(false); }
