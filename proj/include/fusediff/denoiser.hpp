#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "fusediff/denoise_fn.hpp"
#include "fusediff/kernel.hpp"
#include "fusediff/layout.hpp"
#include "fusediff/tensor.hpp"

namespace fusediff {

enum class TimeMode { input, per_block };

struct DenoiserConfig {
    int n_blocks = 4;
    int n_heads = 4;
    int d_model = 64;
    int ffn_mult = 4;
    // 1/sqrt(2) attention scaling as printed in the method text, instead of
    // the conventional 1/sqrt(d_head).
    bool paper_literal_sqrt2 = false;
    // ablation: replace the parallel mutual attentions with causal
    // self-attention over the fused sequence
    bool causal_ablation = false;
    TimeMode time_mode = TimeMode::input;
    uint64_t init_seed = 1234;
    // optional {rows, cols} per modality; {0,0} selects a 1-D encoding table
    std::vector<std::array<int, 2>> grids;

    // toy | paper | paper-ablation
    static DenoiserConfig preset(const std::string& name);
};

struct AttnWeights {
    Tensor wq, wk, wv, wo; // [d,d]
    Tensor bq, bk, bv, bo; // [d]
};

struct BlockParams {
    Tensor ln1_g, ln1_b;
    AttnWeights sa;
    Tensor ln2_g, ln2_b;
    std::vector<AttnWeights> ma; // one per modality; single set in causal mode
    Tensor ln3_g, ln3_b;
    Tensor ff_w1, ff_b1;
    Tensor ff_w2, ff_b2;
};

struct PosEncoding {
    bool is_grid = false;
    Tensor table; // [L,d]
    Tensor row;   // [rows,d]
    Tensor col;   // [cols,d]
    int grid_cols = 0;
};

struct LnCache {
    std::vector<double> x, y; // [P,d]
    std::vector<double> mean, rstd;
};

struct AttnCache {
    std::vector<int> qpos, kpos;
    std::vector<double> xq, xk;   // gathered inputs
    std::vector<double> q, k, v;  // projections
    std::vector<double> att;      // [H,Pq,Pk] post-softmax
    std::vector<double> ctx;      // [Pq,d]
    bool causal = false;
    bool identity = false; // empty key set: pass-through
};

struct BlockCache {
    LnCache ln1, ln2, ln3;
    AttnCache sa;
    std::vector<AttnCache> ma;
    std::vector<double> ff_pre, ff_act; // [P,f]
};

// Per-forward activation record, owned by the caller. Parameters stay
// read-only during forward, so concurrent forwards over a shared model with
// private caches are safe.
struct DenoiserCache {
    TokenSequence xt;
    int t = -1;
    std::vector<double> h0; // embedding-stage output
    std::vector<BlockCache> blocks;
    LnCache lnf;
    CategoricalField probs;
};

// The unified transformer: fused embedding over the joint vocabulary, stacked
// blocks of self-attention -> decouple -> parallel mutual attentions ->
// couple -> feed-forward (pre-norm residuals), final norm, per-modality
// output heads. forward() yields per-position clean-token distributions that
// are zero outside each position's own segment by construction.
struct Denoiser {
    ModalityLayout layout;
    std::vector<int> lengths;
    int T = 0;
    DenoiserConfig cfg;

    Tensor token_emb; // [total,d]
    std::vector<PosEncoding> pos;
    Tensor time_emb; // [T+1,d]
    std::vector<BlockParams> blocks;
    Tensor lnf_g, lnf_b;
    std::vector<Tensor> head_w; // [d,K_m]
    std::vector<Tensor> head_b; // [K_m]

    Denoiser(const ModalityLayout& layout, std::vector<int> lengths, int T, DenoiserConfig cfg);

    CategoricalField forward(const TokenSequence& xt, int t, DenoiserCache& cache) const;
    CategoricalField forward(const TokenSequence& xt, int t) const;

    // Reverse pass for the cached forward; accumulates parameter gradients.
    void backward(const DenoiserCache& cache, const CategoricalField& dprobs);

    void zero_grad();
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    int64_t num_params() const;

    DenoiseFn as_fn() const {
        return [this](const TokenSequence& xt, int t) { return forward(xt, t); };
    }
};

} // namespace fusediff
