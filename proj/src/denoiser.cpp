#include "fusediff/denoiser.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>

#include "fusediff/errors.hpp"

namespace fusediff {

namespace {

using nn::gemm;

void gather_rows(const std::vector<double>& src, const std::vector<int>& rows, int d,
                 std::vector<double>& dst) {
    dst.resize(rows.size() * size_t(d));
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(src.data() + size_t(rows[i]) * size_t(d), d, dst.data() + i * size_t(d));
}

void scatter_add_rows(std::vector<double>& dst, const std::vector<int>& rows, int d,
                      const std::vector<double>& src) {
    for (size_t i = 0; i < rows.size(); ++i) {
        const double* s = src.data() + i * size_t(d);
        double* t = dst.data() + size_t(rows[i]) * size_t(d);
        for (int j = 0; j < d; ++j) t[j] += s[j];
    }
}

// y[R,n] = x[R,m] * W[m,n] + b
void linear_forward(const std::vector<double>& x, const Tensor& w, const Tensor& b, int R,
                    std::vector<double>& y) {
    const int m = w.shape[0], n = w.shape[1];
    y.assign(size_t(R) * size_t(n), 0.0);
    if (R == 0) return;
    gemm(false, false, R, n, m, 1.0, x.data(), w.v.data(), 0.0, y.data());
    for (int r = 0; r < R; ++r)
        for (int j = 0; j < n; ++j) y[size_t(r) * size_t(n) + size_t(j)] += b.v[size_t(j)];
}

void linear_backward(const std::vector<double>& x, Tensor& w, Tensor& b,
                     const std::vector<double>& dy, int R, std::vector<double>& dx) {
    const int m = w.shape[0], n = w.shape[1];
    dx.assign(size_t(R) * size_t(m), 0.0);
    if (R == 0) return;
    gemm(true, false, m, n, R, 1.0, x.data(), dy.data(), 1.0, w.g.data());
    for (int r = 0; r < R; ++r)
        for (int j = 0; j < n; ++j) b.g[size_t(j)] += dy[size_t(r) * size_t(n) + size_t(j)];
    gemm(false, true, R, m, n, 1.0, dy.data(), w.v.data(), 0.0, dx.data());
}

void ln_forward(const std::vector<double>& x, const Tensor& gain, const Tensor& bias, int P, int d,
                LnCache& c) {
    c.x = x;
    c.y.resize(size_t(P) * size_t(d));
    c.mean.resize(size_t(P));
    c.rstd.resize(size_t(P));
    nn::layernorm_forward(x.data(), gain.v.data(), bias.v.data(), P, d, c.y.data(), c.mean.data(),
                          c.rstd.data());
}

std::vector<double> ln_backward(const LnCache& c, Tensor& gain, Tensor& bias,
                                const std::vector<double>& dy, int P, int d) {
    std::vector<double> dx(size_t(P) * size_t(d), 0.0);
    nn::layernorm_backward(c.x.data(), gain.v.data(), c.mean.data(), c.rstd.data(), dy.data(), P, d,
                           dx.data(), gain.g.data(), bias.g.data());
    return dx;
}

std::atomic<bool> g_warned_empty_keys{false};

void attn_forward(const AttnWeights& w, const std::vector<double>& x, int d, int heads,
                  double scale, const std::vector<int>& qpos, const std::vector<int>& kpos,
                  bool causal, AttnCache& c, std::vector<double>& h_accum) {
    c.qpos = qpos;
    c.kpos = kpos;
    c.causal = causal;
    c.identity = kpos.empty();
    const int Pq = int(qpos.size()), Pk = int(kpos.size());
    if (Pq == 0) return;
    if (c.identity) {
        if (!g_warned_empty_keys.exchange(true))
            std::fprintf(stderr, "fusediff: mutual attention with empty key set, passing through\n");
        gather_rows(x, qpos, d, c.xq);
        scatter_add_rows(h_accum, qpos, d, c.xq);
        return;
    }
    const int dh = d / heads;
    gather_rows(x, qpos, d, c.xq);
    gather_rows(x, kpos, d, c.xk);
    linear_forward(c.xq, w.wq, w.bq, Pq, c.q);
    linear_forward(c.xk, w.wk, w.bk, Pk, c.k);
    linear_forward(c.xk, w.wv, w.bv, Pk, c.v);
    c.att.assign(size_t(heads) * size_t(Pq) * size_t(Pk), 0.0);
    c.ctx.assign(size_t(Pq) * size_t(d), 0.0);
    std::vector<double> qh(size_t(Pq) * size_t(dh)), kh(size_t(Pk) * size_t(dh)),
        vh(size_t(Pk) * size_t(dh)), ctxh(size_t(Pq) * size_t(dh));
    for (int hh = 0; hh < heads; ++hh) {
        for (int i = 0; i < Pq; ++i)
            std::copy_n(c.q.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dh), dh,
                        qh.data() + size_t(i) * size_t(dh));
        for (int i = 0; i < Pk; ++i) {
            std::copy_n(c.k.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dh), dh,
                        kh.data() + size_t(i) * size_t(dh));
            std::copy_n(c.v.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dh), dh,
                        vh.data() + size_t(i) * size_t(dh));
        }
        double* att = c.att.data() + size_t(hh) * size_t(Pq) * size_t(Pk);
        gemm(false, true, Pq, Pk, dh, scale, qh.data(), kh.data(), 0.0, att);
        if (causal)
            for (int i = 0; i < Pq; ++i)
                for (int j = 0; j < Pk; ++j)
                    if (kpos[size_t(j)] > qpos[size_t(i)])
                        att[size_t(i) * size_t(Pk) + size_t(j)] = -1e30;
        nn::softmax_rows(att, Pq, Pk);
        gemm(false, false, Pq, dh, Pk, 1.0, att, vh.data(), 0.0, ctxh.data());
        for (int i = 0; i < Pq; ++i)
            std::copy_n(ctxh.data() + size_t(i) * size_t(dh), dh,
                        c.ctx.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dh));
    }
    std::vector<double> out;
    linear_forward(c.ctx, w.wo, w.bo, Pq, out);
    scatter_add_rows(h_accum, qpos, d, out);
}

void attn_backward(AttnWeights& w, const AttnCache& c, int d, int heads, double scale,
                   const std::vector<double>& dh, std::vector<double>& dy) {
    const int Pq = int(c.qpos.size()), Pk = int(c.kpos.size());
    if (Pq == 0) return;
    std::vector<double> dout;
    gather_rows(dh, c.qpos, d, dout);
    if (c.identity) {
        scatter_add_rows(dy, c.qpos, d, dout);
        return;
    }
    const int dhd = d / heads;
    std::vector<double> dctx;
    linear_backward(c.ctx, w.wo, w.bo, dout, Pq, dctx);
    std::vector<double> dq(size_t(Pq) * size_t(d), 0.0), dk(size_t(Pk) * size_t(d), 0.0),
        dv(size_t(Pk) * size_t(d), 0.0);
    std::vector<double> qh(size_t(Pq) * size_t(dhd)), kh(size_t(Pk) * size_t(dhd)),
        vh(size_t(Pk) * size_t(dhd)), dctxh(size_t(Pq) * size_t(dhd)),
        datt(size_t(Pq) * size_t(Pk)), ds(size_t(Pq) * size_t(Pk)),
        dqh(size_t(Pq) * size_t(dhd)), dkh(size_t(Pk) * size_t(dhd)),
        dvh(size_t(Pk) * size_t(dhd));
    for (int hh = 0; hh < heads; ++hh) {
        for (int i = 0; i < Pq; ++i) {
            std::copy_n(c.q.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dhd), dhd,
                        qh.data() + size_t(i) * size_t(dhd));
            std::copy_n(dctx.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dhd), dhd,
                        dctxh.data() + size_t(i) * size_t(dhd));
        }
        for (int i = 0; i < Pk; ++i) {
            std::copy_n(c.k.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dhd), dhd,
                        kh.data() + size_t(i) * size_t(dhd));
            std::copy_n(c.v.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dhd), dhd,
                        vh.data() + size_t(i) * size_t(dhd));
        }
        const double* att = c.att.data() + size_t(hh) * size_t(Pq) * size_t(Pk);
        gemm(true, false, Pk, dhd, Pq, 1.0, att, dctxh.data(), 0.0, dvh.data());
        gemm(false, true, Pq, Pk, dhd, 1.0, dctxh.data(), vh.data(), 0.0, datt.data());
        for (int i = 0; i < Pq; ++i) {
            const double* a = att + size_t(i) * size_t(Pk);
            const double* da = datt.data() + size_t(i) * size_t(Pk);
            double dot = 0.0;
            for (int j = 0; j < Pk; ++j) dot += a[j] * da[j];
            double* dsr = ds.data() + size_t(i) * size_t(Pk);
            for (int j = 0; j < Pk; ++j) dsr[j] = a[j] * (da[j] - dot) * scale;
        }
        gemm(false, false, Pq, dhd, Pk, 1.0, ds.data(), kh.data(), 0.0, dqh.data());
        gemm(true, false, Pk, dhd, Pq, 1.0, ds.data(), qh.data(), 0.0, dkh.data());
        for (int i = 0; i < Pq; ++i)
            std::copy_n(dqh.data() + size_t(i) * size_t(dhd), dhd,
                        dq.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dhd));
        for (int i = 0; i < Pk; ++i) {
            std::copy_n(dkh.data() + size_t(i) * size_t(dhd), dhd,
                        dk.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dhd));
            std::copy_n(dvh.data() + size_t(i) * size_t(dhd), dhd,
                        dv.data() + size_t(i) * size_t(d) + size_t(hh) * size_t(dhd));
        }
    }
    std::vector<double> dxq, dxk1, dxk2;
    linear_backward(c.xq, w.wq, w.bq, dq, Pq, dxq);
    linear_backward(c.xk, w.wk, w.bk, dk, Pk, dxk1);
    linear_backward(c.xk, w.wv, w.bv, dv, Pk, dxk2);
    scatter_add_rows(dy, c.qpos, d, dxq);
    scatter_add_rows(dy, c.kpos, d, dxk1);
    scatter_add_rows(dy, c.kpos, d, dxk2);
}

AttnWeights make_attn(int d, Rng& rng) {
    AttnWeights w;
    w.wq = Tensor::zeros({d, d});
    w.wk = Tensor::zeros({d, d});
    w.wv = Tensor::zeros({d, d});
    w.wo = Tensor::zeros({d, d});
    w.bq = Tensor::zeros({d});
    w.bk = Tensor::zeros({d});
    w.bv = Tensor::zeros({d});
    w.bo = Tensor::zeros({d});
    w.wq.fill_normal(rng, 0.02);
    w.wk.fill_normal(rng, 0.02);
    w.wv.fill_normal(rng, 0.02);
    w.wo.fill_normal(rng, 0.02);
    return w;
}

} // namespace

DenoiserConfig DenoiserConfig::preset(const std::string& name) {
    DenoiserConfig c;
    if (name == "toy") {
        c.n_blocks = 4;
        c.n_heads = 4;
        c.d_model = 64;
    } else if (name == "paper") {
        c.n_blocks = 20;
        c.n_heads = 16;
        c.d_model = 1024;
    } else if (name == "paper-ablation") {
        c.n_blocks = 18;
        c.n_heads = 16;
        c.d_model = 256;
    } else {
        fail(errc::config, "unknown denoiser preset '" + name + "'");
    }
    return c;
}

Denoiser::Denoiser(const ModalityLayout& lay, std::vector<int> lens, int steps, DenoiserConfig c)
    : layout(lay), lengths(std::move(lens)), T(steps), cfg(std::move(c)) {
    const int M = layout.num_modalities();
    const int d = cfg.d_model;
    if (int(lengths.size()) != M) fail(errc::config, "lengths count does not match modality count");
    if (cfg.d_model % cfg.n_heads != 0) fail(errc::config, "d_model must be divisible by n_heads");
    if (T < 1) fail(errc::config, "denoiser needs T >= 1");
    if (!cfg.grids.empty() && int(cfg.grids.size()) != M)
        fail(errc::config, "grids count does not match modality count");

    auto rng = make_rng(cfg.init_seed);
    token_emb = Tensor::zeros({layout.total, d});
    token_emb.fill_normal(rng, 0.02);
    for (int m = 0; m < M; ++m) {
        PosEncoding pe;
        const int L = lengths[size_t(m)];
        if (L < 1) fail(errc::config, "modality " + std::to_string(m) + " needs length >= 1");
        if (!cfg.grids.empty() && cfg.grids[size_t(m)][0] > 0) {
            const int rows = cfg.grids[size_t(m)][0], cols = cfg.grids[size_t(m)][1];
            if (rows * cols != L)
                fail(errc::config, "grid dims do not cover modality " + std::to_string(m));
            pe.is_grid = true;
            pe.grid_cols = cols;
            pe.row = Tensor::zeros({rows, d});
            pe.col = Tensor::zeros({cols, d});
            pe.row.fill_normal(rng, 0.02);
            pe.col.fill_normal(rng, 0.02);
        } else {
            pe.table = Tensor::zeros({L, d});
            pe.table.fill_normal(rng, 0.02);
        }
        pos.push_back(std::move(pe));
    }
    time_emb = Tensor::zeros({T + 1, d});
    time_emb.fill_normal(rng, 0.02);
    const int f = cfg.ffn_mult * d;
    const int ma_sets = (M > 1) ? (cfg.causal_ablation ? 1 : M) : 0;
    for (int bi = 0; bi < cfg.n_blocks; ++bi) {
        BlockParams b;
        b.ln1_g = Tensor::zeros({d});
        b.ln1_g.fill(1.0);
        b.ln1_b = Tensor::zeros({d});
        b.sa = make_attn(d, rng);
        b.ln2_g = Tensor::zeros({d});
        b.ln2_g.fill(1.0);
        b.ln2_b = Tensor::zeros({d});
        for (int m = 0; m < ma_sets; ++m) b.ma.push_back(make_attn(d, rng));
        b.ln3_g = Tensor::zeros({d});
        b.ln3_g.fill(1.0);
        b.ln3_b = Tensor::zeros({d});
        b.ff_w1 = Tensor::zeros({d, f});
        b.ff_w1.fill_normal(rng, 0.02);
        b.ff_b1 = Tensor::zeros({f});
        b.ff_w2 = Tensor::zeros({f, d});
        b.ff_w2.fill_normal(rng, 0.02);
        b.ff_b2 = Tensor::zeros({d});
        blocks.push_back(std::move(b));
    }
    lnf_g = Tensor::zeros({d});
    lnf_g.fill(1.0);
    lnf_b = Tensor::zeros({d});
    for (int m = 0; m < M; ++m) {
        head_w.push_back(Tensor::zeros({d, layout.sizes[size_t(m)]}));
        head_w.back().fill_normal(rng, 0.02);
        head_b.push_back(Tensor::zeros({layout.sizes[size_t(m)]}));
    }
}

CategoricalField Denoiser::forward(const TokenSequence& xt, int t) const {
    DenoiserCache cache;
    return forward(xt, t, cache);
}

CategoricalField Denoiser::forward(const TokenSequence& xt, int t, DenoiserCache& cache) const {
    xt.validate(layout);
    if (t < 0 || t > T) fail(errc::out_of_range, "denoiser step t out of range");
    const int P = xt.size();
    const int d = cfg.d_model;
    const int M = layout.num_modalities();
    {
        std::vector<int> counts(size_t(M), 0);
        for (int p = 0; p < P; ++p) counts[size_t(xt.position_modality[size_t(p)])]++;
        for (int m = 0; m < M; ++m)
            if (counts[size_t(m)] != lengths[size_t(m)])
                fail(errc::config, "sequence lengths do not match the denoiser configuration");
    }
    cache.xt = xt;
    cache.t = t;
    cache.blocks.assign(size_t(cfg.n_blocks), BlockCache{});

    // fused embedding: token row + per-modality positional + time conditioning
    std::vector<double> h(size_t(P) * size_t(d), 0.0);
    {
        std::vector<int> within(size_t(M), 0);
        for (int p = 0; p < P; ++p) {
            const int m = xt.position_modality[size_t(p)];
            const int idx = xt.indices[size_t(p)];
            const int w = within[size_t(m)]++;
            double* hp = h.data() + size_t(p) * size_t(d);
            const double* te = token_emb.v.data() + size_t(idx) * size_t(d);
            for (int i = 0; i < d; ++i) hp[i] = te[i];
            const PosEncoding& pe = pos[size_t(m)];
            if (pe.is_grid) {
                const double* r = pe.row.v.data() + size_t(w / pe.grid_cols) * size_t(d);
                const double* cc = pe.col.v.data() + size_t(w % pe.grid_cols) * size_t(d);
                for (int i = 0; i < d; ++i) hp[i] += r[i] + cc[i];
            } else {
                const double* tab = pe.table.v.data() + size_t(w) * size_t(d);
                for (int i = 0; i < d; ++i) hp[i] += tab[i];
            }
            if (cfg.time_mode == TimeMode::input) {
                const double* tr = time_emb.v.data() + size_t(t) * size_t(d);
                for (int i = 0; i < d; ++i) hp[i] += tr[i];
            }
        }
    }
    cache.h0 = h;

    std::vector<int> all_pos(static_cast<size_t>(P));
    for (int p = 0; p < P; ++p) all_pos[size_t(p)] = p;
    std::vector<std::vector<int>> of_modality, others;
    of_modality.resize(size_t(M));
    others.resize(size_t(M));
    for (int p = 0; p < P; ++p) of_modality[size_t(xt.position_modality[size_t(p)])].push_back(p);
    for (int m = 0; m < M; ++m)
        for (int p = 0; p < P; ++p)
            if (xt.position_modality[size_t(p)] != m) others[size_t(m)].push_back(p);

    const int heads = cfg.n_heads;
    const double scale =
        cfg.paper_literal_sqrt2 ? 1.0 / std::sqrt(2.0) : 1.0 / std::sqrt(double(d / heads));
    const int f = cfg.ffn_mult * d;

    for (int bi = 0; bi < cfg.n_blocks; ++bi) {
        const BlockParams& bp = blocks[size_t(bi)];
        BlockCache& bc = cache.blocks[size_t(bi)];

        if (cfg.time_mode == TimeMode::per_block) {
            std::vector<double> hx = h;
            const double* tr = time_emb.v.data() + size_t(t) * size_t(d);
            for (int p = 0; p < P; ++p)
                for (int i = 0; i < d; ++i) hx[size_t(p) * size_t(d) + size_t(i)] += tr[i];
            ln_forward(hx, bp.ln1_g, bp.ln1_b, P, d, bc.ln1);
        } else {
            ln_forward(h, bp.ln1_g, bp.ln1_b, P, d, bc.ln1);
        }
        attn_forward(bp.sa, bc.ln1.y, d, heads, scale, all_pos, all_pos, false, bc.sa, h);

        if (M > 1) {
            ln_forward(h, bp.ln2_g, bp.ln2_b, P, d, bc.ln2);
            if (cfg.causal_ablation) {
                bc.ma.resize(1);
                attn_forward(bp.ma[0], bc.ln2.y, d, heads, scale, all_pos, all_pos, true, bc.ma[0],
                             h);
            } else {
                bc.ma.resize(size_t(M));
                for (int m = 0; m < M; ++m)
                    attn_forward(bp.ma[size_t(m)], bc.ln2.y, d, heads, scale,
                                 of_modality[size_t(m)], others[size_t(m)], false, bc.ma[size_t(m)],
                                 h);
            }
        }

        ln_forward(h, bp.ln3_g, bp.ln3_b, P, d, bc.ln3);
        linear_forward(bc.ln3.y, bp.ff_w1, bp.ff_b1, P, bc.ff_pre);
        bc.ff_act.resize(size_t(P) * size_t(f));
        for (size_t i = 0; i < bc.ff_pre.size(); ++i) bc.ff_act[i] = nn::gelu(bc.ff_pre[i]);
        std::vector<double> ff_out;
        linear_forward(bc.ff_act, bp.ff_w2, bp.ff_b2, P, ff_out);
        for (size_t i = 0; i < h.size(); ++i) h[i] += ff_out[i];

        for (double x : h)
            if (!std::isfinite(x))
                fail(errc::numeric, "non-finite activation after block " + std::to_string(bi));
    }

    ln_forward(h, lnf_g, lnf_b, P, d, cache.lnf);

    CategoricalField out(P, layout.total);
    std::vector<double> logits;
    for (int p = 0; p < P; ++p) {
        const int m = xt.position_modality[size_t(p)];
        const int K = layout.sizes[size_t(m)];
        logits.assign(size_t(K), 0.0);
        const double* hf = cache.lnf.y.data() + size_t(p) * size_t(d);
        const Tensor& w = head_w[size_t(m)];
        for (int i = 0; i < d; ++i) {
            const double hv = hf[i];
            const double* wr = w.v.data() + size_t(i) * size_t(K);
            for (int k = 0; k < K; ++k) logits[size_t(k)] += hv * wr[k];
        }
        for (int k = 0; k < K; ++k) logits[size_t(k)] += head_b[size_t(m)].v[size_t(k)];
        nn::softmax_rows(logits.data(), 1, K);
        double* row = out.row(p);
        for (int k = 0; k < K; ++k) row[layout.segment_begin(m) + k] = logits[size_t(k)];
    }
    cache.probs = out;
    return out;
}

void Denoiser::backward(const DenoiserCache& cache, const CategoricalField& dprobs) {
    if (cache.t < 0) fail(errc::numeric, "backward without a recorded forward");
    const TokenSequence& xt = cache.xt;
    const int P = xt.size();
    const int d = cfg.d_model;
    const int M = layout.num_modalities();
    const int heads = cfg.n_heads;
    const double scale =
        cfg.paper_literal_sqrt2 ? 1.0 / std::sqrt(2.0) : 1.0 / std::sqrt(double(d / heads));
    const int f = cfg.ffn_mult * d;

    // heads: softmax jacobian then the per-modality projection
    std::vector<double> dhf(size_t(P) * size_t(d), 0.0);
    for (int p = 0; p < P; ++p) {
        const int m = xt.position_modality[size_t(p)];
        const int K = layout.sizes[size_t(m)];
        const int seg = layout.segment_begin(m);
        const double* prow = cache.probs.row(p);
        const double* dp = dprobs.row(p);
        double dot = 0.0;
        for (int k = 0; k < K; ++k) dot += dp[seg + k] * prow[seg + k];
        std::vector<double> dlogit(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k) dlogit[size_t(k)] = prow[seg + k] * (dp[seg + k] - dot);
        const double* hf = cache.lnf.y.data() + size_t(p) * size_t(d);
        Tensor& w = head_w[size_t(m)];
        Tensor& b = head_b[size_t(m)];
        double* dhfp = dhf.data() + size_t(p) * size_t(d);
        for (int i = 0; i < d; ++i) {
            const double hv = hf[i];
            double* wg = w.g.data() + size_t(i) * size_t(K);
            const double* wv = w.v.data() + size_t(i) * size_t(K);
            double acc = 0.0;
            for (int k = 0; k < K; ++k) {
                wg[k] += hv * dlogit[size_t(k)];
                acc += wv[k] * dlogit[size_t(k)];
            }
            dhfp[i] += acc;
        }
        for (int k = 0; k < K; ++k) b.g[size_t(k)] += dlogit[size_t(k)];
    }

    std::vector<double> dh = ln_backward(cache.lnf, lnf_g, lnf_b, dhf, P, d);

    for (int bi = cfg.n_blocks - 1; bi >= 0; --bi) {
        BlockParams& bp = blocks[size_t(bi)];
        const BlockCache& bc = cache.blocks[size_t(bi)];

        // feed-forward stage
        {
            std::vector<double> dact(size_t(P) * size_t(f), 0.0);
            gemm(false, true, P, f, d, 1.0, dh.data(), bp.ff_w2.v.data(), 0.0, dact.data());
            gemm(true, false, f, d, P, 1.0, bc.ff_act.data(), dh.data(), 1.0, bp.ff_w2.g.data());
            for (int p = 0; p < P; ++p)
                for (int i = 0; i < d; ++i)
                    bp.ff_b2.g[size_t(i)] += dh[size_t(p) * size_t(d) + size_t(i)];
            std::vector<double> dpre(size_t(P) * size_t(f));
            for (size_t i = 0; i < dpre.size(); ++i) dpre[i] = dact[i] * nn::gelu_grad(bc.ff_pre[i]);
            std::vector<double> dy3;
            linear_backward(bc.ln3.y, bp.ff_w1, bp.ff_b1, dpre, P, dy3);
            const std::vector<double> dx3 = ln_backward(bc.ln3, bp.ln3_g, bp.ln3_b, dy3, P, d);
            for (size_t i = 0; i < dh.size(); ++i) dh[i] += dx3[i];
        }

        // mutual stage
        if (M > 1) {
            std::vector<double> dy2(size_t(P) * size_t(d), 0.0);
            if (cfg.causal_ablation) {
                attn_backward(bp.ma[0], bc.ma[0], d, heads, scale, dh, dy2);
            } else {
                for (int m = 0; m < M; ++m)
                    attn_backward(bp.ma[size_t(m)], bc.ma[size_t(m)], d, heads, scale, dh, dy2);
            }
            const std::vector<double> dx2 = ln_backward(bc.ln2, bp.ln2_g, bp.ln2_b, dy2, P, d);
            for (size_t i = 0; i < dh.size(); ++i) dh[i] += dx2[i];
        }

        // self-attention stage
        {
            std::vector<double> dy1(size_t(P) * size_t(d), 0.0);
            attn_backward(bp.sa, bc.sa, d, heads, scale, dh, dy1);
            const std::vector<double> dx1 = ln_backward(bc.ln1, bp.ln1_g, bp.ln1_b, dy1, P, d);
            if (cfg.time_mode == TimeMode::per_block) {
                double* tg = time_emb.g.data() + size_t(cache.t) * size_t(d);
                for (int p = 0; p < P; ++p)
                    for (int i = 0; i < d; ++i) tg[i] += dx1[size_t(p) * size_t(d) + size_t(i)];
            }
            for (size_t i = 0; i < dh.size(); ++i) dh[i] += dx1[i];
        }
    }

    // embedding stage
    std::vector<int> within(size_t(M), 0);
    for (int p = 0; p < P; ++p) {
        const int m = xt.position_modality[size_t(p)];
        const int idx = xt.indices[size_t(p)];
        const int w = within[size_t(m)]++;
        const double* dhp = dh.data() + size_t(p) * size_t(d);
        double* te = token_emb.g.data() + size_t(idx) * size_t(d);
        for (int i = 0; i < d; ++i) te[i] += dhp[i];
        PosEncoding& pe = pos[size_t(m)];
        if (pe.is_grid) {
            double* r = pe.row.g.data() + size_t(w / pe.grid_cols) * size_t(d);
            double* cc = pe.col.g.data() + size_t(w % pe.grid_cols) * size_t(d);
            for (int i = 0; i < d; ++i) {
                r[i] += dhp[i];
                cc[i] += dhp[i];
            }
        } else {
            double* tab = pe.table.g.data() + size_t(w) * size_t(d);
            for (int i = 0; i < d; ++i) tab[i] += dhp[i];
        }
        if (cfg.time_mode == TimeMode::input) {
            double* tg = time_emb.g.data() + size_t(cache.t) * size_t(d);
            for (int i = 0; i < d; ++i) tg[i] += dhp[i];
        }
    }
}

void Denoiser::zero_grad() {
    for_each_param([](const std::string&, Tensor& t) { t.zero_grad(); });
}

void Denoiser::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("token_emb", token_emb);
    for (size_t m = 0; m < pos.size(); ++m) {
        const std::string p = "pos" + std::to_string(m);
        if (pos[m].is_grid) {
            fn(p + ".row", pos[m].row);
            fn(p + ".col", pos[m].col);
        } else {
            fn(p + ".table", pos[m].table);
        }
    }
    fn("time_emb", time_emb);
    for (size_t bi = 0; bi < blocks.size(); ++bi) {
        const std::string b = "blk" + std::to_string(bi);
        BlockParams& bp = blocks[bi];
        fn(b + ".ln1.g", bp.ln1_g);
        fn(b + ".ln1.b", bp.ln1_b);
        auto visit_attn = [&](const std::string& prefix, AttnWeights& w) {
            fn(prefix + ".wq", w.wq);
            fn(prefix + ".wk", w.wk);
            fn(prefix + ".wv", w.wv);
            fn(prefix + ".wo", w.wo);
            fn(prefix + ".bq", w.bq);
            fn(prefix + ".bk", w.bk);
            fn(prefix + ".bv", w.bv);
            fn(prefix + ".bo", w.bo);
        };
        visit_attn(b + ".sa", bp.sa);
        if (!bp.ma.empty()) {
            fn(b + ".ln2.g", bp.ln2_g);
            fn(b + ".ln2.b", bp.ln2_b);
            for (size_t m = 0; m < bp.ma.size(); ++m)
                visit_attn(b + ".ma" + std::to_string(m), bp.ma[m]);
        }
        fn(b + ".ln3.g", bp.ln3_g);
        fn(b + ".ln3.b", bp.ln3_b);
        fn(b + ".ff.w1", bp.ff_w1);
        fn(b + ".ff.b1", bp.ff_b1);
        fn(b + ".ff.w2", bp.ff_w2);
        fn(b + ".ff.b2", bp.ff_b2);
    }
    fn("lnf.g", lnf_g);
    fn("lnf.b", lnf_b);
    for (size_t m = 0; m < head_w.size(); ++m) {
        fn("head" + std::to_string(m) + ".w", head_w[m]);
        fn("head" + std::to_string(m) + ".b", head_b[m]);
    }
}

void Denoiser::for_each_param(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<Denoiser*>(this)->for_each_param(
        [&](const std::string& name, Tensor& t) { fn(name, t); });
}

int64_t Denoiser::num_params() const {
    int64_t n = 0;
    for_each_param([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

} // namespace fusediff
