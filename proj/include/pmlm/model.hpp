#pragma once

// Small Transformer encoder over PMLM instances: summed token/position/segment
// embeddings, masked multi-head self-attention with optional bucketed relative
// position bias (one table, shared across layers), post-norm residual blocks
// with a GELU FFN, and a classifier tied to the token embedding table.
// Templated on the scalar so gradient checks can run in 64-bit.
//
// Attention masking follows the additive 0/-inf formulation; a masked key's
// softmax weight is realized as exactly zero, so masked keys contribute
// nothing to the weighted sum and restriction to any attend-closed subset of
// rows reproduces the same hidden states bit for bit.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pmlm/assembly.hpp"
#include "pmlm/common.hpp"
#include "pmlm/rng.hpp"

namespace pmlm {

template <class S>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<S> d;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * static_cast<size_t>(c), S(0)) {}

    S& at(int r, int c) { return d[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)]; }
    const S& at(int r, int c) const {
        return d[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)];
    }
    S* row(int r) { return d.data() + static_cast<size_t>(r) * static_cast<size_t>(cols); }
    const S* row(int r) const { return d.data() + static_cast<size_t>(r) * static_cast<size_t>(cols); }
    size_t count() const { return d.size(); }
    void zero() { std::fill(d.begin(), d.end(), S(0)); }
};

struct ModelConfig {
    int layers = 4;
    int hidden = 128;
    int heads = 4;
    int ffn_hidden = 512;
    int vocab_size = 0;
    int max_positions = 512;
    int rel_buckets = 32;
    int max_relative_distance = 128;
    bool use_relative_bias = true;
    double dropout = 0.1;

    int head_dim() const { return hidden / heads; }

    void validate() const {
        require(layers >= 0 && hidden >= 1 && heads >= 1 && ffn_hidden >= 1, "model sizes must be >= 1");
        require(hidden % heads == 0, "heads * head_dim must equal hidden size");
        require(vocab_size > 0, "vocab size unset");
        require(max_positions >= 1, "max_positions must be >= 1");
        require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0,1)");
        if (use_relative_bias)
            require(rel_buckets >= 2 && max_relative_distance >= 2, "relative bias table too small");
    }
};

// T5-style bucketing of the signed distance key_pos - query_pos: half the
// buckets for each direction, linear up to max_exact then log-scaled until
// max_relative_distance, clipped beyond.
inline int relative_bucket(int rel, int num_buckets, int max_distance) {
    int ret = 0;
    int n = num_buckets / 2;
    if (rel > 0) ret += n;
    int a = rel > 0 ? rel : -rel;
    const int max_exact = n / 2;
    if (a < max_exact) return ret + a;
    const double log_ratio =
        std::log(static_cast<double>(a) / max_exact) / std::log(static_cast<double>(max_distance) / max_exact);
    int v = max_exact + static_cast<int>(log_ratio * (n - max_exact));
    if (v > n - 1) v = n - 1;
    return ret + v;
}

template <class S>
struct Parameters {
    struct Layer {
        Matrix<S> wq, bq, wk, bk, wv, bv;  // projections, [hidden x hidden] + [1 x hidden]
        Matrix<S> wo, bo;                  // attention output projection
        Matrix<S> ln1_g, ln1_b;
        Matrix<S> w1, b1, w2, b2;  // FFN
        Matrix<S> ln2_g, ln2_b;
    };

    Matrix<S> tok_emb;   // [vocab x hidden]; also the tied output classifier
    Matrix<S> pos_emb;   // [max_positions x hidden]
    Matrix<S> seg_emb;   // [2 x hidden]
    Matrix<S> out_bias;  // [1 x vocab]
    Matrix<S> rel_bias;  // [heads x rel_buckets], shared across layers
    std::vector<Layer> layers;

    static Parameters shaped(const ModelConfig& cfg) {
        cfg.validate();
        Parameters p;
        p.tok_emb = Matrix<S>(cfg.vocab_size, cfg.hidden);
        p.pos_emb = Matrix<S>(cfg.max_positions, cfg.hidden);
        p.seg_emb = Matrix<S>(2, cfg.hidden);
        p.out_bias = Matrix<S>(1, cfg.vocab_size);
        if (cfg.use_relative_bias) p.rel_bias = Matrix<S>(cfg.heads, cfg.rel_buckets);
        p.layers.resize(static_cast<size_t>(cfg.layers));
        for (auto& l : p.layers) {
            l.wq = l.wk = l.wv = l.wo = Matrix<S>(cfg.hidden, cfg.hidden);
            l.bq = l.bk = l.bv = l.bo = Matrix<S>(1, cfg.hidden);
            l.ln1_g = l.ln1_b = l.ln2_g = l.ln2_b = Matrix<S>(1, cfg.hidden);
            l.w1 = Matrix<S>(cfg.hidden, cfg.ffn_hidden);
            l.b1 = Matrix<S>(1, cfg.ffn_hidden);
            l.w2 = Matrix<S>(cfg.ffn_hidden, cfg.hidden);
            l.b2 = Matrix<S>(1, cfg.hidden);
        }
        return p;
    }

    static Parameters init(const ModelConfig& cfg, Rng& rng, double init_std = 0.02) {
        Parameters p = shaped(cfg);
        const auto fill = [&rng, init_std](Matrix<S>& m) {
            for (auto& x : m.d) x = static_cast<S>(rng.gaussian(0.0, init_std));
        };
        fill(p.tok_emb);
        fill(p.pos_emb);
        fill(p.seg_emb);
        for (auto& l : p.layers) {
            fill(l.wq);
            fill(l.wk);
            fill(l.wv);
            fill(l.wo);
            fill(l.w1);
            fill(l.w2);
            for (auto& x : l.ln1_g.d) x = S(1);
            for (auto& x : l.ln2_g.d) x = S(1);
        }
        return p;
    }

    // Enumerates every tensor in a fixed order: f(name, matrix, weight_decay).
    template <class F>
    void visit(F&& f) {
        f("tok_emb", tok_emb, true);
        f("pos_emb", pos_emb, true);
        f("seg_emb", seg_emb, true);
        f("out_bias", out_bias, false);
        if (rel_bias.count() > 0) f("rel_bias", rel_bias, false);
        for (size_t i = 0; i < layers.size(); ++i) {
            const std::string pre = "layers." + std::to_string(i) + ".";
            Layer& l = layers[i];
            f(pre + "wq", l.wq, true);
            f(pre + "bq", l.bq, false);
            f(pre + "wk", l.wk, true);
            f(pre + "bk", l.bk, false);
            f(pre + "wv", l.wv, true);
            f(pre + "bv", l.bv, false);
            f(pre + "wo", l.wo, true);
            f(pre + "bo", l.bo, false);
            f(pre + "ln1_g", l.ln1_g, false);
            f(pre + "ln1_b", l.ln1_b, false);
            f(pre + "w1", l.w1, true);
            f(pre + "b1", l.b1, false);
            f(pre + "w2", l.w2, true);
            f(pre + "b2", l.b2, false);
            f(pre + "ln2_g", l.ln2_g, false);
            f(pre + "ln2_b", l.ln2_b, false);
        }
    }

    template <class F>
    void visit(F&& f) const {
        const_cast<Parameters*>(this)->visit(
            [&f](const std::string& name, const Matrix<S>& m, bool decay) { f(name, m, decay); });
    }

    static Parameters zeros_like(const Parameters& other) {
        Parameters p;
        p.tok_emb = Matrix<S>(other.tok_emb.rows, other.tok_emb.cols);
        p.pos_emb = Matrix<S>(other.pos_emb.rows, other.pos_emb.cols);
        p.seg_emb = Matrix<S>(other.seg_emb.rows, other.seg_emb.cols);
        p.out_bias = Matrix<S>(other.out_bias.rows, other.out_bias.cols);
        if (other.rel_bias.count() > 0) p.rel_bias = Matrix<S>(other.rel_bias.rows, other.rel_bias.cols);
        p.layers.resize(other.layers.size());
        for (size_t i = 0; i < other.layers.size(); ++i) {
            const auto& s = other.layers[i];
            auto& dl = p.layers[i];
            const auto zl = [](const Matrix<S>& m) { return Matrix<S>(m.rows, m.cols); };
            dl.wq = zl(s.wq); dl.bq = zl(s.bq); dl.wk = zl(s.wk); dl.bk = zl(s.bk);
            dl.wv = zl(s.wv); dl.bv = zl(s.bv); dl.wo = zl(s.wo); dl.bo = zl(s.bo);
            dl.ln1_g = zl(s.ln1_g); dl.ln1_b = zl(s.ln1_b);
            dl.w1 = zl(s.w1); dl.b1 = zl(s.b1); dl.w2 = zl(s.w2); dl.b2 = zl(s.b2);
            dl.ln2_g = zl(s.ln2_g); dl.ln2_b = zl(s.ln2_b);
        }
        return p;
    }
};

// Global forward-pass counter used by the one-pass accounting audit.
inline std::atomic<uint64_t>& forward_pass_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <class S>
inline S gelu(S x) {
    const double xd = static_cast<double>(x);
    return static_cast<S>(0.5 * xd * (1.0 + std::tanh(kGeluC * (xd + kGeluA * xd * xd * xd))));
}

template <class S>
inline S gelu_grad(S x) {
    const double xd = static_cast<double>(x);
    const double u = kGeluC * (xd + kGeluA * xd * xd * xd);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * xd * xd);
    return static_cast<S>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du);
}

inline constexpr double kLayerNormEps = 1e-12;

template <class S>
struct ForwardCache {
    struct Layer {
        Matrix<S> input;           // H^{l-1}
        Matrix<S> q, k, v;         // packed heads, T x hidden
        Matrix<S> probs;           // (heads*T) x T softmax weights, pre-dropout
        Matrix<S> probs_dropmask;  // same shape; empty when dropout off
        Matrix<S> ctx;             // T x hidden (heads concatenated)
        Matrix<S> attn_out;        // ctx.Wo + bo, pre-dropout
        Matrix<S> attn_dropmask;
        Matrix<S> res1;            // input + dropout(attn_out)
        Matrix<S> ln1;             // LN(res1)
        std::vector<S> ln1_mean, ln1_rstd;
        Matrix<S> ffn_pre;  // ln1.W1 + b1
        Matrix<S> ffn_act;  // gelu(ffn_pre)
        Matrix<S> ffn_out;  // ffn_act.W2 + b2, pre-dropout
        Matrix<S> ffn_dropmask;
        Matrix<S> res2;  // ln1 + dropout(ffn_out)
        std::vector<S> ln2_mean, ln2_rstd;
    };
    Matrix<S> h0;
    std::vector<Layer> layers;
    Matrix<S> h_top;
    bool recorded = false;
};

struct ForwardOptions {
    bool train = false;   // record-for-backward; dropout active when rate > 0
    Rng* rng = nullptr;   // required when train and dropout > 0
};

namespace detail {

template <class S>
inline void layer_norm(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias, Matrix<S>& out,
                       std::vector<S>* means, std::vector<S>* rstds) {
    const int n = x.cols;
    for (int t = 0; t < x.rows; ++t) {
        const S* xr = x.row(t);
        double mu = 0;
        for (int i = 0; i < n; ++i) mu += static_cast<double>(xr[i]);
        mu /= n;
        double var = 0;
        for (int i = 0; i < n; ++i) {
            const double d = static_cast<double>(xr[i]) - mu;
            var += d * d;
        }
        var /= n;
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        S* yr = out.row(t);
        for (int i = 0; i < n; ++i)
            yr[i] = static_cast<S>((static_cast<double>(xr[i]) - mu) * rstd) * gain.d[static_cast<size_t>(i)] +
                    bias.d[static_cast<size_t>(i)];
        if (means) (*means)[static_cast<size_t>(t)] = static_cast<S>(mu);
        if (rstds) (*rstds)[static_cast<size_t>(t)] = static_cast<S>(rstd);
    }
}

// y = x . W + b   (x: T x in, W: in x out)
template <class S>
inline void linear(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& b, Matrix<S>& y) {
    for (int t = 0; t < x.rows; ++t) {
        const S* xr = x.row(t);
        S* yr = y.row(t);
        for (int o = 0; o < w.cols; ++o) yr[o] = b.d[static_cast<size_t>(o)];
        for (int i = 0; i < w.rows; ++i) {
            const S xi = xr[i];
            if (xi == S(0)) continue;
            const S* wr = w.row(i);
            for (int o = 0; o < w.cols; ++o) yr[o] += xi * wr[o];
        }
    }
}

// accumulate dW += x^T . dy, db += dy, dx += dy . W^T
template <class S>
inline void linear_backward(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& dy, Matrix<S>& dw,
                            Matrix<S>& db, Matrix<S>& dx) {
    for (int t = 0; t < x.rows; ++t) {
        const S* xr = x.row(t);
        const S* dyr = dy.row(t);
        S* dxr = dx.row(t);
        for (int o = 0; o < w.cols; ++o) db.d[static_cast<size_t>(o)] += dyr[o];
        for (int i = 0; i < w.rows; ++i) {
            const S* wr = w.row(i);
            S* dwr = dw.row(i);
            const S xi = xr[i];
            double acc = 0;
            for (int o = 0; o < w.cols; ++o) {
                dwr[o] += xi * dyr[o];
                acc += static_cast<double>(wr[o]) * static_cast<double>(dyr[o]);
            }
            dxr[i] += static_cast<S>(acc);
        }
    }
}

template <class S>
inline void apply_dropout(Matrix<S>& x, Matrix<S>& mask_out, double rate, Rng& rng) {
    mask_out = Matrix<S>(x.rows, x.cols);
    const S scale = static_cast<S>(1.0 / (1.0 - rate));
    for (size_t i = 0; i < x.d.size(); ++i) {
        const S m = rng.uniform() < rate ? S(0) : scale;
        mask_out.d[i] = m;
        x.d[i] *= m;
    }
}

template <class S>
inline void check_finite(const Matrix<S>& m, const std::string& where) {
    for (const S& v : m.d)
        if (!std::isfinite(static_cast<double>(v))) fail("non-finite values in " + where);
}

}  // namespace detail

// One transformer pass. Returns H^L (rows() x hidden). With opts.train the
// cache records everything backward() needs.
template <class S>
Matrix<S> forward(const PmlmInstance& inst, const Parameters<S>& params, const ModelConfig& cfg,
                  const ForwardOptions& opts = {}, ForwardCache<S>* cache = nullptr) {
    cfg.validate();
    forward_pass_counter().fetch_add(1, std::memory_order_relaxed);
    const int T = inst.rows();
    const int H = cfg.hidden;
    const int nh = cfg.heads;
    const int dk = cfg.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    const bool drop = opts.train && cfg.dropout > 0.0;
    if (drop) require(opts.rng != nullptr, "dropout requires an rng in train mode");

    // embeddings: token + absolute position + segment
    Matrix<S> h(T, H);
    for (int t = 0; t < T; ++t) {
        const int tok = inst.token_ids[static_cast<size_t>(t)];
        const int pos = inst.position_ids[static_cast<size_t>(t)];
        const int seg = inst.segment_ids[static_cast<size_t>(t)];
        require(tok >= 0 && tok < cfg.vocab_size, "token id out of range: " + std::to_string(tok));
        require(pos >= 0 && pos < cfg.max_positions, "position id out of range: " + std::to_string(pos));
        require(seg == 0 || seg == 1, "segment id out of range: " + std::to_string(seg));
        const S* te = params.tok_emb.row(tok);
        const S* pe = params.pos_emb.row(pos);
        const S* se = params.seg_emb.row(seg);
        S* hr = h.row(t);
        for (int i = 0; i < H; ++i) hr[i] = te[i] + pe[i] + se[i];
    }

    if (cache) {
        cache->layers.assign(static_cast<size_t>(cfg.layers), typename ForwardCache<S>::Layer{});
        cache->h0 = h;
    }

    for (int li = 0; li < cfg.layers; ++li) {
        const auto& L = params.layers[static_cast<size_t>(li)];
        typename ForwardCache<S>::Layer* cl = cache ? &cache->layers[static_cast<size_t>(li)] : nullptr;
        if (cl) cl->input = h;

        Matrix<S> q(T, H), k(T, H), v(T, H);
        detail::linear(h, L.wq, L.bq, q);
        detail::linear(h, L.wk, L.bk, k);
        detail::linear(h, L.wv, L.bv, v);

        Matrix<S> probs(nh * T, T);
        Matrix<S> ctx(T, H);
        std::vector<double> scores(static_cast<size_t>(T));
        for (int hd = 0; hd < nh; ++hd) {
            const int off = hd * dk;
            for (int i = 0; i < T; ++i) {
                const S* qi = q.row(i) + off;
                double best = 0;
                bool any = false;
                for (int j = 0; j < T; ++j) {
                    if (!inst.may_attend(i, j)) continue;
                    const S* kj = k.row(j) + off;
                    double s = 0;
                    for (int c = 0; c < dk; ++c) s += static_cast<double>(qi[c]) * static_cast<double>(kj[c]);
                    s *= inv_sqrt_dk;
                    if (cfg.use_relative_bias) {
                        const int rel = inst.position_ids[static_cast<size_t>(j)] -
                                        inst.position_ids[static_cast<size_t>(i)];
                        s += static_cast<double>(
                            params.rel_bias.at(hd, relative_bucket(rel, cfg.rel_buckets, cfg.max_relative_distance)));
                    }
                    scores[static_cast<size_t>(j)] = s;
                    if (!any || s > best) best = s, any = true;
                }
                require(any, "no attendable key for row " + std::to_string(i));
                S* pr = probs.row(hd * T + i);
                double z = 0;
                for (int j = 0; j < T; ++j) {
                    if (!inst.may_attend(i, j)) {
                        pr[j] = S(0);  // exact zero: the -inf mask entry of the score matrix
                        continue;
                    }
                    const double e = std::exp(scores[static_cast<size_t>(j)] - best);
                    pr[j] = static_cast<S>(e);
                    z += e;
                }
                const S inv_z = static_cast<S>(1.0 / z);
                for (int j = 0; j < T; ++j) pr[j] *= inv_z;
            }
        }
        // probs stay pre-dropout in the cache; the mask weights the context sum
        Matrix<S> pmask;
        if (drop) {
            pmask = Matrix<S>(nh * T, T);
            const S scale = static_cast<S>(1.0 / (1.0 - cfg.dropout));
            for (size_t i = 0; i < pmask.d.size(); ++i)
                pmask.d[i] = opts.rng->uniform() < cfg.dropout ? S(0) : scale;
        }
        for (int hd = 0; hd < nh; ++hd) {
            const int off = hd * dk;
            for (int i = 0; i < T; ++i) {
                const S* pr = probs.row(hd * T + i);
                const S* mk = drop ? pmask.row(hd * T + i) : nullptr;
                S* ci = ctx.row(i) + off;
                for (int j = 0; j < T; ++j) {
                    const S w = mk ? pr[j] * mk[j] : pr[j];
                    if (w == S(0)) continue;
                    const S* vj = v.row(j) + off;
                    for (int c = 0; c < dk; ++c) ci[c] += w * vj[c];
                }
            }
        }
        if (cl && drop) cl->probs_dropmask = std::move(pmask);

        Matrix<S> attn_out(T, H);
        detail::linear(ctx, L.wo, L.bo, attn_out);
        Matrix<S> attn_dropped = attn_out;
        Matrix<S> attn_mask;
        if (drop) detail::apply_dropout(attn_dropped, attn_mask, cfg.dropout, *opts.rng);

        Matrix<S> res1(T, H);
        for (size_t i = 0; i < res1.d.size(); ++i) res1.d[i] = h.d[i] + attn_dropped.d[i];
        Matrix<S> ln1(T, H);
        std::vector<S> ln1_mean(static_cast<size_t>(T)), ln1_rstd(static_cast<size_t>(T));
        detail::layer_norm(res1, L.ln1_g, L.ln1_b, ln1, &ln1_mean, &ln1_rstd);

        Matrix<S> ffn_pre(T, cfg.ffn_hidden);
        detail::linear(ln1, L.w1, L.b1, ffn_pre);
        Matrix<S> ffn_act(T, cfg.ffn_hidden);
        for (size_t i = 0; i < ffn_act.d.size(); ++i) ffn_act.d[i] = gelu(ffn_pre.d[i]);
        Matrix<S> ffn_out(T, H);
        detail::linear(ffn_act, L.w2, L.b2, ffn_out);
        Matrix<S> ffn_dropped = ffn_out;
        Matrix<S> ffn_mask;
        if (drop) detail::apply_dropout(ffn_dropped, ffn_mask, cfg.dropout, *opts.rng);

        Matrix<S> res2(T, H);
        for (size_t i = 0; i < res2.d.size(); ++i) res2.d[i] = ln1.d[i] + ffn_dropped.d[i];
        Matrix<S> out(T, H);
        std::vector<S> ln2_mean(static_cast<size_t>(T)), ln2_rstd(static_cast<size_t>(T));
        detail::layer_norm(res2, L.ln2_g, L.ln2_b, out, &ln2_mean, &ln2_rstd);
        detail::check_finite(out, "layer " + std::to_string(li));

        if (cl) {
            cl->q = std::move(q);
            cl->k = std::move(k);
            cl->v = std::move(v);
            cl->probs = std::move(probs);
            cl->ctx = std::move(ctx);
            cl->attn_out = std::move(attn_out);
            cl->attn_dropmask = std::move(attn_mask);
            cl->res1 = std::move(res1);
            cl->ln1 = std::move(ln1);
            cl->ln1_mean = std::move(ln1_mean);
            cl->ln1_rstd = std::move(ln1_rstd);
            cl->ffn_pre = std::move(ffn_pre);
            cl->ffn_act = std::move(ffn_act);
            cl->ffn_out = std::move(ffn_out);
            cl->ffn_dropmask = std::move(ffn_mask);
            cl->res2 = std::move(res2);
            cl->ln2_mean = std::move(ln2_mean);
            cl->ln2_rstd = std::move(ln2_rstd);
        }
        h = std::move(out);
    }

    if (cache) {
        cache->h_top = h;
        cache->recorded = true;
    }
    return h;
}

// Vocabulary logits for one hidden row: h . E^T + out_bias (classifier tied
// to the embedding table).
template <class S>
std::vector<S> logits_row(const Parameters<S>& params, const S* h_row) {
    const int V = params.tok_emb.rows;
    const int H = params.tok_emb.cols;
    std::vector<S> out(static_cast<size_t>(V));
    for (int v = 0; v < V; ++v) {
        const S* e = params.tok_emb.row(v);
        double acc = static_cast<double>(params.out_bias.d[static_cast<size_t>(v)]);
        for (int i = 0; i < H; ++i) acc += static_cast<double>(h_row[i]) * static_cast<double>(e[i]);
        out[static_cast<size_t>(v)] = static_cast<S>(acc);
    }
    return out;
}

// Accumulates the classifier-side gradient for one row: d(out_bias),
// d(tok_emb) (tied classifier contribution), and dH at that row.
template <class S>
void logits_backward_row(const Parameters<S>& params, const S* h_row, const std::vector<S>& dlogits,
                         S* dh_row, Parameters<S>& grads) {
    const int V = params.tok_emb.rows;
    const int H = params.tok_emb.cols;
    for (int v = 0; v < V; ++v) {
        const S g = dlogits[static_cast<size_t>(v)];
        if (g == S(0)) continue;
        grads.out_bias.d[static_cast<size_t>(v)] += g;
        const S* e = params.tok_emb.row(v);
        S* de = grads.tok_emb.row(v);
        for (int i = 0; i < H; ++i) {
            de[i] += g * h_row[i];
            dh_row[i] += g * e[i];
        }
    }
}

// Reverse pass from d(loss)/d(H^L). Accumulates into `grads` (caller zeroes).
template <class S>
void backward(const PmlmInstance& inst, const Parameters<S>& params, const ModelConfig& cfg,
              const ForwardCache<S>& cache, const Matrix<S>& d_htop, Parameters<S>& grads) {
    require(cache.recorded, "backward before forward");
    const int T = inst.rows();
    const int H = cfg.hidden;
    const int nh = cfg.heads;
    const int dk = cfg.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    const auto layer_norm_backward = [&](const Matrix<S>& x, const std::vector<S>& mean,
                                         const std::vector<S>& rstd, const Matrix<S>& gain,
                                         const Matrix<S>& dy, Matrix<S>& dgain, Matrix<S>& dbias,
                                         Matrix<S>& dx) {
        const int n = x.cols;
        for (int t = 0; t < x.rows; ++t) {
            const S* xr = x.row(t);
            const S* dyr = dy.row(t);
            const double mu = static_cast<double>(mean[static_cast<size_t>(t)]);
            const double rs = static_cast<double>(rstd[static_cast<size_t>(t)]);
            double sum_dg = 0, sum_dgx = 0;
            for (int i = 0; i < n; ++i) {
                const double xhat = (static_cast<double>(xr[i]) - mu) * rs;
                const double dyg = static_cast<double>(dyr[i]) * static_cast<double>(gain.d[static_cast<size_t>(i)]);
                dgain.d[static_cast<size_t>(i)] += static_cast<S>(static_cast<double>(dyr[i]) * xhat);
                dbias.d[static_cast<size_t>(i)] += dyr[i];
                sum_dg += dyg;
                sum_dgx += dyg * xhat;
            }
            S* dxr = dx.row(t);
            for (int i = 0; i < n; ++i) {
                const double xhat = (static_cast<double>(xr[i]) - mu) * rs;
                const double dyg = static_cast<double>(dyr[i]) * static_cast<double>(gain.d[static_cast<size_t>(i)]);
                dxr[i] += static_cast<S>(rs * (dyg - sum_dg / n - xhat * sum_dgx / n));
            }
        }
    };

    Matrix<S> dh = d_htop;
    for (int li = cfg.layers - 1; li >= 0; --li) {
        const auto& L = params.layers[static_cast<size_t>(li)];
        auto& G = grads.layers[static_cast<size_t>(li)];
        const auto& cl = cache.layers[static_cast<size_t>(li)];

        // ln2
        Matrix<S> dres2(T, H);
        layer_norm_backward(cl.res2, cl.ln2_mean, cl.ln2_rstd, L.ln2_g, dh, G.ln2_g, G.ln2_b, dres2);

        // res2 = ln1 + dropout(ffn_out)
        Matrix<S> dffn_out = dres2;
        if (cl.ffn_dropmask.count() > 0)
            for (size_t i = 0; i < dffn_out.d.size(); ++i) dffn_out.d[i] *= cl.ffn_dropmask.d[i];
        Matrix<S> dln1(T, H);
        for (size_t i = 0; i < dln1.d.size(); ++i) dln1.d[i] = dres2.d[i];

        // FFN
        Matrix<S> dffn_act(T, cfg.ffn_hidden);
        detail::linear_backward(cl.ffn_act, L.w2, dffn_out, G.w2, G.b2, dffn_act);
        Matrix<S> dffn_pre(T, cfg.ffn_hidden);
        for (size_t i = 0; i < dffn_pre.d.size(); ++i)
            dffn_pre.d[i] = dffn_act.d[i] * gelu_grad(cl.ffn_pre.d[i]);
        detail::linear_backward(cl.ln1, L.w1, dffn_pre, G.w1, G.b1, dln1);

        // ln1
        Matrix<S> dres1(T, H);
        layer_norm_backward(cl.res1, cl.ln1_mean, cl.ln1_rstd, L.ln1_g, dln1, G.ln1_g, G.ln1_b, dres1);

        // res1 = input + dropout(attn_out)
        Matrix<S> dattn_out = dres1;
        if (cl.attn_dropmask.count() > 0)
            for (size_t i = 0; i < dattn_out.d.size(); ++i) dattn_out.d[i] *= cl.attn_dropmask.d[i];
        Matrix<S> dinput = dres1;

        // attention output projection
        Matrix<S> dctx(T, H);
        detail::linear_backward(cl.ctx, L.wo, dattn_out, G.wo, G.bo, dctx);

        // heads: cl.probs holds the pre-dropout softmax weights; the dropout
        // mask (when present) scaled the context sum, so it chains into dp.
        const bool pdrop = cl.probs_dropmask.count() > 0;
        Matrix<S> dq(T, H), dkm(T, H), dv(T, H);
        for (int hd = 0; hd < nh; ++hd) {
            const int off = hd * dk;
            for (int i = 0; i < T; ++i) {
                const S* pr = cl.probs.row(hd * T + i);
                const S* mk = pdrop ? cl.probs_dropmask.row(hd * T + i) : nullptr;
                const S* dci = dctx.row(i) + off;

                // d(pre-dropout prob) and dV
                std::vector<double> dp(static_cast<size_t>(T), 0.0);
                for (int j = 0; j < T; ++j) {
                    if (pr[j] == S(0)) continue;  // masked key: no gradient flows
                    const S* vj = cl.v.row(j) + off;
                    double acc = 0;
                    for (int c = 0; c < dk; ++c) acc += static_cast<double>(dci[c]) * static_cast<double>(vj[c]);
                    const double m = mk ? static_cast<double>(mk[j]) : 1.0;
                    dp[static_cast<size_t>(j)] = acc * m;
                    const S w_eff = mk ? pr[j] * mk[j] : pr[j];
                    if (w_eff != S(0)) {
                        S* dvj = dv.row(j) + off;
                        for (int c = 0; c < dk; ++c) dvj[c] += w_eff * dci[c];
                    }
                }

                // softmax backward: ds_j = w_j * (dp_j - sum_k w_k dp_k)
                double dot = 0;
                for (int j = 0; j < T; ++j) dot += static_cast<double>(pr[j]) * dp[static_cast<size_t>(j)];
                const S* qi = cl.q.row(i) + off;
                for (int j = 0; j < T; ++j) {
                    const double w = static_cast<double>(pr[j]);
                    if (w == 0.0) continue;
                    const double ds = w * (dp[static_cast<size_t>(j)] - dot);
                    const S* kj = cl.k.row(j) + off;
                    S* dqi = dq.row(i) + off;
                    S* dkj = dkm.row(j) + off;
                    for (int c = 0; c < dk; ++c) {
                        dqi[c] += static_cast<S>(ds * inv_sqrt_dk * static_cast<double>(kj[c]));
                        dkj[c] += static_cast<S>(ds * inv_sqrt_dk * static_cast<double>(qi[c]));
                    }
                    if (cfg.use_relative_bias) {
                        const int rel = inst.position_ids[static_cast<size_t>(j)] -
                                        inst.position_ids[static_cast<size_t>(i)];
                        grads.rel_bias.at(hd, relative_bucket(rel, cfg.rel_buckets, cfg.max_relative_distance)) +=
                            static_cast<S>(ds);
                    }
                }
            }
        }

        detail::linear_backward(cl.input, L.wq, dq, G.wq, G.bq, dinput);
        detail::linear_backward(cl.input, L.wk, dkm, G.wk, G.bk, dinput);
        detail::linear_backward(cl.input, L.wv, dv, G.wv, G.bv, dinput);
        dh = std::move(dinput);
    }

    // embeddings
    for (int t = 0; t < T; ++t) {
        const S* dr = dh.row(t);
        S* de = grads.tok_emb.row(inst.token_ids[static_cast<size_t>(t)]);
        S* dp = grads.pos_emb.row(inst.position_ids[static_cast<size_t>(t)]);
        S* ds = grads.seg_emb.row(inst.segment_ids[static_cast<size_t>(t)]);
        for (int i = 0; i < H; ++i) {
            de[i] += dr[i];
            dp[i] += dr[i];
            ds[i] += dr[i];
        }
    }
}

}  // namespace pmlm
