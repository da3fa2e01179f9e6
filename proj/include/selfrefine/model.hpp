#pragma once

// Minimal decoder-only transformer over a flat parameter vector, with
// hand-written backward pass and an incremental (KV-cached) decode path.
// Templated on the scalar type: the pipeline runs float, gradient tests
// instantiate double.
//
// Per position: x = tok_emb + pos_emb, then per layer
//   x += AttnOut( LN1(x) )      (causal multi-head self-attention)
//   x += MlpOut( LN2(x) )       (GELU feed-forward)
// and finally logits = Head( LNF(x) ).

#include <cassert>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "util.hpp"

namespace selfrefine::policy {

struct ModelArch {
    int layers = 2;
    int width = 32;
    int heads = 4;
    int context = 256;
    int vocab = 0;  // set from the Vocabulary

    int head_dim() const { return width / heads; }
    int ff_dim() const { return 2 * width; }

    void validate() const {
        if (layers < 1 || width < 2 || heads < 1 || context < 2 || vocab < 2)
            throw ConfigError("invalid model architecture");
        if (width % heads != 0) throw ConfigError("width must be divisible by heads");
    }

    bool operator==(const ModelArch&) const = default;
};

// Named view into the flat parameter vector.
struct ParamSlice {
    std::string name;
    size_t offset = 0;
    size_t rows = 0;
    size_t cols = 0;
    size_t count() const { return rows * cols; }
};

inline std::vector<ParamSlice> param_layout(const ModelArch& a) {
    std::vector<ParamSlice> slices;
    size_t offset = 0;
    auto add = [&](const std::string& name, size_t rows, size_t cols) {
        slices.push_back({name, offset, rows, cols});
        offset += rows * cols;
    };
    const size_t d = static_cast<size_t>(a.width);
    const size_t f = static_cast<size_t>(a.ff_dim());
    add("tok_emb", static_cast<size_t>(a.vocab), d);
    add("pos_emb", static_cast<size_t>(a.context), d);
    for (int l = 0; l < a.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        add(p + "ln1.g", d, 1);
        add(p + "ln1.b", d, 1);
        add(p + "attn.qkv.w", 3 * d, d);
        add(p + "attn.qkv.b", 3 * d, 1);
        add(p + "attn.out.w", d, d);
        add(p + "attn.out.b", d, 1);
        add(p + "ln2.g", d, 1);
        add(p + "ln2.b", d, 1);
        add(p + "mlp.in.w", f, d);
        add(p + "mlp.in.b", f, 1);
        add(p + "mlp.out.w", d, f);
        add(p + "mlp.out.b", d, 1);
    }
    add("lnf.g", d, 1);
    add("lnf.b", d, 1);
    add("head.w", static_cast<size_t>(a.vocab), d);
    add("head.b", static_cast<size_t>(a.vocab), 1);
    return slices;
}

inline size_t param_count(const ModelArch& a) {
    const auto layout = param_layout(a);
    return layout.back().offset + layout.back().count();
}

namespace detail {

template <typename S>
inline S gelu(S z) {
    const S k = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
    const S c = static_cast<S>(0.044715);
    const S u = k * (z + c * z * z * z);
    return static_cast<S>(0.5) * z * (static_cast<S>(1) + std::tanh(u));
}

template <typename S>
inline S gelu_grad(S z) {
    const S k = static_cast<S>(0.7978845608028654);
    const S c = static_cast<S>(0.044715);
    const S u = k * (z + c * z * z * z);
    const S t = std::tanh(u);
    const S du = k * (static_cast<S>(1) + static_cast<S>(3) * c * z * z);
    return static_cast<S>(0.5) * (static_cast<S>(1) + t) +
           static_cast<S>(0.5) * z * (static_cast<S>(1) - t * t) * du;
}

constexpr double kLnEps = 1e-5;

}  // namespace detail

// Activation caches for one forward pass; reused across calls to avoid
// reallocation in training loops.
template <typename S>
struct ForwardCache {
    int seq_len = 0;
    std::vector<S> embedded;             // [T x D] input to layer 0
    struct LayerCache {
        std::vector<S> ln1_out;          // [T x D]
        std::vector<S> ln1_mean, ln1_rstd;  // [T]
        std::vector<S> qkv;              // [T x 3D]
        std::vector<S> att;              // [H x T x T] softmax weights
        std::vector<S> att_out;          // [T x D] concatenated head outputs
        std::vector<S> resid1;           // [T x D] x after attention residual
        std::vector<S> ln2_out;          // [T x D]
        std::vector<S> ln2_mean, ln2_rstd;
        std::vector<S> mlp_pre;          // [T x F] pre-activation
        std::vector<S> mlp_act;          // [T x F] gelu output
        std::vector<S> resid2;           // [T x D] layer output
    };
    std::vector<LayerCache> layers;
    std::vector<S> lnf_out;              // [T x D]
    std::vector<S> lnf_mean, lnf_rstd;   // [T]
};

template <typename S>
class Transformer {
  public:
    Transformer() = default;
    Transformer(ModelArch arch, std::vector<S> params) : arch_(arch), params_(std::move(params)) {
        arch_.validate();
        if (params_.size() != param_count(arch_))
            throw CheckpointError("parameter vector size mismatch: expected " +
                                  std::to_string(param_count(arch_)) + ", got " +
                                  std::to_string(params_.size()));
        index_layout();
    }

    static Transformer random_init(ModelArch arch, uint64_t seed) {
        arch.validate();
        std::vector<S> params(param_count(arch), S(0));
        Transformer model(arch, std::move(params));
        Rng rng(derive_seed(seed, "model_init"));
        const double base_std = 0.02;
        // position embeddings start an order of magnitude hotter: at desk
        // scale the position-addressing attention heads otherwise take far
        // more steps to form than the training budget allows
        const double pos_std = 0.2;
        const double resid_std = base_std / std::sqrt(2.0 * arch.layers);
        for (const auto& slice : model.layout_) {
            S* p = model.params_.data() + slice.offset;
            const bool is_gain = slice.name.ends_with("ln1.g") || slice.name.ends_with("ln2.g") ||
                                 slice.name.ends_with("lnf.g");
            const bool is_bias = slice.name.ends_with(".b") && !is_gain;
            const bool is_resid_proj =
                slice.name.ends_with("attn.out.w") || slice.name.ends_with("mlp.out.w");
            if (is_gain) {
                for (size_t i = 0; i < slice.count(); ++i) p[i] = S(1);
            } else if (is_bias) {
                // zero
            } else {
                const double std = slice.name == "pos_emb" ? pos_std
                                   : is_resid_proj         ? resid_std
                                                           : base_std;
                for (size_t i = 0; i < slice.count(); ++i)
                    p[i] = static_cast<S>(rng.next_normal(0.0, std));
            }
        }
        return model;
    }

    const ModelArch& arch() const { return arch_; }
    const std::vector<S>& params() const { return params_; }
    std::vector<S>& mutable_params() { return params_; }
    size_t n_params() const { return params_.size(); }
    const std::vector<ParamSlice>& layout() const { return layout_; }

    // ------------------------- full forward -------------------------
    // logits: [T x V], row t predicts token t+1.
    void forward(std::span<const int32_t> tokens, std::vector<S>& logits,
                 ForwardCache<S>* cache = nullptr) const {
        const int T = static_cast<int>(tokens.size());
        if (T == 0) {
            logits.clear();
            return;
        }
        if (T > arch_.context)
            throw LengthError("sequence length " + std::to_string(T) +
                              " exceeds context window " + std::to_string(arch_.context));
        const int D = arch_.width, H = arch_.heads, Dh = arch_.head_dim(), F = arch_.ff_dim(),
                  V = arch_.vocab;
        ForwardCache<S> local;
        ForwardCache<S>& c = cache ? *cache : local;
        c.seq_len = T;
        c.layers.resize(static_cast<size_t>(arch_.layers));

        c.embedded.assign(static_cast<size_t>(T) * D, S(0));
        for (int t = 0; t < T; ++t) {
            const int32_t tok = tokens[static_cast<size_t>(t)];
            if (tok < 0 || tok >= V)
                throw DataError("token id " + std::to_string(tok) + " outside vocabulary");
            const S* te = params_.data() + off_tok_ + static_cast<size_t>(tok) * D;
            const S* pe = params_.data() + off_pos_ + static_cast<size_t>(t) * D;
            S* x = c.embedded.data() + static_cast<size_t>(t) * D;
            for (int i = 0; i < D; ++i) x[i] = te[i] + pe[i];
        }

        const std::vector<S>* x_in = &c.embedded;
        for (int l = 0; l < arch_.layers; ++l) {
            auto& lc = c.layers[static_cast<size_t>(l)];
            const LayerOffsets& lo = layer_off_[static_cast<size_t>(l)];

            layer_norm(*x_in, T, lo.ln1_g, lo.ln1_b, lc.ln1_out, lc.ln1_mean, lc.ln1_rstd);

            // QKV projection
            lc.qkv.assign(static_cast<size_t>(T) * 3 * D, S(0));
            matmul_rows(lc.ln1_out, T, D, lo.qkv_w, lo.qkv_b, 3 * D, lc.qkv);

            // causal attention per head
            lc.att.assign(static_cast<size_t>(H) * T * T, S(0));
            lc.att_out.assign(static_cast<size_t>(T) * D, S(0));
            const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(Dh)));
            for (int h = 0; h < H; ++h) {
                const int qo = h * Dh, ko = D + h * Dh, vo = 2 * D + h * Dh;
                S* att_h = lc.att.data() + static_cast<size_t>(h) * T * T;
                for (int t = 0; t < T; ++t) {
                    const S* q = lc.qkv.data() + static_cast<size_t>(t) * 3 * D + qo;
                    S* row = att_h + static_cast<size_t>(t) * T;
                    S maxs = std::numeric_limits<S>::lowest();
                    for (int s = 0; s <= t; ++s) {
                        const S* k = lc.qkv.data() + static_cast<size_t>(s) * 3 * D + ko;
                        S dot = S(0);
                        for (int i = 0; i < Dh; ++i) dot += q[i] * k[i];
                        row[s] = dot * inv_sqrt;
                        if (row[s] > maxs) maxs = row[s];
                    }
                    S denom = S(0);
                    for (int s = 0; s <= t; ++s) {
                        row[s] = std::exp(row[s] - maxs);
                        denom += row[s];
                    }
                    const S inv = S(1) / denom;
                    for (int s = 0; s <= t; ++s) row[s] *= inv;
                    S* out = lc.att_out.data() + static_cast<size_t>(t) * D + h * Dh;
                    for (int s = 0; s <= t; ++s) {
                        const S* v = lc.qkv.data() + static_cast<size_t>(s) * 3 * D + vo;
                        const S w = row[s];
                        for (int i = 0; i < Dh; ++i) out[i] += w * v[i];
                    }
                }
            }

            // output projection + residual
            lc.resid1.assign(static_cast<size_t>(T) * D, S(0));
            matmul_rows(lc.att_out, T, D, lo.out_w, lo.out_b, D, lc.resid1);
            for (size_t i = 0; i < lc.resid1.size(); ++i) lc.resid1[i] += (*x_in)[i];

            layer_norm(lc.resid1, T, lo.ln2_g, lo.ln2_b, lc.ln2_out, lc.ln2_mean, lc.ln2_rstd);

            lc.mlp_pre.assign(static_cast<size_t>(T) * F, S(0));
            matmul_rows(lc.ln2_out, T, D, lo.mlp_in_w, lo.mlp_in_b, F, lc.mlp_pre);
            lc.mlp_act.resize(lc.mlp_pre.size());
            for (size_t i = 0; i < lc.mlp_pre.size(); ++i)
                lc.mlp_act[i] = detail::gelu(lc.mlp_pre[i]);

            lc.resid2.assign(static_cast<size_t>(T) * D, S(0));
            matmul_rows(lc.mlp_act, T, F, lo.mlp_out_w, lo.mlp_out_b, D, lc.resid2);
            for (size_t i = 0; i < lc.resid2.size(); ++i) lc.resid2[i] += lc.resid1[i];

            x_in = &lc.resid2;
        }

        layer_norm(*x_in, T, off_lnf_g_, off_lnf_b_, c.lnf_out, c.lnf_mean, c.lnf_rstd);
        logits.assign(static_cast<size_t>(T) * V, S(0));
        matmul_rows(c.lnf_out, T, D, off_head_w_, off_head_b_, V, logits);
    }

    // ------------------------- backward -------------------------
    // dlogits: [T x V]; gradients are ADDED into grad (size n_params()).
    void backward(std::span<const int32_t> tokens, const ForwardCache<S>& c,
                  const std::vector<S>& dlogits, std::vector<S>& grad) const {
        const int T = c.seq_len;
        const int D = arch_.width, H = arch_.heads, Dh = arch_.head_dim(), F = arch_.ff_dim(),
                  V = arch_.vocab;
        assert(static_cast<int>(tokens.size()) == T);
        if (grad.size() != params_.size()) grad.assign(params_.size(), S(0));

        std::vector<S> dx(static_cast<size_t>(T) * D, S(0));

        // head
        {
            const std::vector<S>& a = c.lnf_out;
            for (int t = 0; t < T; ++t) {
                const S* dl = dlogits.data() + static_cast<size_t>(t) * V;
                const S* at = a.data() + static_cast<size_t>(t) * D;
                S* da = dx.data() + static_cast<size_t>(t) * D;  // reuse dx as d(lnf_out)
                for (int o = 0; o < V; ++o) {
                    const S g = dl[o];
                    if (g == S(0)) continue;
                    const S* w = params_.data() + off_head_w_ + static_cast<size_t>(o) * D;
                    S* gw = grad.data() + off_head_w_ + static_cast<size_t>(o) * D;
                    for (int i = 0; i < D; ++i) {
                        gw[i] += g * at[i];
                        da[i] += g * w[i];
                    }
                    grad[off_head_b_ + static_cast<size_t>(o)] += g;
                }
            }
        }

        // final layer norm
        const std::vector<S>& last_x =
            arch_.layers > 0 ? c.layers.back().resid2 : c.embedded;
        std::vector<S> dres = layer_norm_backward(last_x, T, off_lnf_g_, c.lnf_mean, c.lnf_rstd,
                                                  dx, grad, off_lnf_g_, off_lnf_b_);

        for (int l = arch_.layers - 1; l >= 0; --l) {
            const auto& lc = c.layers[static_cast<size_t>(l)];
            const LayerOffsets& lo = layer_off_[static_cast<size_t>(l)];
            const std::vector<S>& layer_in =
                l == 0 ? c.embedded : c.layers[static_cast<size_t>(l - 1)].resid2;

            // ---- MLP block: resid2 = resid1 + W2 * gelu(W1 * ln2(resid1) + b1) + b2
            std::vector<S> d_act(static_cast<size_t>(T) * F, S(0));
            for (int t = 0; t < T; ++t) {
                const S* dy = dres.data() + static_cast<size_t>(t) * D;
                const S* act = lc.mlp_act.data() + static_cast<size_t>(t) * F;
                S* da = d_act.data() + static_cast<size_t>(t) * F;
                for (int o = 0; o < D; ++o) {
                    const S g = dy[o];
                    const S* w = params_.data() + lo.mlp_out_w + static_cast<size_t>(o) * F;
                    S* gw = grad.data() + lo.mlp_out_w + static_cast<size_t>(o) * F;
                    for (int i = 0; i < F; ++i) {
                        gw[i] += g * act[i];
                        da[i] += g * w[i];
                    }
                    grad[lo.mlp_out_b + static_cast<size_t>(o)] += g;
                }
            }
            for (size_t i = 0; i < d_act.size(); ++i) d_act[i] *= detail::gelu_grad(lc.mlp_pre[i]);
            std::vector<S> d_ln2(static_cast<size_t>(T) * D, S(0));
            for (int t = 0; t < T; ++t) {
                const S* dz = d_act.data() + static_cast<size_t>(t) * F;
                const S* a = lc.ln2_out.data() + static_cast<size_t>(t) * D;
                S* da = d_ln2.data() + static_cast<size_t>(t) * D;
                for (int o = 0; o < F; ++o) {
                    const S g = dz[o];
                    if (g == S(0)) continue;
                    const S* w = params_.data() + lo.mlp_in_w + static_cast<size_t>(o) * D;
                    S* gw = grad.data() + lo.mlp_in_w + static_cast<size_t>(o) * D;
                    for (int i = 0; i < D; ++i) {
                        gw[i] += g * a[i];
                        da[i] += g * w[i];
                    }
                    grad[lo.mlp_in_b + static_cast<size_t>(o)] += g;
                }
            }
            std::vector<S> d_resid1 = layer_norm_backward(lc.resid1, T, lo.ln2_g, lc.ln2_mean,
                                                          lc.ln2_rstd, d_ln2, grad, lo.ln2_g,
                                                          lo.ln2_b);
            // residual pass-through
            for (size_t i = 0; i < d_resid1.size(); ++i) d_resid1[i] += dres[i];

            // ---- attention block: resid1 = x + Wo * att_out + bo
            std::vector<S> d_att_out(static_cast<size_t>(T) * D, S(0));
            for (int t = 0; t < T; ++t) {
                const S* dy = d_resid1.data() + static_cast<size_t>(t) * D;
                const S* ao = lc.att_out.data() + static_cast<size_t>(t) * D;
                S* da = d_att_out.data() + static_cast<size_t>(t) * D;
                for (int o = 0; o < D; ++o) {
                    const S g = dy[o];
                    const S* w = params_.data() + lo.out_w + static_cast<size_t>(o) * D;
                    S* gw = grad.data() + lo.out_w + static_cast<size_t>(o) * D;
                    for (int i = 0; i < D; ++i) {
                        gw[i] += g * ao[i];
                        da[i] += g * w[i];
                    }
                    grad[lo.out_b + static_cast<size_t>(o)] += g;
                }
            }

            std::vector<S> d_qkv(static_cast<size_t>(T) * 3 * D, S(0));
            const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(Dh)));
            std::vector<S> d_scores(static_cast<size_t>(T), S(0));
            for (int h = 0; h < H; ++h) {
                const int qo = h * Dh, ko = D + h * Dh, vo = 2 * D + h * Dh;
                const S* att_h = lc.att.data() + static_cast<size_t>(h) * T * T;
                for (int t = 0; t < T; ++t) {
                    const S* w_row = att_h + static_cast<size_t>(t) * T;
                    const S* dout = d_att_out.data() + static_cast<size_t>(t) * D + h * Dh;
                    // dv and dw
                    S dot_sum = S(0);
                    for (int s = 0; s <= t; ++s) {
                        const S* v = lc.qkv.data() + static_cast<size_t>(s) * 3 * D + vo;
                        S dw = S(0);
                        for (int i = 0; i < Dh; ++i) dw += dout[i] * v[i];
                        d_scores[static_cast<size_t>(s)] = dw;
                        dot_sum += w_row[s] * dw;
                        S* dv = d_qkv.data() + static_cast<size_t>(s) * 3 * D + vo;
                        const S w = w_row[s];
                        for (int i = 0; i < Dh; ++i) dv[i] += w * dout[i];
                    }
                    // softmax backward, then q/k
                    const S* q = lc.qkv.data() + static_cast<size_t>(t) * 3 * D + qo;
                    S* dq = d_qkv.data() + static_cast<size_t>(t) * 3 * D + qo;
                    for (int s = 0; s <= t; ++s) {
                        const S ds = w_row[s] * (d_scores[static_cast<size_t>(s)] - dot_sum) *
                                     inv_sqrt;
                        if (ds == S(0)) continue;
                        const S* k = lc.qkv.data() + static_cast<size_t>(s) * 3 * D + ko;
                        S* dk = d_qkv.data() + static_cast<size_t>(s) * 3 * D + ko;
                        for (int i = 0; i < Dh; ++i) {
                            dq[i] += ds * k[i];
                            dk[i] += ds * q[i];
                        }
                    }
                }
            }

            // back through QKV projection
            std::vector<S> d_ln1(static_cast<size_t>(T) * D, S(0));
            for (int t = 0; t < T; ++t) {
                const S* dz = d_qkv.data() + static_cast<size_t>(t) * 3 * D;
                const S* a = lc.ln1_out.data() + static_cast<size_t>(t) * D;
                S* da = d_ln1.data() + static_cast<size_t>(t) * D;
                for (int o = 0; o < 3 * D; ++o) {
                    const S g = dz[o];
                    if (g == S(0)) continue;
                    const S* w = params_.data() + lo.qkv_w + static_cast<size_t>(o) * D;
                    S* gw = grad.data() + lo.qkv_w + static_cast<size_t>(o) * D;
                    for (int i = 0; i < D; ++i) {
                        gw[i] += g * a[i];
                        da[i] += g * w[i];
                    }
                    grad[lo.qkv_b + static_cast<size_t>(o)] += g;
                }
            }
            std::vector<S> d_in = layer_norm_backward(layer_in, T, lo.ln1_g, lc.ln1_mean,
                                                      lc.ln1_rstd, d_ln1, grad, lo.ln1_g,
                                                      lo.ln1_b);
            for (size_t i = 0; i < d_in.size(); ++i) d_in[i] += d_resid1[i];
            dres = std::move(d_in);
        }

        // embeddings
        for (int t = 0; t < T; ++t) {
            const S* d = dres.data() + static_cast<size_t>(t) * D;
            S* gt = grad.data() + off_tok_ + static_cast<size_t>(tokens[static_cast<size_t>(t)]) * D;
            S* gp = grad.data() + off_pos_ + static_cast<size_t>(t) * D;
            for (int i = 0; i < D; ++i) {
                gt[i] += d[i];
                gp[i] += d[i];
            }
        }
    }

    // ------------------------- incremental decode -------------------------

    struct DecodeState {
        int pos = 0;
        // per layer: keys and values, [context x D]
        std::vector<std::vector<S>> keys;
        std::vector<std::vector<S>> values;
    };

    DecodeState new_decode_state() const {
        DecodeState st;
        st.keys.resize(static_cast<size_t>(arch_.layers));
        st.values.resize(static_cast<size_t>(arch_.layers));
        for (int l = 0; l < arch_.layers; ++l) {
            st.keys[static_cast<size_t>(l)].assign(
                static_cast<size_t>(arch_.context) * arch_.width, S(0));
            st.values[static_cast<size_t>(l)].assign(
                static_cast<size_t>(arch_.context) * arch_.width, S(0));
        }
        return st;
    }

    // Feeds one token, returns the next-token logits row [V]. Matches the
    // full forward bitwise: identical operation order per position.
    void decode_step(DecodeState& st, int32_t token, std::vector<S>& logits_row) const {
        const int D = arch_.width, H = arch_.heads, Dh = arch_.head_dim(), F = arch_.ff_dim(),
                  V = arch_.vocab;
        if (st.pos >= arch_.context)
            throw LengthError("decode position " + std::to_string(st.pos) +
                              " exceeds context window " + std::to_string(arch_.context));
        if (token < 0 || token >= V)
            throw DataError("token id " + std::to_string(token) + " outside vocabulary");
        const int t = st.pos;

        std::vector<S> x(static_cast<size_t>(D));
        {
            const S* te = params_.data() + off_tok_ + static_cast<size_t>(token) * D;
            const S* pe = params_.data() + off_pos_ + static_cast<size_t>(t) * D;
            for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] = te[i] + pe[i];
        }

        std::vector<S> norm(static_cast<size_t>(D)), qkv(static_cast<size_t>(3) * D),
            att_out(static_cast<size_t>(D)), proj(static_cast<size_t>(D)),
            pre(static_cast<size_t>(F));
        for (int l = 0; l < arch_.layers; ++l) {
            const LayerOffsets& lo = layer_off_[static_cast<size_t>(l)];
            layer_norm_row(x.data(), lo.ln1_g, lo.ln1_b, norm.data(), D);
            row_matmul(norm.data(), D, lo.qkv_w, lo.qkv_b, 3 * D, qkv.data());

            S* kcache = st.keys[static_cast<size_t>(l)].data();
            S* vcache = st.values[static_cast<size_t>(l)].data();
            for (int i = 0; i < D; ++i) {
                kcache[static_cast<size_t>(t) * D + i] = qkv[static_cast<size_t>(D + i)];
                vcache[static_cast<size_t>(t) * D + i] = qkv[static_cast<size_t>(2 * D + i)];
            }

            std::fill(att_out.begin(), att_out.end(), S(0));
            const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(Dh)));
            std::vector<S> row(static_cast<size_t>(t) + 1);
            for (int h = 0; h < H; ++h) {
                const S* q = qkv.data() + h * Dh;
                S maxs = std::numeric_limits<S>::lowest();
                for (int s = 0; s <= t; ++s) {
                    const S* k = kcache + static_cast<size_t>(s) * D + h * Dh;
                    S dot = S(0);
                    for (int i = 0; i < Dh; ++i) dot += q[i] * k[i];
                    row[static_cast<size_t>(s)] = dot * inv_sqrt;
                    if (row[static_cast<size_t>(s)] > maxs) maxs = row[static_cast<size_t>(s)];
                }
                S denom = S(0);
                for (int s = 0; s <= t; ++s) {
                    row[static_cast<size_t>(s)] = std::exp(row[static_cast<size_t>(s)] - maxs);
                    denom += row[static_cast<size_t>(s)];
                }
                const S inv = S(1) / denom;
                for (int s = 0; s <= t; ++s) row[static_cast<size_t>(s)] *= inv;
                S* out = att_out.data() + h * Dh;
                for (int s = 0; s <= t; ++s) {
                    const S* v = vcache + static_cast<size_t>(s) * D + h * Dh;
                    const S w = row[static_cast<size_t>(s)];
                    for (int i = 0; i < Dh; ++i) out[i] += w * v[i];
                }
            }
            row_matmul(att_out.data(), D, lo.out_w, lo.out_b, D, proj.data());
            for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];

            layer_norm_row(x.data(), lo.ln2_g, lo.ln2_b, norm.data(), D);
            row_matmul(norm.data(), D, lo.mlp_in_w, lo.mlp_in_b, F, pre.data());
            for (int i = 0; i < F; ++i) pre[static_cast<size_t>(i)] = detail::gelu(pre[static_cast<size_t>(i)]);
            row_matmul(pre.data(), F, lo.mlp_out_w, lo.mlp_out_b, D, proj.data());
            for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
        }

        layer_norm_row(x.data(), off_lnf_g_, off_lnf_b_, norm.data(), D);
        logits_row.resize(static_cast<size_t>(V));
        row_matmul(norm.data(), D, off_head_w_, off_head_b_, V, logits_row.data());
        ++st.pos;
    }

  private:
    struct LayerOffsets {
        size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
        size_t ln2_g, ln2_b, mlp_in_w, mlp_in_b, mlp_out_w, mlp_out_b;
    };

    void index_layout() {
        layout_ = param_layout(arch_);
        auto find = [&](const std::string& name) -> size_t {
            for (const auto& s : layout_)
                if (s.name == name) return s.offset;
            throw CheckpointError("missing parameter slice " + name);
        };
        off_tok_ = find("tok_emb");
        off_pos_ = find("pos_emb");
        layer_off_.clear();
        for (int l = 0; l < arch_.layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            LayerOffsets lo{};
            lo.ln1_g = find(p + "ln1.g");
            lo.ln1_b = find(p + "ln1.b");
            lo.qkv_w = find(p + "attn.qkv.w");
            lo.qkv_b = find(p + "attn.qkv.b");
            lo.out_w = find(p + "attn.out.w");
            lo.out_b = find(p + "attn.out.b");
            lo.ln2_g = find(p + "ln2.g");
            lo.ln2_b = find(p + "ln2.b");
            lo.mlp_in_w = find(p + "mlp.in.w");
            lo.mlp_in_b = find(p + "mlp.in.b");
            lo.mlp_out_w = find(p + "mlp.out.w");
            lo.mlp_out_b = find(p + "mlp.out.b");
            layer_off_.push_back(lo);
        }
        off_lnf_g_ = find("lnf.g");
        off_lnf_b_ = find("lnf.b");
        off_head_w_ = find("head.w");
        off_head_b_ = find("head.b");
    }

    // out[t, :n_out] += W[n_out x n_in] * in[t, :n_in] + b
    void matmul_rows(const std::vector<S>& in, int T, int n_in, size_t w_off, size_t b_off,
                     int n_out, std::vector<S>& out) const {
        for (int t = 0; t < T; ++t) {
            const S* a = in.data() + static_cast<size_t>(t) * n_in;
            S* y = out.data() + static_cast<size_t>(t) * n_out;
            row_matmul(a, n_in, w_off, b_off, n_out, y);
        }
    }

    void row_matmul(const S* a, int n_in, size_t w_off, size_t b_off, int n_out, S* y) const {
        const S* w = params_.data() + w_off;
        const S* b = params_.data() + b_off;
        for (int o = 0; o < n_out; ++o) {
            const S* wr = w + static_cast<size_t>(o) * n_in;
            S acc = b[o];
            for (int i = 0; i < n_in; ++i) acc += wr[i] * a[i];
            y[o] = acc;
        }
    }

    void layer_norm(const std::vector<S>& in, int T, size_t g_off, size_t b_off,
                    std::vector<S>& out, std::vector<S>& means, std::vector<S>& rstds) const {
        const int D = arch_.width;
        out.resize(static_cast<size_t>(T) * D);
        means.resize(static_cast<size_t>(T));
        rstds.resize(static_cast<size_t>(T));
        for (int t = 0; t < T; ++t) {
            layer_norm_row(in.data() + static_cast<size_t>(t) * D, g_off, b_off,
                           out.data() + static_cast<size_t>(t) * D, D,
                           &means[static_cast<size_t>(t)], &rstds[static_cast<size_t>(t)]);
        }
    }

    void layer_norm_row(const S* x, size_t g_off, size_t b_off, S* out, int D, S* mean_out = nullptr,
                        S* rstd_out = nullptr) const {
        const S* g = params_.data() + g_off;
        const S* b = params_.data() + b_off;
        S mean = S(0);
        for (int i = 0; i < D; ++i) mean += x[i];
        mean /= static_cast<S>(D);
        S var = S(0);
        for (int i = 0; i < D; ++i) {
            const S d = x[i] - mean;
            var += d * d;
        }
        var /= static_cast<S>(D);
        const S rstd = S(1) / std::sqrt(var + static_cast<S>(detail::kLnEps));
        for (int i = 0; i < D; ++i) out[i] = (x[i] - mean) * rstd * g[i] + b[i];
        if (mean_out) *mean_out = mean;
        if (rstd_out) *rstd_out = rstd;
    }

    // Returns d(input); accumulates gain/bias grads.
    std::vector<S> layer_norm_backward(const std::vector<S>& in, int T, size_t g_off,
                                       const std::vector<S>& means, const std::vector<S>& rstds,
                                       const std::vector<S>& dout, std::vector<S>& grad,
                                       size_t g_grad_off, size_t b_grad_off) const {
        const int D = arch_.width;
        std::vector<S> din(static_cast<size_t>(T) * D, S(0));
        const S* g = params_.data() + g_off;
        for (int t = 0; t < T; ++t) {
            const S* x = in.data() + static_cast<size_t>(t) * D;
            const S* dy = dout.data() + static_cast<size_t>(t) * D;
            S* dxr = din.data() + static_cast<size_t>(t) * D;
            const S mean = means[static_cast<size_t>(t)];
            const S rstd = rstds[static_cast<size_t>(t)];
            S sum_dyg = S(0), sum_dyg_xhat = S(0);
            for (int i = 0; i < D; ++i) {
                const S xhat = (x[i] - mean) * rstd;
                const S dyg = dy[i] * g[i];
                sum_dyg += dyg;
                sum_dyg_xhat += dyg * xhat;
                grad[g_grad_off + static_cast<size_t>(i)] += dy[i] * xhat;
                grad[b_grad_off + static_cast<size_t>(i)] += dy[i];
            }
            const S inv_d = S(1) / static_cast<S>(D);
            for (int i = 0; i < D; ++i) {
                const S xhat = (x[i] - mean) * rstd;
                dxr[i] = rstd * (dy[i] * g[i] - inv_d * sum_dyg - xhat * inv_d * sum_dyg_xhat);
            }
        }
        return din;
    }

    ModelArch arch_;
    std::vector<S> params_;
    std::vector<ParamSlice> layout_;
    size_t off_tok_ = 0, off_pos_ = 0, off_lnf_g_ = 0, off_lnf_b_ = 0, off_head_w_ = 0,
           off_head_b_ = 0;
    std::vector<LayerOffsets> layer_off_;
};

}  // namespace selfrefine::policy
