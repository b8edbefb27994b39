#pragma once

#include <map>
#include <set>
#include <string>

#include "nncomp/autodiff.hpp"

namespace nncomp {

enum class LayerKind { Mamba, Attention, Ffn };

inline char layer_kind_char(LayerKind k) {
    switch (k) {
        case LayerKind::Mamba: return 'M';
        case LayerKind::Attention: return 'A';
        default: return 'F';
    }
}
inline LayerKind layer_kind_from_char(char c) {
    if (c == 'M') return LayerKind::Mamba;
    if (c == 'A') return LayerKind::Attention;
    if (c == 'F') return LayerKind::Ffn;
    throw std::invalid_argument("unknown layer kind");
}

struct LayerPattern {
    std::vector<LayerKind> kinds;

    int64_t count(LayerKind k) const {
        int64_t n = 0;
        for (auto x : kinds)
            if (x == k) ++n;
        return n;
    }
    std::string str() const {
        std::string s;
        for (auto k : kinds) s += layer_kind_char(k);
        return s;
    }
    static LayerPattern from_str(const std::string& s) {
        LayerPattern p;
        for (char c : s) p.kinds.push_back(layer_kind_from_char(c));
        return p;
    }
};

/// Attention slots at floor((i + 0.5) * n_layers / n_attn); the remaining
/// slots alternate Mamba / FFN starting with Mamba.
inline LayerPattern build_layer_pattern(int64_t n_layers, int64_t n_attn) {
    if (n_layers < 0 || n_attn < 0 || n_attn > n_layers)
        throw std::invalid_argument("build_layer_pattern: need 0 <= n_attn <= n_layers");
    LayerPattern p;
    p.kinds.assign(static_cast<size_t>(n_layers), LayerKind::Mamba);
    std::vector<bool> is_attn(static_cast<size_t>(n_layers), false);
    for (int64_t i = 0; i < n_attn; ++i) {
        auto pos = static_cast<int64_t>((static_cast<double>(i) + 0.5) * static_cast<double>(n_layers) / static_cast<double>(n_attn));
        is_attn[static_cast<size_t>(pos)] = true;
    }
    bool next_mamba = true;
    for (int64_t i = 0; i < n_layers; ++i) {
        if (is_attn[static_cast<size_t>(i)]) {
            p.kinds[static_cast<size_t>(i)] = LayerKind::Attention;
            continue;
        }
        p.kinds[static_cast<size_t>(i)] = next_mamba ? LayerKind::Mamba : LayerKind::Ffn;
        next_mamba = !next_mamba;
    }
    return p;
}

struct ModelConfig {
    int64_t n_layers = 0;
    LayerPattern pattern;
    int64_t d_model = 0;
    int64_t d_ffn = 0;
    int64_t n_q_heads = 0;
    int64_t n_kv_heads = 0;
    int64_t attn_head_dim = 0;      // 0 = d_model / n_q_heads
    int64_t mamba_state_dim = 0;
    int64_t mamba_head_dim = 0;
    int64_t mamba_groups = 0;
    int64_t mamba_expand = 2;
    int64_t mamba_heads = 0;        // 0 = expand * d_model / head_dim
    int64_t conv_window = 4;
    int64_t vocab_size = 0;
    bool tied_embeddings = false;
    // RMS statistic divisors; preserved by pruning so that pruned forwards
    // match masked originals. 0 = use the live dimension.
    int64_t rms_denom = 0;
    int64_t mamba_rms_denom = 0;

    int64_t attn_hd() const { return attn_head_dim > 0 ? attn_head_dim : d_model / n_q_heads; }
    int64_t n_mamba_heads() const { return mamba_heads > 0 ? mamba_heads : mamba_expand * d_model / mamba_head_dim; }
    int64_t d_inner() const { return n_mamba_heads() * mamba_head_dim; }
    int64_t conv_channels() const { return d_inner() + 2 * mamba_groups * mamba_state_dim; }

    void validate() const {
        if (n_layers < 0 || d_model <= 0 || vocab_size < 0) throw std::invalid_argument("config: bad core dims");
        if (static_cast<int64_t>(pattern.kinds.size()) != n_layers) throw std::invalid_argument("config: pattern length != n_layers");
        if (pattern.count(LayerKind::Attention) > 0) {
            if (n_q_heads <= 0 || n_kv_heads <= 0 || n_q_heads % n_kv_heads != 0)
                throw std::invalid_argument("config: q heads must divide evenly into kv heads");
            if (attn_head_dim == 0 && d_model % n_q_heads != 0)
                throw std::invalid_argument("config: d_model not divisible by q heads");
        }
        if (pattern.count(LayerKind::Ffn) > 0 && d_ffn < 1) throw std::invalid_argument("config: d_ffn must be >= 1");
        if (pattern.count(LayerKind::Mamba) > 0) {
            if (mamba_head_dim <= 0 || mamba_state_dim <= 0 || mamba_groups <= 0)
                throw std::invalid_argument("config: bad mamba dims");
            if (mamba_heads == 0 && (mamba_expand * d_model) % mamba_head_dim != 0)
                throw std::invalid_argument("config: inner dim not divisible by mamba head dim");
            if (n_mamba_heads() % mamba_groups != 0)
                throw std::invalid_argument("config: mamba heads must split evenly into groups");
        }
    }
};

inline ModelConfig table2_config(int64_t vocab = 131072) {
    ModelConfig c;
    c.n_layers = 62;
    c.pattern = build_layer_pattern(62, 6);
    c.d_model = 5120;
    c.d_ffn = 20480;
    c.n_q_heads = 40;
    c.n_kv_heads = 8;
    c.attn_head_dim = 128;
    c.mamba_state_dim = 128;
    c.mamba_head_dim = 64;
    c.mamba_groups = 8;
    c.mamba_expand = 2;
    c.conv_window = 4;
    c.vocab_size = vocab;
    return c;
}

// ---------------------------------------------------------------------------
// Checkpoint schema: the exact tensor names and shapes a config requires.
// ---------------------------------------------------------------------------

struct TensorSpec {
    std::string name;
    Shape shape;
};

inline std::vector<TensorSpec> checkpoint_schema(const ModelConfig& c) {
    std::vector<TensorSpec> out;
    if (c.vocab_size == 0 || c.n_layers == 0) {
        if (c.vocab_size > 0) {
            out.push_back({"embedding", {c.vocab_size, c.d_model}});
            out.push_back({"final_norm.gamma", {c.d_model}});
            out.push_back({"head", {c.d_model, c.vocab_size}});
        }
        return out;
    }
    out.push_back({"embedding", {c.vocab_size, c.d_model}});
    int64_t di = c.d_inner();
    int64_t gn = c.mamba_groups * c.mamba_state_dim;
    for (int64_t i = 0; i < c.n_layers; ++i) {
        std::string p = "layers." + std::to_string(i) + ".";
        out.push_back({p + "norm.gamma", {c.d_model}});
        switch (c.pattern.kinds[static_cast<size_t>(i)]) {
            case LayerKind::Mamba:
                out.push_back({p + "mamba.W_x", {c.d_model, di}});
                out.push_back({p + "mamba.W_z", {c.d_model, di}});
                out.push_back({p + "mamba.W_B", {c.d_model, gn}});
                out.push_back({p + "mamba.W_C", {c.d_model, gn}});
                out.push_back({p + "mamba.W_dt", {c.d_model, c.n_mamba_heads()}});
                out.push_back({p + "mamba.A_log", {c.n_mamba_heads()}});
                out.push_back({p + "mamba.D", {c.n_mamba_heads()}});
                out.push_back({p + "mamba.conv_x", {di, c.conv_window}});
                out.push_back({p + "mamba.conv_B", {gn, c.conv_window}});
                out.push_back({p + "mamba.conv_C", {gn, c.conv_window}});
                out.push_back({p + "mamba.norm.gamma", {di}});
                out.push_back({p + "mamba.W_O", {di, c.d_model}});
                break;
            case LayerKind::Attention:
                out.push_back({p + "attn.W_Q", {c.d_model, c.n_q_heads * c.attn_hd()}});
                out.push_back({p + "attn.W_K", {c.d_model, c.n_kv_heads * c.attn_hd()}});
                out.push_back({p + "attn.W_V", {c.d_model, c.n_kv_heads * c.attn_hd()}});
                out.push_back({p + "attn.W_out", {c.n_q_heads * c.attn_hd(), c.d_model}});
                break;
            case LayerKind::Ffn:
                out.push_back({p + "ffn.W1", {c.d_ffn, c.d_model}});
                out.push_back({p + "ffn.W2", {c.d_ffn, c.d_model}});
                break;
        }
    }
    out.push_back({"final_norm.gamma", {c.d_model}});
    out.push_back({"head", {c.d_model, c.vocab_size}});
    return out;
}

inline int64_t count_params(const ModelConfig& c) {
    int64_t n = 0;
    for (const auto& t : checkpoint_schema(c)) n += shape_numel(t.shape);
    return n;
}

template <typename T>
struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Tensor<T>> tensors;

    const Tensor<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::out_of_range("checkpoint: missing tensor " + name);
        return it->second;
    }
    Tensor<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::out_of_range("checkpoint: missing tensor " + name);
        return it->second;
    }

    void validate() const {
        config.validate();
        auto schema = checkpoint_schema(config);
        if (schema.size() != tensors.size()) throw std::invalid_argument("checkpoint: tensor count mismatch");
        for (const auto& spec : schema) {
            const Tensor<T>& t = at(spec.name);
            if (t.shape != spec.shape)
                throw std::invalid_argument("checkpoint: " + spec.name + " has shape " + shape_str(t.shape) +
                                            ", schema wants " + shape_str(spec.shape));
        }
    }
};

template <typename T>
Checkpoint<T> init_checkpoint(const ModelConfig& c, Rng& rng, double init_scale = 0.02) {
    c.validate();
    Checkpoint<T> ck;
    ck.config = c;
    for (const auto& spec : checkpoint_schema(c)) {
        bool is_gamma = spec.name.find("norm.gamma") != std::string::npos;
        bool is_scalar_param = spec.name.find("A_log") != std::string::npos || spec.name.find(".D") != std::string::npos;
        if (is_gamma)
            ck.tensors.emplace(spec.name, Tensor<T>::full(spec.shape, T(1)));
        else if (is_scalar_param) {
            Tensor<T> t(spec.shape);
            for (auto& v : t.data) v = spec.name.find("A_log") != std::string::npos ? T(0) : T(1);
            ck.tensors.emplace(spec.name, std::move(t));
        } else
            ck.tensors.emplace(spec.name, randn<T>(spec.shape, rng, init_scale));
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Optional activation capture for the importance module. Vectors are indexed
/// by layer; entries for other layer kinds stay empty.
template <typename T>
struct ActivationTrace {
    bool capture_norms = false;       // pre-mixer RMSNorm outputs + final norm
    bool capture_ffn = false;         // squared-relu activations, [b,s,d_ffn]
    bool capture_mamba_x = false;     // W_x projection outputs, [b,s,d_inner]
    std::vector<Tensor<T>> norm_out;  // size n_layers (+1 slot for final norm)
    Tensor<T> final_norm_out;
    std::vector<Tensor<T>> ffn_act;
    std::vector<Tensor<T>> mamba_x;

    void reset(int64_t n_layers) {
        norm_out.assign(static_cast<size_t>(n_layers), {});
        ffn_act.assign(static_cast<size_t>(n_layers), {});
        mamba_x.assign(static_cast<size_t>(n_layers), {});
    }
};

namespace detail {

template <typename T>
Var<T> as_param(Tape<T>* tape, const Tensor<T>& t, std::map<std::string, int>* node_of, const std::string& name) {
    if (!tape) return constant(t);
    Var<T> v = leaf(*tape, t);
    if (node_of) (*node_of)[name] = v.node;
    return v;
}

}  // namespace detail

template <typename T>
Var<T> ffn_forward(const Var<T>& x, const Var<T>& w1, const Var<T>& w2, Tensor<T>* act_out = nullptr) {
    Var<T> a = squared_relu(matmul(x, w1, /*transpose_w=*/true));
    if (act_out) *act_out = a.v();
    return matmul(a, w2);
}

template <typename T>
Var<T> gqa_attention_forward(const Var<T>& x, const Var<T>& wq, const Var<T>& wk, const Var<T>& wv, const Var<T>& wo,
                             int64_t n_q, int64_t n_kv) {
    Var<T> q = matmul(x, wq);
    Var<T> k = matmul(x, wk);
    Var<T> v = matmul(x, wv);
    return matmul(gqa_attention(q, k, v, n_q, n_kv), wo);
}

template <typename T>
struct MambaWeights {
    Var<T> W_x, W_z, W_B, W_C, W_dt, A_log, D, conv_x, conv_B, conv_C, norm_gamma, W_O;
};

template <typename T>
Var<T> mamba2_forward(const Var<T>& x, const MambaWeights<T>& w, const ModelConfig& c, Tensor<T>* xproj_out = nullptr) {
    Var<T> xs = matmul(x, w.W_x);
    if (xproj_out) *xproj_out = xs.v();
    Var<T> zs = matmul(x, w.W_z);
    Var<T> Bs = matmul(x, w.W_B);
    Var<T> Cs = matmul(x, w.W_C);
    Var<T> dts = softplus(matmul(x, w.W_dt));
    // depthwise causal conv + SiLU on the x/B/C streams
    xs = silu(causal_conv1d(xs, w.conv_x));
    Bs = silu(causal_conv1d(Bs, w.conv_B));
    Cs = silu(causal_conv1d(Cs, w.conv_C));
    Var<T> y = ssm_scan(xs, dts, exp_op(w.A_log), Bs, Cs, w.D, c.n_mamba_heads(), c.mamba_head_dim, c.mamba_groups,
                        c.mamba_state_dim);
    // gated RMSNorm, then output projection
    Var<T> gated = rmsnorm(mul(y, silu(zs)), w.norm_gamma, T(1e-5),
                           c.mamba_rms_denom > 0 ? c.mamba_rms_denom : 0);
    return matmul(gated, w.W_O);
}

struct ForwardOptions {
    std::set<int64_t> skip_layers;  // residual passthrough: norm and mixer both skipped
};

/// Full decoder forward: embedding -> pre-norm residual stack -> final
/// RMSNorm -> output head. Pass a tape to record for training; node ids of
/// the checkpoint tensors land in param_nodes when given.
template <typename T>
Var<T> model_forward(const Checkpoint<T>& ck, const TokenBatch& tokens, Tape<std::type_identity_t<T>>* tape = nullptr,
                     const ForwardOptions& opt = {}, ActivationTrace<std::type_identity_t<T>>* trace = nullptr,
                     std::map<std::string, int>* param_nodes = nullptr) {
    const ModelConfig& c = ck.config;
    constexpr T eps = T(1e-5);
    auto P = [&](const std::string& name) { return detail::as_param(tape, ck.at(name), param_nodes, name); };
    if (trace) trace->reset(c.n_layers);

    Var<T> h = embedding_lookup(tokens, P("embedding"));
    for (int64_t i = 0; i < c.n_layers; ++i) {
        if (opt.skip_layers.count(i)) continue;
        std::string p = "layers." + std::to_string(i) + ".";
        Var<T> normed = rmsnorm(h, P(p + "norm.gamma"), eps, c.rms_denom);
        if (trace && trace->capture_norms) trace->norm_out[static_cast<size_t>(i)] = normed.v();
        Var<T> mixed;
        switch (c.pattern.kinds[static_cast<size_t>(i)]) {
            case LayerKind::Ffn: {
                Tensor<T>* act = trace && trace->capture_ffn ? &trace->ffn_act[static_cast<size_t>(i)] : nullptr;
                mixed = ffn_forward(normed, P(p + "ffn.W1"), P(p + "ffn.W2"), act);
                break;
            }
            case LayerKind::Attention:
                mixed = gqa_attention_forward(normed, P(p + "attn.W_Q"), P(p + "attn.W_K"), P(p + "attn.W_V"),
                                              P(p + "attn.W_out"), c.n_q_heads, c.n_kv_heads);
                break;
            case LayerKind::Mamba: {
                MambaWeights<T> w{P(p + "mamba.W_x"),    P(p + "mamba.W_z"),    P(p + "mamba.W_B"),
                                  P(p + "mamba.W_C"),    P(p + "mamba.W_dt"),   P(p + "mamba.A_log"),
                                  P(p + "mamba.D"),      P(p + "mamba.conv_x"), P(p + "mamba.conv_B"),
                                  P(p + "mamba.conv_C"), P(p + "mamba.norm.gamma"), P(p + "mamba.W_O")};
                Tensor<T>* xp = trace && trace->capture_mamba_x ? &trace->mamba_x[static_cast<size_t>(i)] : nullptr;
                mixed = mamba2_forward(normed, w, c, xp);
                break;
            }
        }
        h = add(h, mixed);
    }
    Var<T> fin = rmsnorm(h, P("final_norm.gamma"), eps, c.rms_denom);
    if (trace && trace->capture_norms) trace->final_norm_out = fin.v();
    return matmul(fin, P("head"));
}

}  // namespace nncomp
