#pragma once

#include "nncomp/model.hpp"

namespace nncomp {

namespace detail {

template <typename T>
Tensor<T> take_axis(const Tensor<T>& t, int axis, const std::vector<int64_t>& keep) {
    if (t.shape.size() == 1) {
        Tensor<T> out({static_cast<int64_t>(keep.size())});
        for (size_t i = 0; i < keep.size(); ++i) out[static_cast<int64_t>(i)] = t[keep[i]];
        return out;
    }
    int64_t rows = t.shape[0], cols = t.shape[1];
    if (axis == 0) {
        Tensor<T> out({static_cast<int64_t>(keep.size()), cols});
        for (size_t r = 0; r < keep.size(); ++r)
            for (int64_t c = 0; c < cols; ++c) out[static_cast<int64_t>(r) * cols + c] = t[keep[r] * cols + c];
        return out;
    }
    Tensor<T> out({rows, static_cast<int64_t>(keep.size())});
    for (int64_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < keep.size(); ++c)
            out[r * static_cast<int64_t>(keep.size()) + static_cast<int64_t>(c)] = t[r * cols + keep[c]];
    return out;
}

template <typename T>
void zero_axis(Tensor<T>& t, int axis, const std::vector<int64_t>& drop) {
    if (t.shape.size() == 1) {
        for (int64_t i : drop) t[i] = T(0);
        return;
    }
    int64_t rows = t.shape[0], cols = t.shape[1];
    if (axis == 0)
        for (int64_t r : drop)
            for (int64_t c = 0; c < cols; ++c) t[r * cols + c] = T(0);
    else
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c : drop) t[r * cols + c] = T(0);
}

inline void check_keep(const std::vector<int64_t>& keep, int64_t dim, const char* what) {
    if (keep.empty()) throw std::invalid_argument(std::string(what) + ": keep set is empty");
    for (size_t i = 0; i < keep.size(); ++i) {
        if (keep[i] < 0 || keep[i] >= dim) throw std::out_of_range(std::string(what) + ": keep index out of range");
        if (i > 0 && keep[i] <= keep[i - 1])
            throw std::invalid_argument(std::string(what) + ": keep set must be sorted and unique");
    }
}

inline std::vector<int64_t> complement(const std::vector<int64_t>& keep, int64_t dim) {
    std::vector<int64_t> out;
    size_t j = 0;
    for (int64_t i = 0; i < dim; ++i) {
        if (j < keep.size() && keep[j] == i)
            ++j;
        else
            out.push_back(i);
    }
    return out;
}

}  // namespace detail

/// Indices of the k lowest scores, ascending; ties resolve to the lower
/// index. Complemented and sorted this gives a keep set.
inline std::vector<int64_t> bottom_k_indices(const std::vector<double>& scores, int64_t k) {
    if (k < 0 || k > static_cast<int64_t>(scores.size())) throw std::invalid_argument("bottom_k: bad k");
    std::vector<int64_t> idx(scores.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int64_t a, int64_t b) { return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)]; });
    idx.resize(static_cast<size_t>(k));
    return idx;
}

inline std::vector<int64_t> keep_from_scores(const std::vector<double>& scores, int64_t n_drop) {
    auto dropped = bottom_k_indices(scores, n_drop);
    std::sort(dropped.begin(), dropped.end());
    return detail::complement(dropped, static_cast<int64_t>(scores.size()));
}

// ---------------------------------------------------------------------------
// Depth
// ---------------------------------------------------------------------------

template <typename T>
Checkpoint<T> prune_layers(const Checkpoint<T>& ck, const std::set<int64_t>& remove, int64_t min_attn_layers = 4) {
    const ModelConfig& c = ck.config;
    for (int64_t i : remove)
        if (i < 0 || i >= c.n_layers) throw std::out_of_range("prune_layers: layer index out of range");
    if (static_cast<int64_t>(remove.size()) >= c.n_layers && c.n_layers > 0)
        throw std::invalid_argument("prune_layers: cannot remove all layers");
    int64_t attn_before = c.pattern.count(LayerKind::Attention);
    int64_t attn_after = attn_before;
    for (int64_t i : remove)
        if (c.pattern.kinds[static_cast<size_t>(i)] == LayerKind::Attention) --attn_after;
    int64_t attn_floor = attn_before > 0 ? std::max<int64_t>(int64_t(1), std::min(min_attn_layers, attn_before)) : 0;
    if (attn_after < attn_floor)
        throw std::invalid_argument("prune_layers: would leave fewer attention layers than the protected minimum");

    Checkpoint<T> out;
    out.config = c;
    out.config.n_layers = c.n_layers - static_cast<int64_t>(remove.size());
    out.config.pattern.kinds.clear();
    out.tensors["embedding"] = ck.at("embedding");
    out.tensors["final_norm.gamma"] = ck.at("final_norm.gamma");
    out.tensors["head"] = ck.at("head");
    int64_t dst = 0;
    for (int64_t i = 0; i < c.n_layers; ++i) {
        if (remove.count(i)) continue;
        out.config.pattern.kinds.push_back(c.pattern.kinds[static_cast<size_t>(i)]);
        std::string src_p = "layers." + std::to_string(i) + ".";
        std::string dst_p = "layers." + std::to_string(dst) + ".";
        for (const auto& [name, t] : ck.tensors)
            if (name.rfind(src_p, 0) == 0) out.tensors[dst_p + name.substr(src_p.size())] = t;
        ++dst;
    }
    out.validate();
    return out;
}

// ---------------------------------------------------------------------------
// FFN neurons
// ---------------------------------------------------------------------------

/// `keep` must list every FFN layer with equally sized keep sets (a config
/// carries one d_ffn).
template <typename T>
Checkpoint<T> prune_ffn(const Checkpoint<T>& ck, const std::map<int64_t, std::vector<int64_t>>& keep) {
    const ModelConfig& c = ck.config;
    int64_t new_dim = -1;
    for (int64_t i = 0; i < c.n_layers; ++i) {
        if (c.pattern.kinds[static_cast<size_t>(i)] != LayerKind::Ffn) continue;
        auto it = keep.find(i);
        if (it == keep.end()) throw std::invalid_argument("prune_ffn: missing keep set for an FFN layer");
        detail::check_keep(it->second, c.d_ffn, "prune_ffn");
        if (new_dim < 0) new_dim = static_cast<int64_t>(it->second.size());
        if (static_cast<int64_t>(it->second.size()) != new_dim)
            throw std::invalid_argument("prune_ffn: keep counts must match across FFN layers");
    }
    Checkpoint<T> out = ck;
    if (new_dim < 0) return out;
    out.config.d_ffn = new_dim;
    for (const auto& [layer, ks] : keep) {
        std::string p = "layers." + std::to_string(layer) + ".ffn.";
        out.at(p + "W1") = detail::take_axis(ck.at(p + "W1"), 0, ks);
        out.at(p + "W2") = detail::take_axis(ck.at(p + "W2"), 0, ks);
    }
    out.validate();
    return out;
}

/// Masking counterpart: zero the dropped neurons' W1 and W2 rows in place.
template <typename T>
Checkpoint<T> mask_ffn(const Checkpoint<T>& ck, const std::map<int64_t, std::vector<int64_t>>& keep) {
    Checkpoint<T> out = ck;
    for (const auto& [layer, ks] : keep) {
        detail::check_keep(ks, ck.config.d_ffn, "mask_ffn");
        auto drop = detail::complement(ks, ck.config.d_ffn);
        std::string p = "layers." + std::to_string(layer) + ".ffn.";
        detail::zero_axis(out.at(p + "W1"), 0, drop);
        detail::zero_axis(out.at(p + "W2"), 0, drop);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding channels
// ---------------------------------------------------------------------------

namespace detail {

// axis carrying d_model for each tensor family: 0 = rows, 1 = cols
inline int d_model_axis(const std::string& name) {
    auto ends_with = [&](const char* suf) {
        std::string s(suf);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (name == "embedding") return 1;
    if (name == "head") return 0;
    if (ends_with("ffn.W1") || ends_with("ffn.W2")) return 1;
    if (ends_with("attn.W_out") || ends_with("mamba.W_O")) return 1;
    return 0;  // gammas (1-d) and all remaining read projections
}

inline bool has_d_model_axis(const std::string& name) {
    return name.find("mamba.conv_") == std::string::npos && name.find("mamba.norm.gamma") == std::string::npos &&
           name.find("A_log") == std::string::npos && name.find("mamba.D") == std::string::npos;
}

}  // namespace detail

template <typename T>
Checkpoint<T> prune_embedding(const Checkpoint<T>& ck, const std::vector<int64_t>& keep) {
    const ModelConfig& c = ck.config;
    detail::check_keep(keep, c.d_model, "prune_embedding");
    Checkpoint<T> out;
    out.config = c;
    out.config.d_model = static_cast<int64_t>(keep.size());
    if (out.config.rms_denom == 0) out.config.rms_denom = c.d_model;
    // inner dims are fixed by explicit head counts, not by d_model, from here on
    if (c.pattern.count(LayerKind::Mamba) > 0) out.config.mamba_heads = c.n_mamba_heads();
    if (c.pattern.count(LayerKind::Attention) > 0) out.config.attn_head_dim = c.attn_hd();
    for (const auto& [name, t] : ck.tensors)
        out.tensors[name] = detail::has_d_model_axis(name) ? detail::take_axis(t, detail::d_model_axis(name), keep) : t;
    out.validate();
    return out;
}

/// Masking counterpart: zero embedding columns, norm gammas, and the
/// residual-writing projection columns so dropped channels stay zero
/// through the whole stack.
template <typename T>
Checkpoint<T> mask_embedding(const Checkpoint<T>& ck, const std::vector<int64_t>& keep) {
    detail::check_keep(keep, ck.config.d_model, "mask_embedding");
    auto drop = detail::complement(keep, ck.config.d_model);
    Checkpoint<T> out = ck;
    for (auto& [name, t] : out.tensors)
        if (detail::has_d_model_axis(name)) detail::zero_axis(t, detail::d_model_axis(name), drop);
    return out;
}

// ---------------------------------------------------------------------------
// Mamba heads
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<int64_t> head_channels(const std::vector<int64_t>& heads, int64_t p) {
    std::vector<int64_t> out;
    out.reserve(heads.size() * static_cast<size_t>(p));
    for (int64_t h : heads)
        for (int64_t i = 0; i < p; ++i) out.push_back(h * p + i);
    return out;
}

inline std::vector<int64_t> flatten_group_keep(const std::vector<std::vector<int64_t>>& keep_per_group,
                                               const ModelConfig& c, const char* what) {
    if (static_cast<int64_t>(keep_per_group.size()) != c.mamba_groups)
        throw std::invalid_argument(std::string(what) + ": one keep set per group required");
    int64_t hpg = c.n_mamba_heads() / c.mamba_groups;
    size_t per = keep_per_group.front().size();
    std::vector<int64_t> heads;
    for (int64_t g = 0; g < c.mamba_groups; ++g) {
        const auto& ks = keep_per_group[static_cast<size_t>(g)];
        if (ks.size() != per) throw std::invalid_argument(std::string(what) + ": unequal keep counts across groups");
        if (ks.empty()) throw std::invalid_argument(std::string(what) + ": each group must keep at least one head");
        for (size_t i = 0; i < ks.size(); ++i) {
            int64_t h = ks[i];
            if (h < g * hpg || h >= (g + 1) * hpg) throw std::out_of_range(std::string(what) + ": head not in its group");
            if (i > 0 && h <= ks[i - 1]) throw std::invalid_argument(std::string(what) + ": keep sets must be sorted and unique");
            heads.push_back(h);
        }
    }
    return heads;
}

}  // namespace detail

/// keep_per_group applies per Mamba layer; layers not listed keep all heads
/// only if no layer is listed at all (a config carries one head count, so
/// every Mamba layer must appear).
template <typename T>
Checkpoint<T> prune_mamba_heads(const Checkpoint<T>& ck,
                                const std::map<int64_t, std::vector<std::vector<int64_t>>>& keep) {
    const ModelConfig& c = ck.config;
    int64_t new_heads = -1;
    std::map<int64_t, std::vector<int64_t>> flat;
    for (int64_t i = 0; i < c.n_layers; ++i) {
        if (c.pattern.kinds[static_cast<size_t>(i)] != LayerKind::Mamba) continue;
        auto it = keep.find(i);
        if (it == keep.end()) throw std::invalid_argument("prune_mamba_heads: missing keep sets for a Mamba layer");
        flat[i] = detail::flatten_group_keep(it->second, c, "prune_mamba_heads");
        if (new_heads < 0) new_heads = static_cast<int64_t>(flat[i].size());
        if (static_cast<int64_t>(flat[i].size()) != new_heads)
            throw std::invalid_argument("prune_mamba_heads: keep counts must match across layers");
    }
    Checkpoint<T> out = ck;
    if (new_heads < 0) return out;
    out.config.mamba_heads = new_heads;
    if (out.config.mamba_rms_denom == 0) out.config.mamba_rms_denom = c.d_inner();
    for (const auto& [layer, heads] : flat) {
        auto chans = detail::head_channels<T>(heads, c.mamba_head_dim);
        std::string p = "layers." + std::to_string(layer) + ".mamba.";
        out.at(p + "W_x") = detail::take_axis(ck.at(p + "W_x"), 1, chans);
        out.at(p + "W_z") = detail::take_axis(ck.at(p + "W_z"), 1, chans);
        out.at(p + "W_dt") = detail::take_axis(ck.at(p + "W_dt"), 1, heads);
        out.at(p + "A_log") = detail::take_axis(ck.at(p + "A_log"), 0, heads);
        out.at(p + "D") = detail::take_axis(ck.at(p + "D"), 0, heads);
        out.at(p + "conv_x") = detail::take_axis(ck.at(p + "conv_x"), 0, chans);
        out.at(p + "norm.gamma") = detail::take_axis(ck.at(p + "norm.gamma"), 0, chans);
        out.at(p + "W_O") = detail::take_axis(ck.at(p + "W_O"), 0, chans);
    }
    out.validate();
    return out;
}

/// Masking counterpart: zero the dropped heads' x-stream channels (W_x/W_z
/// columns, conv rows, gated-norm gammas, W_O rows) and per-head dt/D
/// parameters. With the x stream zeroed, those heads' states and outputs
/// stay exactly zero.
template <typename T>
Checkpoint<T> mask_mamba_heads(const Checkpoint<T>& ck,
                               const std::map<int64_t, std::vector<std::vector<int64_t>>>& keep) {
    const ModelConfig& c = ck.config;
    Checkpoint<T> out = ck;
    for (const auto& [layer, per_group] : keep) {
        auto heads = detail::flatten_group_keep(per_group, c, "mask_mamba_heads");
        std::vector<int64_t> all(static_cast<size_t>(c.n_mamba_heads()));
        for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int64_t>(i);
        std::vector<int64_t> dropped;
        for (int64_t h : all)
            if (std::find(heads.begin(), heads.end(), h) == heads.end()) dropped.push_back(h);
        auto chans = detail::head_channels<T>(dropped, c.mamba_head_dim);
        std::string p = "layers." + std::to_string(layer) + ".mamba.";
        detail::zero_axis(out.at(p + "W_x"), 1, chans);
        detail::zero_axis(out.at(p + "W_z"), 1, chans);
        detail::zero_axis(out.at(p + "W_dt"), 1, dropped);
        detail::zero_axis(out.at(p + "D"), 0, dropped);
        detail::zero_axis(out.at(p + "conv_x"), 0, chans);
        detail::zero_axis(out.at(p + "norm.gamma"), 0, chans);
        detail::zero_axis(out.at(p + "W_O"), 0, chans);
    }
    return out;
}

}  // namespace nncomp
