#pragma once

#include "nncomp/model.hpp"

namespace nncomp {

constexpr double GiB = 1024.0 * 1024.0 * 1024.0;

struct MemoryEstimate {
    double weight_bytes = 0;
    double kv_cache_bytes = 0;
    double ssm_state_bytes = 0;
    double total_bytes = 0;
    int64_t seq_len = 0, batch = 0;
    double bytes_per_elem = 0;
};

inline MemoryEstimate estimate_memory(const ModelConfig& c, int64_t seq_len, int64_t batch, double bytes_per_elem) {
    if (seq_len <= 0 || batch <= 0 || bytes_per_elem <= 0) throw std::invalid_argument("estimate_memory: bad dims");
    MemoryEstimate m;
    m.seq_len = seq_len;
    m.batch = batch;
    m.bytes_per_elem = bytes_per_elem;
    m.weight_bytes = static_cast<double>(count_params(c)) * bytes_per_elem;
    int64_t n_attn = c.pattern.count(LayerKind::Attention);
    int64_t n_mamba = c.pattern.count(LayerKind::Mamba);
    if (n_attn > 0)
        m.kv_cache_bytes = 2.0 * static_cast<double>(n_attn) * static_cast<double>(c.n_kv_heads) *
                           static_cast<double>(c.attn_hd()) * static_cast<double>(seq_len) * static_cast<double>(batch) *
                           bytes_per_elem;
    if (n_mamba > 0) {
        // recurrent state + conv window; constant in seq_len
        double per_layer = static_cast<double>(c.d_inner()) * static_cast<double>(c.mamba_state_dim) +
                           static_cast<double>(c.conv_window) * static_cast<double>(c.conv_channels());
        m.ssm_state_bytes = static_cast<double>(n_mamba) * static_cast<double>(batch) * per_layer * bytes_per_elem;
    }
    m.total_bytes = m.weight_bytes + m.kv_cache_bytes + m.ssm_state_bytes;
    return m;
}

inline double derive_budget(double gpu_bytes, double framework_buffer_fraction, double reserved_bytes) {
    if (framework_buffer_fraction < 0 || framework_buffer_fraction >= 1)
        throw std::invalid_argument("derive_budget: buffer fraction must be in [0,1)");
    double budget = gpu_bytes * (1.0 - framework_buffer_fraction) - reserved_bytes;
    if (budget < 0) throw std::invalid_argument("derive_budget: negative budget");
    return budget;
}

/// Base architecture for the width search: the production stack with its
/// inner Mamba width regrouped into 128 heads of 80 channels (same 10240
/// inner width; the head-count axis of the search is expressed in these
/// units).
inline ModelConfig nas_base_config(int64_t vocab = 131072) {
    ModelConfig c = table2_config(vocab);
    c.mamba_head_dim = 80;  // 2 * 5120 / 80 = 128 heads
    return c;
}

/// Depth reduction removes attention layers beyond the protected minimum
/// first, then FFN layers, keeping every Mamba layer.
inline LayerPattern reduce_pattern(const LayerPattern& base, int64_t depth, int64_t min_attn = 4) {
    int64_t remove = static_cast<int64_t>(base.kinds.size()) - depth;
    if (remove < 0) throw std::invalid_argument("reduce_pattern: depth exceeds base depth");
    LayerPattern out = base;
    int64_t attn = out.count(LayerKind::Attention);
    // drop from the back so the early stack is preserved
    auto drop_kind = [&](LayerKind kind, int64_t spare) {
        for (int64_t i = static_cast<int64_t>(out.kinds.size()) - 1; i >= 0 && remove > 0 && spare > 0; --i)
            if (out.kinds[static_cast<size_t>(i)] == kind) {
                out.kinds.erase(out.kinds.begin() + i);
                --remove;
                --spare;
            }
    };
    drop_kind(LayerKind::Attention, attn - min_attn);
    drop_kind(LayerKind::Ffn, out.count(LayerKind::Ffn));
    drop_kind(LayerKind::Mamba, out.count(LayerKind::Mamba));
    return out;
}

inline ModelConfig make_candidate_config(const ModelConfig& base, int64_t depth, int64_t d_model, int64_t d_ffn,
                                         int64_t mamba_heads) {
    ModelConfig c = base;
    c.pattern = reduce_pattern(base.pattern, depth);
    c.n_layers = depth;
    c.d_model = d_model;
    c.d_ffn = d_ffn;
    c.mamba_heads = mamba_heads;
    c.attn_head_dim = base.attn_hd();
    if (d_model != base.d_model && c.rms_denom == 0) c.rms_denom = base.d_model;
    c.validate();
    return c;
}

struct SearchSpace {
    ModelConfig base;
    std::vector<int64_t> depths;
    std::vector<int64_t> d_models;
    std::vector<int64_t> d_ffns;
    std::vector<int64_t> mamba_head_counts;
};

/// Table 7 neighborhood with the paper's ranges as grid points.
inline SearchSpace default_search_space(int64_t vocab = 131072) {
    SearchSpace s;
    s.base = nas_base_config(vocab);
    s.depths = {52, 53, 54, 55, 56};
    s.d_models = {4480, 4800, 5120};
    s.d_ffns = {13440, 14400, 15680, 17920, 20480};
    s.mamba_head_counts = {112, 120, 128};
    return s;
}

struct Candidate {
    ModelConfig config;
    MemoryEstimate memory;
};

struct CandidateSet {
    std::vector<Candidate> candidates;
    double budget_bytes = 0;
};

inline bool rank_before(const Candidate& a, const Candidate& b) {
    if (a.memory.total_bytes != b.memory.total_bytes) return a.memory.total_bytes > b.memory.total_bytes;
    if (a.config.d_model != b.config.d_model) return a.config.d_model > b.config.d_model;
    return a.config.d_ffn > b.config.d_ffn;
}

inline CandidateSet enumerate_candidates(const SearchSpace& s, double budget_bytes, int64_t seq_len, int64_t batch,
                                         double bytes_per_elem = 2.0) {
    if (s.depths.empty() || s.d_models.empty() || s.d_ffns.empty() || s.mamba_head_counts.empty())
        throw std::invalid_argument("enumerate_candidates: empty axis");
    CandidateSet out;
    out.budget_bytes = budget_bytes;
    for (int64_t depth : s.depths)
        for (int64_t dm : s.d_models)
            for (int64_t df : s.d_ffns)
                for (int64_t mh : s.mamba_head_counts) {
                    Candidate c{make_candidate_config(s.base, depth, dm, df, mh), {}};
                    c.memory = estimate_memory(c.config, seq_len, batch, bytes_per_elem);
                    if (c.memory.total_bytes <= budget_bytes) out.candidates.push_back(std::move(c));
                }
    std::stable_sort(out.candidates.begin(), out.candidates.end(), rank_before);
    return out;
}

inline std::vector<Candidate> rank_candidates(const CandidateSet& set, int64_t k) {
    if (k < 1) throw std::invalid_argument("rank_candidates: k must be >= 1");
    std::vector<Candidate> sorted = set.candidates;
    std::stable_sort(sorted.begin(), sorted.end(), rank_before);
    if (static_cast<int64_t>(sorted.size()) > k) sorted.resize(static_cast<size_t>(k));
    return sorted;
}

}  // namespace nncomp
