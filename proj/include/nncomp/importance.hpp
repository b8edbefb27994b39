#pragma once

#include "nncomp/model.hpp"

namespace nncomp {

enum class Aggregation { Mean, L2 };

inline std::string agg_str(Aggregation a) { return a == Aggregation::Mean ? "mean" : "l2"; }
inline Aggregation agg_from_str(const std::string& s) {
    if (s == "mean") return Aggregation::Mean;
    if (s == "l2") return Aggregation::L2;
    throw std::invalid_argument("unknown aggregation: " + s);
}

struct CalibrationSet {
    TokenBatch sequences;
    uint64_t seed = 0;

    void validate(int64_t vocab) const {
        if (sequences.empty()) throw std::invalid_argument("calibration set is empty");
        size_t len = sequences.front().size();
        for (const auto& s : sequences) {
            if (s.size() != len) throw std::invalid_argument("calibration sequences differ in length");
            for (int32_t t : s)
                if (t < 0 || t >= vocab) throw std::out_of_range("calibration token out of range");
        }
    }
};

inline CalibrationSet make_calibration_set(int64_t n, int64_t seq_len, int64_t vocab, uint64_t seed) {
    CalibrationSet cs;
    cs.seed = seed;
    Rng rng(seed);
    cs.sequences.resize(static_cast<size_t>(n));
    for (auto& s : cs.sequences) {
        s.resize(static_cast<size_t>(seq_len));
        for (auto& t : s) t = static_cast<int32_t>(rng.uniform_int(0, vocab - 1));
    }
    return cs;
}

struct ImportanceReport {
    std::vector<std::pair<int64_t, double>> layer_removal_order;  // (layer index, mse at removal)
    std::map<int64_t, std::vector<double>> ffn_scores;            // layer -> per-neuron
    std::vector<double> channel_scores;                           // over d_model
    std::map<int64_t, std::vector<std::vector<int64_t>>> mamba_head_ranks;  // layer -> per-group ascending ranks
    std::map<int64_t, std::vector<double>> mamba_head_scores;     // layer -> f_h per head
    Aggregation aggregation = Aggregation::L2;
};

namespace detail {

/// Streaming |x| and x^2 accumulators per channel; both aggregation modes
/// come out of one pass.
struct ChannelAccum {
    std::vector<double> abs_sum, sq_sum;
    int64_t count = 0;

    void resize(int64_t d) {
        abs_sum.assign(static_cast<size_t>(d), 0.0);
        sq_sum.assign(static_cast<size_t>(d), 0.0);
        count = 0;
    }
    template <typename T>
    void add(const Tensor<T>& act) {  // [b, s, d]
        int64_t d = act.shape.back();
        int64_t rows = act.size() / d;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < d; ++i) {
                double v = static_cast<double>(act[r * d + i]);
                abs_sum[static_cast<size_t>(i)] += std::abs(v);
                sq_sum[static_cast<size_t>(i)] += v * v;
            }
        count += rows;
    }
    std::vector<double> finish(Aggregation agg) const {
        std::vector<double> out(abs_sum.size());
        for (size_t i = 0; i < out.size(); ++i)
            out[i] = agg == Aggregation::Mean ? (count > 0 ? abs_sum[i] / static_cast<double>(count) : 0.0)
                                              : std::sqrt(sq_sum[i]);
        return out;
    }
};

/// Signed per-channel sums (the paper's Mamba channel statistic sums raw
/// activations over batch and sequence before taking norms).
struct SignedChannelAccum {
    std::vector<double> sum, abs_sum, sq_sum;
    int64_t count = 0;
    void resize(int64_t d) {
        sum.assign(static_cast<size_t>(d), 0.0);
        abs_sum.assign(static_cast<size_t>(d), 0.0);
        sq_sum.assign(static_cast<size_t>(d), 0.0);
        count = 0;
    }
    template <typename T>
    void add(const Tensor<T>& act) {
        int64_t d = act.shape.back();
        int64_t rows = act.size() / d;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < d; ++i) {
                double v = static_cast<double>(act[r * d + i]);
                sum[static_cast<size_t>(i)] += v;
                abs_sum[static_cast<size_t>(i)] += std::abs(v);
                sq_sum[static_cast<size_t>(i)] += v * v;
            }
        count += rows;
    }
    std::vector<double> finish(Aggregation agg) const {
        std::vector<double> out(sum.size());
        for (size_t i = 0; i < out.size(); ++i)
            out[i] = agg == Aggregation::Mean ? (count > 0 ? abs_sum[i] / static_cast<double>(count) : 0.0)
                                              : std::sqrt(sq_sum[i]);
        return out;
    }
};

template <typename T>
double logit_mse(const Tensor<T>& a, const Tensor<T>& b) {
    double acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

}  // namespace detail

/// MSE between full-model logits and logits with `skip` layers removed,
/// averaged over the calibration set.
template <typename T>
double layer_skip_mse(const Checkpoint<T>& ck, const CalibrationSet& calib, const std::set<int64_t>& skip) {
    double acc = 0;
    for (const auto& seq : calib.sequences) {
        TokenBatch one = {seq};
        Tensor<T> full = model_forward(ck, one).v();
        ForwardOptions opt;
        opt.skip_layers = skip;
        Tensor<T> cut = model_forward(ck, one, nullptr, opt).v();
        acc += detail::logit_mse(full, cut);
    }
    return acc / static_cast<double>(calib.sequences.size());
}

/// Iteratively remove the layer whose exclusion (on top of the layers
/// already removed) minimizes logit MSE against the full model. Ties break
/// toward the lower layer index.
template <typename T>
std::vector<std::pair<int64_t, double>> layer_importance_iterative(const Checkpoint<T>& ck, const CalibrationSet& calib,
                                                                   int64_t target_depth,
                                                                   const std::set<int64_t>& protect = {}) {
    calib.validate(ck.config.vocab_size);
    if (target_depth < 0 || target_depth >= ck.config.n_layers)
        throw std::invalid_argument("layer_importance: target depth must be below current depth");
    if (ck.config.n_layers - static_cast<int64_t>(protect.size()) < ck.config.n_layers - target_depth)
        throw std::invalid_argument("layer_importance: protected set leaves too few removable layers");
    std::vector<std::pair<int64_t, double>> order;
    std::set<int64_t> removed;
    std::vector<Tensor<T>> ref;  // full-model logits per sample
    ref.reserve(calib.sequences.size());
    for (const auto& seq : calib.sequences) ref.push_back(model_forward(ck, TokenBatch{seq}).v());
    while (static_cast<int64_t>(removed.size()) < ck.config.n_layers - target_depth) {
        int64_t best = -1;
        double best_mse = 0;
        for (int64_t cand = 0; cand < ck.config.n_layers; ++cand) {
            if (removed.count(cand) || protect.count(cand)) continue;
            ForwardOptions opt;
            opt.skip_layers = removed;
            opt.skip_layers.insert(cand);
            double mse = 0;
            for (size_t i = 0; i < calib.sequences.size(); ++i)
                mse += detail::logit_mse(ref[i], model_forward(ck, TokenBatch{calib.sequences[i]}, nullptr, opt).v());
            mse /= static_cast<double>(calib.sequences.size());
            if (best < 0 || mse < best_mse) {  // strict: ties keep the lower index
                best = cand;
                best_mse = mse;
            }
        }
        removed.insert(best);
        order.emplace_back(best, best_mse);
    }
    return order;
}

/// F_neuron per FFN layer: aggregate squared-relu activations over batch and
/// sequence (mean of |.| or l2).
template <typename T>
std::map<int64_t, std::vector<double>> ffn_neuron_importance(const Checkpoint<T>& ck, const CalibrationSet& calib,
                                                             Aggregation agg) {
    calib.validate(ck.config.vocab_size);
    std::map<int64_t, detail::ChannelAccum> acc;
    for (int64_t i = 0; i < ck.config.n_layers; ++i)
        if (ck.config.pattern.kinds[static_cast<size_t>(i)] == LayerKind::Ffn) acc[i].resize(ck.config.d_ffn);
    ActivationTrace<T> trace;
    trace.capture_ffn = true;
    for (const auto& seq : calib.sequences) {
        model_forward(ck, TokenBatch{seq}, nullptr, {}, &trace);
        for (auto& [layer, a] : acc) a.add(trace.ffn_act[static_cast<size_t>(layer)]);
    }
    std::map<int64_t, std::vector<double>> out;
    for (auto& [layer, a] : acc) out[layer] = a.finish(agg);
    return out;
}

/// Per-channel aggregation of every d_model-wide RMSNorm output, summed
/// across layers (final norm included).
template <typename T>
std::vector<double> embedding_channel_importance(const Checkpoint<T>& ck, const CalibrationSet& calib, Aggregation agg) {
    calib.validate(ck.config.vocab_size);
    std::vector<detail::ChannelAccum> per_layer(static_cast<size_t>(ck.config.n_layers) + 1);
    for (auto& a : per_layer) a.resize(ck.config.d_model);
    ActivationTrace<T> trace;
    trace.capture_norms = true;
    for (const auto& seq : calib.sequences) {
        model_forward(ck, TokenBatch{seq}, nullptr, {}, &trace);
        for (int64_t i = 0; i < ck.config.n_layers; ++i) per_layer[static_cast<size_t>(i)].add(trace.norm_out[static_cast<size_t>(i)]);
        per_layer.back().add(trace.final_norm_out);
    }
    std::vector<double> out(static_cast<size_t>(ck.config.d_model), 0.0);
    for (const auto& a : per_layer) {
        auto s = a.finish(agg);
        for (size_t i = 0; i < out.size(); ++i) out[i] += s[i];
    }
    return out;
}

struct MambaHeadImportance {
    std::vector<double> head_scores;                 // f_h per head
    std::vector<std::vector<int64_t>> group_ranks;   // ascending f_h per group, ties to lower head index
};

/// Nested scoring from the W_x projection activations: channel score
/// s_d over batch/sequence, then head score f_h as the l2 of that head's
/// channel block, ranked ascending within each group.
template <typename T>
std::map<int64_t, MambaHeadImportance> mamba_head_importance(const Checkpoint<T>& ck, const CalibrationSet& calib,
                                                             Aggregation agg = Aggregation::L2) {
    calib.validate(ck.config.vocab_size);
    const ModelConfig& c = ck.config;
    std::map<int64_t, detail::SignedChannelAccum> acc;
    for (int64_t i = 0; i < c.n_layers; ++i)
        if (c.pattern.kinds[static_cast<size_t>(i)] == LayerKind::Mamba) acc[i].resize(c.d_inner());
    ActivationTrace<T> trace;
    trace.capture_mamba_x = true;
    for (const auto& seq : calib.sequences) {
        model_forward(ck, TokenBatch{seq}, nullptr, {}, &trace);
        for (auto& [layer, a] : acc) a.add(trace.mamba_x[static_cast<size_t>(layer)]);
    }
    std::map<int64_t, MambaHeadImportance> out;
    int64_t heads = c.n_mamba_heads(), p = c.mamba_head_dim, hpg = heads / c.mamba_groups;
    for (auto& [layer, a] : acc) {
        std::vector<double> s_d = a.finish(agg);
        MambaHeadImportance imp;
        imp.head_scores.resize(static_cast<size_t>(heads));
        for (int64_t h = 0; h < heads; ++h) {
            double f = 0;
            for (int64_t i = 0; i < p; ++i) f += s_d[static_cast<size_t>(h * p + i)] * s_d[static_cast<size_t>(h * p + i)];
            imp.head_scores[static_cast<size_t>(h)] = std::sqrt(f);
        }
        for (int64_t g = 0; g < c.mamba_groups; ++g) {
            std::vector<int64_t> ranks(static_cast<size_t>(hpg));
            for (int64_t j = 0; j < hpg; ++j) ranks[static_cast<size_t>(j)] = g * hpg + j;
            std::stable_sort(ranks.begin(), ranks.end(), [&](int64_t x, int64_t y) {
                return imp.head_scores[static_cast<size_t>(x)] < imp.head_scores[static_cast<size_t>(y)];
            });
            imp.group_ranks.push_back(std::move(ranks));
        }
        out[layer] = std::move(imp);
    }
    return out;
}

template <typename T>
ImportanceReport full_importance_report(const Checkpoint<T>& ck, const CalibrationSet& calib, Aggregation agg,
                                        int64_t layer_target_depth) {
    ImportanceReport rep;
    rep.aggregation = agg;
    rep.layer_removal_order = layer_importance_iterative(ck, calib, layer_target_depth);
    rep.ffn_scores = ffn_neuron_importance(ck, calib, agg);
    rep.channel_scores = embedding_channel_importance(ck, calib, agg);
    for (auto& [layer, imp] : mamba_head_importance(ck, calib, agg)) {
        rep.mamba_head_scores[layer] = imp.head_scores;
        rep.mamba_head_ranks[layer] = imp.group_ranks;
    }
    return rep;
}

}  // namespace nncomp
