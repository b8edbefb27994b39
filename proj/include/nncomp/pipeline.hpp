#pragma once

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "nncomp/budget_filter.hpp"
#include "nncomp/checkpoint_io.hpp"
#include "nncomp/fp8.hpp"
#include "nncomp/importance.hpp"
#include "nncomp/memory_nas.hpp"
#include "nncomp/pruner.hpp"
#include "nncomp/train.hpp"

namespace nncomp {

struct PipelineError : std::runtime_error {
    std::string stage;
    PipelineError(std::string stage_, const std::string& msg)
        : std::runtime_error(stage_ + ": " + msg), stage(std::move(stage_)) {}
};

/// Desk-scale default architecture the CLI trains from scratch.
inline ModelConfig desk_config() {
    ModelConfig c;
    c.n_layers = 8;
    c.pattern = build_layer_pattern(8, 1);
    c.d_model = 64;
    c.d_ffn = 128;
    c.n_q_heads = 4;
    c.n_kv_heads = 2;
    c.mamba_state_dim = 8;
    c.mamba_head_dim = 16;
    c.mamba_groups = 2;
    c.mamba_expand = 2;
    c.conv_window = 4;
    c.vocab_size = 256;
    c.validate();
    return c;
}

/// Deterministic char-level corpus: a repeating vocabulary of short "words"
/// with seeded noise, byte tokens in [0, vocab).
inline DataStream make_char_corpus(int64_t n, int64_t vocab, uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<int32_t>> words;
    for (int i = 0; i < 12; ++i) {
        std::vector<int32_t> w(static_cast<size_t>(rng.uniform_int(2, 6)));
        for (auto& ch : w) ch = static_cast<int32_t>(rng.uniform_int(1, vocab - 1));
        words.push_back(std::move(w));
    }
    DataStream s;
    while (static_cast<int64_t>(s.corpus.size()) < n) {
        const auto& w = words[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(words.size()) - 1))];
        s.corpus.insert(s.corpus.end(), w.begin(), w.end());
        s.corpus.push_back(0);  // separator
    }
    s.corpus.resize(static_cast<size_t>(n));
    return s;
}

struct PipelineConfig {
    uint64_t seed = 1;
    ModelConfig model = desk_config();
    // teacher pretraining
    int64_t train_steps = 120;
    int64_t batch_seqs = 4;
    int64_t seq_len = 16;
    int64_t corpus_tokens = 4000;
    // importance / search protocol
    int64_t calib_sequences = 4;
    std::vector<int64_t> depths = {6, 7, 8};
    std::vector<int64_t> d_ffns = {96, 128};
    std::vector<int64_t> mamba_head_counts = {6, 8};
    std::vector<int64_t> d_models = {64};
    double budget_bytes = 1e18;
    int64_t mem_seq_len = 1024;
    int64_t mem_batch = 1;
    double mem_bytes_per_elem = 8.0;
    int64_t nas_top_k = 2;
    // distillation
    int64_t short_kd_tokens = 512;
    int64_t final_kd_tokens = 2048;
    TrainConfig kd;
    // quantize / budget sections
    std::set<std::string> quantize_skip = {"embedding", "head"};
    BudgetFilterConfig budget_filter;

    PipelineConfig() {
        kd.total_steps = 1 << 20;  // schedule horizon; runs are token-bounded
        kd.warmup_steps = 10;
        kd.batch_seqs = 4;
        budget_filter.budget = 32;
        budget_filter.open_id = 1;
        budget_filter.close_id = 2;
        budget_filter.newline_id = 10;
    }
};

namespace detail {

inline nlohmann::json get_section(const nlohmann::json& j, const char* name) {
    return j.contains(name) ? j.at(name) : nlohmann::json::object();
}

template <typename V>
void maybe(const nlohmann::json& j, const char* key, V& out) {
    if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
    PipelineConfig c;
    detail::maybe(j, "seed", c.seed);
    auto model = detail::get_section(j, "model");
    if (!model.empty()) {
        nlohmann::json full = detail::config_to_json(desk_config());
        full.update(model);
        if (!model.contains("pattern") && model.contains("n_layers"))
            full["pattern"] = build_layer_pattern(model.at("n_layers").get<int64_t>(),
                                                  std::max<int64_t>(1, model.at("n_layers").get<int64_t>() / 8))
                                  .str();
        c.model = detail::config_from_json(full);
        c.model.validate();
    }
    auto train = detail::get_section(j, "train");
    detail::maybe(train, "steps", c.train_steps);
    detail::maybe(train, "batch_seqs", c.batch_seqs);
    detail::maybe(train, "seq_len", c.seq_len);
    detail::maybe(train, "corpus_tokens", c.corpus_tokens);
    detail::maybe(train, "lr_stable", c.kd.lr_stable);
    detail::maybe(train, "lr_min", c.kd.lr_min);
    detail::maybe(train, "warmup_steps", c.kd.warmup_steps);
    detail::maybe(train, "mix_fraction", c.kd.mix_fraction);
    auto search = detail::get_section(j, "search");
    detail::maybe(search, "calib_sequences", c.calib_sequences);
    detail::maybe(search, "depths", c.depths);
    detail::maybe(search, "d_models", c.d_models);
    detail::maybe(search, "d_ffns", c.d_ffns);
    detail::maybe(search, "mamba_head_counts", c.mamba_head_counts);
    detail::maybe(search, "budget_bytes", c.budget_bytes);
    detail::maybe(search, "mem_seq_len", c.mem_seq_len);
    detail::maybe(search, "mem_batch", c.mem_batch);
    detail::maybe(search, "mem_bytes_per_elem", c.mem_bytes_per_elem);
    detail::maybe(search, "top_k", c.nas_top_k);
    detail::maybe(search, "short_kd_tokens", c.short_kd_tokens);
    detail::maybe(search, "final_kd_tokens", c.final_kd_tokens);
    auto quant = detail::get_section(j, "quantize");
    if (quant.contains("skip")) {
        c.quantize_skip.clear();
        for (const auto& s : quant.at("skip")) c.quantize_skip.insert(s.get<std::string>());
    }
    auto budget = detail::get_section(j, "budget");
    detail::maybe(budget, "budget", c.budget_filter.budget);
    detail::maybe(budget, "grace", c.budget_filter.grace);
    detail::maybe(budget, "open_id", c.budget_filter.open_id);
    detail::maybe(budget, "close_id", c.budget_filter.close_id);
    detail::maybe(budget, "newline_id", c.budget_filter.newline_id);
    return c;
}

namespace detail {

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

inline nlohmann::json log_to_json(const TrainLog& log) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : log.records) out.push_back({{"step", r.step}, {"tokens", r.tokens}, {"lr", r.lr}, {"loss", r.loss}});
    return out;
}

/// Width-prune a model to a candidate (d_ffn, mamba head count) using
/// importance scores; embedding width is kept (desk-scale candidates vary
/// inner widths only when d_model matches).
template <typename T>
Checkpoint<T> prune_to_candidate(const Checkpoint<T>& ck, const CalibrationSet& calib, int64_t d_model, int64_t d_ffn,
                                 int64_t heads) {
    Checkpoint<T> out = ck;
    if (d_ffn < out.config.d_ffn) {
        auto scores = ffn_neuron_importance(out, calib, Aggregation::L2);
        std::map<int64_t, std::vector<int64_t>> keep;
        for (auto& [layer, s] : scores) keep[layer] = keep_from_scores(s, out.config.d_ffn - d_ffn);
        out = prune_ffn(out, keep);
    }
    if (heads < out.config.n_mamba_heads()) {
        int64_t drop_per_group = (out.config.n_mamba_heads() - heads) / out.config.mamba_groups;
        auto imp = mamba_head_importance(out, calib);
        std::map<int64_t, std::vector<std::vector<int64_t>>> keep;
        for (auto& [layer, rep] : imp) {
            std::vector<std::vector<int64_t>> per_group;
            for (const auto& ranks : rep.group_ranks) {
                std::vector<int64_t> ks(ranks.begin() + drop_per_group, ranks.end());
                std::sort(ks.begin(), ks.end());
                per_group.push_back(std::move(ks));
            }
            keep[layer] = std::move(per_group);
        }
        out = prune_mamba_heads(out, keep);
    }
    if (d_model < out.config.d_model) {
        auto scores = embedding_channel_importance(out, calib, Aggregation::L2);
        out = prune_embedding(out, keep_from_scores(scores, out.config.d_model - d_model));
    }
    return out;
}

}  // namespace detail

/// Two-part compression protocol at desk scale: pretrain a teacher, pick a
/// depth by importance + short KD, enumerate width candidates under the
/// byte budget, short-KD the top k, then extended KD on the winner.
/// Artifacts land in out_dir; every stage appends, none rewrites.
template <typename T = double>
void run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    nlohmann::json summary;

    // --- stage: train -----------------------------------------------------
    DataStream corpus = make_char_corpus(cfg.corpus_tokens, cfg.model.vocab_size, cfg.seed);
    Checkpoint<T> teacher;
    try {
        Rng init_rng(cfg.seed + 1);
        teacher = init_checkpoint<T>(cfg.model, init_rng);
        TrainConfig tc = cfg.kd;
        tc.total_steps = cfg.train_steps;
        tc.warmup_steps = std::min(tc.warmup_steps, cfg.train_steps / 2);
        tc.batch_seqs = cfg.batch_seqs;
        tc.stages = {{0, cfg.seq_len}};
        Rng trng(cfg.seed + 2);
        auto log = train_lm(teacher, corpus, tc, trng);
        save_checkpoint(teacher, (out_dir / "teacher.nnc").string());
        detail::write_json(out_dir / "train_report.json",
                           {{"steps", cfg.train_steps}, {"final_loss", log.records.back().loss}, {"log", detail::log_to_json(log)}});
        summary["train"] = {{"final_loss", log.records.back().loss}};
    } catch (const PipelineError&) {
        throw;
    } catch (const std::exception& e) {
        throw PipelineError("train", e.what());
    }

    auto short_kd = [&](const Checkpoint<T>& t, Checkpoint<T>& s, int64_t tokens, uint64_t seed) {
        TrainConfig kc = cfg.kd;
        kc.batch_seqs = cfg.batch_seqs;
        kc.stages = {{tokens, cfg.seq_len}};
        Rng r(seed);
        return distill_run(t, s, corpus, corpus, kc, r);
    };
    auto eval = [&](const Checkpoint<T>& m) { return eval_lm_loss(m, corpus, 8, cfg.batch_seqs, cfg.seq_len, cfg.seed + 3); };

    // --- stage: depth (importance + short KD per depth) -------------------
    Checkpoint<T> depth_model;
    try {
        CalibrationSet calib = make_calibration_set(cfg.calib_sequences, cfg.seq_len, cfg.model.vocab_size, cfg.seed + 4);
        nlohmann::json reports = nlohmann::json::array();
        double best_loss = 0;
        int64_t best_depth = -1;
        for (int64_t depth : cfg.depths) {
            if (depth > cfg.model.n_layers) throw PipelineError("depth", "depth exceeds teacher depth");
            Checkpoint<T> student = teacher;
            nlohmann::json removal = nlohmann::json::array();
            if (depth < cfg.model.n_layers) {
                // keep at least one attention layer alive through depth search
                std::set<int64_t> protect;
                for (int64_t i = cfg.model.n_layers - 1; i >= 0; --i)
                    if (cfg.model.pattern.kinds[static_cast<size_t>(i)] == LayerKind::Attention) {
                        protect.insert(i);
                        break;
                    }
                auto order = layer_importance_iterative(teacher, calib, depth, protect);
                std::set<int64_t> remove;
                for (auto& [idx, mse] : order) {
                    remove.insert(idx);
                    removal.push_back({{"layer", idx}, {"mse", mse}});
                }
                student = prune_layers(teacher, remove, /*min_attn_layers=*/1);
            }
            short_kd(teacher, student, cfg.short_kd_tokens, cfg.seed + 5 + static_cast<uint64_t>(depth));
            double loss = eval(student);
            reports.push_back({{"depth", depth}, {"removed", removal}, {"post_kd_loss", loss}});
            if (best_depth < 0 || loss < best_loss) {
                best_depth = depth;
                best_loss = loss;
                depth_model = std::move(student);
            }
        }
        detail::write_json(out_dir / "depth_report.json", {{"candidates", reports}, {"selected_depth", best_depth}});
        summary["depth"] = {{"selected_depth", best_depth}, {"post_kd_loss", best_loss}};
    } catch (const PipelineError&) {
        throw;
    } catch (const std::exception& e) {
        throw PipelineError("depth", e.what());
    }

    // --- stage: nas (width enumeration + short KD on top k) ---------------
    Checkpoint<T> selected;
    try {
        SearchSpace space;
        space.base = depth_model.config;
        space.depths = {depth_model.config.n_layers};
        space.d_models = cfg.d_models;
        space.d_ffns = cfg.d_ffns;
        space.mamba_head_counts = cfg.mamba_head_counts;
        auto cands = enumerate_candidates(space, cfg.budget_bytes, cfg.mem_seq_len, cfg.mem_batch, cfg.mem_bytes_per_elem);
        if (cands.candidates.empty()) throw PipelineError("nas", "no feasible candidate under the budget");
        auto top = rank_candidates(cands, cfg.nas_top_k);
        CalibrationSet calib = make_calibration_set(cfg.calib_sequences, cfg.seq_len, cfg.model.vocab_size, cfg.seed + 6);
        nlohmann::json reports = nlohmann::json::array();
        double best_loss = 0;
        int64_t best = -1;
        for (size_t i = 0; i < top.size(); ++i) {
            const ModelConfig& cand = top[i].config;
            auto student = detail::prune_to_candidate(depth_model, calib, cand.d_model, cand.d_ffn, cand.n_mamba_heads());
            short_kd(teacher, student, cfg.short_kd_tokens, cfg.seed + 7 + i);
            double loss = eval(student);
            reports.push_back({{"d_model", cand.d_model},
                               {"d_ffn", cand.d_ffn},
                               {"mamba_heads", cand.n_mamba_heads()},
                               {"total_bytes", top[i].memory.total_bytes},
                               {"post_kd_loss", loss}});
            if (best < 0 || loss < best_loss) {
                best = static_cast<int64_t>(i);
                best_loss = loss;
                selected = std::move(student);
            }
        }
        detail::write_json(out_dir / "nas_report.json",
                           {{"feasible", cands.candidates.size()}, {"evaluated", reports}, {"selected", best}});
        summary["nas"] = {{"selected", best}, {"post_kd_loss", best_loss}};
    } catch (const PipelineError&) {
        throw;
    } catch (const std::exception& e) {
        throw PipelineError("nas", e.what());
    }

    // --- stage: distill (extended KD on the winner) ------------------------
    try {
        auto log = short_kd(teacher, selected, cfg.final_kd_tokens, cfg.seed + 8);
        double loss = eval(selected);
        save_checkpoint(selected, (out_dir / "student.nnc").string());
        detail::write_json(out_dir / "distill_report.json",
                           {{"tokens", cfg.final_kd_tokens}, {"final_loss", loss}, {"log", detail::log_to_json(log)}});
        summary["distill"] = {{"final_loss", loss}};
    } catch (const PipelineError&) {
        throw;
    } catch (const std::exception& e) {
        throw PipelineError("distill", e.what());
    }

    // --- stage: quantize (error report, weights unchanged) ------------------
    try {
        auto q = quantize_tensors(selected.tensors, cfg.quantize_skip);
        nlohmann::json per_tensor = nlohmann::json::object();
        for (const auto& [name, qt] : q.quantized) {
            auto d = dequantize<T>(qt);
            const auto& t = selected.at(name);
            double err = 0, ref = 0;
            for (int64_t i = 0; i < t.size(); ++i) {
                double e = static_cast<double>(d[i]) - static_cast<double>(t[i]);
                err += e * e;
                ref += static_cast<double>(t[i]) * static_cast<double>(t[i]);
            }
            per_tensor[name] = {{"rel_error", ref > 0 ? std::sqrt(err / ref) : 0.0}, {"blocks", qt.scales.size()}};
        }
        detail::write_json(out_dir / "quantize_report.json",
                           {{"skipped", nlohmann::json(cfg.quantize_skip)}, {"tensors", per_tensor}});
    } catch (const std::exception& e) {
        throw PipelineError("quantize", e.what());
    }

    detail::write_json(out_dir / "pipeline_report.json", summary);
}

}  // namespace nncomp
