// Command-line front end for the compression pipeline. All subcommands run
// in 64-bit precision so reruns with the same seed are bit-reproducible.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "nncomp/pipeline.hpp"

using namespace nncomp;
namespace fs = std::filesystem;

namespace {

nlohmann::json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config " + path);
    return nlohmann::json::parse(f);
}

PipelineConfig load_config(const std::string& path) {
    return path.empty() ? PipelineConfig{} : parse_pipeline_config(load_json(path));
}

std::vector<int32_t> read_token_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open token stream " + path);
    std::vector<int32_t> out;
    int64_t tok;
    while (f >> tok) out.push_back(static_cast<int32_t>(tok));
    return out;
}

CalibrationSet calib_for(const PipelineConfig& cfg, const ModelConfig& model) {
    return make_calibration_set(cfg.calib_sequences, cfg.seq_len, model.vocab_size, cfg.seed + 4);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybrid-model compression laboratory"};
    app.require_subcommand(1);
    std::string config_path, ckpt_path, out_path, teacher_path, student_path, b_path, stream_path, metrics_path;

    auto* train = app.add_subcommand("train", "pretrain a desk-scale teacher");
    train->add_option("--config", config_path);
    train->add_option("--out", out_path)->required();

    auto* importance = app.add_subcommand("importance", "forward-pass importance report");
    importance->add_option("--config", config_path);
    importance->add_option("--ckpt", ckpt_path)->required();
    importance->add_option("--out", out_path)->required();
    int64_t target_depth = -1;
    importance->add_option("--target-depth", target_depth, "layer removal order down to this depth");

    auto* prune = app.add_subcommand("prune", "importance-guided structural pruning");
    prune->add_option("--config", config_path);
    prune->add_option("--ckpt", ckpt_path)->required();
    prune->add_option("--out", out_path)->required();
    int64_t p_depth = -1, p_ffn = -1, p_heads = -1, p_dmodel = -1;
    prune->add_option("--depth", p_depth, "target layer count");
    prune->add_option("--d-ffn", p_ffn, "target FFN width");
    prune->add_option("--mamba-heads", p_heads, "target Mamba head count");
    prune->add_option("--d-model", p_dmodel, "target embedding width");

    auto* nas = app.add_subcommand("nas", "memory-budgeted candidate search");
    nas->add_option("--config", config_path);
    nas->add_option("--ckpt", ckpt_path)->required();
    nas->add_option("--out", out_path)->required();

    auto* distill = app.add_subcommand("distill", "logit distillation teacher -> student");
    distill->add_option("--config", config_path);
    distill->add_option("--teacher", teacher_path)->required();
    distill->add_option("--student", student_path)->required();
    distill->add_option("--out", out_path)->required();
    int64_t kd_tokens = -1;
    distill->add_option("--tokens", kd_tokens, "KD token budget");

    auto* merge = app.add_subcommand("merge", "interpolate two checkpoints");
    merge->add_option("--a", ckpt_path)->required();
    merge->add_option("--b", b_path)->required();
    double alpha = 0.5;
    merge->add_option("--alpha", alpha);
    merge->add_option("--out", out_path)->required();

    auto* quantize_cmd = app.add_subcommand("quantize", "blockwise E4M3 error report");
    quantize_cmd->add_option("--config", config_path);
    quantize_cmd->add_option("--ckpt", ckpt_path)->required();
    quantize_cmd->add_option("--out", out_path)->required();

    auto* budget_sim = app.add_subcommand("budget-sim", "thinking-budget stream filter");
    budget_sim->add_option("--input", stream_path)->required();
    budget_sim->add_option("--out", out_path)->required();
    budget_sim->add_option("--metrics", metrics_path);
    BudgetFilterConfig bf;
    budget_sim->add_option("--budget", bf.budget)->required();
    budget_sim->add_option("--grace", bf.grace);
    budget_sim->add_option("--open-id", bf.open_id)->required();
    budget_sim->add_option("--close-id", bf.close_id)->required();
    budget_sim->add_option("--newline-id", bf.newline_id)->required();

    auto* pipeline = app.add_subcommand("pipeline", "full compression protocol");
    pipeline->add_option("--config", config_path);
    std::string out_dir;
    pipeline->add_option("--out-dir", out_dir)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            auto cfg = load_config(config_path);
            Rng init_rng(cfg.seed + 1);
            auto ck = init_checkpoint<double>(cfg.model, init_rng);
            auto corpus = make_char_corpus(cfg.corpus_tokens, cfg.model.vocab_size, cfg.seed);
            TrainConfig tc = cfg.kd;
            tc.total_steps = cfg.train_steps;
            tc.warmup_steps = std::min(tc.warmup_steps, cfg.train_steps / 2);
            tc.batch_seqs = cfg.batch_seqs;
            tc.stages = {{0, cfg.seq_len}};
            Rng rng(cfg.seed + 2);
            auto log = train_lm(ck, corpus, tc, rng);
            save_checkpoint(ck, out_path);
            std::cout << "final loss " << log.records.back().loss << "\n";
        } else if (*importance) {
            auto cfg = load_config(config_path);
            auto ck = load_checkpoint<double>(ckpt_path);
            auto calib = calib_for(cfg, ck.config);
            if (target_depth < 0) target_depth = std::max<int64_t>(1, ck.config.n_layers - 1);
            auto rep = full_importance_report(ck, calib, Aggregation::L2, target_depth);
            nlohmann::json j;
            for (auto& [layer, mse] : rep.layer_removal_order) j["layer_removal_order"].push_back({{"layer", layer}, {"mse", mse}});
            for (auto& [layer, s] : rep.ffn_scores) j["ffn_scores"][std::to_string(layer)] = s;
            j["channel_scores"] = rep.channel_scores;
            for (auto& [layer, s] : rep.mamba_head_scores) j["mamba_head_scores"][std::to_string(layer)] = s;
            detail::write_json(out_path, j);
        } else if (*prune) {
            auto cfg = load_config(config_path);
            auto ck = load_checkpoint<double>(ckpt_path);
            auto calib = calib_for(cfg, ck.config);
            if (p_depth > 0 && p_depth < ck.config.n_layers) {
                auto order = layer_importance_iterative(ck, calib, p_depth);
                std::set<int64_t> remove;
                for (auto& [idx, mse] : order) remove.insert(idx);
                ck = prune_layers(ck, remove, 1);
            }
            ck = detail::prune_to_candidate(ck, calib, p_dmodel > 0 ? p_dmodel : ck.config.d_model,
                                            p_ffn > 0 ? p_ffn : ck.config.d_ffn,
                                            p_heads > 0 ? p_heads : ck.config.n_mamba_heads());
            save_checkpoint(ck, out_path);
        } else if (*nas) {
            auto cfg = load_config(config_path);
            auto ck = load_checkpoint<double>(ckpt_path);
            SearchSpace space{ck.config, {ck.config.n_layers}, cfg.d_models, cfg.d_ffns, cfg.mamba_head_counts};
            auto cands = enumerate_candidates(space, cfg.budget_bytes, cfg.mem_seq_len, cfg.mem_batch, cfg.mem_bytes_per_elem);
            nlohmann::json j;
            j["budget_bytes"] = cfg.budget_bytes;
            j["candidates"] = nlohmann::json::array();
            for (const auto& c : cands.candidates)
                j["candidates"].push_back({{"d_model", c.config.d_model},
                                           {"d_ffn", c.config.d_ffn},
                                           {"mamba_heads", c.config.n_mamba_heads()},
                                           {"weight_bytes", c.memory.weight_bytes},
                                           {"kv_cache_bytes", c.memory.kv_cache_bytes},
                                           {"ssm_state_bytes", c.memory.ssm_state_bytes},
                                           {"total_bytes", c.memory.total_bytes}});
            detail::write_json(out_path, j);
        } else if (*distill) {
            auto cfg = load_config(config_path);
            auto teacher = load_checkpoint<double>(teacher_path);
            auto student = load_checkpoint<double>(student_path);
            auto corpus = make_char_corpus(cfg.corpus_tokens, teacher.config.vocab_size, cfg.seed);
            TrainConfig kc = cfg.kd;
            kc.batch_seqs = cfg.batch_seqs;
            kc.stages = {{kd_tokens > 0 ? kd_tokens : cfg.final_kd_tokens, cfg.seq_len}};
            Rng rng(cfg.seed + 8);
            auto log = distill_run(teacher, student, corpus, corpus, kc, rng);
            save_checkpoint(student, out_path);
            std::cout << "final loss " << log.records.back().loss << "\n";
        } else if (*merge) {
            auto a = load_checkpoint<double>(ckpt_path);
            auto b = load_checkpoint<double>(b_path);
            save_checkpoint(merge_checkpoints(a, b, alpha), out_path);
        } else if (*quantize_cmd) {
            auto cfg = load_config(config_path);
            auto ck = load_checkpoint<double>(ckpt_path);
            auto q = quantize_tensors(ck.tensors, cfg.quantize_skip);
            nlohmann::json per_tensor = nlohmann::json::object();
            for (const auto& [name, qt] : q.quantized) {
                auto d = dequantize<double>(qt);
                const auto& t = ck.at(name);
                double err = 0, ref = 0;
                for (int64_t i = 0; i < t.size(); ++i) {
                    double e = d[i] - t[i];
                    err += e * e;
                    ref += t[i] * t[i];
                }
                per_tensor[name] = {{"rel_error", ref > 0 ? std::sqrt(err / ref) : 0.0}, {"blocks", qt.scales.size()}};
            }
            detail::write_json(out_path, {{"skipped", nlohmann::json(cfg.quantize_skip)}, {"tensors", per_tensor}});
        } else if (*budget_sim) {
            auto tokens = read_token_file(stream_path);
            auto r = filter_stream(tokens, bf);
            std::ofstream f(out_path);
            for (int32_t t : r.output) f << t << "\n";
            nlohmann::json m = {{"well_formed", r.well_formedness.well_formed},
                                {"close_count", r.well_formedness.close_count},
                                {"inserted_at", r.inserted_at},
                                {"natural_close", r.natural_close}};
            if (!metrics_path.empty())
                detail::write_json(metrics_path, m);
            else
                std::cout << m.dump(2) << "\n";
        } else if (*pipeline) {
            run_pipeline(load_config(config_path), out_dir);
        }
    } catch (const PipelineError& e) {
        std::cerr << "pipeline failed at stage " << e.stage << ": " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
