#pragma once

#include <numbers>

#include "nncomp/model.hpp"

namespace nncomp {

struct TrainStage {
    int64_t tokens = 0;   // token budget for the stage
    int64_t seq_len = 0;
};

struct TrainConfig {
    double lr_stable = 4.5e-4;
    double lr_min = 4.5e-6;
    int64_t warmup_steps = 0;
    double decay_start_fraction = 0.82;  // final 3.6T of 20T
    int64_t total_steps = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.1;
    int64_t batch_seqs = 1;
    std::vector<TrainStage> stages;
    double mix_fraction = 0.7;  // fraction of batches drawn from the first stream

    void validate() const {
        if (lr_min < 0 || lr_min > lr_stable) throw std::invalid_argument("train config: need 0 <= lr_min <= lr_stable");
        if (decay_start_fraction < 0 || decay_start_fraction > 1 || mix_fraction < 0 || mix_fraction > 1)
            throw std::invalid_argument("train config: fractions must be in [0,1]");
        if (warmup_steps < 0 || total_steps < 0 || batch_seqs < 1) throw std::invalid_argument("train config: bad step counts");
    }
};

/// Warmup-stable-decay: linear warmup to lr_stable, plateau, cosine decay
/// to lr_min at total_steps.
inline double wsd_lr(int64_t step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps) throw std::invalid_argument("wsd_lr: step out of range");
    if (step < cfg.warmup_steps)
        return cfg.lr_stable * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    auto decay_start = static_cast<int64_t>(cfg.decay_start_fraction * static_cast<double>(cfg.total_steps));
    if (step <= decay_start || decay_start >= cfg.total_steps) return cfg.lr_stable;
    double t = static_cast<double>(step - decay_start) / static_cast<double>(cfg.total_steps - decay_start);
    return cfg.lr_min + (cfg.lr_stable - cfg.lr_min) * 0.5 * (1.0 + std::cos(t * std::numbers::pi));
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m, v;
    int64_t step = 0;
};

template <typename T>
void adam_step(std::map<std::string, Tensor<T>>& params, const std::map<std::string, Tensor<T>>& grads,
               AdamState<T>& state, double lr, const TrainConfig& cfg) {
    ++state.step;
    double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor<T>& g = git->second;
        if (g.shape != p.shape) throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
        auto& m = state.m.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
        auto& v = state.v.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
        for (int64_t i = 0; i < p.size(); ++i) {
            double gi = static_cast<double>(g[i]);
            double mi = cfg.adam_beta1 * static_cast<double>(m[i]) + (1.0 - cfg.adam_beta1) * gi;
            double vi = cfg.adam_beta2 * static_cast<double>(v[i]) + (1.0 - cfg.adam_beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps) + cfg.weight_decay * static_cast<double>(p[i]);
            p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * update);
        }
    }
}

// ---------------------------------------------------------------------------
// Data streams
// ---------------------------------------------------------------------------

struct DataStream {
    std::vector<int32_t> corpus;
};

inline TokenBatch sample_batch(const DataStream& stream, int64_t batch, int64_t seq_len, Rng& rng) {
    if (static_cast<int64_t>(stream.corpus.size()) < seq_len)
        throw std::invalid_argument("sample_batch: corpus shorter than sequence length");
    TokenBatch out(static_cast<size_t>(batch));
    for (auto& row : out) {
        auto start = rng.uniform_int(0, static_cast<int64_t>(stream.corpus.size()) - seq_len);
        row.assign(stream.corpus.begin() + start, stream.corpus.begin() + start + seq_len);
    }
    return out;
}

struct TrainRecord {
    int64_t step = 0;
    int64_t tokens = 0;
    double lr = 0;
    double loss = 0;
};

struct TrainLog {
    std::vector<TrainRecord> records;
};

namespace detail {

template <typename T>
std::map<std::string, Tensor<T>> grads_by_name(Tape<T>& tape, const std::map<std::string, int>& param_nodes) {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, node] : param_nodes) out[name] = tape.grad(node);
    return out;
}

}  // namespace detail

/// Plain next-token cross-entropy training (used to make teachers).
template <typename T>
TrainLog train_lm(Checkpoint<T>& ck, const DataStream& stream, const TrainConfig& cfg, Rng& rng) {
    cfg.validate();
    TrainLog log;
    AdamState<T> opt;
    int64_t tokens_seen = 0;
    int64_t seq_len = cfg.stages.empty() ? 16 : cfg.stages.front().seq_len;
    for (int64_t step = 0; step < cfg.total_steps; ++step) {
        TokenBatch window = sample_batch(stream, cfg.batch_seqs, seq_len + 1, rng);
        TokenBatch inputs(window.size()), targets(window.size());
        for (size_t i = 0; i < window.size(); ++i) {
            inputs[i].assign(window[i].begin(), window[i].end() - 1);
            targets[i].assign(window[i].begin() + 1, window[i].end());
        }
        Tape<T> tape;
        std::map<std::string, int> nodes;
        Var<T> logits = model_forward(ck, inputs, &tape, {}, nullptr, &nodes);
        Var<T> loss = cross_entropy(logits, targets);
        double lv = static_cast<double>(loss.v()[0]);
        if (!std::isfinite(lv)) throw std::runtime_error("train_lm: loss diverged at step " + std::to_string(step));
        tape.run_backward(loss.node);
        double lr = wsd_lr(step + 1, cfg);
        auto grads = detail::grads_by_name(tape, nodes);
        adam_step(ck.tensors, grads, opt, lr, cfg);
        tokens_seen += cfg.batch_seqs * seq_len;
        log.records.push_back({step, tokens_seen, lr, lv});
    }
    return log;
}

template <typename T>
double eval_lm_loss(const Checkpoint<T>& ck, const DataStream& stream, int64_t batches, int64_t batch, int64_t seq_len,
                    uint64_t seed) {
    Rng rng(seed);
    double acc = 0;
    for (int64_t i = 0; i < batches; ++i) {
        TokenBatch window = sample_batch(stream, batch, seq_len + 1, rng);
        TokenBatch inputs(window.size()), targets(window.size());
        for (size_t j = 0; j < window.size(); ++j) {
            inputs[j].assign(window[j].begin(), window[j].end() - 1);
            targets[j].assign(window[j].begin() + 1, window[j].end());
        }
        acc += static_cast<double>(cross_entropy(model_forward(ck, inputs), targets).v()[0]);
    }
    return acc / static_cast<double>(batches);
}

/// Staged logit distillation: frozen teacher, forward-KL loss, WSD + Adam,
/// two data streams mixed at mix_fraction.
template <typename T>
TrainLog distill_run(const Checkpoint<T>& teacher, Checkpoint<T>& student, const DataStream& stream_a,
                     const DataStream& stream_b, const TrainConfig& cfg, Rng& rng) {
    cfg.validate();
    if (teacher.config.vocab_size != student.config.vocab_size)
        throw std::invalid_argument("distill_run: teacher and student must share a vocabulary");
    if (cfg.stages.empty()) throw std::invalid_argument("distill_run: at least one stage required");
    TrainLog log;
    AdamState<T> opt;
    int64_t step = 0, tokens_seen = 0;
    for (const TrainStage& stage : cfg.stages) {
        int64_t stage_tokens = 0;
        while (stage_tokens < stage.tokens) {
            const DataStream& stream = rng.uniform() < cfg.mix_fraction ? stream_a : stream_b;
            TokenBatch batch = sample_batch(stream, cfg.batch_seqs, stage.seq_len, rng);
            Tensor<T> teacher_logits = model_forward(teacher, batch).v();
            Tape<T> tape;
            std::map<std::string, int> nodes;
            Var<T> logits = model_forward(student, batch, &tape, {}, nullptr, &nodes);
            Var<T> loss = kd_loss(logits, teacher_logits);
            double lv = static_cast<double>(loss.v()[0]);
            if (!std::isfinite(lv))
                throw std::runtime_error("distill_run: loss diverged at step " + std::to_string(step) + " (loss " +
                                         std::to_string(lv) + ")");
            tape.run_backward(loss.node);
            double lr = wsd_lr(std::min(step + 1, cfg.total_steps), cfg);
            auto grads = detail::grads_by_name(tape, nodes);
            adam_step(student.tensors, grads, opt, lr, cfg);
            stage_tokens += cfg.batch_seqs * stage.seq_len;
            tokens_seen += cfg.batch_seqs * stage.seq_len;
            log.records.push_back({step, tokens_seen, lr, lv});
            ++step;
        }
    }
    return log;
}

template <typename T>
Checkpoint<T> merge_checkpoints(const Checkpoint<T>& a, const Checkpoint<T>& b, double alpha) {
    if (a.config.pattern.str() != b.config.pattern.str() || a.config.d_model != b.config.d_model ||
        a.tensors.size() != b.tensors.size())
        throw std::invalid_argument("merge_checkpoints: config mismatch");
    Checkpoint<T> out = a;
    for (auto& [name, t] : out.tensors) {
        const Tensor<T>& u = b.at(name);
        if (u.shape != t.shape) throw std::invalid_argument("merge_checkpoints: shape mismatch for " + name);
        for (int64_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<T>((1.0 - alpha) * static_cast<double>(t[i]) + alpha * static_cast<double>(u[i]));
    }
    return out;
}

}  // namespace nncomp
