#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace nncomp {

struct BudgetFilterConfig {
    int64_t budget = 0;
    int64_t grace = 500;
    int32_t open_id = -1;
    int32_t close_id = -2;
    int32_t newline_id = -3;

    void validate() const {
        if (budget < 0 || grace < 0) throw std::invalid_argument("budget filter: negative budget or grace");
        if (open_id == close_id || close_id == newline_id || open_id == newline_id)
            throw std::invalid_argument("budget filter: tag ids must be distinct");
    }
};

enum class FilterPhase { PreThink, Thinking, AwaitingNewline, Closed };

/// Streaming thinking-budget enforcement: count tokens after the open tag;
/// once the budget is reached, close at the next newline, or forcibly after
/// `grace` further tokens.
class BudgetFilter {
public:
    explicit BudgetFilter(const BudgetFilterConfig& cfg) : cfg_(cfg) { cfg.validate(); }

    std::vector<int32_t> feed_token(int32_t tok) {
        std::vector<int32_t> out = {tok};
        switch (phase_) {
            case FilterPhase::PreThink:
                if (tok == cfg_.open_id) phase_ = FilterPhase::Thinking;
                break;
            case FilterPhase::Thinking:
            case FilterPhase::AwaitingNewline:
                ++think_count_;
                if (tok == cfg_.close_id) {
                    natural_close_ = true;
                    phase_ = FilterPhase::Closed;
                    break;
                }
                if (think_count_ >= cfg_.budget) {
                    phase_ = FilterPhase::AwaitingNewline;
                    if (tok == cfg_.newline_id || think_count_ >= cfg_.budget + cfg_.grace) {
                        out.push_back(cfg_.close_id);
                        inserted_at_ = think_count_;
                        phase_ = FilterPhase::Closed;
                    }
                }
                break;
            case FilterPhase::Closed:
                if (tok == cfg_.close_id) ++extra_closes_;  // the failure signal; passed through
                break;
        }
        return out;
    }

    FilterPhase phase() const { return phase_; }
    int64_t think_count() const { return think_count_; }
    int64_t inserted_at() const { return inserted_at_; }  // -1 when no insertion happened
    bool natural_close() const { return natural_close_; }
    int64_t extra_closes() const { return extra_closes_; }

private:
    BudgetFilterConfig cfg_;
    FilterPhase phase_ = FilterPhase::PreThink;
    int64_t think_count_ = 0;
    int64_t inserted_at_ = -1;
    bool natural_close_ = false;
    int64_t extra_closes_ = 0;
};

struct WellFormedness {
    bool well_formed = false;
    int64_t close_count = 0;
    std::vector<int64_t> close_positions;
};

inline WellFormedness check_well_formed(const std::vector<int32_t>& tokens, int32_t close_id) {
    WellFormedness w;
    for (size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] == close_id) {
            ++w.close_count;
            w.close_positions.push_back(static_cast<int64_t>(i));
        }
    w.well_formed = w.close_count == 1;
    return w;
}

struct FilterResult {
    std::vector<int32_t> output;
    int64_t inserted_at = -1;
    bool natural_close = false;
    WellFormedness well_formedness;
};

inline FilterResult filter_stream(const std::vector<int32_t>& tokens, const BudgetFilterConfig& cfg) {
    BudgetFilter f(cfg);
    FilterResult r;
    for (int32_t tok : tokens)
        for (int32_t out : f.feed_token(tok)) r.output.push_back(out);
    r.inserted_at = f.inserted_at();
    r.natural_close = f.natural_close();
    r.well_formedness = check_well_formed(r.output, cfg.close_id);
    return r;
}

}  // namespace nncomp
