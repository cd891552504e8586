#include "defacto/reward.hpp"

#include "defacto/kvconfig.hpp"

#include <cctype>
#include <set>
#include <sstream>
#include <stdexcept>

namespace defacto {

std::string_view to_string(VariantTag tag) {
    switch (tag) {
        case VariantTag::pos: return "pos";
        case VariantTag::rand: return "rand";
        case VariantTag::cf: return "cf";
    }
    return "?";
}

VariantTag variant_from_string(std::string_view s) {
    if (s == "pos") return VariantTag::pos;
    if (s == "rand") return VariantTag::rand;
    if (s == "cf") return VariantTag::cf;
    throw std::invalid_argument("unknown variant tag: " + std::string(s));
}

void RewardConfig::validate() const {
    const double values[] = {lambda1, lambda2,  gamma_unk, rho_unk,  gamma_guess,
                             gamma_corr, alpha, beta_pos,  beta_neg, gamma_empty};
    for (double v : values)
        if (!(v >= 0.0)) throw std::invalid_argument("RewardConfig: coefficients must be >= 0");
    if (!(gamma_corr > gamma_guess))
        throw std::invalid_argument("RewardConfig: gamma_corr must exceed gamma_guess");
}

RewardConfig RewardConfig::load(const std::filesystem::path& path) {
    const KvConfig kv = KvConfig::load(path);
    kv.require_known({"lambda1", "lambda2", "gamma_unk", "rho_unk", "gamma_guess",
                      "gamma_corr", "alpha", "beta_pos", "beta_neg", "gamma_empty"});
    RewardConfig cfg;
    cfg.lambda1 = kv.get_double("lambda1", cfg.lambda1);
    cfg.lambda2 = kv.get_double("lambda2", cfg.lambda2);
    cfg.gamma_unk = kv.get_double("gamma_unk", cfg.gamma_unk);
    cfg.rho_unk = kv.get_double("rho_unk", cfg.rho_unk);
    cfg.gamma_guess = kv.get_double("gamma_guess", cfg.gamma_guess);
    cfg.gamma_corr = kv.get_double("gamma_corr", cfg.gamma_corr);
    cfg.alpha = kv.get_double("alpha", cfg.alpha);
    cfg.beta_pos = kv.get_double("beta_pos", cfg.beta_pos);
    cfg.beta_neg = kv.get_double("beta_neg", cfg.beta_neg);
    cfg.gamma_empty = kv.get_double("gamma_empty", cfg.gamma_empty);
    cfg.validate();
    return cfg;
}

std::string normalize_answer(std::string_view s) {
    std::string spaced;
    spaced.reserve(s.size());
    for (char c : s) {
        const auto uc = static_cast<unsigned char>(c);
        if (std::isalnum(uc) || uc >= 0x80)
            spaced.push_back(static_cast<char>(std::tolower(uc)));
        else
            spaced.push_back(' ');
    }

    std::istringstream words(spaced);
    std::string token;
    std::string out;
    while (words >> token) {
        if (token == "a" || token == "an" || token == "the") continue;
        if (!out.empty()) out.push_back(' ');
        out += token;
    }
    return out;
}

double answer_reward_from_indicators(bool acc, bool unk, VariantTag variant,
                                     const RewardConfig& cfg) {
    const double acc_v = acc ? 1.0 : 0.0;
    const double unk_v = unk ? 1.0 : 0.0;
    if (variant == VariantTag::cf)
        return cfg.rho_unk * unk_v - cfg.gamma_guess * (1.0 - unk_v) - cfg.gamma_corr * acc_v;
    return acc_v - cfg.gamma_unk * unk_v;
}

namespace {

bool answer_matches(const StructuredOutput& out, const ScoringContext& ctx) {
    const std::string predicted = out.answer.has_value() ? *out.answer : "unknown";
    return normalize_answer(predicted) == normalize_answer(ctx.gold_answer);
}

}  // namespace

double answer_reward(const StructuredOutput& out, const ScoringContext& ctx,
                     const RewardConfig& cfg) {
    return answer_reward_from_indicators(answer_matches(out, ctx), is_abstention(out),
                                         ctx.variant, cfg);
}

double format_reward(const ParseOutcome& outcome, const ImageExtent& extent,
                     const RewardConfig& cfg) {
    if (!outcome.ok()) return 0.0;
    const StructuredOutput& out = outcome.output();
    if (out.boxes.has_value())
        for (const BoxPrediction& box : *out.boxes)
            if (!clip(box.position, extent)) return 0.0;
    return cfg.alpha;
}

double selection_reward(const StructuredOutput& out, const ScoringContext& ctx,
                        const RewardConfig& cfg) {
    if (ctx.variant == VariantTag::cf) return 0.0;
    if (!out.boxes.has_value() || out.boxes->empty()) return -cfg.gamma_empty;

    double sum_pos = 0.0;
    double sum_neg = 0.0;
    for (const BoxPrediction& box : *out.boxes) {
        // A box clipped away entirely overlaps nothing but still counts in |B|.
        if (auto clipped = clip(box.position, ctx.extent)) {
            sum_pos += max_overlap(*clipped, ctx.partition.evidence);
            sum_neg += max_overlap(*clipped, ctx.partition.irrelevant);
        }
    }
    const double n = static_cast<double>(out.boxes->size());
    return cfg.beta_pos * (sum_pos / n) - cfg.beta_neg * (sum_neg / n);
}

RewardBreakdown composite_reward(const ParseOutcome& outcome, const ScoringContext& ctx,
                                 const RewardConfig& cfg) {
    RewardBreakdown breakdown;
    breakdown.r_fmt = format_reward(outcome, ctx.extent, cfg);
    if (outcome.ok()) {
        breakdown.r_ans = answer_reward(outcome.output(), ctx, cfg);
        breakdown.r_sel = selection_reward(outcome.output(), ctx, cfg);
    } else {
        breakdown.r_ans = answer_reward_from_indicators(false, false, ctx.variant, cfg);
        breakdown.r_sel = ctx.variant == VariantTag::cf ? 0.0 : -cfg.gamma_empty;
    }
    breakdown.total = breakdown.r_ans + cfg.lambda1 * breakdown.r_fmt + cfg.lambda2 * breakdown.r_sel;
    return breakdown;
}

}  // namespace defacto
