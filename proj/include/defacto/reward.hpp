#pragma once

#include "defacto/geometry.hpp"
#include "defacto/output_schema.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace defacto {

/// Which of the three training forms an instance belongs to.
enum class VariantTag { pos, rand, cf };

std::string_view to_string(VariantTag tag);
VariantTag variant_from_string(std::string_view s);  // throws std::invalid_argument

/// All reward coefficients. The paper constrains only gamma_corr > gamma_guess;
/// every magnitude here is a configurable default.
struct RewardConfig {
    double lambda1 = 0.5;      // composite weight on the format reward
    double lambda2 = 1.0;      // composite weight on the selection reward
    double gamma_unk = 0.5;    // penalty for abstaining on pos/rand
    double rho_unk = 1.0;      // reward for abstaining on cf
    double gamma_guess = 0.5;  // penalty for any concrete answer on cf
    double gamma_corr = 1.0;   // extra penalty for a correct answer on cf
    double alpha = 0.5;        // format bonus
    double beta_pos = 1.0;     // weight on evidence overlap
    double beta_neg = 0.5;     // weight on irrelevant overlap
    double gamma_empty = 0.5;  // penalty for an empty box set on pos/rand

    /// Throws std::invalid_argument unless all coefficients are >= 0 and
    /// gamma_corr > gamma_guess.
    void validate() const;

    /// key=value file with keys named exactly like the fields above.
    /// Unknown keys are rejected; the result is validated.
    static RewardConfig load(const std::filesystem::path& path);
};

struct ScoringContext {
    VariantTag variant = VariantTag::pos;
    std::string gold_answer;     // for cf instances this is the ORIGINAL answer
    RegionPartition partition;   // evidence/irrelevant split of the original image
    ImageExtent extent;
};

struct RewardBreakdown {
    double r_ans = 0.0;
    double r_fmt = 0.0;
    double r_sel = 0.0;
    double total = 0.0;

    bool operator==(const RewardBreakdown&) const = default;
};

/// Lowercase, punctuation to spaces, articles (a/an/the) dropped, whitespace
/// collapsed. Answer correctness is exact match of two normalized strings.
std::string normalize_answer(std::string_view s);

/// The answer-reward branch table on raw (acc, unk) indicators; exposed so
/// the full variant x abstention x correctness table is directly testable
/// and so the unparseable-output path (acc=0, unk=0) shares one definition.
double answer_reward_from_indicators(bool acc, bool unk, VariantTag variant,
                                     const RewardConfig& cfg);

double answer_reward(const StructuredOutput& out, const ScoringContext& ctx,
                     const RewardConfig& cfg);

/// alpha when the outcome parsed and every predicted box clips to nonzero
/// area inside the extent; 0 otherwise.
double format_reward(const ParseOutcome& outcome, const ImageExtent& extent,
                     const RewardConfig& cfg);

double selection_reward(const StructuredOutput& out, const ScoringContext& ctx,
                        const RewardConfig& cfg);

/// total = r_ans + lambda1 * r_fmt + lambda2 * r_sel. Defined for every
/// outcome: unparseable responses score with acc=0/unk=0 and an empty box set.
RewardBreakdown composite_reward(const ParseOutcome& outcome, const ScoringContext& ctx,
                                 const RewardConfig& cfg);

}  // namespace defacto
