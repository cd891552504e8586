#pragma once

#include "defacto/dataset.hpp"
#include "defacto/reward.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace defacto {

struct ScoreOptions {
    std::filesystem::path manifest;
    std::filesystem::path responses;  // JSONL: {"instance_id":…, "response":…}
    std::filesystem::path out;        // JSONL: {"instance_id", r_ans, r_fmt, r_sel, total}
    RewardConfig reward;
    int workers = 1;
};

struct ScoreReport {
    std::size_t scored = 0;
    std::size_t errors = 0;
    std::vector<std::string> error_lines;  // human-readable mirror of error records
};

/// Scores each response against its manifest instance, output in input order.
/// Unknown instance ids and malformed lines become per-line error records in
/// the output file rather than aborting the batch. For cf instances the gold
/// answer joined into the context is the pos sibling's label (the original
/// answer), never the abstention label.
ScoreReport score_responses(const ScoreOptions& options);

/// Context assembly shared with tests: variant/partition from the instance,
/// extent from the variant raster header, cf gold answer from the pos sibling.
ScoringContext make_scoring_context(const TrainingInstance& instance,
                                    const TrainingInstance* pos_sibling,
                                    const std::filesystem::path& images_root);

}  // namespace defacto
