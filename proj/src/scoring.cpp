#include "defacto/scoring.hpp"

#include "defacto/output_schema.hpp"
#include "defacto/raster.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <fstream>
#include <future>
#include <map>
#include <mutex>
#include <stdexcept>

namespace defacto {

namespace {

using ordered_json = nlohmann::ordered_json;

}  // namespace

ScoringContext make_scoring_context(const TrainingInstance& instance,
                                    const TrainingInstance* pos_sibling,
                                    const std::filesystem::path& images_root) {
    ScoringContext ctx;
    ctx.variant = instance.variant;
    if (instance.variant == VariantTag::cf) {
        if (!pos_sibling)
            throw std::runtime_error("cf instance without a pos sibling: " + instance.instance_id);
        ctx.gold_answer = pos_sibling->label;
    } else {
        ctx.gold_answer = instance.label;
    }
    if (ctx.gold_answer.empty())
        throw std::runtime_error("empty gold answer for instance: " + instance.instance_id);
    ctx.partition.evidence = instance.evidence;
    ctx.partition.irrelevant = instance.irrelevant;
    ctx.extent = read_png_extent(images_root / instance.image_path);
    return ctx;
}

ScoreReport score_responses(const ScoreOptions& options) {
    options.reward.validate();

    const std::vector<TrainingInstance> instances = read_manifest(options.manifest);
    std::map<std::string, const TrainingInstance*> by_id;
    std::map<std::pair<std::string, std::string>, const TrainingInstance*> pos_by_record;
    for (const TrainingInstance& inst : instances) {
        by_id[inst.instance_id] = &inst;
        if (inst.variant == VariantTag::pos)
            pos_by_record[{inst.source_image_path, inst.question}] = &inst;
    }
    const std::filesystem::path images_root = options.manifest.parent_path();

    std::ifstream in(options.responses);
    if (!in) throw std::runtime_error("cannot open responses: " + options.responses.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        lines.push_back(line);
    }

    // Extents are read per image; cache contexts per instance id instead of
    // touching the PNG header once per response line.
    std::map<std::string, ScoringContext> context_cache;
    std::mutex cache_mutex;
    auto context_for = [&](const TrainingInstance& inst) -> ScoringContext {
        std::lock_guard lock(cache_mutex);
        auto it = context_cache.find(inst.instance_id);
        if (it != context_cache.end()) return it->second;
        const auto key = std::make_pair(inst.source_image_path, inst.question);
        const TrainingInstance* pos_sibling =
            pos_by_record.count(key) ? pos_by_record.at(key) : nullptr;
        ScoringContext ctx = make_scoring_context(inst, pos_sibling, images_root);
        context_cache.emplace(inst.instance_id, ctx);
        return ctx;
    };

    struct LineResult {
        std::string out_line;
        std::string error;  // empty when scored cleanly
    };
    std::vector<LineResult> results(lines.size());

    auto score_line = [&](std::size_t i) {
        const std::size_t lineno = i + 1;
        ordered_json j = ordered_json::parse(lines[i], nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("instance_id") ||
            !j.contains("response") || !j["instance_id"].is_string() || !j["response"].is_string()) {
            ordered_json err;
            err["line"] = lineno;
            err["error"] = "malformed response line";
            results[i] = {err.dump(), "line " + std::to_string(lineno) + ": malformed response line"};
            return;
        }
        const std::string id = j["instance_id"].get<std::string>();
        auto found = by_id.find(id);
        if (found == by_id.end()) {
            ordered_json err;
            err["line"] = lineno;
            err["instance_id"] = id;
            err["error"] = "unknown instance_id";
            results[i] = {err.dump(), "line " + std::to_string(lineno) + ": unknown instance_id " + id};
            return;
        }
        try {
            const ScoringContext ctx = context_for(*found->second);
            const ParseOutcome outcome = parse(j["response"].get<std::string>());
            const RewardBreakdown breakdown = composite_reward(outcome, ctx, options.reward);
            ordered_json out;
            out["instance_id"] = id;
            out["r_ans"] = breakdown.r_ans;
            out["r_fmt"] = breakdown.r_fmt;
            out["r_sel"] = breakdown.r_sel;
            out["total"] = breakdown.total;
            results[i] = {out.dump(), ""};
        } catch (const std::exception& e) {
            ordered_json err;
            err["line"] = lineno;
            err["instance_id"] = id;
            err["error"] = e.what();
            results[i] = {err.dump(), "line " + std::to_string(lineno) + ": " + e.what()};
        }
    };

    const int workers = std::max(1, options.workers);
    if (workers == 1) {
        for (std::size_t i = 0; i < lines.size(); ++i) score_line(i);
    } else {
        std::atomic<std::size_t> next{0};
        auto drain = [&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= lines.size()) return;
                score_line(i);
            }
        };
        std::vector<std::future<void>> pool;
        for (int w = 0; w < workers; ++w) pool.push_back(std::async(std::launch::async, drain));
        for (auto& f : pool) f.get();
    }

    std::ofstream out(options.out, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write: " + options.out.string());
    ScoreReport report;
    for (const LineResult& r : results) {
        out << r.out_line << '\n';
        if (r.error.empty()) {
            ++report.scored;
        } else {
            ++report.errors;
            report.error_lines.push_back(r.error);
        }
    }
    if (!out) throw std::runtime_error("short write: " + options.out.string());
    return report;
}

}  // namespace defacto
