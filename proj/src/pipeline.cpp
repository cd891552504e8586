#include "defacto/pipeline.hpp"

#include "defacto/hash.hpp"
#include "defacto/raster.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <future>
#include <stdexcept>

namespace defacto {

namespace {

using nlohmann::json;

}  // namespace

std::vector<SourceRecord> read_source_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open source file: " + path.string());
    std::vector<SourceRecord> records;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("image") || !j.contains("question") ||
            !j.contains("answer"))
            throw std::runtime_error("source line " + std::to_string(lineno) +
                                     ": expected {image, question, answer}");
        records.push_back(SourceRecord{j["image"].get<std::string>(),
                                       j["question"].get<std::string>(),
                                       j["answer"].get<std::string>()});
    }
    return records;
}

std::vector<ScoredCandidate> assemble_candidates(std::span<const BBox> proposals,
                                                 std::span<const OcrItem> ocr_items,
                                                 std::span<const Detection> detections,
                                                 const ImageExtent& extent, double dedup_iou) {
    std::vector<ScoredCandidate> candidates;

    auto overlapping = [&](const BBox& box) -> ScoredCandidate* {
        for (ScoredCandidate& c : candidates)
            if (iou(c.box, box) > dedup_iou) return &c;
        return nullptr;
    };

    for (const OcrItem& item : ocr_items) {
        auto clipped = clip(item.box, extent);
        if (!clipped) continue;
        ScoredCandidate c;
        c.box = *clipped;
        c.source = CandidateSource::ocr;
        c.ocr_text = item.text;
        candidates.push_back(std::move(c));
    }

    for (const Detection& det : detections) {
        auto clipped = clip(det.box, extent);
        if (!clipped) continue;
        if (ScoredCandidate* existing = overlapping(*clipped)) {
            double& score = existing->grounding[det.phrase];
            score = std::max(score, det.score);
        } else {
            ScoredCandidate c;
            c.box = *clipped;
            c.source = CandidateSource::rpn;
            c.grounding[det.phrase] = det.score;
            candidates.push_back(std::move(c));
        }
    }

    for (const BBox& proposal : proposals) {
        auto clipped = clip(proposal, extent);
        if (!clipped) continue;
        if (overlapping(*clipped)) continue;  // duplicate of a scored/ocr region
        ScoredCandidate c;
        c.box = *clipped;
        c.source = CandidateSource::rpn;
        candidates.push_back(std::move(c));
    }
    return candidates;
}

namespace {

struct RecordOutcome {
    std::vector<TrainingInstance> instances;
    std::vector<std::string> warnings;
    std::vector<std::string> errors;
};

RecordOutcome process_record(const SourceRecord& record, std::size_t index,
                             const std::filesystem::path& base_dir, EvidenceServices& services,
                             const DatasetBuilder& builder, const BuildDatasetOptions& options) {
    RecordOutcome outcome;
    const std::string where = "record " + std::to_string(index) + " (" + record.image + ")";
    try {
        std::filesystem::path image_path = record.image;
        if (image_path.is_relative()) image_path = base_dir / image_path;
        const Raster image = read_png(image_path);
        const ImageRef ref = ImageRef::from_path(image_path);

        const DescriptorSet descriptors = services.extract_descriptors(ref, record.question);
        const std::vector<BBox> proposals = services.propose_regions(ref);
        const std::vector<OcrItem> ocr_items = services.read_text(ref);
        const std::vector<Detection> detections = services.detect(ref, descriptors);

        const std::vector<ScoredCandidate> candidates = assemble_candidates(
            proposals, ocr_items, detections, image.extent(), options.builder.dedup_iou);
        const RegionPartition partition =
            partition_candidates(candidates, descriptors, options.builder.tau);

        const std::uint64_t record_seed =
            mix_seed(options.seed, fnv1a64(record.image + "\n" + record.question));
        BuildOutput built = builder.build_instances(image, record.image, record.question,
                                                    record.answer, partition, record_seed);
        outcome.instances = std::move(built.instances);
        outcome.warnings = std::move(built.warnings);
    } catch (const std::exception& e) {
        outcome.errors.push_back(where + ": " + e.what());
    }
    return outcome;
}

}  // namespace

BuildDatasetReport build_dataset(EvidenceServices& services, const BuildDatasetOptions& options) {
    const std::vector<SourceRecord> records = read_source_jsonl(options.source_jsonl);
    const std::filesystem::path base_dir = options.source_jsonl.parent_path();

    std::filesystem::create_directories(options.out_dir);
    const DatasetBuilder builder(options.out_dir, options.builder);

    BuildDatasetReport report;
    report.records = records.size();

    std::vector<RecordOutcome> outcomes(records.size());
    const int workers = std::max(1, options.workers);
    if (workers == 1) {
        for (std::size_t i = 0; i < records.size(); ++i)
            outcomes[i] = process_record(records[i], i, base_dir, services, builder, options);
    } else {
        std::atomic<std::size_t> next{0};
        auto drain = [&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= records.size()) return;
                outcomes[i] = process_record(records[i], i, base_dir, services, builder, options);
            }
        };
        std::vector<std::future<void>> pool;
        for (int w = 0; w < workers; ++w) pool.push_back(std::async(std::launch::async, drain));
        for (auto& f : pool) f.get();
    }

    std::vector<TrainingInstance> instances;
    for (RecordOutcome& outcome : outcomes) {
        for (TrainingInstance& inst : outcome.instances) instances.push_back(std::move(inst));
        for (std::string& w : outcome.warnings) report.warnings.push_back(std::move(w));
        if (!outcome.errors.empty()) ++report.failures;
        for (std::string& e : outcome.errors) report.errors.push_back(std::move(e));
    }

    if (!records.empty() &&
        static_cast<double>(report.failures) / static_cast<double>(records.size()) >
            options.failure_ceiling) {
        report.aborted = true;
        return report;
    }

    report.manifest_path = options.out_dir / "manifest.jsonl";
    report.instances = write_manifest(instances, report.manifest_path);
    return report;
}

}  // namespace defacto
