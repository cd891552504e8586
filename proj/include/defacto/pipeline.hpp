#pragma once

#include "defacto/clients.hpp"
#include "defacto/dataset.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace defacto {

struct SourceRecord {
    std::string image;
    std::string question;
    std::string answer;
};

/// `{"image":…, "question":…, "answer":…}` per line.
std::vector<SourceRecord> read_source_jsonl(const std::filesystem::path& path);

/// Merge detector, OCR and RPN boxes into one deduplicated candidate set.
/// Detector boxes attach grounding scores (merged onto an overlapping
/// existing candidate at IoU > dedup_iou, keeping the max per phrase); RPN
/// proposals that duplicate any scored or OCR candidate are dropped, so the
/// partition built later covers exactly this set. Boxes are clipped to the
/// extent; fully-outside boxes are discarded.
std::vector<ScoredCandidate> assemble_candidates(std::span<const BBox> proposals,
                                                 std::span<const OcrItem> ocr_items,
                                                 std::span<const Detection> detections,
                                                 const ImageExtent& extent, double dedup_iou);

struct BuildDatasetOptions {
    std::filesystem::path source_jsonl;
    std::filesystem::path out_dir;
    BuilderConfig builder;
    std::uint64_t seed = 0;
    int workers = 1;
    double failure_ceiling = 0.10;
};

struct BuildDatasetReport {
    std::size_t records = 0;
    std::size_t instances = 0;
    std::size_t failures = 0;
    bool aborted = false;  // failure rate exceeded the ceiling; no manifest written
    std::vector<std::string> warnings;
    std::vector<std::string> errors;
    std::filesystem::path manifest_path;
};

/// Per record: descriptors -> propose/ocr/detect -> assemble -> partition ->
/// variants, then one sorted manifest at the end. Per-record failures are
/// collected, not fatal, unless their rate exceeds the ceiling.
BuildDatasetReport build_dataset(EvidenceServices& services, const BuildDatasetOptions& options);

}  // namespace defacto
