#pragma once

#include "defacto/geometry.hpp"
#include "defacto/raster.hpp"
#include "defacto/reward.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace defacto {

/// Key descriptor phrases extracted from a question; trimmed, non-empty,
/// deduplicated preserving first occurrence.
struct DescriptorSet {
    std::vector<std::string> descriptors;

    static DescriptorSet from_phrases(const std::vector<std::string>& phrases);  // throws if empty
};

enum class CandidateSource { rpn, ocr };

/// A candidate region with per-descriptor grounding scores. ocr_text is
/// present iff source == ocr.
struct ScoredCandidate {
    BBox box;
    CandidateSource source = CandidateSource::rpn;
    std::optional<std::string> ocr_text;
    std::map<std::string, double> grounding;  // descriptor -> score in [0,1]
};

struct TrainingInstance {
    std::string instance_id;
    VariantTag variant = VariantTag::pos;
    std::string image_path;         // variant raster, relative to the manifest
    std::string source_image_path;
    std::string question;
    std::string label;              // y, or the abstention label for cf
    std::vector<BBox> evidence;
    std::vector<BBox> irrelevant;
    std::vector<BBox> masked;
    std::uint64_t seed = 0;
};

struct EmptyCandidatesError : std::runtime_error {
    EmptyCandidatesError() : std::runtime_error("partition: empty candidate list") {}
};

/// Threshold split: evidence = {r : max_k grounding(r,k) > tau} (strict), plus
/// OCR candidates whose text matches a descriptor; the rest are irrelevant.
/// Requires
/// 0 < tau < 1 and a non-empty candidate list.
RegionPartition partition_candidates(std::span<const ScoredCandidate> candidates,
                                     const DescriptorSet& descriptors, double tau);

/// Word-token Jaccard >= 0.5 between the normalized OCR text and any
/// normalized descriptor. Requires source == ocr.
bool match_ocr(const ScoredCandidate& candidate, const DescriptorSet& descriptors);

struct BuilderConfig {
    double tau = 0.35;
    Rgb fill = {0, 0, 0};
    std::string abstention_label = "Unknown";
    double dedup_iou = 0.5;  // proposals overlapping a scored/ocr box more than this are duplicates
};

struct BuildOutput {
    std::vector<TrainingInstance> instances;
    std::vector<std::string> warnings;
};

/// Realizes the three-variant construction. Writes variant rasters as
/// content-addressed PNGs under <out_dir>/images and returns the instances
/// (paths relative to out_dir). Emits pos only when evidence is empty and
/// skips rand when there are no irrelevant regions.
class DatasetBuilder {
public:
    DatasetBuilder(std::filesystem::path out_dir, BuilderConfig cfg);

    BuildOutput build_instances(const Raster& image, const std::string& source_image_path,
                                const std::string& question, const std::string& answer,
                                const RegionPartition& partition, std::uint64_t seed) const;

    const BuilderConfig& config() const { return cfg_; }

private:
    std::filesystem::path out_dir_;
    BuilderConfig cfg_;
};

/// One JSON object per line, fields in TrainingInstance order, instances
/// sorted by (source image, question, variant pos<cf<rand). Byte-identical
/// across reruns on identical input. Returns the line count.
std::size_t write_manifest(std::span<const TrainingInstance> instances,
                           const std::filesystem::path& path);

std::vector<TrainingInstance> read_manifest(const std::filesystem::path& path);

struct Violation {
    std::string instance_id;
    std::string category;
    std::string detail;
};

/// Re-checks every TrainingInstance invariant: files exist, boxes are valid
/// and inside the raster extent, the partition is disjoint, per-variant
/// masked/label rules hold, and the pixel diff against the pos sibling stays
/// inside the masked regions.
std::vector<Violation> validate_dataset(const std::filesystem::path& manifest_path,
                                        const std::filesystem::path& images_root);

}  // namespace defacto
