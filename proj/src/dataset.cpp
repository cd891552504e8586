#include "defacto/dataset.hpp"

#include "defacto/hash.hpp"
#include "defacto/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace defacto {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string trim_copy(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::set<std::string> word_tokens(std::string_view s) {
    std::istringstream in(normalize_answer(s));
    std::set<std::string> tokens;
    std::string token;
    while (in >> token) tokens.insert(token);
    return tokens;
}

int variant_rank(VariantTag tag) {
    switch (tag) {
        case VariantTag::pos: return 0;
        case VariantTag::cf: return 1;
        case VariantTag::rand: return 2;
    }
    return 3;
}

ordered_json box_to_json(const BBox& b) {
    return ordered_json::array({b.x1, b.y1, b.x2, b.y2});
}

BBox box_from_json(const ordered_json& j) {
    if (!j.is_array() || j.size() != 4)
        throw std::runtime_error("manifest: box must be a 4-element array");
    return BBox{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

ordered_json boxes_to_json(const std::vector<BBox>& boxes) {
    ordered_json arr = ordered_json::array();
    for (const BBox& b : boxes) arr.push_back(box_to_json(b));
    return arr;
}

std::vector<BBox> boxes_from_json(const ordered_json& j) {
    std::vector<BBox> out;
    for (const auto& item : j) out.push_back(box_from_json(item));
    return out;
}

bool is_abstention_label(const std::string& label) {
    return normalize_answer(label) == "unknown";
}

}  // namespace

DescriptorSet DescriptorSet::from_phrases(const std::vector<std::string>& phrases) {
    DescriptorSet set;
    std::set<std::string> seen;
    for (const std::string& phrase : phrases) {
        std::string cleaned = trim_copy(phrase);
        if (cleaned.empty()) continue;
        if (seen.insert(cleaned).second) set.descriptors.push_back(std::move(cleaned));
    }
    if (set.descriptors.empty())
        throw std::invalid_argument("DescriptorSet: no usable phrases");
    return set;
}

bool match_ocr(const ScoredCandidate& candidate, const DescriptorSet& descriptors) {
    if (candidate.source != CandidateSource::ocr || !candidate.ocr_text.has_value())
        throw std::invalid_argument("match_ocr: candidate is not an OCR region");

    const std::set<std::string> text_tokens = word_tokens(*candidate.ocr_text);
    if (text_tokens.empty()) return false;
    for (const std::string& descriptor : descriptors.descriptors) {
        const std::set<std::string> desc_tokens = word_tokens(descriptor);
        if (desc_tokens.empty()) continue;
        std::size_t inter = 0;
        for (const std::string& t : text_tokens) inter += desc_tokens.count(t);
        const std::size_t uni = text_tokens.size() + desc_tokens.size() - inter;
        if (uni > 0 && static_cast<double>(inter) / static_cast<double>(uni) >= 0.5) return true;
    }
    return false;
}

RegionPartition partition_candidates(std::span<const ScoredCandidate> candidates,
                                     const DescriptorSet& descriptors, double tau) {
    if (!(tau > 0.0 && tau < 1.0))
        throw std::invalid_argument("partition: tau must lie in (0,1)");
    if (candidates.empty()) throw EmptyCandidatesError{};

    RegionPartition partition;
    for (const ScoredCandidate& candidate : candidates) {
        double best = 0.0;
        for (const auto& [_, score] : candidate.grounding) best = std::max(best, score);
        bool evidence = best > tau;  // strict, per the threshold rule
        if (!evidence && candidate.source == CandidateSource::ocr)
            evidence = match_ocr(candidate, descriptors);
        (evidence ? partition.evidence : partition.irrelevant).push_back(candidate.box);
    }
    return partition;
}

DatasetBuilder::DatasetBuilder(std::filesystem::path out_dir, BuilderConfig cfg)
    : out_dir_(std::move(out_dir)), cfg_(std::move(cfg)) {
    std::filesystem::create_directories(out_dir_ / "images");
}

BuildOutput DatasetBuilder::build_instances(const Raster& image,
                                            const std::string& source_image_path,
                                            const std::string& question,
                                            const std::string& answer,
                                            const RegionPartition& partition,
                                            std::uint64_t seed) const {
    BuildOutput result;
    const std::string record_key = to_hex16(fnv1a64(source_image_path + "\n" + question));

    auto store_variant = [&](const Raster& raster) {
        const std::vector<std::uint8_t> bytes = encode_png(raster);
        const std::string name = to_hex16(fnv1a64(bytes)) + ".png";
        const std::filesystem::path path = out_dir_ / "images" / name;
        if (!std::filesystem::exists(path)) {
            // Concurrent workers may race on the same content hash; write to a
            // private temp file and rename atomically (same bytes either way).
            const std::filesystem::path tmp =
                path.string() + "." + to_hex16(mix_seed(seed, fnv1a64(record_key))) + ".tmp";
            {
                std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
                if (!out) throw std::runtime_error("cannot write: " + tmp.string());
                out.write(reinterpret_cast<const char*>(bytes.data()),
                          static_cast<std::streamsize>(bytes.size()));
                if (!out) throw std::runtime_error("short write: " + tmp.string());
            }
            std::filesystem::rename(tmp, path);
        }
        return "images/" + name;
    };

    auto emit = [&](VariantTag variant, const Raster& raster, std::string label,
                    std::vector<BBox> masked) {
        TrainingInstance inst;
        inst.instance_id = record_key + "-" + std::string(to_string(variant));
        inst.variant = variant;
        inst.image_path = store_variant(raster);
        inst.source_image_path = source_image_path;
        inst.question = question;
        inst.label = std::move(label);
        inst.evidence = partition.evidence;
        inst.irrelevant = partition.irrelevant;
        inst.masked = std::move(masked);
        inst.seed = seed;
        result.instances.push_back(std::move(inst));
    };

    emit(VariantTag::pos, image, answer, {});

    if (partition.evidence.empty()) {
        result.warnings.push_back(record_key + ": no evidence regions, emitting pos only");
        return result;
    }

    emit(VariantTag::cf, mask_regions(image, partition.evidence, cfg_.fill),
         cfg_.abstention_label, partition.evidence);

    if (partition.irrelevant.empty()) {
        result.warnings.push_back(record_key + ": no irrelevant regions, rand variant omitted");
        return result;
    }

    const std::size_t k = std::min(partition.evidence.size(), partition.irrelevant.size());
    Rng rng(seed);
    std::vector<std::size_t> chosen = rng.sample_indices(partition.irrelevant.size(), std::max<std::size_t>(k, 1));
    std::sort(chosen.begin(), chosen.end());
    std::vector<BBox> masked;
    masked.reserve(chosen.size());
    for (std::size_t idx : chosen) masked.push_back(partition.irrelevant[idx]);

    const Raster rand_raster = mask_regions(image, masked, cfg_.fill);
    emit(VariantTag::rand, rand_raster, answer, std::move(masked));
    return result;
}

std::size_t write_manifest(std::span<const TrainingInstance> instances,
                           const std::filesystem::path& path) {
    std::vector<const TrainingInstance*> sorted;
    sorted.reserve(instances.size());
    for (const TrainingInstance& inst : instances) sorted.push_back(&inst);
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const TrainingInstance* a, const TrainingInstance* b) {
                         if (a->source_image_path != b->source_image_path)
                             return a->source_image_path < b->source_image_path;
                         if (a->question != b->question) return a->question < b->question;
                         return variant_rank(a->variant) < variant_rank(b->variant);
                     });

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write: " + path.string());
    for (const TrainingInstance* inst : sorted) {
        ordered_json line;
        line["instance_id"] = inst->instance_id;
        line["variant"] = std::string(to_string(inst->variant));
        line["image_path"] = inst->image_path;
        line["source_image_path"] = inst->source_image_path;
        line["question"] = inst->question;
        line["label"] = inst->label;
        line["evidence"] = boxes_to_json(inst->evidence);
        line["irrelevant"] = boxes_to_json(inst->irrelevant);
        line["masked"] = boxes_to_json(inst->masked);
        line["seed"] = inst->seed;
        out << line.dump() << '\n';
    }
    if (!out) throw std::runtime_error("short write: " + path.string());
    return sorted.size();
}

std::vector<TrainingInstance> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
    std::vector<TrainingInstance> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim_copy(line).empty()) continue;
        ordered_json j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw std::runtime_error("manifest line " + std::to_string(lineno) + ": not a JSON object");
        TrainingInstance inst;
        inst.instance_id = j.at("instance_id").get<std::string>();
        inst.variant = variant_from_string(j.at("variant").get<std::string>());
        inst.image_path = j.at("image_path").get<std::string>();
        inst.source_image_path = j.at("source_image_path").get<std::string>();
        inst.question = j.at("question").get<std::string>();
        inst.label = j.at("label").get<std::string>();
        inst.evidence = boxes_from_json(j.at("evidence"));
        inst.irrelevant = boxes_from_json(j.at("irrelevant"));
        inst.masked = boxes_from_json(j.at("masked"));
        inst.seed = j.at("seed").get<std::uint64_t>();
        out.push_back(std::move(inst));
    }
    return out;
}

namespace {

bool box_inside(const BBox& b, const ImageExtent& extent) {
    return b.valid() && b.x2 <= extent.width && b.y2 <= extent.height;
}

// Pixel scan: every differing pixel must lie inside one of the allowed boxes.
std::optional<std::pair<int, int>> diff_outside(const Raster& base, const Raster& variant,
                                                const std::vector<BBox>& allowed) {
    for (int y = 0; y < base.height(); ++y)
        for (int x = 0; x < base.width(); ++x) {
            if (base.pixel(x, y) == variant.pixel(x, y)) continue;
            bool covered = false;
            for (const BBox& b : allowed)
                if (b.contains(x, y)) { covered = true; break; }
            if (!covered) return std::make_pair(x, y);
        }
    return std::nullopt;
}

}  // namespace

std::vector<Violation> validate_dataset(const std::filesystem::path& manifest_path,
                                        const std::filesystem::path& images_root) {
    std::vector<Violation> violations;
    auto report = [&](const TrainingInstance& inst, std::string category, std::string detail) {
        violations.push_back({inst.instance_id, std::move(category), std::move(detail)});
    };

    const std::vector<TrainingInstance> instances = read_manifest(manifest_path);

    std::map<std::pair<std::string, std::string>, const TrainingInstance*> pos_by_record;
    for (const TrainingInstance& inst : instances)
        if (inst.variant == VariantTag::pos)
            pos_by_record[{inst.source_image_path, inst.question}] = &inst;

    std::map<std::string, Raster> raster_cache;
    auto load_raster = [&](const std::string& rel) -> const Raster* {
        auto it = raster_cache.find(rel);
        if (it != raster_cache.end()) return &it->second;
        const std::filesystem::path path = images_root / rel;
        if (!std::filesystem::exists(path)) return nullptr;
        auto [pos, _] = raster_cache.emplace(rel, read_png(path));
        return &pos->second;
    };

    for (const TrainingInstance& inst : instances) {
        const Raster* raster = load_raster(inst.image_path);
        if (!raster) {
            report(inst, "missing-file", inst.image_path);
            continue;
        }
        const ImageExtent extent = raster->extent();

        for (const auto* list : {&inst.evidence, &inst.irrelevant, &inst.masked})
            for (const BBox& b : *list)
                if (!box_inside(b, extent))
                    report(inst, "invalid-box", "box outside extent or degenerate");

        for (const BBox& b : inst.evidence)
            if (std::find(inst.irrelevant.begin(), inst.irrelevant.end(), b) != inst.irrelevant.end())
                report(inst, "partition-overlap", "box present in both evidence and irrelevant");

        const auto key = std::make_pair(inst.source_image_path, inst.question);
        const TrainingInstance* pos_sibling =
            pos_by_record.count(key) ? pos_by_record.at(key) : nullptr;

        switch (inst.variant) {
            case VariantTag::pos:
                if (!inst.masked.empty()) report(inst, "masked-rule", "pos variant must mask nothing");
                if (inst.label.empty()) report(inst, "label-rule", "pos label empty");
                break;
            case VariantTag::cf:
                if (inst.masked != inst.evidence)
                    report(inst, "masked-rule", "cf variant must mask exactly the evidence set");
                if (!is_abstention_label(inst.label))
                    report(inst, "label-rule", "cf label must be the abstention label");
                break;
            case VariantTag::rand: {
                if (inst.masked.empty() && !inst.irrelevant.empty())
                    report(inst, "masked-rule", "rand variant must mask at least one region");
                for (const BBox& b : inst.masked)
                    if (std::find(inst.irrelevant.begin(), inst.irrelevant.end(), b) ==
                        inst.irrelevant.end())
                        report(inst, "masked-rule", "rand masked box is not an irrelevant region");
                if (pos_sibling && inst.label != pos_sibling->label)
                    report(inst, "label-rule", "rand label differs from pos label");
                break;
            }
        }

        if (inst.variant != VariantTag::pos) {
            if (!pos_sibling) {
                report(inst, "missing-pos-sibling", "no pos variant for this record");
            } else if (const Raster* base = load_raster(pos_sibling->image_path)) {
                if (!(base->extent() == extent)) {
                    report(inst, "variant-locality", "extent differs from pos raster");
                } else if (auto bad = diff_outside(*base, *raster, inst.masked)) {
                    report(inst, "variant-locality",
                           "pixel (" + std::to_string(bad->first) + "," +
                               std::to_string(bad->second) + ") differs outside masked regions");
                }
            }
        }
    }
    return violations;
}

}  // namespace defacto
