#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "defacto/dataset.hpp"
#include "defacto/hash.hpp"
#include "defacto/pipeline.hpp"
#include "defacto/rng.hpp"

#include "corpus.hpp"
#include "oracles.hpp"

#include <fstream>
#include <sstream>

using namespace defacto;
using namespace defacto::testing;

namespace {

ScoredCandidate scored(const BBox& box, std::map<std::string, double> grounding) {
    ScoredCandidate c;
    c.box = box;
    c.source = CandidateSource::rpn;
    c.grounding = std::move(grounding);
    return c;
}

ScoredCandidate ocr_candidate(const BBox& box, std::string text) {
    ScoredCandidate c;
    c.box = box;
    c.source = CandidateSource::ocr;
    c.ocr_text = std::move(text);
    return c;
}

std::string file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const DescriptorSet kDescriptors = DescriptorSet::from_phrases({"the stop sign", "signboard"});

}  // namespace

TEST_CASE("descriptor sets trim, deduplicate, and reject empties") {
    const DescriptorSet set = DescriptorSet::from_phrases({" a man ", "a man", "", "man's shirt"});
    CHECK(set.descriptors == std::vector<std::string>{"a man", "man's shirt"});
    CHECK_THROWS_AS(DescriptorSet::from_phrases({"", "  "}), std::invalid_argument);
}

TEST_CASE("partition splits by strict threshold") {
    const std::vector<ScoredCandidate> candidates{
        scored(BBox{0, 0, 4, 4}, {{"signboard", 0.9}}),
        scored(BBox{8, 8, 12, 12}, {{"signboard", 0.3}}),
    };
    const RegionPartition p = partition_candidates(candidates, kDescriptors, 0.5);
    CHECK(p.evidence == std::vector<BBox>{BBox{0, 0, 4, 4}});
    CHECK(p.irrelevant == std::vector<BBox>{BBox{8, 8, 12, 12}});
}

TEST_CASE("all scores at or below tau leave the evidence set empty") {
    const std::vector<ScoredCandidate> candidates{
        scored(BBox{0, 0, 4, 4}, {{"signboard", 0.5}}),
        scored(BBox{8, 8, 12, 12}, {{"signboard", 0.2}}),
    };
    const RegionPartition p = partition_candidates(candidates, kDescriptors, 0.5);
    CHECK(p.evidence.empty());
    CHECK(p.irrelevant.size() == 2);
}

TEST_CASE("threshold comparison is strict") {
    const std::vector<ScoredCandidate> candidates{
        scored(BBox{0, 0, 4, 4}, {{"signboard", 0.51}}),
        scored(BBox{8, 8, 12, 12}, {{"signboard", 0.50}}),
    };
    const RegionPartition p = partition_candidates(candidates, kDescriptors, 0.5);
    CHECK(p.evidence == std::vector<BBox>{BBox{0, 0, 4, 4}});
}

TEST_CASE("ocr candidates join the evidence set by text match") {
    const std::vector<ScoredCandidate> candidates{
        ocr_candidate(BBox{0, 0, 4, 4}, "STOP"),
        ocr_candidate(BBox{8, 8, 12, 12}, "open 24h"),
    };
    const RegionPartition p = partition_candidates(candidates, kDescriptors, 0.5);
    CHECK(p.evidence == std::vector<BBox>{BBox{0, 0, 4, 4}});
    CHECK(p.irrelevant == std::vector<BBox>{BBox{8, 8, 12, 12}});
}

TEST_CASE("partition rejects an empty candidate list and bad tau") {
    CHECK_THROWS_AS(partition_candidates({}, kDescriptors, 0.5), EmptyCandidatesError);
    const std::vector<ScoredCandidate> one{scored(BBox{0, 0, 2, 2}, {})};
    CHECK_THROWS_AS(partition_candidates(one, kDescriptors, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(partition_candidates(one, kDescriptors, 1.0), std::invalid_argument);
}

TEST_CASE("raising tau never grows the evidence set") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ScoredCandidate> candidates;
        const std::size_t n = 1 + rng.bounded(8);
        for (std::size_t i = 0; i < n; ++i) {
            const int x = static_cast<int>(i) * 6;
            candidates.push_back(scored(BBox{x, 0, x + 4, 4}, {{"signboard", rng.uniform()}}));
        }
        const double t1 = 0.05 + 0.4 * rng.uniform();
        const double t2 = t1 + 0.3 * rng.uniform();
        const auto p1 = partition_candidates(candidates, kDescriptors, t1);
        const auto p2 = partition_candidates(candidates, kDescriptors, t2);
        CHECK(p2.evidence.size() <= p1.evidence.size());
        for (const BBox& b : p2.evidence)
            CHECK(std::find(p1.evidence.begin(), p1.evidence.end(), b) != p1.evidence.end());
    }
}

TEST_CASE("match_ocr token-overlap rule") {
    CHECK(match_ocr(ocr_candidate(BBox{0, 0, 2, 2}, "STOP"), kDescriptors));
    CHECK_FALSE(match_ocr(ocr_candidate(BBox{0, 0, 2, 2}, "open 24h"),
                          DescriptorSet::from_phrases({"the red cup"})));
    CHECK(match_ocr(ocr_candidate(BBox{0, 0, 2, 2}, "the stop sign"), kDescriptors));
    CHECK_THROWS_AS(match_ocr(scored(BBox{0, 0, 2, 2}, {}), kDescriptors), std::invalid_argument);
}

TEST_CASE("assemble_candidates merges detections and drops duplicate proposals") {
    const ImageExtent extent{64, 64};
    const std::vector<BBox> proposals{BBox{9, 9, 23, 23}, BBox{40, 8, 56, 24}};
    const std::vector<OcrItem> ocr_items{{BBox{10, 12, 22, 20}, "STOP", 0.98}};
    const std::vector<Detection> detections{{BBox{8, 8, 24, 24}, "signboard", 0.9},
                                            {BBox{8, 8, 24, 24}, "signboard", 0.7}};

    const auto candidates = assemble_candidates(proposals, ocr_items, detections, extent, 0.5);
    REQUIRE(candidates.size() == 3);  // ocr + detector box + one novel proposal
    CHECK(candidates[0].source == CandidateSource::ocr);
    CHECK(candidates[1].box == BBox{8, 8, 24, 24});
    CHECK(candidates[1].grounding.at("signboard") == 0.9);  // max of the two scores
    CHECK(candidates[2].box == BBox{40, 8, 56, 24});

    // Out-of-extent boxes are clipped, fully-outside ones discarded.
    const std::vector<BBox> wild{BBox{-4, -4, 6, 6}, BBox{200, 200, 220, 220}};
    const auto clipped = assemble_candidates(wild, {}, {}, extent, 0.5);
    REQUIRE(clipped.size() == 1);
    CHECK(clipped[0].box == BBox{0, 0, 6, 6});
}

TEST_CASE("build_instances constructs the three variants") {
    const auto dir = make_temp_dir("dataset_build");
    const Raster image = render_scene(corpus_records()[0], 0);
    RegionPartition partition;
    partition.evidence = {BBox{8, 8, 24, 24}};
    partition.irrelevant = {BBox{40, 8, 56, 24}, BBox{8, 40, 24, 56}, BBox{40, 40, 56, 56}};

    const DatasetBuilder builder(dir, BuilderConfig{});
    const BuildOutput built =
        builder.build_instances(image, "img.png", "What does the sign say?", "stop", partition, 7);
    REQUIRE(built.instances.size() == 3);

    const TrainingInstance& pos = built.instances[0];
    const TrainingInstance& cf = built.instances[1];
    const TrainingInstance& rnd = built.instances[2];
    CHECK(pos.variant == VariantTag::pos);
    CHECK(cf.variant == VariantTag::cf);
    CHECK(rnd.variant == VariantTag::rand);
    CHECK(pos.masked.empty());
    CHECK(cf.masked == partition.evidence);
    CHECK(cf.label == "Unknown");
    CHECK(pos.label == "stop");
    CHECK(rnd.label == "stop");
    CHECK(rnd.masked.size() == 1);  // min(evidence count, irrelevant count)
    for (const BBox& b : rnd.masked)
        CHECK(std::find(partition.irrelevant.begin(), partition.irrelevant.end(), b) !=
              partition.irrelevant.end());

    // Variant locality via the pixel-diff oracle on the stored rasters.
    const Raster pos_raster = read_png(dir / pos.image_path);
    const Raster cf_raster = read_png(dir / cf.image_path);
    const Raster rnd_raster = read_png(dir / rnd.image_path);
    CHECK(pos_raster == image);
    const auto cf_diff = pixel_diff(pos_raster, cf_raster);
    CHECK_FALSE(cf_diff.empty());
    for (auto [x, y] : cf_diff) CHECK(covered_by_any(x, y, cf.masked));
    const auto rnd_diff = pixel_diff(pos_raster, rnd_raster);
    CHECK_FALSE(rnd_diff.empty());
    for (auto [x, y] : rnd_diff) CHECK(covered_by_any(x, y, rnd.masked));
}

TEST_CASE("build_instances is deterministic in the seed") {
    const auto dir_a = make_temp_dir("dataset_det_a");
    const auto dir_b = make_temp_dir("dataset_det_b");
    const Raster image = render_scene(corpus_records()[2], 2);
    RegionPartition partition;
    partition.evidence = {BBox{20, 20, 36, 36}};
    partition.irrelevant = {BBox{44, 4, 60, 20}, BBox{44, 24, 60, 40}, BBox{2, 40, 30, 60}};

    const DatasetBuilder builder_a(dir_a, BuilderConfig{});
    const DatasetBuilder builder_b(dir_b, BuilderConfig{});
    const auto one = builder_a.build_instances(image, "i.png", "q", "dog", partition, 123);
    const auto two = builder_b.build_instances(image, "i.png", "q", "dog", partition, 123);
    REQUIRE(one.instances.size() == two.instances.size());
    for (std::size_t i = 0; i < one.instances.size(); ++i) {
        CHECK(one.instances[i].instance_id == two.instances[i].instance_id);
        CHECK(one.instances[i].masked == two.instances[i].masked);
        CHECK(one.instances[i].image_path == two.instances[i].image_path);
        CHECK(file_bytes(dir_a / one.instances[i].image_path) ==
              file_bytes(dir_b / two.instances[i].image_path));
    }

    // Some nearby seed picks a different random-mask subset.
    bool subset_varies = false;
    for (std::uint64_t seed = 124; seed < 134 && !subset_varies; ++seed) {
        const auto other = builder_a.build_instances(image, "i.png", "q", "dog", partition, seed);
        subset_varies = other.instances[2].masked != one.instances[2].masked;
    }
    CHECK(subset_varies);
}

TEST_CASE("degenerate partitions reduce the variant list") {
    const auto dir = make_temp_dir("dataset_degenerate");
    const Raster image(ImageExtent{32, 32}, Rgb{200, 100, 50});
    const DatasetBuilder builder(dir, BuilderConfig{});

    RegionPartition no_evidence;
    no_evidence.irrelevant = {BBox{0, 0, 8, 8}};
    const auto pos_only = builder.build_instances(image, "a.png", "q", "y", no_evidence, 1);
    REQUIRE(pos_only.instances.size() == 1);
    CHECK(pos_only.instances[0].variant == VariantTag::pos);
    CHECK_FALSE(pos_only.warnings.empty());

    RegionPartition no_irrelevant;
    no_irrelevant.evidence = {BBox{0, 0, 8, 8}};
    const auto no_rand = builder.build_instances(image, "b.png", "q", "y", no_irrelevant, 1);
    REQUIRE(no_rand.instances.size() == 2);
    CHECK(no_rand.instances[1].variant == VariantTag::cf);
    CHECK_FALSE(no_rand.warnings.empty());
}

TEST_CASE("manifest round trip, ordering, and determinism") {
    const auto dir = make_temp_dir("dataset_manifest");
    const Raster image(ImageExtent{16, 16}, Rgb{9, 9, 9});
    RegionPartition partition;
    partition.evidence = {BBox{0, 0, 4, 4}};
    partition.irrelevant = {BBox{8, 8, 12, 12}};

    const DatasetBuilder builder(dir, BuilderConfig{});
    auto built = builder.build_instances(image, "z.png", "q", "y", partition, 5);
    auto more = builder.build_instances(image, "a.png", "q2", "y2", partition, 5);
    std::vector<TrainingInstance> all = built.instances;
    all.insert(all.end(), more.instances.begin(), more.instances.end());

    const auto manifest = dir / "manifest.jsonl";
    CHECK(write_manifest(all, manifest) == 6);

    const auto parsed = read_manifest(manifest);
    REQUIRE(parsed.size() == 6);
    // Sorted by source image first: a.png block precedes z.png.
    CHECK(parsed[0].source_image_path == "a.png");
    CHECK(parsed[0].variant == VariantTag::pos);
    CHECK(parsed[1].variant == VariantTag::cf);
    CHECK(parsed[2].variant == VariantTag::rand);
    CHECK(parsed[3].source_image_path == "z.png");

    for (std::size_t i = 0; i < parsed.size(); ++i) {
        // Field-level equality through the round trip.
        const auto& original = parsed[i];
        std::vector<TrainingInstance> again{original};
        const auto tmp = dir / "one.jsonl";
        write_manifest(again, tmp);
        const auto back = read_manifest(tmp);
        REQUIRE(back.size() == 1);
        CHECK(back[0].instance_id == original.instance_id);
        CHECK(back[0].variant == original.variant);
        CHECK(back[0].image_path == original.image_path);
        CHECK(back[0].evidence == original.evidence);
        CHECK(back[0].irrelevant == original.irrelevant);
        CHECK(back[0].masked == original.masked);
        CHECK(back[0].seed == original.seed);
    }

    const std::string first = file_bytes(manifest);
    write_manifest(all, manifest);
    CHECK(fnv1a64(file_bytes(manifest)) == fnv1a64(first));

    const auto empty_manifest = dir / "empty.jsonl";
    CHECK(write_manifest({}, empty_manifest) == 0);
    CHECK(file_bytes(empty_manifest).empty());
}

TEST_CASE("manifest escapes awkward strings and stays line-oriented") {
    const auto dir = make_temp_dir("dataset_escape");
    const Raster image(ImageExtent{8, 8}, Rgb{1, 2, 3});
    RegionPartition partition;
    partition.evidence = {BBox{0, 0, 4, 4}};

    const DatasetBuilder builder(dir, BuilderConfig{});
    const std::string question = "what does \"this\"\nsay? \xc3\xa9";
    const std::string answer = "caf\xc3\xa9 \"stop\"";
    const auto built = builder.build_instances(image, "q/uoted \"img\".png", question, answer,
                                               partition, 2);
    const auto manifest = dir / "manifest.jsonl";
    write_manifest(built.instances, manifest);

    std::ifstream in(manifest);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == built.instances.size());  // embedded newline stayed escaped

    const auto parsed = read_manifest(manifest);
    REQUIRE(parsed.size() == built.instances.size());
    CHECK(parsed[0].question == question);
    CHECK(parsed[0].label == answer);
    CHECK(parsed[0].source_image_path == "q/uoted \"img\".png");
}

TEST_CASE("validate_dataset catches tampering and missing files") {
    const auto dir = make_temp_dir("dataset_validate");
    const Raster image = render_scene(corpus_records()[1], 1);
    RegionPartition partition;
    partition.evidence = {BBox{34, 34, 50, 50}};
    partition.irrelevant = {BBox{4, 4, 20, 20}, BBox{4, 34, 20, 50}};

    const DatasetBuilder builder(dir, BuilderConfig{});
    const auto built = builder.build_instances(image, "s1.png", "q", "red", partition, 11);
    const auto manifest = dir / "manifest.jsonl";
    write_manifest(built.instances, manifest);

    CHECK(validate_dataset(manifest, dir).empty());

    // Tamper with the cf raster outside its masked regions.
    const TrainingInstance& cf = built.instances[1];
    Raster tampered = read_png(dir / cf.image_path);
    tampered.set_pixel(62, 62, Rgb{1, 2, 3});  // outside every region
    write_png(tampered, dir / cf.image_path);
    auto violations = validate_dataset(manifest, dir);
    REQUIRE_FALSE(violations.empty());
    bool saw_locality = false;
    for (const auto& v : violations) saw_locality |= v.category == "variant-locality";
    CHECK(saw_locality);

    // Restore, then remove a raster entirely.
    write_png(read_png(dir / built.instances[0].image_path), dir / cf.image_path);
    std::filesystem::remove(dir / built.instances[2].image_path);
    violations = validate_dataset(manifest, dir);
    bool saw_missing = false;
    for (const auto& v : violations) saw_missing |= v.category == "missing-file";
    CHECK(saw_missing);
}

TEST_CASE("validate_dataset flags rule violations in the manifest itself") {
    const auto dir = make_temp_dir("dataset_validate_rules");
    const Raster image(ImageExtent{32, 32}, Rgb{100, 100, 100});
    RegionPartition partition;
    partition.evidence = {BBox{0, 0, 8, 8}};
    partition.irrelevant = {BBox{16, 16, 24, 24}};

    const DatasetBuilder builder(dir, BuilderConfig{});
    auto built = builder.build_instances(image, "x.png", "q", "y", partition, 3);

    // Corrupt the cf label and the rand masked list.
    built.instances[1].label = "definitely";
    built.instances[2].masked = {BBox{0, 0, 8, 8}};  // evidence box, not irrelevant
    const auto manifest = dir / "manifest.jsonl";
    write_manifest(built.instances, manifest);

    const auto violations = validate_dataset(manifest, dir);
    bool saw_label = false;
    bool saw_masked = false;
    for (const auto& v : violations) {
        saw_label |= v.category == "label-rule";
        saw_masked |= v.category == "masked-rule";
    }
    CHECK(saw_label);
    CHECK(saw_masked);
}
