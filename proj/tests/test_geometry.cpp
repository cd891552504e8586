#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "defacto/geometry.hpp"
#include "defacto/raster.hpp"
#include "defacto/rng.hpp"

#include "corpus.hpp"
#include "oracles.hpp"

#include <filesystem>
#include <fstream>

using namespace defacto;
using namespace defacto::testing;

namespace {

BBox random_box(Rng& rng, int grid) {
    for (;;) {
        const int x1 = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(grid)));
        const int y1 = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(grid)));
        const int x2 = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(grid) + 1));
        const int y2 = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(grid) + 1));
        const BBox b{std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2)};
        if (b.valid()) return b;
    }
}

}  // namespace

TEST_CASE("iou identity and disjoint cases") {
    CHECK(iou(BBox{0, 0, 4, 4}, BBox{0, 0, 4, 4}) == 1.0);
    CHECK(iou(BBox{0, 0, 2, 2}, BBox{5, 5, 7, 7}) == 0.0);
}

TEST_CASE("iou partial overlap matches the enumeration oracle exactly") {
    const BBox a{0, 0, 2, 2};
    const BBox b{1, 0, 3, 2};
    const PixelCounts counts = enumerate_iou(a, b);
    CHECK(counts.intersection == 2);
    CHECK(counts.covered == 6);
    CHECK(iou(a, b) == 2.0 / 6.0);
    CHECK(iou(a, b) == enumerate_iou_score(a, b));
}

TEST_CASE("iou rejects degenerate boxes") {
    CHECK_THROWS_AS(iou(BBox{0, 0, 0, 4}, BBox{0, 0, 4, 4}), std::invalid_argument);
    CHECK_THROWS_AS(iou(BBox{0, 0, 4, 4}, BBox{2, 2, 2, 2}), std::invalid_argument);
    CHECK_THROWS_AS(iou(BBox{-1, 0, 4, 4}, BBox{0, 0, 4, 4}), std::invalid_argument);
}

TEST_CASE("iou symmetry, bounds, and oracle equivalence on random boxes") {
    Rng rng(2024);
    for (int i = 0; i < 500; ++i) {
        const BBox a = random_box(rng, 64);
        const BBox b = random_box(rng, 64);
        const double v = iou(a, b);
        CHECK(v == iou(b, a));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == enumerate_iou_score(a, b));
        if (v == 1.0) CHECK(a == b);
        if (a == b) CHECK(v == 1.0);
    }
}

TEST_CASE("max_overlap") {
    const std::vector<BBox> regions{BBox{0, 0, 4, 4}, BBox{9, 9, 10, 10}};
    CHECK(max_overlap(BBox{0, 0, 4, 4}, regions) == 1.0);
    CHECK(max_overlap(BBox{0, 0, 4, 4}, {}) == 0.0);

    const std::vector<BBox> set{BBox{1, 0, 3, 2}, BBox{5, 5, 7, 7}};
    CHECK(max_overlap(BBox{0, 0, 2, 2}, set) == 2.0 / 6.0);
}

TEST_CASE("clip clamps and rejects") {
    const ImageExtent extent{4, 4};
    CHECK(clip(BBox{-2, 0, 3, 3}, extent) == BBox{0, 0, 3, 3});
    CHECK(clip(BBox{0, 0, 10, 10}, extent) == BBox{0, 0, 4, 4});
    CHECK(clip(BBox{5, 5, 9, 9}, extent) == std::nullopt);
    CHECK(clip(BBox{2, 2, 2, 9}, extent) == std::nullopt);
}

TEST_CASE("mask_regions paints exactly the requested cells") {
    const Raster white(ImageExtent{4, 4}, Rgb{255, 255, 255});
    const std::vector<BBox> region{BBox{0, 0, 2, 2}};
    const Raster masked = mask_regions(white, region, Rgb{0, 0, 0});

    int black = 0;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            if (masked.pixel(x, y) == Rgb{0, 0, 0}) {
                ++black;
                CHECK(covered_by_any(x, y, region));
            } else {
                CHECK(masked.pixel(x, y) == Rgb{255, 255, 255});
            }
        }
    CHECK(black == 4);
}

TEST_CASE("mask_regions with no regions is the identity") {
    const Raster img = render_scene(corpus_records()[0], 0);
    CHECK(mask_regions(img, {}, Rgb{0, 0, 0}) == img);
}

TEST_CASE("mask locality and idempotence on overlapping regions") {
    const Raster img = render_scene(corpus_records()[2], 2);
    const std::vector<BBox> regions{BBox{4, 4, 20, 20}, BBox{12, 12, 30, 24}};
    const Raster masked = mask_regions(img, regions, Rgb{0, 0, 0});

    for (auto [x, y] : pixel_diff(img, masked)) CHECK(covered_by_any(x, y, regions));
    // Fill differs from every covered scene pixel, so the diff is the union.
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            if (covered_by_any(x, y, regions)) CHECK(masked.pixel(x, y) == Rgb{0, 0, 0});

    CHECK(mask_regions(masked, regions, Rgb{0, 0, 0}) == masked);
}

TEST_CASE("mask locality property on random regions") {
    Rng rng(7);
    const Raster img = render_scene(corpus_records()[1], 1);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<BBox> regions;
        for (int k = 0; k < 3; ++k) regions.push_back(random_box(rng, 64));
        const Raster masked = mask_regions(img, regions, Rgb{10, 200, 30});
        for (auto [x, y] : pixel_diff(img, masked)) CHECK(covered_by_any(x, y, regions));
    }
}

TEST_CASE("png encode/decode round trip is pixel exact") {
    Rng rng(99);
    Raster img(ImageExtent{23, 17});
    for (int y = 0; y < 17; ++y)
        for (int x = 0; x < 23; ++x)
            img.set_pixel(x, y,
                          Rgb{static_cast<std::uint8_t>(rng.bounded(256)),
                              static_cast<std::uint8_t>(rng.bounded(256)),
                              static_cast<std::uint8_t>(rng.bounded(256))});
    const auto bytes = encode_png(img);
    CHECK(decode_png(bytes) == img);
}

TEST_CASE("png file io and extent sniffing") {
    const auto dir = make_temp_dir("geometry_png");
    const Raster img(ImageExtent{9, 5}, Rgb{1, 2, 3});
    write_png(img, dir / "img.png");
    CHECK(read_png(dir / "img.png") == img);
    CHECK(read_png_extent(dir / "img.png") == ImageExtent{9, 5});

    std::ofstream(dir / "junk.png") << "not a png";
    CHECK_THROWS(read_png_extent(dir / "junk.png"));
}

TEST_CASE("ppm writer emits a scannable P6 payload") {
    const auto dir = make_temp_dir("geometry_ppm");
    Raster img(ImageExtent{2, 1});
    img.set_pixel(0, 0, Rgb{255, 0, 0});
    img.set_pixel(1, 0, Rgb{0, 255, 0});
    write_ppm(img, dir / "img.ppm");

    std::ifstream in(dir / "img.ppm", std::ios::binary);
    std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string expected_header = "P6\n2 1\n255\n";
    REQUIRE(contents.size() == expected_header.size() + 6);
    CHECK(contents.substr(0, expected_header.size()) == expected_header);
    const auto* px = reinterpret_cast<const unsigned char*>(contents.data() + expected_header.size());
    CHECK(px[0] == 255);
    CHECK(px[1] == 0);
    CHECK(px[2] == 0);
    CHECK(px[3] == 0);
    CHECK(px[4] == 255);
    CHECK(px[5] == 0);
}
