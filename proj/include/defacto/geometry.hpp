#pragma once

#include <optional>
#include <span>
#include <vector>

namespace defacto {

struct ImageExtent {
    int width = 0;
    int height = 0;

    bool valid() const { return width >= 1 && height >= 1; }
    bool operator==(const ImageExtent&) const = default;
};

/// Axis-aligned pixel rectangle, half-open: covers [x1,x2) x [y1,y2).
/// Valid boxes have nonnegative coordinates and strictly positive area;
/// raw (parsed, unclipped) values may violate that until clip() runs.
struct BBox {
    int x1 = 0;
    int y1 = 0;
    int x2 = 0;
    int y2 = 0;

    bool valid() const { return x1 >= 0 && y1 >= 0 && x1 < x2 && y1 < y2; }
    long long area() const {
        return static_cast<long long>(x2 - x1) * static_cast<long long>(y2 - y1);
    }
    bool contains(int px, int py) const { return px >= x1 && px < x2 && py >= y1 && py < y2; }

    bool operator==(const BBox&) const = default;
    auto operator<=>(const BBox&) const = default;
};

/// Evidence/irrelevant split of a candidate region set. The two lists are
/// disjoint and together cover exactly the candidates they were built from.
struct RegionPartition {
    std::vector<BBox> evidence;
    std::vector<BBox> irrelevant;
};

/// Intersection-over-union with exact integer areas, divided once at the end.
/// Throws std::invalid_argument on degenerate (zero-area or negative) boxes.
double iou(const BBox& a, const BBox& b);

/// max_r IoU(b, r) over the set; 0 for an empty set.
double max_overlap(const BBox& b, std::span<const BBox> regions);

/// Clamp to [0,width] x [0,height]; nullopt when nothing of the box survives.
std::optional<BBox> clip(const BBox& raw, const ImageExtent& extent);

}  // namespace defacto
