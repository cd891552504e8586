#include "defacto/geometry.hpp"

#include <algorithm>
#include <stdexcept>

namespace defacto {

double iou(const BBox& a, const BBox& b) {
    if (!a.valid() || !b.valid())
        throw std::invalid_argument("iou: degenerate box");

    const long long ix = std::max(0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const long long iy = std::max(0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const long long inter = ix * iy;
    if (inter == 0) return 0.0;

    const long long uni = a.area() + b.area() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double max_overlap(const BBox& b, std::span<const BBox> regions) {
    double best = 0.0;
    for (const BBox& r : regions) best = std::max(best, iou(b, r));
    return best;
}

std::optional<BBox> clip(const BBox& raw, const ImageExtent& extent) {
    if (!extent.valid())
        throw std::invalid_argument("clip: invalid extent");
    BBox out;
    out.x1 = std::clamp(raw.x1, 0, extent.width);
    out.y1 = std::clamp(raw.y1, 0, extent.height);
    out.x2 = std::clamp(raw.x2, 0, extent.width);
    out.y2 = std::clamp(raw.y2, 0, extent.height);
    if (out.x1 >= out.x2 || out.y1 >= out.y2) return std::nullopt;
    return out;
}

}  // namespace defacto
