#pragma once

#include "defacto/geometry.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace defacto {

struct Rgb {
    std::uint8_t r = 0;
    std::uint8_t g = 0;
    std::uint8_t b = 0;

    bool operator==(const Rgb&) const = default;
};

/// One 8-bit channel, indexed (y, x).
using Plane = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// 8-bit RGB raster stored as three channel planes.
class Raster {
public:
    Raster() = default;
    Raster(ImageExtent extent, Rgb fill = {255, 255, 255});

    ImageExtent extent() const { return extent_; }
    int width() const { return extent_.width; }
    int height() const { return extent_.height; }

    Rgb pixel(int x, int y) const {
        return {planes_[0](y, x), planes_[1](y, x), planes_[2](y, x)};
    }
    void set_pixel(int x, int y, Rgb c) {
        planes_[0](y, x) = c.r;
        planes_[1](y, x) = c.g;
        planes_[2](y, x) = c.b;
    }

    Plane& plane(int channel) { return planes_[static_cast<std::size_t>(channel)]; }
    const Plane& plane(int channel) const { return planes_[static_cast<std::size_t>(channel)]; }

    bool operator==(const Raster& other) const;

private:
    ImageExtent extent_;
    std::array<Plane, 3> planes_;
};

/// Every pixel inside any region becomes `fill`; everything else is
/// bit-identical to the input. Regions are clipped to the extent first.
Raster mask_regions(const Raster& image, std::span<const BBox> regions, Rgb fill);

std::vector<std::uint8_t> encode_png(const Raster& image);
Raster decode_png(std::span<const std::uint8_t> bytes);
Raster read_png(const std::filesystem::path& path);
void write_png(const Raster& image, const std::filesystem::path& path);

/// Binary PPM (P6); trivially scannable by test oracles.
void write_ppm(const Raster& image, const std::filesystem::path& path);

/// Width/height from the IHDR chunk without decoding pixel data.
ImageExtent read_png_extent(const std::filesystem::path& path);

}  // namespace defacto
