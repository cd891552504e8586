#include "defacto/raster.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace defacto {

Raster::Raster(ImageExtent extent, Rgb fill) : extent_(extent) {
    if (!extent.valid())
        throw std::invalid_argument("Raster: invalid extent");
    planes_[0] = Plane::Constant(extent.height, extent.width, fill.r);
    planes_[1] = Plane::Constant(extent.height, extent.width, fill.g);
    planes_[2] = Plane::Constant(extent.height, extent.width, fill.b);
}

bool Raster::operator==(const Raster& other) const {
    if (!(extent_ == other.extent_)) return false;
    for (int c = 0; c < 3; ++c)
        if (planes_[static_cast<std::size_t>(c)] != other.planes_[static_cast<std::size_t>(c)])
            return false;
    return true;
}

Raster mask_regions(const Raster& image, std::span<const BBox> regions, Rgb fill) {
    Raster out = image;
    const std::array<std::uint8_t, 3> v{fill.r, fill.g, fill.b};
    for (const BBox& raw : regions) {
        auto boxed = clip(raw, image.extent());
        if (!boxed) continue;
        const BBox& b = *boxed;
        for (int c = 0; c < 3; ++c)
            out.plane(c).block(b.y1, b.x1, b.y2 - b.y1, b.x2 - b.x1)
                .setConstant(v[static_cast<std::size_t>(c)]);
    }
    return out;
}

namespace {

std::vector<std::uint8_t> interleave(const Raster& image) {
    const int w = image.width();
    const int h = image.height();
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3);
    std::size_t i = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Rgb p = image.pixel(x, y);
            buf[i++] = p.r;
            buf[i++] = p.g;
            buf[i++] = p.b;
        }
    return buf;
}

Raster deinterleave(const std::uint8_t* buf, int w, int h) {
    Raster out(ImageExtent{w, h});
    std::size_t i = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            out.set_pixel(x, y, Rgb{buf[i], buf[i + 1], buf[i + 2]});
            i += 3;
        }
    return out;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Raster& image) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width());
    png.height = static_cast<png_uint_32>(image.height());
    png.format = PNG_FORMAT_RGB;

    const std::vector<std::uint8_t> pixels = interleave(image);

    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&png, nullptr, &size, 0, pixels.data(), 0, nullptr))
        throw std::runtime_error(std::string("png encode (size pass): ") + png.message);

    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&png, out.data(), &size, 0, pixels.data(), 0, nullptr))
        throw std::runtime_error(std::string("png encode: ") + png.message);
    out.resize(size);
    return out;
}

Raster decode_png(std::span<const std::uint8_t> bytes) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
        throw std::runtime_error(std::string("png decode: ") + png.message);

    png.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr))
        throw std::runtime_error(std::string("png decode: ") + png.message);

    return deinterleave(pixels.data(), static_cast<int>(png.width), static_cast<int>(png.height));
}

Raster read_png(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

void write_png(const Raster& image, const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = encode_png(image);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write: " + path.string());
}

void write_ppm(const Raster& image, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write: " + path.string());
    out << "P6\n" << image.width() << " " << image.height() << "\n255\n";
    const std::vector<std::uint8_t> pixels = interleave(image);
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw std::runtime_error("short write: " + path.string());
}

ImageExtent read_png_extent(const std::filesystem::path& path) {
    static const std::uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    std::uint8_t head[24];
    if (!in.read(reinterpret_cast<char*>(head), sizeof(head)))
        throw std::runtime_error("not a PNG (truncated): " + path.string());
    if (std::memcmp(head, kSignature, 8) != 0 || std::memcmp(head + 12, "IHDR", 4) != 0)
        throw std::runtime_error("not a PNG: " + path.string());
    auto be32 = [&](int off) {
        return (static_cast<std::uint32_t>(head[off]) << 24) |
               (static_cast<std::uint32_t>(head[off + 1]) << 16) |
               (static_cast<std::uint32_t>(head[off + 2]) << 8) |
               static_cast<std::uint32_t>(head[off + 3]);
    };
    return ImageExtent{static_cast<int>(be32(16)), static_cast<int>(be32(20))};
}

}  // namespace defacto
