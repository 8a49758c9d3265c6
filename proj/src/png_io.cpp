#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <set>

#include "owps/error.hpp"
#include "owps/image.hpp"

namespace owps {

std::size_t BinaryMask::popcount() const {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

namespace png {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Raster {
    int height = 0, width = 0, channels = 0, depth = 0;
    std::vector<std::uint8_t> bytes;  // rows packed, 16-bit samples big-endian
};

[[noreturn]] void png_fail(png_structp, png_const_charp message) { throw Error(ErrorKind::Io, message); }

void write_raster(const std::filesystem::path& path, const Raster& r) {
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, nullptr);
    png_infop info = png_create_info_struct(png);
    try {
        png_init_io(png, file.get());
        const int color = r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
        png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), r.depth, color,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        const std::size_t stride = static_cast<std::size_t>(r.width * r.channels * (r.depth / 8));
        for (int y = 0; y < r.height; ++y) {
            png_write_row(png, const_cast<png_bytep>(r.bytes.data() + static_cast<std::size_t>(y) * stride));
        }
        png_write_end(png, nullptr);
    } catch (const Error& e) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorKind::Io, path.string() + ": " + e.what());
    }
    png_destroy_write_struct(&png, &info);
}

Raster read_raster(const std::filesystem::path& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw Error(ErrorKind::Io, "cannot open " + path.string());
    std::uint8_t sig[8] = {};
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw Error(ErrorKind::Corrupt, path.string() + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, nullptr);
    png_infop info = png_create_info_struct(png);
    Raster r;
    try {
        png_init_io(png, file.get());
        png_set_sig_bytes(png, 8);
        png_read_info(png, info);
        const int color = png_get_color_type(png, info);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
        if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
        png_read_update_info(png, info);
        r.width = static_cast<int>(png_get_image_width(png, info));
        r.height = static_cast<int>(png_get_image_height(png, info));
        r.channels = png_get_channels(png, info);
        r.depth = png_get_bit_depth(png, info);
        const std::size_t stride = png_get_rowbytes(png, info);
        r.bytes.resize(stride * static_cast<std::size_t>(r.height));
        std::vector<png_bytep> rows(static_cast<std::size_t>(r.height));
        for (int y = 0; y < r.height; ++y) rows[static_cast<std::size_t>(y)] = r.bytes.data() + stride * static_cast<std::size_t>(y);
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    } catch (const Error& e) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrorKind::Corrupt, path.string() + ": " + e.what());
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return r;
}

std::uint8_t quantize(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

Raster gray8(int h, int w) { return {h, w, 1, 8, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w))}; }

Raster expect(Raster r, const std::filesystem::path& path, int channels, int depth) {
    if (r.channels != channels || r.depth != depth) {
        throw Error(ErrorKind::Corrupt, path.string() + ": expected " + std::to_string(channels) + " channel(s) at " +
                                            std::to_string(depth) + " bits, found " + std::to_string(r.channels) +
                                            " at " + std::to_string(r.depth));
    }
    return r;
}

}  // namespace

void write_rgb8(const std::filesystem::path& path, const Image& image) {
    Raster r{image.height, image.width, 3, 8, std::vector<std::uint8_t>(static_cast<std::size_t>(3 * image.height * image.width))};
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < 3; ++c) r.bytes[static_cast<std::size_t>((y * image.width + x) * 3 + c)] = quantize(image.at(c, y, x));
        }
    }
    write_raster(path, r);
}

Image read_rgb8(const std::filesystem::path& path) {
    Raster r = read_raster(path);
    if (r.depth != 8 || (r.channels != 3 && r.channels != 1)) {
        throw Error(ErrorKind::Corrupt, path.string() + ": expected 8-bit RGB or gray");
    }
    Image image(r.height, r.width);
    for (int y = 0; y < r.height; ++y) {
        for (int x = 0; x < r.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const int src = r.channels == 3 ? c : 0;
                image.at(c, y, x) = r.bytes[static_cast<std::size_t>((y * r.width + x) * r.channels + src)] / 255.0f;
            }
        }
    }
    return image;
}

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
    Raster r = gray8(mask.height, mask.width);
    for (std::size_t i = 0; i < mask.data.size(); ++i) r.bytes[i] = mask.data[i] ? 255 : 0;
    write_raster(path, r);
}

BinaryMask read_mask(const std::filesystem::path& path) {
    Raster r = expect(read_raster(path), path, 1, 8);
    BinaryMask mask(r.height, r.width);
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        if (r.bytes[i] != 0 && r.bytes[i] != 255) throw Error(ErrorKind::Corrupt, path.string() + ": mask is not 0/255");
        mask.data[i] = r.bytes[i] ? 1 : 0;
    }
    return mask;
}

void write_prob(const std::filesystem::path& path, const ProbMap& map) {
    Raster r = gray8(map.height, map.width);
    for (std::size_t i = 0; i < map.data.size(); ++i) r.bytes[i] = quantize(map.data[i]);
    write_raster(path, r);
}

ProbMap read_prob(const std::filesystem::path& path) {
    Raster r = expect(read_raster(path), path, 1, 8);
    ProbMap map(r.height, r.width);
    for (std::size_t i = 0; i < map.data.size(); ++i) map.data[i] = r.bytes[i] / 255.0f;
    return map;
}

void write_instances(const std::filesystem::path& path, const InstanceMap& map) {
    Raster r{map.height, map.width, 1, 16, std::vector<std::uint8_t>(static_cast<std::size_t>(2 * map.height * map.width))};
    for (std::size_t i = 0; i < map.labels.size(); ++i) {
        r.bytes[2 * i] = static_cast<std::uint8_t>(map.labels[i] >> 8);
        r.bytes[2 * i + 1] = static_cast<std::uint8_t>(map.labels[i] & 0xff);
    }
    write_raster(path, r);
}

InstanceMap read_instances(const std::filesystem::path& path) {
    Raster r = expect(read_raster(path), path, 1, 16);
    InstanceMap map(r.height, r.width);
    std::set<std::uint16_t> distinct;
    for (std::size_t i = 0; i < map.labels.size(); ++i) {
        map.labels[i] = static_cast<std::uint16_t>((r.bytes[2 * i] << 8) | r.bytes[2 * i + 1]);
        if (map.labels[i]) distinct.insert(map.labels[i]);
    }
    map.count = static_cast<int>(distinct.size());
    return map;
}

}  // namespace png

}  // namespace owps
