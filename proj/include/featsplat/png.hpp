// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "featsplat/common.hpp"

namespace featsplat {

// Minimal 8-bit PNG codec (gray / RGB / RGBA, no interlace) on top of zlib.
// Enough for image ingest, label maps and render export.
struct PngImage {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1, 3 or 4
    std::vector<std::uint8_t> pixels;  // row-major, channel-innermost
};

namespace png_detail {

inline void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32_be(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void write_chunk(std::vector<std::uint8_t>& out, const char type[5],
                        const std::vector<std::uint8_t>& data) {
    put_u32_be(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uLong crc = ::crc32(0L, out.data() + crc_start, static_cast<uInt>(4 + data.size()));
    put_u32_be(out, static_cast<std::uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace png_detail

inline std::vector<std::uint8_t> png_encode(const PngImage& img) {
    require(img.channels == 1 || img.channels == 3 || img.channels == 4,
            "png: unsupported channel count");
    require(img.pixels.size() ==
                static_cast<std::size_t>(img.width) * img.height * img.channels,
            "png: pixel buffer size mismatch");

    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    std::vector<std::uint8_t> raw;
    raw.reserve((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), img.pixels.begin() + y * stride,
                   img.pixels.begin() + (y + 1) * stride);
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw ValidationError("png: deflate failed");
    compressed.resize(bound);

    std::vector<std::uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<std::uint8_t> ihdr;
    png_detail::put_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
    png_detail::put_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : (img.channels == 3 ? 2 : 6));
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    png_detail::write_chunk(out, "IHDR", ihdr);
    png_detail::write_chunk(out, "IDAT", compressed);
    png_detail::write_chunk(out, "IEND", {});
    return out;
}

inline PngImage png_decode(const std::vector<std::uint8_t>& bytes) {
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    require(bytes.size() > 8 && std::memcmp(bytes.data(), sig, 8) == 0, "png: bad signature");

    PngImage img;
    int bit_depth = 0, color_type = 0;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = png_detail::get_u32_be(bytes.data() + pos);
        require(pos + 12 + len <= bytes.size(), "png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* data = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            require(len == 13, "png: bad IHDR");
            img.width = static_cast<int>(png_detail::get_u32_be(data));
            img.height = static_cast<int>(png_detail::get_u32_be(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            require(bit_depth == 8, "png: only 8-bit depth supported");
            require(color_type == 0 || color_type == 2 || color_type == 6,
                    "png: only gray/RGB/RGBA supported");
            require(data[12] == 0, "png: interlaced images unsupported");
            img.channels = color_type == 0 ? 1 : (color_type == 2 ? 3 : 4);
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    require(img.width > 0 && img.height > 0 && !idat.empty(), "png: missing IHDR or IDAT");

    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(img.height) * (stride + 1));
    z_stream zs{};
    require(inflateInit(&zs) == Z_OK, "png: inflate init failed");
    zs.next_in = idat.data();
    zs.avail_in = static_cast<uInt>(idat.size());
    zs.next_out = raw.data();
    zs.avail_out = static_cast<uInt>(raw.size());
    const int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    require(rc == Z_STREAM_END && zs.avail_out == 0, "png: corrupt or truncated IDAT stream");

    img.pixels.resize(static_cast<std::size_t>(img.height) * stride);
    const int bpp = img.channels;
    for (int y = 0; y < img.height; ++y) {
        const std::uint8_t filter = raw[y * (stride + 1)];
        const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
        std::uint8_t* dst = img.pixels.data() + y * stride;
        const std::uint8_t* prev = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<std::size_t>(bpp) ? dst[i - bpp] : 0;
            const int b = prev ? prev[i] : 0;
            const int c = (prev && i >= static_cast<std::size_t>(bpp)) ? prev[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += png_detail::paeth(a, b, c); break;
                default: throw ValidationError("png: unknown scanline filter");
            }
            dst[i] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return img;
}

inline void png_save(const std::string& path, const PngImage& img) {
    const std::vector<std::uint8_t> bytes = png_encode(img);
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "png: cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), "png: write failed for '" + path + "'");
}

inline PngImage png_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "png: cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return png_decode(bytes);
}

}  // namespace featsplat
