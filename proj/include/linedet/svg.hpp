// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "linedet/model.hpp"
#include "linedet/tensor.hpp"

namespace linedet {
namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n, std::uint32_t crc = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc ^= 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

inline std::uint32_t adler32(const std::uint8_t* data, std::size_t n) {
    std::uint32_t a = 1, b = 0;
    for (std::size_t i = 0; i < n; ++i) {
        a = (a + data[i]) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& payload) {
    auto be32 = [&](std::uint32_t v) {
        out.push_back(static_cast<std::uint8_t>(v >> 24));
        out.push_back(static_cast<std::uint8_t>(v >> 16));
        out.push_back(static_cast<std::uint8_t>(v >> 8));
        out.push_back(static_cast<std::uint8_t>(v));
    };
    be32(static_cast<std::uint32_t>(payload.size()));
    const std::size_t type_pos = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    be32(crc32(out.data() + type_pos, 4 + payload.size()));
}

}  // namespace detail

/// Encodes an 8-bit grayscale PNG using stored (uncompressed) deflate
/// blocks; no external compression library involved, deterministic output.
inline std::vector<std::uint8_t> encode_gray_png(const std::vector<std::uint8_t>& pixels, int width,
                                                 int height) {
    if (width < 1 || height < 1 ||
        pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
        throw std::invalid_argument("encode_gray_png: pixel buffer does not match dimensions");

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};

    std::vector<std::uint8_t> ihdr;
    auto be32 = [&](std::uint32_t v) {
        ihdr.push_back(static_cast<std::uint8_t>(v >> 24));
        ihdr.push_back(static_cast<std::uint8_t>(v >> 16));
        ihdr.push_back(static_cast<std::uint8_t>(v >> 8));
        ihdr.push_back(static_cast<std::uint8_t>(v));
    };
    be32(static_cast<std::uint32_t>(width));
    be32(static_cast<std::uint32_t>(height));
    ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // depth 8, grayscale, deflate, filter 0, no interlace
    detail::png_chunk(out, "IHDR", ihdr);

    // raw scanlines, each prefixed by filter byte 0
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(height) * (width + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + static_cast<std::size_t>(y) * width,
                   pixels.begin() + static_cast<std::size_t>(y + 1) * width);
    }

    std::vector<std::uint8_t> idat = {0x78, 0x01};  // zlib header, no preset dict
    std::size_t off = 0;
    while (off < raw.size()) {
        const std::size_t len = std::min<std::size_t>(65535, raw.size() - off);
        const bool final = off + len == raw.size();
        idat.push_back(final ? 1 : 0);
        idat.push_back(static_cast<std::uint8_t>(len & 0xFF));
        idat.push_back(static_cast<std::uint8_t>(len >> 8));
        idat.push_back(static_cast<std::uint8_t>(~len & 0xFF));
        idat.push_back(static_cast<std::uint8_t>((~len >> 8) & 0xFF));
        idat.insert(idat.end(), raw.begin() + off, raw.begin() + off + len);
        off += len;
        if (final) break;
    }
    const std::uint32_t adler = detail::adler32(raw.data(), raw.size());
    idat.push_back(static_cast<std::uint8_t>(adler >> 24));
    idat.push_back(static_cast<std::uint8_t>(adler >> 16));
    idat.push_back(static_cast<std::uint8_t>(adler >> 8));
    idat.push_back(static_cast<std::uint8_t>(adler));
    detail::png_chunk(out, "IDAT", idat);
    detail::png_chunk(out, "IEND", {});
    return out;
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    static const char* alphabet =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < bytes.size(); i += 3) {
        std::uint32_t v = static_cast<std::uint32_t>(bytes[i]) << 16;
        if (i + 1 < bytes.size()) v |= static_cast<std::uint32_t>(bytes[i + 1]) << 8;
        if (i + 2 < bytes.size()) v |= bytes[i + 2];
        out.push_back(alphabet[(v >> 18) & 63]);
        out.push_back(alphabet[(v >> 12) & 63]);
        out.push_back(i + 1 < bytes.size() ? alphabet[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < bytes.size() ? alphabet[v & 63] : '=');
    }
    return out;
}

/// Writes the page raster with one rectangle per prediction at or above the
/// confidence threshold. Stroke opacity follows the confidence. Predictions
/// are in normalized units of the reference page size; the rectangles land
/// on pixel coordinates via that scale, matching the embedded raster.
template <typename T>
void write_detection_svg(std::ostream& os, const Tensor<T>& image,
                         const std::vector<BoxPrediction>& preds, double conf_threshold,
                         int reference_height, int reference_width) {
    if (image.channels != 1)
        throw std::invalid_argument("write_detection_svg: image must be single-channel");
    std::vector<std::uint8_t> pixels(image.data.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        double v = static_cast<double>(image.data[i]);
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        pixels[i] = static_cast<std::uint8_t>(v * 255.0 + 0.5);
    }
    const auto png = encode_gray_png(pixels, image.width, image.height);

    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" "
          "xmlns:xlink=\"http://www.w3.org/1999/xlink\" width=\""
       << image.width << "\" height=\"" << image.height << "\" viewBox=\"0 0 " << image.width
       << " " << image.height << "\">\n";
    os << "  <image x=\"0\" y=\"0\" width=\"" << image.width << "\" height=\"" << image.height
       << "\" xlink:href=\"data:image/png;base64," << base64_encode(png) << "\"/>\n";
    for (const auto& p : preds) {
        if (p.confidence < conf_threshold) continue;
        os << "  <rect x=\"" << p.x * reference_width << "\" y=\"" << p.y * reference_height
           << "\" width=\"" << p.w * reference_width << "\" height=\"" << p.h * reference_height
           << "\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1\" stroke-opacity=\""
           << p.confidence << "\"/>\n";
    }
    os << "</svg>\n";
}

}  // namespace linedet
