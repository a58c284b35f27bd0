// SPDX-License-Identifier: Apache-2.0
//
// RGB image buffer plus binary portable pixmap (P6) decode/encode and P5
// graymap output. P6 with maxval 255 is the bit-exact baseline format; the
// decoder rejects anything else.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqt/binio.hpp"

namespace iqt {

// H x W x 3, row-major, samples promoted from 8-bit to float in [0, 1].
struct ImageBuffer {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data;

    ImageBuffer() = default;
    ImageBuffer(std::size_t h, std::size_t w) : height(h), width(w), data(h * w * 3, 0.0f) {}

    float& at(std::size_t r, std::size_t c, std::size_t ch) { return data[(r * width + c) * 3 + ch]; }
    float at(std::size_t r, std::size_t c, std::size_t ch) const { return data[(r * width + c) * 3 + ch]; }

    bool same_dims(const ImageBuffer& other) const { return height == other.height && width == other.width; }
};

namespace detail {

class PnmScanner {
public:
    PnmScanner(std::string name, std::vector<std::uint8_t> bytes) : r_(std::move(name), std::move(bytes)) {}

    binio::Reader& reader() { return r_; }

    // Whitespace and '#' comments separate header tokens.
    void skip_separators() {
        while (!r_.at_end()) {
            std::uint8_t c = peek();
            if (c == '#') {
                while (!r_.at_end() && peek() != '\n') r_.u8("comment");
            } else if (is_space(c)) {
                r_.u8("whitespace");
            } else {
                return;
            }
        }
    }

    std::size_t uint_token(const char* what) {
        skip_separators();
        if (r_.at_end() || !is_digit(peek()))
            r_.fail(std::string("expected unsigned integer for ") + what);
        std::size_t v = 0;
        while (!r_.at_end() && is_digit(peek())) {
            v = v * 10 + (r_.u8(what) - '0');
            if (v > 0xffffffffull) r_.fail(std::string(what) + " overflows");
        }
        return v;
    }

    static bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f'; }
    static bool is_digit(std::uint8_t c) { return c >= '0' && c <= '9'; }

private:
    std::uint8_t peek() { return r_.peek_u8("header"); }

    binio::Reader r_;
};

} // namespace detail

inline ImageBuffer decode_ppm(const std::filesystem::path& path) {
    detail::PnmScanner sc(path.string(), binio::read_file(path));
    binio::Reader& r = sc.reader();
    r.expect_magic("P6");
    const std::size_t w = sc.uint_token("width");
    const std::size_t h = sc.uint_token("height");
    const std::size_t maxval = sc.uint_token("maxval");
    if (w == 0 || h == 0) r.fail("image dimensions must be positive");
    if (maxval != 255) r.fail("unsupported maxval " + std::to_string(maxval) + " (only 255)");
    // exactly one whitespace byte between maxval and the pixel payload
    std::uint8_t sep = r.u8("header separator");
    if (!detail::PnmScanner::is_space(sep)) r.fail("expected single whitespace before pixel data");

    ImageBuffer img(h, w);
    const std::size_t n = h * w * 3;
    r.need(n, "pixel data");
    for (std::size_t i = 0; i < n; ++i) img.data[i] = static_cast<float>(r.u8("pixel")) / 255.0f;
    return img;
}

inline void encode_ppm(const ImageBuffer& img, const std::filesystem::path& path) {
    std::string out;
    out += "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.reserve(out.size() + img.data.size());
    for (float v : img.data) {
        const float clamped = std::clamp(v, 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(clamped * 255.0f))));
    }
    binio::write_file(path, out);
}

// 8-bit grayscale portable graymap; `gray` is h*w bytes row-major.
inline void write_pgm(const std::filesystem::path& path, std::size_t h, std::size_t w,
                      const std::vector<std::uint8_t>& gray) {
    if (gray.size() != h * w) throw std::invalid_argument("write_pgm: payload size does not match dimensions");
    std::string out;
    out += "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(gray.data()), gray.size());
    binio::write_file(path, out);
}

inline ImageBuffer crop(const ImageBuffer& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
    if (top + h > img.height || left + w > img.width)
        throw std::invalid_argument("crop: window " + std::to_string(h) + "x" + std::to_string(w) + " at (" +
                                    std::to_string(top) + ", " + std::to_string(left) + ") exceeds image " +
                                    std::to_string(img.height) + "x" + std::to_string(img.width));
    ImageBuffer out(h, w);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch) out.at(r, c, ch) = img.at(top + r, left + c, ch);
    return out;
}

inline ImageBuffer flip_horizontal(const ImageBuffer& img) {
    ImageBuffer out(img.height, img.width);
    for (std::size_t r = 0; r < img.height; ++r)
        for (std::size_t c = 0; c < img.width; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch) out.at(r, c, ch) = img.at(r, img.width - 1 - c, ch);
    return out;
}

// One quarter turn clockwise: out(r, c) = in(H-1-c, r).
inline ImageBuffer rotate90_cw(const ImageBuffer& img) {
    ImageBuffer out(img.width, img.height);
    for (std::size_t r = 0; r < out.height; ++r)
        for (std::size_t c = 0; c < out.width; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch) out.at(r, c, ch) = img.at(img.height - 1 - c, r, ch);
    return out;
}

} // namespace iqt
