// SPDX-License-Identifier: Apache-2.0
//
// Feature extraction backbone. The pretrained network is replaced by a small
// S-stage convolutional stem with frozen seeded-random weights; externally
// computed features can be supplied instead through IQTF feature files. Both
// honor the same structural contract: S equal-shape stages concatenated along
// channels, so total channels C = S * c.
//
// Extraction runs outside the autodiff graph; the backbone is frozen and no
// gradient ever flows into it.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqt/binio.hpp"
#include "iqt/image.hpp"
#include "iqt/rng.hpp"

namespace iqt {

// Rank-3 dense array, H x W x C row-major (channel fastest).
template <typename T>
struct FeatureMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<T> data;

    FeatureMap() = default;
    FeatureMap(std::size_t h, std::size_t w, std::size_t c) : height(h), width(w), channels(c), data(h * w * c, T(0)) {}

    T& at(std::size_t r, std::size_t col, std::size_t ch) { return data[(r * width + col) * channels + ch]; }
    T at(std::size_t r, std::size_t col, std::size_t ch) const { return data[(r * width + col) * channels + ch]; }

    bool same_shape(const FeatureMap& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

enum class BackboneKind : std::uint8_t { ToyCnn = 0, FeatureFile = 1 };

// 3x3 convolution, zero padding 1. Weight layout: out_ch x in_ch x 3 x 3.
template <typename T>
struct ConvLayer {
    std::size_t in_ch = 0;
    std::size_t out_ch = 0;
    std::size_t stride = 1;
    std::vector<T> weight;
    std::vector<T> bias;
};

template <typename T>
FeatureMap<T> conv3x3(const FeatureMap<T>& in, const ConvLayer<T>& layer, bool relu_after) {
    if (in.channels != layer.in_ch)
        throw std::invalid_argument("conv3x3: input has " + std::to_string(in.channels) + " channels, layer expects " +
                                    std::to_string(layer.in_ch));
    const std::size_t s = layer.stride;
    const std::size_t oh = (in.height - 1) / s + 1;
    const std::size_t ow = (in.width - 1) / s + 1;
    FeatureMap<T> out(oh, ow, layer.out_ch);
    for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
            for (std::size_t o = 0; o < layer.out_ch; ++o) {
                T acc = layer.bias[o];
                const T* w = layer.weight.data() + o * layer.in_ch * 9;
                for (std::size_t i = 0; i < layer.in_ch; ++i) {
                    for (int kr = 0; kr < 3; ++kr) {
                        const long long sr = static_cast<long long>(r * s) + kr - 1;
                        if (sr < 0 || sr >= static_cast<long long>(in.height)) continue;
                        for (int kc = 0; kc < 3; ++kc) {
                            const long long sc = static_cast<long long>(c * s) + kc - 1;
                            if (sc < 0 || sc >= static_cast<long long>(in.width)) continue;
                            acc += w[i * 9 + kr * 3 + kc] *
                                   in.at(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc), i);
                        }
                    }
                }
                out.at(r, c, o) = relu_after && acc < T(0) ? T(0) : acc;
            }
        }
    }
    return out;
}

// Descriptor plus frozen weights. Construct through toy() or feature_file().
template <typename T>
struct BackboneSpec {
    static constexpr std::size_t kStemWidth = 8;

    BackboneKind kind = BackboneKind::ToyCnn;
    std::size_t stages = 6;
    std::size_t stage_channels = 4;
    std::size_t downsample = 8;
    std::uint64_t seed = 0;

    std::vector<ConvLayer<T>> stem;       // stride-2 layers, log2(downsample) of them
    std::vector<ConvLayer<T>> stage_conv; // S parallel stride-1 layers

    std::size_t total_channels() const { return stages * stage_channels; }

    static BackboneSpec toy(std::size_t stages, std::size_t stage_channels, std::size_t downsample,
                            std::uint64_t seed) {
        if (stages < 1) throw std::invalid_argument("backbone: stages must be >= 1");
        if (stage_channels < 1) throw std::invalid_argument("backbone: stage channels must be >= 1");
        std::size_t levels = 0;
        for (std::size_t d = downsample; d > 1; d /= 2) {
            if (d % 2 != 0) throw std::invalid_argument("backbone: downsample must be a power of two");
            ++levels;
        }
        if (downsample == 0) throw std::invalid_argument("backbone: downsample must be >= 1");

        BackboneSpec spec;
        spec.kind = BackboneKind::ToyCnn;
        spec.stages = stages;
        spec.stage_channels = stage_channels;
        spec.downsample = downsample;
        spec.seed = seed;

        Rng rng(seed);
        std::size_t in_ch = 3;
        for (std::size_t l = 0; l < levels; ++l) {
            spec.stem.push_back(make_layer(rng, in_ch, kStemWidth, 2));
            in_ch = kStemWidth;
        }
        for (std::size_t s = 0; s < stages; ++s) spec.stage_conv.push_back(make_layer(rng, in_ch, stage_channels, 1));
        return spec;
    }

    static BackboneSpec feature_file() {
        BackboneSpec spec;
        spec.kind = BackboneKind::FeatureFile;
        spec.stem.clear();
        spec.stage_conv.clear();
        return spec;
    }

private:
    static ConvLayer<T> make_layer(Rng& rng, std::size_t in_ch, std::size_t out_ch, std::size_t stride) {
        ConvLayer<T> l;
        l.in_ch = in_ch;
        l.out_ch = out_ch;
        l.stride = stride;
        l.weight.resize(out_ch * in_ch * 9);
        l.bias.assign(out_ch, T(0));
        const double limit = std::sqrt(6.0 / static_cast<double>(9 * in_ch));
        for (auto& w : l.weight) w = static_cast<T>(rng.uniform(-limit, limit));
        return l;
    }
};

// Samples mapped from [0, 1] to [-1, 1] per channel before the stem.
template <typename T>
FeatureMap<T> image_to_input(const ImageBuffer& img) {
    FeatureMap<T> f(img.height, img.width, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) f.data[i] = static_cast<T>(img.data[i]) * T(2) - T(1);
    return f;
}

// Runs the frozen toy stem and concatenates the S stage outputs along the
// channel axis, stage 0 first. Pure function of (image, weights).
template <typename T>
FeatureMap<T> extract_features(const ImageBuffer& img, const BackboneSpec<T>& spec) {
    if (spec.kind != BackboneKind::ToyCnn)
        throw std::invalid_argument("extract_features: feature-file backbones read .iqtf files, they do not extract");
    if (img.height < spec.downsample || img.width < spec.downsample)
        throw std::invalid_argument("extract_features: image " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width) + " is smaller than one downsample cell (" +
                                    std::to_string(spec.downsample) + ")");

    FeatureMap<T> x = image_to_input<T>(img);
    for (const auto& layer : spec.stem) x = conv3x3(x, layer, true);

    FeatureMap<T> out(x.height, x.width, spec.total_channels());
    for (std::size_t s = 0; s < spec.stages; ++s) {
        FeatureMap<T> y = conv3x3(x, spec.stage_conv[s], true);
        const std::size_t off = s * spec.stage_channels;
        for (std::size_t r = 0; r < y.height; ++r)
            for (std::size_t c = 0; c < y.width; ++c)
                for (std::size_t ch = 0; ch < spec.stage_channels; ++ch) out.at(r, c, off + ch) = y.at(r, c, ch);
    }
    return out;
}

// f_diff = f_ref - f_dist, elementwise.
template <typename T>
FeatureMap<T> diff_features(const FeatureMap<T>& f_ref, const FeatureMap<T>& f_dist) {
    if (!f_ref.same_shape(f_dist))
        throw std::invalid_argument("diff_features: shape mismatch: " + std::to_string(f_ref.height) + "x" +
                                    std::to_string(f_ref.width) + "x" + std::to_string(f_ref.channels) + " vs " +
                                    std::to_string(f_dist.height) + "x" + std::to_string(f_dist.width) + "x" +
                                    std::to_string(f_dist.channels));
    FeatureMap<T> out(f_ref.height, f_ref.width, f_ref.channels);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f_ref.data[i] - f_dist.data[i];
    return out;
}

// IQTF feature file: "IQTF", u16 version, u32 H, W, C, then H*W*C f32 values
// little-endian in row-major (H, then W, then C) order.
inline constexpr std::uint16_t kFeatureFileVersion = 1;

template <typename T>
void save_feature_file(const FeatureMap<T>& f, const std::filesystem::path& path) {
    std::string out;
    out += "IQTF";
    binio::put_u16(out, kFeatureFileVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(f.height));
    binio::put_u32(out, static_cast<std::uint32_t>(f.width));
    binio::put_u32(out, static_cast<std::uint32_t>(f.channels));
    for (T v : f.data) binio::put_f32(out, static_cast<float>(v));
    binio::write_file(path, out);
}

template <typename T>
FeatureMap<T> load_feature_file(const std::filesystem::path& path) {
    binio::Reader r(path.string(), binio::read_file(path));
    r.expect_magic("IQTF");
    const std::uint16_t version = r.u16("version");
    if (version != kFeatureFileVersion)
        r.fail("unsupported version " + std::to_string(version) + " (expected " +
               std::to_string(kFeatureFileVersion) + ")");
    const std::uint32_t h = r.u32("height");
    const std::uint32_t w = r.u32("width");
    const std::uint32_t c = r.u32("channels");
    if (h == 0 || w == 0 || c == 0) r.fail("dimensions must be positive");
    const std::uint64_t n = static_cast<std::uint64_t>(h) * w * c;
    if (n > (1ull << 31)) r.fail("dimensions overflow a sane payload size");
    FeatureMap<T> f(h, w, c);
    for (std::uint64_t i = 0; i < n; ++i) f.data[static_cast<std::size_t>(i)] = static_cast<T>(r.f32("payload"));
    return f;
}

} // namespace iqt
