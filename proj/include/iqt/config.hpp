// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: the two shipped model presets plus flat key = value
// settings loadable from a text file, with command-line overrides winning
// over file values. Unknown keys are rejected.

#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iqt/model.hpp"
#include "iqt/transformer.hpp"

namespace iqt {

struct Preset {
    TransformerConfig tf;
    std::size_t patch_size = 256;
};

// Standard configuration: L=2, n_heads=4, D=256, D_feat=1024, D_head=512,
// 256x256 patches.
inline Preset preset_iqt() {
    Preset p;
    p.tf.layers = 2;
    p.tf.n_heads = 4;
    p.tf.d_model = 256;
    p.tf.d_feat = 1024;
    p.tf.d_head = 512;
    p.patch_size = 256;
    return p;
}

// Challenge configuration: L=1, n_heads=4, D=128, D_feat=1024, D_head=128,
// 192x192 patches.
inline Preset preset_iqt_c() {
    Preset p;
    p.tf.layers = 1;
    p.tf.n_heads = 4;
    p.tf.d_model = 128;
    p.tf.d_feat = 1024;
    p.tf.d_head = 128;
    p.patch_size = 192;
    return p;
}

inline Preset preset_by_name(const std::string& name) {
    if (name == "iqt") return preset_iqt();
    if (name == "iqt-c") return preset_iqt_c();
    throw std::invalid_argument("unknown preset '" + name + "' (expected iqt|iqt-c)");
}

struct RunConfig {
    std::string preset = "iqt";
    TransformerConfig tf = preset_iqt().tf;
    std::size_t patch_size = 256;

    std::string backbone_kind = "toy"; // toy | feature-file
    std::size_t backbone_stages = 6;
    std::size_t backbone_channels = 4;
    std::size_t backbone_downsample = 8;

    std::uint64_t seed = 1;
    std::size_t batch_size = 16;
    double lr0 = 2e-4;
    std::size_t total_steps = 200;
    bool augment = true;
    bool trace = false;

    Stream enc_stream = Stream::Diff;
    Stream dec_stream = Stream::Ref;
    DiffLevel diff_level = DiffLevel::Feature;

    Routing routing() const { return Routing{enc_stream, dec_stream, diff_level}; }

    // Seed derivation keeps one --seed knob: model init uses seed, the
    // training sampler seed+1, the toy backbone seed+1000003.
    std::uint64_t model_seed() const { return seed; }
    std::uint64_t train_seed() const { return seed + 1; }
    std::uint64_t backbone_seed() const { return seed + 1000003; }

    BackboneSpec<float> build_backbone() const {
        if (backbone_kind == "toy")
            return BackboneSpec<float>::toy(backbone_stages, backbone_channels, backbone_downsample, backbone_seed());
        if (backbone_kind == "feature-file") {
            BackboneSpec<float> spec = BackboneSpec<float>::feature_file();
            spec.stages = backbone_stages;
            spec.stage_channels = backbone_channels;
            spec.downsample = backbone_downsample;
            return spec;
        }
        throw std::invalid_argument("unknown backbone kind '" + backbone_kind + "' (expected toy|feature-file)");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' expects an unsigned integer, got '" + value + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + value + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true" || value == "on") return true;
    if (value == "0" || value == "false" || value == "off") return false;
    throw std::invalid_argument("config: key '" + key + "' expects a boolean, got '" + value + "'");
}

} // namespace detail

// Applies one key to the config; the preset key rewrites the transformer
// dimensions and patch size, later keys can then override them.
inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "preset") {
        const Preset p = preset_by_name(value);
        cfg.preset = value;
        cfg.tf = p.tf;
        cfg.patch_size = p.patch_size;
    } else if (key == "patch_size") {
        cfg.patch_size = detail::parse_size(key, value);
    } else if (key == "layers") {
        cfg.tf.layers = detail::parse_size(key, value);
    } else if (key == "n_heads") {
        cfg.tf.n_heads = detail::parse_size(key, value);
    } else if (key == "d_model") {
        cfg.tf.d_model = detail::parse_size(key, value);
    } else if (key == "d_feat") {
        cfg.tf.d_feat = detail::parse_size(key, value);
    } else if (key == "d_head") {
        cfg.tf.d_head = detail::parse_size(key, value);
    } else if (key == "backbone_kind") {
        if (value != "toy" && value != "feature-file")
            throw std::invalid_argument("config: backbone_kind expects toy|feature-file, got '" + value + "'");
        cfg.backbone_kind = value;
    } else if (key == "backbone_stages") {
        cfg.backbone_stages = detail::parse_size(key, value);
    } else if (key == "backbone_channels") {
        cfg.backbone_channels = detail::parse_size(key, value);
    } else if (key == "backbone_downsample") {
        cfg.backbone_downsample = detail::parse_size(key, value);
    } else if (key == "seed") {
        cfg.seed = detail::parse_size(key, value);
    } else if (key == "batch_size") {
        cfg.batch_size = detail::parse_size(key, value);
    } else if (key == "lr0") {
        cfg.lr0 = detail::parse_double(key, value);
    } else if (key == "total_steps") {
        cfg.total_steps = detail::parse_size(key, value);
    } else if (key == "augment") {
        cfg.augment = detail::parse_bool(key, value);
    } else if (key == "trace") {
        cfg.trace = detail::parse_bool(key, value);
    } else if (key == "enc_stream") {
        cfg.enc_stream = stream_from_name(value);
    } else if (key == "dec_stream") {
        cfg.dec_stream = stream_from_name(value);
    } else if (key == "diff_level") {
        if (value == "feature")
            cfg.diff_level = DiffLevel::Feature;
        else if (value == "image")
            cfg.diff_level = DiffLevel::Image;
        else
            throw std::invalid_argument("config: diff_level expects feature|image, got '" + value + "'");
    } else {
        throw std::invalid_argument("config: unknown key '" + key + "'");
    }
}

// `key = value` lines; '#' starts a comment, blank lines are skipped.
inline std::vector<std::pair<std::string, std::string>> load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open config file");
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
        kv.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return kv;
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
    for (const auto& [key, value] : load_config_file(path)) apply_config_key(cfg, key, value);
}

} // namespace iqt
