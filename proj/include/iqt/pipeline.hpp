// SPDX-License-Identifier: Apache-2.0
//
// Training and inference around the model: overlapping-patch planning,
// paired augmentation, MSE training with ADAM + cosine decay, patch-averaged
// scoring, and checkpoint serialization.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iqt/binio.hpp"
#include "iqt/image.hpp"
#include "iqt/manifest.hpp"
#include "iqt/model.hpp"
#include "iqt/optim.hpp"
#include "iqt/rng.hpp"

namespace iqt {

// ---------------------------------------------------------------------------
// Patch planning

// Minimal set of patch_size crops covering the image: per axis
// n = ceil(dim / patch); offsets round(i * (dim - patch) / (n - 1)), first at
// 0 and last flush with the edge.
struct PatchPlan {
    std::size_t patch_size = 0;
    std::vector<std::size_t> offsets_y;
    std::vector<std::size_t> offsets_x;

    std::size_t count() const { return offsets_y.size() * offsets_x.size(); }
};

namespace detail {

inline std::vector<std::size_t> axis_offsets(std::size_t dim, std::size_t patch) {
    const std::size_t n = (dim + patch - 1) / patch;
    std::vector<std::size_t> offsets;
    if (n <= 1) {
        offsets.push_back(0);
        return offsets;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double pos = static_cast<double>(i) * static_cast<double>(dim - patch) / static_cast<double>(n - 1);
        offsets.push_back(static_cast<std::size_t>(std::llround(pos)));
    }
    return offsets;
}

} // namespace detail

inline PatchPlan plan_patches(std::size_t image_h, std::size_t image_w, std::size_t patch_size) {
    if (patch_size == 0) throw std::invalid_argument("plan_patches: patch size must be positive");
    if (image_h < patch_size || image_w < patch_size)
        throw std::invalid_argument("plan_patches: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                    " is smaller than patch " + std::to_string(patch_size));
    PatchPlan plan;
    plan.patch_size = patch_size;
    plan.offsets_y = detail::axis_offsets(image_h, patch_size);
    plan.offsets_x = detail::axis_offsets(image_w, patch_size);
    return plan;
}

// ---------------------------------------------------------------------------
// Paired augmentation

// One sampled transform: horizontal flip with p = 0.5 plus a rotation from
// {0, 90, 180, 270} degrees, applied identically to both images of a pair.
struct AugmentOp {
    bool flip = false;
    int quarter_turns = 0; // clockwise
};

inline AugmentOp sample_augment(Rng& rng) {
    AugmentOp op;
    op.flip = rng.bernoulli(0.5); // drawn first, then the rotation
    op.quarter_turns = static_cast<int>(rng.uniform_int(4));
    return op;
}

inline ImageBuffer apply_augment(const ImageBuffer& img, const AugmentOp& op) {
    ImageBuffer out = op.flip ? flip_horizontal(img) : img;
    for (int i = 0; i < op.quarter_turns; ++i) out = rotate90_cw(out);
    return out;
}

inline std::pair<ImageBuffer, ImageBuffer> augment_pair(const ImageBuffer& ref, const ImageBuffer& dist, Rng& rng) {
    if (!ref.same_dims(dist)) throw std::invalid_argument("augment_pair: image dimensions differ");
    const AugmentOp op = sample_augment(rng);
    return {apply_augment(ref, op), apply_augment(dist, op)};
}

// ---------------------------------------------------------------------------
// Inference

// Order-independent mean: pairwise summation in fixed index order.
inline double pairwise_sum(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
    if (hi - lo <= 4) {
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += v[i];
        return acc;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    return pairwise_sum(v, lo, mid) + pairwise_sum(v, mid, hi);
}

inline double pairwise_mean(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("pairwise_mean: empty input");
    return pairwise_sum(v, 0, v.size()) / static_cast<double>(v.size());
}

// Scores every planned patch position and averages. Deterministic for a fixed
// model: patches are visited in row-major offset order.
template <typename T>
double score_pair(const Model<T>& m, const ImageBuffer& ref, const ImageBuffer& dist) {
    if (!ref.same_dims(dist))
        throw std::invalid_argument("score_pair: image dimensions differ: " + std::to_string(ref.height) + "x" +
                                    std::to_string(ref.width) + " vs " + std::to_string(dist.height) + "x" +
                                    std::to_string(dist.width));
    const PatchPlan plan = plan_patches(ref.height, ref.width, m.patch_size);
    std::vector<double> scores;
    scores.reserve(plan.count());
    for (std::size_t oy : plan.offsets_y) {
        for (std::size_t ox : plan.offsets_x) {
            ImageBuffer rp = crop(ref, oy, ox, m.patch_size, m.patch_size);
            ImageBuffer dp = crop(dist, oy, ox, m.patch_size, m.patch_size);
            scores.push_back(static_cast<double>(forward_score(m, rp, dp).item()));
        }
    }
    return pairwise_mean(scores);
}

// Scores one manifest row; feature-file backbones read .iqtf maps and score
// them as a single patch, toy backbones decode images and patch-average.
template <typename T>
double score_manifest_row(const Model<T>& m, const ManifestRow& row) {
    if (m.backbone.kind == BackboneKind::FeatureFile) {
        FeatureMap<T> f_ref = load_feature_file<T>(row.ref_path);
        FeatureMap<T> f_dist = load_feature_file<T>(row.dist_path);
        auto [enc_feat, dec_feat] = select_streams(m, f_ref, f_dist, nullptr, nullptr);
        return static_cast<double>(score_from_features(m, enc_feat, dec_feat).item());
    }
    ImageBuffer ref = decode_ppm(row.ref_path);
    ImageBuffer dist = decode_ppm(row.dist_path);
    return score_pair(m, ref, dist);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "IQTC", u16 version, config block, then named tensors as
// u32 name length + UTF-8 name + u32 rank + u32 dims + f32 payload, all LE.

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

struct Checkpoint {
    std::uint16_t version = kCheckpointVersion;
    TransformerConfig cfg;
    std::size_t patch_size = 0;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    BackboneKind backbone_kind = BackboneKind::ToyCnn;
    std::size_t backbone_stages = 0;
    std::size_t backbone_channels = 0;
    std::size_t backbone_downsample = 0;
    std::uint64_t backbone_seed = 0;
    Routing routing;
    std::uint64_t init_seed = 0;
    std::uint64_t train_step = 0;
    std::vector<CheckpointTensor> tensors;
};

namespace detail {

inline void push_tensor(std::vector<CheckpointTensor>& out, const std::string& name,
                        const std::vector<std::uint32_t>& dims, const std::vector<float>& data) {
    CheckpointTensor t;
    t.name = name;
    t.dims = dims;
    t.data = data;
    out.push_back(std::move(t));
}

} // namespace detail

inline Checkpoint make_checkpoint(Model<float>& m, std::uint64_t train_step) {
    Checkpoint ck;
    ck.cfg = m.cfg;
    ck.patch_size = m.patch_size;
    ck.grid_h = m.grid_h;
    ck.grid_w = m.grid_w;
    ck.backbone_kind = m.backbone.kind;
    ck.backbone_stages = m.backbone.stages;
    ck.backbone_channels = m.backbone.stage_channels;
    ck.backbone_downsample = m.backbone.downsample;
    ck.backbone_seed = m.backbone.seed;
    ck.routing = m.routing;
    ck.init_seed = m.init_seed;
    ck.train_step = train_step;
    for (std::size_t i = 0; i < m.backbone.stem.size(); ++i) {
        const auto& l = m.backbone.stem[i];
        detail::push_tensor(ck.tensors, "backbone.stem." + std::to_string(i) + ".weight",
                            {static_cast<std::uint32_t>(l.out_ch), static_cast<std::uint32_t>(l.in_ch), 3, 3},
                            l.weight);
        detail::push_tensor(ck.tensors, "backbone.stem." + std::to_string(i) + ".bias",
                            {static_cast<std::uint32_t>(l.out_ch)}, l.bias);
    }
    for (std::size_t i = 0; i < m.backbone.stage_conv.size(); ++i) {
        const auto& l = m.backbone.stage_conv[i];
        detail::push_tensor(ck.tensors, "backbone.stage." + std::to_string(i) + ".weight",
                            {static_cast<std::uint32_t>(l.out_ch), static_cast<std::uint32_t>(l.in_ch), 3, 3},
                            l.weight);
        detail::push_tensor(ck.tensors, "backbone.stage." + std::to_string(i) + ".bias",
                            {static_cast<std::uint32_t>(l.out_ch)}, l.bias);
    }
    for (auto& [name, t] : m.params()) {
        std::vector<std::uint32_t> dims;
        for (std::size_t d : t->shape()) dims.push_back(static_cast<std::uint32_t>(d));
        detail::push_tensor(ck.tensors, name, dims, t->value());
    }
    return ck;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::string out;
    out += "IQTC";
    binio::put_u16(out, ck.version);
    binio::put_u32(out, static_cast<std::uint32_t>(ck.cfg.layers));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.cfg.n_heads));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.cfg.d_model));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.cfg.d_feat));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.cfg.d_head));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.patch_size));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.grid_h));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.grid_w));
    binio::put_u8(out, static_cast<std::uint8_t>(ck.backbone_kind));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.backbone_stages));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.backbone_channels));
    binio::put_u32(out, static_cast<std::uint32_t>(ck.backbone_downsample));
    binio::put_u64(out, ck.backbone_seed);
    binio::put_u8(out, static_cast<std::uint8_t>(ck.routing.encoder_stream));
    binio::put_u8(out, static_cast<std::uint8_t>(ck.routing.decoder_stream));
    binio::put_u8(out, static_cast<std::uint8_t>(ck.routing.diff_level));
    binio::put_u64(out, ck.init_seed);
    binio::put_u64(out, ck.train_step);
    binio::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& t : ck.tensors) {
        binio::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        binio::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
        std::size_t n = 1;
        for (std::uint32_t d : t.dims) {
            binio::put_u32(out, d);
            n *= d;
        }
        if (n != t.data.size())
            throw std::logic_error("encode_checkpoint: tensor '" + t.name + "' dims do not match payload");
        for (float v : t.data) binio::put_f32(out, v);
    }
    return out;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    binio::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    binio::Reader r(path.string(), binio::read_file(path));
    r.expect_magic("IQTC");
    Checkpoint ck;
    ck.version = r.u16("version");
    if (ck.version != kCheckpointVersion)
        r.fail("unsupported checkpoint version " + std::to_string(ck.version) + " (expected " +
               std::to_string(kCheckpointVersion) + ")");
    ck.cfg.layers = r.u32("layers");
    ck.cfg.n_heads = r.u32("n_heads");
    ck.cfg.d_model = r.u32("d_model");
    ck.cfg.d_feat = r.u32("d_feat");
    ck.cfg.d_head = r.u32("d_head");
    ck.patch_size = r.u32("patch_size");
    ck.grid_h = r.u32("grid_h");
    ck.grid_w = r.u32("grid_w");
    ck.backbone_kind = static_cast<BackboneKind>(r.u8("backbone kind"));
    ck.backbone_stages = r.u32("backbone stages");
    ck.backbone_channels = r.u32("backbone channels");
    ck.backbone_downsample = r.u32("backbone downsample");
    ck.backbone_seed = r.u64("backbone seed");
    ck.routing.encoder_stream = static_cast<Stream>(r.u8("encoder stream"));
    ck.routing.decoder_stream = static_cast<Stream>(r.u8("decoder stream"));
    ck.routing.diff_level = static_cast<DiffLevel>(r.u8("diff level"));
    ck.init_seed = r.u64("init seed");
    ck.train_step = r.u64("train step");
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointTensor t;
        const std::uint32_t name_len = r.u32("tensor name length");
        t.name = r.str(name_len, "tensor name");
        const std::uint32_t rank = r.u32("tensor rank");
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.dims.push_back(r.u32("tensor dim"));
            n *= t.dims.back();
        }
        t.data.resize(n);
        for (std::size_t j = 0; j < n; ++j) t.data[j] = r.f32("tensor payload");
        ck.tensors.push_back(std::move(t));
    }
    if (!r.at_end()) r.fail("trailing bytes after checkpoint payload");
    return ck;
}

// Rebuilds the model structure from the config block and overwrites every
// tensor (backbone included) from the checkpoint, so forward outputs match
// the saved model bitwise.
inline Model<float> model_from_checkpoint(const Checkpoint& ck) {
    BackboneSpec<float> backbone = ck.backbone_kind == BackboneKind::FeatureFile
                                       ? BackboneSpec<float>::feature_file()
                                       : BackboneSpec<float>::toy(ck.backbone_stages, ck.backbone_channels,
                                                                  ck.backbone_downsample, ck.backbone_seed);
    if (ck.backbone_kind == BackboneKind::FeatureFile) {
        backbone.stages = ck.backbone_stages;
        backbone.stage_channels = ck.backbone_channels;
        backbone.downsample = ck.backbone_downsample;
    }
    Model<float> m = build_model<float>(ck.cfg, ck.patch_size, std::move(backbone), ck.routing, ck.init_seed);
    if (m.grid_h != ck.grid_h || m.grid_w != ck.grid_w)
        throw std::runtime_error("checkpoint: stored grid " + std::to_string(ck.grid_h) + "x" +
                                 std::to_string(ck.grid_w) + " does not match rebuilt geometry");

    auto fill = [](const CheckpointTensor& src, std::vector<float>& dst, const std::string& what) {
        if (src.data.size() != dst.size())
            throw std::runtime_error("checkpoint: tensor '" + what + "' has " + std::to_string(src.data.size()) +
                                     " values, model expects " + std::to_string(dst.size()));
        dst = src.data;
    };
    auto named = m.params();
    for (const auto& t : ck.tensors) {
        if (t.name.rfind("backbone.", 0) == 0) {
            bool found = false;
            for (std::size_t i = 0; i < m.backbone.stem.size() && !found; ++i) {
                const std::string p = "backbone.stem." + std::to_string(i);
                if (t.name == p + ".weight") {
                    fill(t, m.backbone.stem[i].weight, t.name);
                    found = true;
                } else if (t.name == p + ".bias") {
                    fill(t, m.backbone.stem[i].bias, t.name);
                    found = true;
                }
            }
            for (std::size_t i = 0; i < m.backbone.stage_conv.size() && !found; ++i) {
                const std::string p = "backbone.stage." + std::to_string(i);
                if (t.name == p + ".weight") {
                    fill(t, m.backbone.stage_conv[i].weight, t.name);
                    found = true;
                } else if (t.name == p + ".bias") {
                    fill(t, m.backbone.stage_conv[i].bias, t.name);
                    found = true;
                }
            }
            if (!found) throw std::runtime_error("checkpoint: unknown backbone tensor '" + t.name + "'");
            continue;
        }
        bool found = false;
        for (auto& [name, tensor] : named) {
            if (name == t.name) {
                fill(t, tensor->mutable_value(), t.name);
                found = true;
                break;
            }
        }
        if (!found) throw std::runtime_error("checkpoint: unknown tensor '" + t.name + "'");
    }
    return m;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t patch_size = 256;
    std::size_t batch_size = 16;
    double lr0 = 2e-4;
    std::size_t total_steps = 0;
    std::uint64_t seed = 0;
    bool augment = true;
};

struct LossLogRow {
    std::size_t step = 0;
    double lr = 0.0;
    double mse = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossLogRow> log;
};

inline std::string format_loss_log_csv(const std::vector<LossLogRow>& log) {
    std::string out = "step,lr,mse\n";
    char buf[128];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", row.step, row.lr, row.mse);
        out += buf;
    }
    return out;
}

// Min-max normalization of MOS targets to [0, 1]; strictly monotone, so rank
// order is preserved. Constant MOS has no usable ordering and is rejected.
inline std::vector<double> normalize_mos(const std::vector<double>& mos) {
    if (mos.empty()) throw std::invalid_argument("normalize_mos: empty input");
    const auto [lo_it, hi_it] = std::minmax_element(mos.begin(), mos.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi <= lo) throw std::invalid_argument("normalize_mos: constant MOS values cannot be normalized");
    std::vector<double> out(mos.size());
    for (std::size_t i = 0; i < mos.size(); ++i) out[i] = (mos[i] - lo) / (hi - lo);
    return out;
}

namespace detail {

struct ImageSample {
    ImageBuffer ref;
    ImageBuffer dist;
    double target = 0.0;
};

struct FeatureSample {
    FeatureMap<float> ref;
    FeatureMap<float> dist;
    double target = 0.0;
};

} // namespace detail

// MSE training with uniform with-replacement sampling, one shared random crop
// per pair per draw, optional paired augmentation, ADAM and cosine decay. The
// backbone stays frozen. Deterministic for a fixed seed.
inline TrainResult train(Model<float>& model, const std::vector<ManifestRow>& rows, const TrainConfig& cfg) {
    if (rows.empty()) throw std::invalid_argument("train: manifest is empty");
    if (cfg.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
    if (model.patch_size != cfg.patch_size)
        throw std::invalid_argument("train: model patch size " + std::to_string(model.patch_size) +
                                    " != config patch size " + std::to_string(cfg.patch_size));
    const bool feature_mode = model.backbone.kind == BackboneKind::FeatureFile;

    // Load every usable pair up front; unreadable rows are skipped with a
    // warning and training fails only if nothing loads.
    std::vector<detail::ImageSample> images;
    std::vector<detail::FeatureSample> features;
    std::vector<double> raw_mos;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        try {
            if (feature_mode) {
                detail::FeatureSample s;
                s.ref = load_feature_file<float>(rows[i].ref_path);
                s.dist = load_feature_file<float>(rows[i].dist_path);
                check_feature_grid(model, s.ref, "train");
                check_feature_grid(model, s.dist, "train");
                features.push_back(std::move(s));
            } else {
                detail::ImageSample s;
                s.ref = decode_ppm(rows[i].ref_path);
                s.dist = decode_ppm(rows[i].dist_path);
                if (!s.ref.same_dims(s.dist)) throw std::runtime_error("reference/distorted dimensions differ");
                if (s.ref.height < cfg.patch_size || s.ref.width < cfg.patch_size)
                    throw std::runtime_error("image smaller than patch size");
                images.push_back(std::move(s));
            }
            raw_mos.push_back(rows[i].mos);
        } catch (const std::exception& e) {
            std::cerr << "train: skipping row " << (i + 1) << ": " << e.what() << "\n";
        }
    }
    const std::size_t n_samples = feature_mode ? features.size() : images.size();
    if (n_samples == 0) throw std::runtime_error("train: no usable samples in manifest");

    const std::vector<double> targets = normalize_mos(raw_mos);
    for (std::size_t i = 0; i < n_samples; ++i) {
        if (feature_mode)
            features[i].target = targets[i];
        else
            images[i].target = targets[i];
    }

    auto params = model.param_tensors();
    AdamState<float> adam;
    adam.init(params);
    Rng rng(cfg.seed);

    // Frozen backbone + fixed geometry: when a sample is exactly one patch and
    // augmentation is off, its features never change, so they are extracted
    // once and reused.
    std::vector<std::optional<std::pair<FeatureMap<float>, FeatureMap<float>>>> cache(n_samples);

    std::vector<LossLogRow> log;
    log.reserve(cfg.total_steps);
    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        const double lr = cosine_lr(step, cfg.total_steps, cfg.lr0);
        model.zero_grads();

        Tensor<float> loss_sum = Tensor<float>::zeros({1, 1});
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t idx = rng.uniform_int(n_samples);
            Tensor<float> score;
            double target = 0.0;
            if (feature_mode) {
                const auto& s = features[idx];
                target = s.target;
                auto [enc_f, dec_f] = select_streams(model, s.ref, s.dist, nullptr, nullptr);
                score = score_from_features(model, enc_f, dec_f);
            } else {
                const auto& s = images[idx];
                target = s.target;
                const bool whole = s.ref.height == cfg.patch_size && s.ref.width == cfg.patch_size;
                if (whole && !cfg.augment && cache[idx]) {
                    score = score_from_features(model, cache[idx]->first, cache[idx]->second);
                } else {
                    const std::size_t max_y = s.ref.height - cfg.patch_size;
                    const std::size_t max_x = s.ref.width - cfg.patch_size;
                    const std::size_t oy = max_y == 0 ? 0 : rng.uniform_int(max_y + 1);
                    const std::size_t ox = max_x == 0 ? 0 : rng.uniform_int(max_x + 1);
                    ImageBuffer rp = crop(s.ref, oy, ox, cfg.patch_size, cfg.patch_size);
                    ImageBuffer dp = crop(s.dist, oy, ox, cfg.patch_size, cfg.patch_size);
                    if (cfg.augment) {
                        const AugmentOp op = sample_augment(rng);
                        rp = apply_augment(rp, op);
                        dp = apply_augment(dp, op);
                    }
                    FeatureMap<float> f_ref = extract_features(rp, model.backbone);
                    FeatureMap<float> f_dist = extract_features(dp, model.backbone);
                    auto streams = select_streams(model, f_ref, f_dist, &rp, &dp);
                    if (whole && !cfg.augment) cache[idx] = streams;
                    score = score_from_features(model, streams.first, streams.second);
                }
            }
            Tensor<float> err = add_scalar(score, static_cast<float>(-target));
            loss_sum = add(loss_sum, mul(err, err));
        }
        Tensor<float> loss = mul_scalar(loss_sum, 1.0f / static_cast<float>(cfg.batch_size));
        loss.backward();
        adam_step(params, adam, static_cast<float>(lr));
        log.push_back({step, lr, static_cast<double>(loss.item())});
    }

    TrainResult result;
    result.checkpoint = make_checkpoint(model, cfg.total_steps);
    result.log = std::move(log);
    return result;
}

} // namespace iqt
