// SPDX-License-Identifier: Apache-2.0
//
// Full model: frozen backbone + shared embedding + transformer encoder-decoder
// + prediction head, with configurable input routing. The shipped default
// routes the difference features into the encoder and the reference features
// into the decoder.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iqt/backbone.hpp"
#include "iqt/embedding.hpp"
#include "iqt/image.hpp"
#include "iqt/tensor.hpp"
#include "iqt/transformer.hpp"

namespace iqt {

enum class Stream : std::uint8_t { Dist = 0, Ref = 1, Diff = 2 };
enum class DiffLevel : std::uint8_t { Feature = 0, Image = 1 };

inline const char* stream_name(Stream s) {
    switch (s) {
        case Stream::Dist: return "dist";
        case Stream::Ref: return "ref";
        case Stream::Diff: return "diff";
    }
    return "?";
}

inline Stream stream_from_name(const std::string& s) {
    if (s == "dist") return Stream::Dist;
    if (s == "ref") return Stream::Ref;
    if (s == "diff") return Stream::Diff;
    throw std::invalid_argument("unknown stream '" + s + "' (expected dist|ref|diff)");
}

struct Routing {
    Stream encoder_stream = Stream::Diff;
    Stream decoder_stream = Stream::Ref;
    DiffLevel diff_level = DiffLevel::Feature;
};

template <typename T>
struct Model {
    TransformerConfig cfg;
    std::size_t patch_size = 0;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    BackboneSpec<T> backbone;
    EmbeddingParams<T> embed;
    std::vector<EncoderLayerWeights<T>> enc_layers;
    std::vector<DecoderLayerWeights<T>> dec_layers;
    HeadWeights<T> head;
    Routing routing;
    std::uint64_t init_seed = 0;

    std::size_t n_patches() const { return grid_h * grid_w; }

    // Stable name -> tensor enumeration; the order defines the checkpoint
    // layout and the optimizer slot assignment.
    std::vector<std::pair<std::string, Tensor<T>*>> params() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        out.emplace_back("embed.proj_w", &embed.proj_w);
        out.emplace_back("embed.proj_b", &embed.proj_b);
        out.emplace_back("embed.quality_token_enc", &embed.quality_token_enc);
        out.emplace_back("embed.quality_token_dec", &embed.quality_token_dec);
        out.emplace_back("embed.pos_enc", &embed.pos_enc);
        out.emplace_back("embed.pos_dec", &embed.pos_dec);
        auto attn = [&out](const std::string& prefix, AttentionBlockWeights<T>& w) {
            out.emplace_back(prefix + ".wq", &w.wq);
            out.emplace_back(prefix + ".bq", &w.bq);
            out.emplace_back(prefix + ".wk", &w.wk);
            out.emplace_back(prefix + ".bk", &w.bk);
            out.emplace_back(prefix + ".wv", &w.wv);
            out.emplace_back(prefix + ".bv", &w.bv);
            out.emplace_back(prefix + ".wo", &w.wo);
            out.emplace_back(prefix + ".bo", &w.bo);
        };
        auto mlp = [&out](const std::string& prefix, MlpWeights<T>& m) {
            out.emplace_back(prefix + ".w1", &m.w1);
            out.emplace_back(prefix + ".b1", &m.b1);
            out.emplace_back(prefix + ".w2", &m.w2);
            out.emplace_back(prefix + ".b2", &m.b2);
        };
        auto ln = [&out](const std::string& prefix, LayerNormWeights<T>& l) {
            out.emplace_back(prefix + ".gamma", &l.gamma);
            out.emplace_back(prefix + ".beta", &l.beta);
        };
        for (std::size_t i = 0; i < enc_layers.size(); ++i) {
            const std::string p = "enc." + std::to_string(i);
            attn(p + ".self", enc_layers[i].self_attn);
            mlp(p + ".mlp", enc_layers[i].mlp);
            ln(p + ".ln1", enc_layers[i].ln1);
            ln(p + ".ln2", enc_layers[i].ln2);
        }
        for (std::size_t i = 0; i < dec_layers.size(); ++i) {
            const std::string p = "dec." + std::to_string(i);
            attn(p + ".self", dec_layers[i].self_attn);
            attn(p + ".cross", dec_layers[i].cross_attn);
            mlp(p + ".mlp", dec_layers[i].mlp);
            ln(p + ".ln1", dec_layers[i].ln1);
            ln(p + ".ln2", dec_layers[i].ln2);
            ln(p + ".ln3", dec_layers[i].ln3);
        }
        out.emplace_back("head.w1", &head.w1);
        out.emplace_back("head.b1", &head.b1);
        out.emplace_back("head.w2", &head.w2);
        out.emplace_back("head.b2", &head.b2);
        return out;
    }

    std::vector<Tensor<T>*> param_tensors() {
        std::vector<Tensor<T>*> out;
        for (auto& [name, t] : params()) out.push_back(t);
        return out;
    }

    void zero_grads() {
        for (Tensor<T>* t : param_tensors()) t->zero_grad();
    }
};

// Builds a model whose sequence length N is derived from the backbone
// geometry: N = (patch/downsample)^2 for the toy stem.
template <typename T>
Model<T> build_model(const TransformerConfig& cfg, std::size_t patch_size, BackboneSpec<T> backbone, Routing routing,
                     std::uint64_t seed) {
    cfg.validate();
    if (patch_size == 0) throw std::invalid_argument("build_model: patch size must be positive");
    if (backbone.downsample == 0 || patch_size < backbone.downsample)
        throw std::invalid_argument("build_model: patch size " + std::to_string(patch_size) +
                                    " needs a backbone downsample in [1, patch], got " +
                                    std::to_string(backbone.downsample));
    if (backbone.kind == BackboneKind::ToyCnn && patch_size % backbone.downsample != 0)
        throw std::invalid_argument("build_model: patch size " + std::to_string(patch_size) +
                                    " not divisible by backbone downsample " + std::to_string(backbone.downsample));
    Model<T> m;
    m.cfg = cfg;
    m.patch_size = patch_size;
    m.grid_h = patch_size / backbone.downsample;
    m.grid_w = patch_size / backbone.downsample;
    m.backbone = std::move(backbone);
    m.routing = routing;
    m.init_seed = seed;

    Rng rng(seed);
    m.embed = init_embedding<T>(m.backbone.total_channels(), cfg.d_model, m.n_patches(), rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) m.enc_layers.push_back(init_encoder_layer<T>(cfg, rng));
    for (std::size_t i = 0; i < cfg.layers; ++i) m.dec_layers.push_back(init_decoder_layer<T>(cfg, rng));
    m.head = init_head<T>(cfg, rng);
    return m;
}

// Resolves the routing to concrete (encoder, decoder) feature maps. For the
// image-level difference the RGB patches are differenced first, remapped to
// [0, 1] as (ref - dist + 1) / 2, and pushed through the frozen backbone.
template <typename T>
std::pair<FeatureMap<T>, FeatureMap<T>> select_streams(const Model<T>& m, const FeatureMap<T>& f_ref,
                                                       const FeatureMap<T>& f_dist, const ImageBuffer* ref_img,
                                                       const ImageBuffer* dist_img) {
    const Routing& r = m.routing;
    FeatureMap<T> diff;
    bool have_diff = false;
    auto make_diff = [&]() -> const FeatureMap<T>& {
        if (!have_diff) {
            if (r.diff_level == DiffLevel::Feature) {
                diff = diff_features(f_ref, f_dist);
            } else {
                if (ref_img == nullptr || dist_img == nullptr)
                    throw std::invalid_argument("select_streams: image-level difference requires image inputs");
                if (!ref_img->same_dims(*dist_img))
                    throw std::invalid_argument("select_streams: image dimensions differ");
                ImageBuffer d(ref_img->height, ref_img->width);
                for (std::size_t i = 0; i < d.data.size(); ++i)
                    d.data[i] = (ref_img->data[i] - dist_img->data[i] + 1.0f) * 0.5f;
                diff = extract_features(d, m.backbone);
            }
            have_diff = true;
        }
        return diff;
    };
    auto pick = [&](Stream s) -> FeatureMap<T> {
        switch (s) {
            case Stream::Dist: return f_dist;
            case Stream::Ref: return f_ref;
            case Stream::Diff: return make_diff();
        }
        throw std::logic_error("select_streams: bad stream");
    };
    return {pick(r.encoder_stream), pick(r.decoder_stream)};
}

template <typename T>
void check_feature_grid(const Model<T>& m, const FeatureMap<T>& f, const char* what) {
    if (f.height != m.grid_h || f.width != m.grid_w)
        throw std::invalid_argument(std::string(what) + ": feature map " + std::to_string(f.height) + "x" +
                                    std::to_string(f.width) + " does not match model grid " +
                                    std::to_string(m.grid_h) + "x" + std::to_string(m.grid_w));
    if (f.channels != m.embed.proj_w.dim(0))
        throw std::invalid_argument(std::string(what) + ": feature map has " + std::to_string(f.channels) +
                                    " channels, model expects " + std::to_string(m.embed.proj_w.dim(0)));
}

// encoder stream -> encoder; decoder stream + encoder output -> decoder;
// first decoder row -> head. Returns the scalar score node.
template <typename T>
Tensor<T> score_from_features(const Model<T>& m, const FeatureMap<T>& enc_feat, const FeatureMap<T>& dec_feat,
                              AttentionTrace<T>* trace = nullptr) {
    check_feature_grid(m, enc_feat, "score_from_features(encoder)");
    check_feature_grid(m, dec_feat, "score_from_features(decoder)");

    Tensor<T> xe = project_and_flatten(enc_feat, m.embed.proj_w, m.embed.proj_b);
    TokenSequence<T> seq_e = assemble_sequence(xe, m.embed.quality_token_enc, m.embed.pos_enc);
    Tensor<T> enc_out = encoder_forward(seq_e, m.enc_layers, m.cfg, trace);

    Tensor<T> xd = project_and_flatten(dec_feat, m.embed.proj_w, m.embed.proj_b);
    TokenSequence<T> seq_d = assemble_sequence(xd, m.embed.quality_token_dec, m.embed.pos_dec);
    Tensor<T> dec_out = decoder_forward(seq_d, enc_out, m.dec_layers, m.cfg, trace);

    return head_forward(slice_rows(dec_out, 0, 1), m.head);
}

// Full forward over one reference/distorted patch pair.
template <typename T>
Tensor<T> forward_score(const Model<T>& m, const ImageBuffer& ref_patch, const ImageBuffer& dist_patch,
                        AttentionTrace<T>* trace = nullptr) {
    if (!ref_patch.same_dims(dist_patch))
        throw std::invalid_argument("forward_score: patch dimensions differ");
    if (ref_patch.height != m.patch_size || ref_patch.width != m.patch_size)
        throw std::invalid_argument("forward_score: patch is " + std::to_string(ref_patch.height) + "x" +
                                    std::to_string(ref_patch.width) + ", model expects " +
                                    std::to_string(m.patch_size) + "x" + std::to_string(m.patch_size));
    FeatureMap<T> f_ref = extract_features(ref_patch, m.backbone);
    FeatureMap<T> f_dist = extract_features(dist_patch, m.backbone);
    auto [enc_feat, dec_feat] = select_streams(m, f_ref, f_dist, &ref_patch, &dist_patch);
    return score_from_features(m, enc_feat, dec_feat, trace);
}

} // namespace iqt
