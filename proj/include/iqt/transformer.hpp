// SPDX-License-Identifier: Apache-2.0
//
// Transformer encoder-decoder and prediction head.
//
// Encoder layer (post-norm, residual first):
//   y' = LN(MHA(y, y, y) + y)
//   y  = LN(MLP(y') + y')
// Decoder layer adds a cross block whose keys/values are the encoder output:
//   z'  = LN(MHA(z, z, z) + z)
//   z'' = LN(MHA(z', enc_out, enc_out) + z')
//   z   = LN(MLP(z'') + z'')
// The head maps the first row of the decoder output to a scalar through two
// fully connected layers with a ReLU between them.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqt/embedding.hpp"
#include "iqt/image.hpp"
#include "iqt/rng.hpp"
#include "iqt/tensor.hpp"

namespace iqt {

struct TransformerConfig {
    std::size_t layers = 2;
    std::size_t n_heads = 4; // the paper overloads H for image height; renamed
    std::size_t d_model = 256;
    std::size_t d_feat = 1024;
    std::size_t d_head = 512; // hidden width of the prediction head, not per-head dim

    void validate() const {
        if (layers < 1 || n_heads < 1 || d_model < 1 || d_feat < 1 || d_head < 1)
            throw std::invalid_argument("TransformerConfig: all extents must be >= 1");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("TransformerConfig: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
    }
};

enum class AttentionStage : std::uint8_t { Encoder = 0, DecoderSelf = 1, DecoderCross = 2 };

inline const char* attention_stage_name(AttentionStage s) {
    switch (s) {
        case AttentionStage::Encoder: return "encoder";
        case AttentionStage::DecoderSelf: return "decoder-self";
        case AttentionStage::DecoderCross: return "decoder-cross";
    }
    return "?";
}

// Post-softmax attention weights of one head, detached from the graph.
template <typename T>
struct AttentionRecord {
    AttentionStage stage = AttentionStage::Encoder;
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> weights; // rows x cols, each row sums to 1
};

template <typename T>
using AttentionTrace = std::vector<AttentionRecord<T>>;

template <typename T>
struct AttentionBlockWeights {
    Tensor<T> wq, bq;
    Tensor<T> wk, bk;
    Tensor<T> wv, bv;
    Tensor<T> wo, bo;
};

template <typename T>
struct MlpWeights {
    Tensor<T> w1, b1; // D x D_feat
    Tensor<T> w2, b2; // D_feat x D
};

template <typename T>
struct LayerNormWeights {
    Tensor<T> gamma, beta;
};

template <typename T>
struct EncoderLayerWeights {
    AttentionBlockWeights<T> self_attn;
    MlpWeights<T> mlp;
    LayerNormWeights<T> ln1, ln2;
};

template <typename T>
struct DecoderLayerWeights {
    AttentionBlockWeights<T> self_attn;
    AttentionBlockWeights<T> cross_attn;
    MlpWeights<T> mlp;
    LayerNormWeights<T> ln1, ln2, ln3;
};

template <typename T>
struct HeadWeights {
    Tensor<T> w1, b1; // D x D_head
    Tensor<T> w2, b2; // D_head x 1
};

namespace detail {

template <typename T>
Tensor<T> xavier_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::vector<T> w(rows * cols);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
    return Tensor<T>::param({rows, cols}, std::move(w));
}

template <typename T>
AttentionBlockWeights<T> init_attention_block(std::size_t d, Rng& rng) {
    AttentionBlockWeights<T> w;
    w.wq = xavier_matrix<T>(d, d, rng);
    w.bq = Tensor<T>::param({d}, std::vector<T>(d, T(0)));
    w.wk = xavier_matrix<T>(d, d, rng);
    w.bk = Tensor<T>::param({d}, std::vector<T>(d, T(0)));
    w.wv = xavier_matrix<T>(d, d, rng);
    w.bv = Tensor<T>::param({d}, std::vector<T>(d, T(0)));
    w.wo = xavier_matrix<T>(d, d, rng);
    w.bo = Tensor<T>::param({d}, std::vector<T>(d, T(0)));
    return w;
}

template <typename T>
MlpWeights<T> init_mlp(std::size_t d, std::size_t d_feat, Rng& rng) {
    MlpWeights<T> m;
    m.w1 = xavier_matrix<T>(d, d_feat, rng);
    m.b1 = Tensor<T>::param({d_feat}, std::vector<T>(d_feat, T(0)));
    m.w2 = xavier_matrix<T>(d_feat, d, rng);
    m.b2 = Tensor<T>::param({d}, std::vector<T>(d, T(0)));
    return m;
}

template <typename T>
LayerNormWeights<T> init_layer_norm(std::size_t d) {
    LayerNormWeights<T> ln;
    ln.gamma = Tensor<T>::param({d}, std::vector<T>(d, T(1)));
    ln.beta = Tensor<T>::param({d}, std::vector<T>(d, T(0)));
    return ln;
}

} // namespace detail

template <typename T>
EncoderLayerWeights<T> init_encoder_layer(const TransformerConfig& cfg, Rng& rng) {
    EncoderLayerWeights<T> l;
    l.self_attn = detail::init_attention_block<T>(cfg.d_model, rng);
    l.mlp = detail::init_mlp<T>(cfg.d_model, cfg.d_feat, rng);
    l.ln1 = detail::init_layer_norm<T>(cfg.d_model);
    l.ln2 = detail::init_layer_norm<T>(cfg.d_model);
    return l;
}

template <typename T>
DecoderLayerWeights<T> init_decoder_layer(const TransformerConfig& cfg, Rng& rng) {
    DecoderLayerWeights<T> l;
    l.self_attn = detail::init_attention_block<T>(cfg.d_model, rng);
    l.cross_attn = detail::init_attention_block<T>(cfg.d_model, rng);
    l.mlp = detail::init_mlp<T>(cfg.d_model, cfg.d_feat, rng);
    l.ln1 = detail::init_layer_norm<T>(cfg.d_model);
    l.ln2 = detail::init_layer_norm<T>(cfg.d_model);
    l.ln3 = detail::init_layer_norm<T>(cfg.d_model);
    return l;
}

template <typename T>
HeadWeights<T> init_head(const TransformerConfig& cfg, Rng& rng) {
    HeadWeights<T> h;
    h.w1 = detail::xavier_matrix<T>(cfg.d_model, cfg.d_head, rng);
    h.b1 = Tensor<T>::param({cfg.d_head}, std::vector<T>(cfg.d_head, T(0)));
    h.w2 = detail::xavier_matrix<T>(cfg.d_head, 1, rng);
    h.b2 = Tensor<T>::param({1}, std::vector<T>(1, T(0)));
    return h;
}

// Scaled dot-product attention with n_heads parallel heads: per head
// softmax(Q K^T / sqrt(d_per_head)) V, heads concatenated, output-projected.
// When trace is non-null the post-softmax weights of every head are captured.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                               const AttentionBlockWeights<T>& w, std::size_t n_heads,
                               AttentionStage stage = AttentionStage::Encoder, std::size_t layer = 0,
                               AttentionTrace<T>* trace = nullptr) {
    const std::size_t d = q_in.dim(1);
    if (d % n_heads != 0)
        throw std::invalid_argument("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                                    std::to_string(n_heads) + " heads");
    if (k_in.dim(0) != v_in.dim(0))
        throw std::invalid_argument("multi_head_attention: key rows " + std::to_string(k_in.dim(0)) +
                                    " != value rows " + std::to_string(v_in.dim(0)));
    const std::size_t dh = d / n_heads;
    const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));

    Tensor<T> q = add_rowwise(matmul(q_in, w.wq), w.bq);
    Tensor<T> k = add_rowwise(matmul(k_in, w.wk), w.bk);
    Tensor<T> v = add_rowwise(matmul(v_in, w.wv), w.bv);

    std::vector<Tensor<T>> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor<T> attn = softmax(mul_scalar(matmul(qh, transpose(kh)), scale), std::size_t{1});
        if (trace != nullptr) {
            AttentionRecord<T> rec;
            rec.stage = stage;
            rec.layer = layer;
            rec.head = h;
            rec.rows = attn.dim(0);
            rec.cols = attn.dim(1);
            rec.weights = attn.value();
            trace->push_back(std::move(rec));
        }
        heads.push_back(matmul(attn, vh));
    }
    return add_rowwise(matmul(concat_cols(heads), w.wo), w.bo);
}

namespace detail {

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const MlpWeights<T>& m) {
    return add_rowwise(matmul(relu(add_rowwise(matmul(x, m.w1), m.b1)), m.w2), m.b2);
}

} // namespace detail

template <typename T>
Tensor<T> encoder_forward(const TokenSequence<T>& seq, const std::vector<EncoderLayerWeights<T>>& layers,
                          const TransformerConfig& cfg, AttentionTrace<T>* trace = nullptr) {
    if (seq.width != cfg.d_model)
        throw std::invalid_argument("encoder_forward: sequence width " + std::to_string(seq.width) +
                                    " != d_model " + std::to_string(cfg.d_model));
    Tensor<T> y = seq.tokens;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        Tensor<T> a = multi_head_attention(y, y, y, l.self_attn, cfg.n_heads, AttentionStage::Encoder, i, trace);
        Tensor<T> y1 = layer_norm(add(a, y), l.ln1.gamma, l.ln1.beta);
        Tensor<T> f = detail::feed_forward(y1, l.mlp);
        y = layer_norm(add(f, y1), l.ln2.gamma, l.ln2.beta);
    }
    return y;
}

// Decoder over the reference stream; enc_out serves as key/value in every
// layer's cross block, used as-is with no positional re-addition.
template <typename T>
Tensor<T> decoder_forward(const TokenSequence<T>& seq, const Tensor<T>& enc_out,
                          const std::vector<DecoderLayerWeights<T>>& layers, const TransformerConfig& cfg,
                          AttentionTrace<T>* trace = nullptr) {
    if (seq.width != cfg.d_model)
        throw std::invalid_argument("decoder_forward: sequence width " + std::to_string(seq.width) +
                                    " != d_model " + std::to_string(cfg.d_model));
    if (enc_out.dim(0) != seq.tokens.dim(0) || enc_out.dim(1) != seq.tokens.dim(1))
        throw std::invalid_argument("decoder_forward: encoder output " + shape_str(enc_out.shape()) +
                                    " does not match sequence " + shape_str(seq.tokens.shape()));
    Tensor<T> z = seq.tokens;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        Tensor<T> a = multi_head_attention(z, z, z, l.self_attn, cfg.n_heads, AttentionStage::DecoderSelf, i, trace);
        Tensor<T> z1 = layer_norm(add(a, z), l.ln1.gamma, l.ln1.beta);
        Tensor<T> c =
            multi_head_attention(z1, enc_out, enc_out, l.cross_attn, cfg.n_heads, AttentionStage::DecoderCross, i, trace);
        Tensor<T> z2 = layer_norm(add(c, z1), l.ln2.gamma, l.ln2.beta);
        Tensor<T> f = detail::feed_forward(z2, l.mlp);
        z = layer_norm(add(f, z2), l.ln3.gamma, l.ln3.beta);
    }
    return z;
}

// score = W2 * relu(W1 * f + b1) + b2 on the first decoder output row.
template <typename T>
Tensor<T> head_forward(const Tensor<T>& f_d0, const HeadWeights<T>& head) {
    detail::require_rank("head_forward", f_d0, 2);
    if (f_d0.dim(0) != 1)
        throw std::invalid_argument("head_forward: expected a single row, got " + shape_str(f_d0.shape()));
    return add_rowwise(matmul(relu(add_rowwise(matmul(f_d0, head.w1), head.b1)), head.w2), head.b2);
}

// ---------------------------------------------------------------------------
// Attention heat map export

struct HeatMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data; // [0, 1]
};

// Averages the attention received by each spatial token over all records
// (quality row/column dropped), reshapes to the feature grid, bilinearly
// resizes to the requested image size and min-max normalizes to [0, 1].
// A constant map normalizes to all zeros.
template <typename T>
HeatMap export_attention(const AttentionTrace<T>& records, std::size_t grid_h, std::size_t grid_w,
                         std::size_t image_h, std::size_t image_w) {
    if (records.empty()) throw std::invalid_argument("export_attention: no attention records");
    if (image_h == 0 || image_w == 0) throw std::invalid_argument("export_attention: image size must be positive");
    const std::size_t n = grid_h * grid_w;
    std::vector<double> received(n, 0.0);
    for (const auto& rec : records) {
        if (rec.rows != 1 + n || rec.cols != 1 + n)
            throw std::invalid_argument("export_attention: record is " + std::to_string(rec.rows) + "x" +
                                        std::to_string(rec.cols) + ", expected " + std::to_string(1 + n) + " square");
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 1; i <= n; ++i) acc += static_cast<double>(rec.weights[i * rec.cols + 1 + j]);
            received[j] += acc / static_cast<double>(n);
        }
    }
    for (auto& v : received) v /= static_cast<double>(records.size());

    HeatMap map;
    map.height = image_h;
    map.width = image_w;
    map.data.resize(image_h * image_w);
    for (std::size_t r = 0; r < image_h; ++r) {
        const double fy = std::clamp((static_cast<double>(r) + 0.5) * static_cast<double>(grid_h) /
                                             static_cast<double>(image_h) -
                                         0.5,
                                     0.0, static_cast<double>(grid_h - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, grid_h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t c = 0; c < image_w; ++c) {
            const double fx = std::clamp((static_cast<double>(c) + 0.5) * static_cast<double>(grid_w) /
                                                 static_cast<double>(image_w) -
                                             0.5,
                                         0.0, static_cast<double>(grid_w - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, grid_w - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = received[y0 * grid_w + x0] * (1.0 - wx) + received[y0 * grid_w + x1] * wx;
            const double bot = received[y1 * grid_w + x0] * (1.0 - wx) + received[y1 * grid_w + x1] * wx;
            map.data[r * image_w + c] = static_cast<float>(top * (1.0 - wy) + bot * wy);
        }
    }

    float lo = map.data[0], hi = map.data[0];
    for (float v : map.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi > lo) {
        const float inv = 1.0f / (hi - lo);
        for (auto& v : map.data) v = (v - lo) * inv;
    } else {
        std::fill(map.data.begin(), map.data.end(), 0.0f);
    }
    return map;
}

inline void write_heatmap_pgm(const HeatMap& map, const std::filesystem::path& path) {
    std::vector<std::uint8_t> gray(map.data.size());
    for (std::size_t i = 0; i < gray.size(); ++i)
        gray[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map.data[i], 0.0f, 1.0f) * 255.0f));
    write_pgm(path, map.height, map.width, gray);
}

} // namespace iqt
