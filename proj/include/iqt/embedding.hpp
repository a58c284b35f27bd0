// SPDX-License-Identifier: Apache-2.0
//
// Feature map -> transformer input sequence: per-cell channel projection to
// width D, spatial flattening to N row vectors, quality-token prepend and
// positional-embedding add. Encoder and decoder streams share the projection
// but carry their own quality tokens and position tables.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include "iqt/backbone.hpp"
#include "iqt/rng.hpp"
#include "iqt/tensor.hpp"

namespace iqt {

template <typename T>
struct EmbeddingParams {
    Tensor<T> proj_w;            // C x D
    Tensor<T> proj_b;            // D
    Tensor<T> quality_token_enc; // 1 x D
    Tensor<T> quality_token_dec; // 1 x D
    Tensor<T> pos_enc;           // (1+N) x D
    Tensor<T> pos_dec;           // (1+N) x D
};

// Row 0 is always the quality slot; rows 1..N map to feature-map cells in
// row-major order.
template <typename T>
struct TokenSequence {
    Tensor<T> tokens; // (1+N) x D
    std::size_t n_patches = 0;
    std::size_t width = 0;
};

template <typename T>
EmbeddingParams<T> init_embedding(std::size_t channels, std::size_t d_model, std::size_t n_patches, Rng& rng) {
    EmbeddingParams<T> p;
    const double limit = std::sqrt(6.0 / static_cast<double>(channels + d_model));
    std::vector<T> w(channels * d_model);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
    p.proj_w = Tensor<T>::param({channels, d_model}, std::move(w));
    p.proj_b = Tensor<T>::param({d_model}, std::vector<T>(d_model, T(0)));

    auto trunc = [&rng](std::size_t n) {
        std::vector<T> v(n);
        for (auto& x : v) x = static_cast<T>(rng.truncated_normal(0.02));
        return v;
    };
    p.quality_token_enc = Tensor<T>::param({1, d_model}, trunc(d_model));
    p.quality_token_dec = Tensor<T>::param({1, d_model}, trunc(d_model));
    p.pos_enc = Tensor<T>::param({1 + n_patches, d_model}, trunc((1 + n_patches) * d_model));
    p.pos_dec = Tensor<T>::param({1 + n_patches, d_model}, trunc((1 + n_patches) * d_model));
    return p;
}

// 1x1 channel projection C -> D applied independently to every spatial cell,
// then flattened: output row k is cell (k div W, k mod W).
template <typename T>
Tensor<T> project_and_flatten(const FeatureMap<T>& f, const Tensor<T>& proj_w, const Tensor<T>& proj_b) {
    if (f.channels != proj_w.dim(0))
        throw std::invalid_argument("project_and_flatten: feature map has " + std::to_string(f.channels) +
                                    " channels, projection expects " + std::to_string(proj_w.dim(0)));
    // H x W x C row-major is already (H*W) x C
    auto cells = Tensor<T>::constant({f.height * f.width, f.channels}, f.data);
    return add_rowwise(matmul(cells, proj_w), proj_b);
}

// Row 0 = token + pos[0]; row k = x[k-1] + pos[k] for k >= 1.
template <typename T>
TokenSequence<T> assemble_sequence(const Tensor<T>& x, const Tensor<T>& token, const Tensor<T>& pos) {
    detail::require_rank("assemble_sequence", x, 2);
    detail::require_rank("assemble_sequence", token, 2);
    detail::require_rank("assemble_sequence", pos, 2);
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (token.dim(0) != 1 || token.dim(1) != d)
        throw std::invalid_argument("assemble_sequence: token " + shape_str(token.shape()) + " must be 1 x " +
                                    std::to_string(d));
    if (pos.dim(0) != 1 + n || pos.dim(1) != d)
        throw std::invalid_argument("assemble_sequence: position table " + shape_str(pos.shape()) + " must be " +
                                    std::to_string(1 + n) + " x " + std::to_string(d));
    TokenSequence<T> seq;
    seq.tokens = add(concat_rows(token, x), pos);
    seq.n_patches = n;
    seq.width = d;
    return seq;
}

} // namespace iqt
