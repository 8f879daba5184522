// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "rmot/nn.hpp"
#include "rmot/text.hpp"
#include "rmot/world.hpp"

namespace rmot {

/// Multi-scale feature maps flattened level by level into one token matrix.
struct FeaturePyramid {
    Tensor tokens;  // T x D
    PyramidLayout layout;
    Tensor pos;  // T x D, fixed sinusoidal code per level
    Tensor ref;  // T x 2, normalized cell centers
    std::vector<std::size_t> level_of;  // per token
    int frame = 0;

    std::size_t levels() const { return layout.size(); }
    Tensor level(std::size_t l) const {
        return slice_rows(tokens, layout.at(l).start, layout.at(l).start + layout.at(l).h * layout.at(l).w);
    }
    std::vector<std::pair<std::size_t, std::size_t>> shapes() const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (const auto& l : layout) out.emplace_back(l.h, l.w);
        return out;
    }
    FeaturePyramid with_tokens(Tensor t) const {
        FeaturePyramid p = *this;
        p.tokens = std::move(t);
        return p;
    }
};

/// Builds the non-learned parts of a pyramid for the given level extents.
inline FeaturePyramid make_pyramid(std::vector<Tensor> levels, const std::vector<std::pair<std::size_t, std::size_t>>& hw,
                                   std::size_t dim, int frame = 0) {
    if (levels.empty() || levels.size() != hw.size()) throw ContractError("pyramid: need one extent per level");
    FeaturePyramid p;
    p.frame = frame;
    std::vector<Tensor> pes;
    std::vector<double> ref;
    std::size_t start = 0;
    for (std::size_t l = 0; l < hw.size(); ++l) {
        const auto [h, w] = hw[l];
        if (levels[l].rows() != h * w || levels[l].cols() != dim) throw DimensionError("pyramid: level extent mismatch");
        if (l > 0 && (h >= hw[l - 1].first || w >= hw[l - 1].second)) {
            throw ContractError("pyramid: spatial extents must strictly decrease with level");
        }
        p.layout.push_back({h, w, start});
        pes.push_back(sinusoidal_pe2d(h, w, dim));
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                ref.push_back((static_cast<double>(j) + 0.5) / static_cast<double>(w));
                ref.push_back((static_cast<double>(i) + 0.5) / static_cast<double>(h));
                p.level_of.push_back(l);
            }
        }
        start += h * w;
    }
    p.tokens = levels.size() == 1 ? levels.front() : concat_rows(levels);
    p.pos = pes.size() == 1 ? pes.front() : concat_rows(pes);
    p.ref = Tensor({start, 2}, std::move(ref));
    return p;
}

/// Rearranges an h x w grid of c-channel tokens into (h/s) x (w/s) tokens of
/// s*s*c channels (non-overlapping patches, row-major inside each patch).
inline Tensor space_to_depth(const Tensor& x, std::size_t h, std::size_t w, std::size_t s) {
    if (x.rows() != h * w || h % s != 0 || w % s != 0) throw DimensionError("space_to_depth: extent mismatch");
    const std::size_t ho = h / s, wo = w / s;
    std::vector<Tensor> parts;
    for (std::size_t a = 0; a < s; ++a) {
        for (std::size_t b = 0; b < s; ++b) {
            std::vector<std::size_t> idx;
            idx.reserve(ho * wo);
            for (std::size_t i = 0; i < ho; ++i)
                for (std::size_t j = 0; j < wo; ++j) idx.push_back((i * s + a) * w + j * s + b);
            parts.push_back(gather_rows(x, idx));
        }
    }
    return concat_cols(parts);
}

inline Tensor image_tensor(const Image& img) {
    return Tensor({static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height), 3}, img.rgb);
}

/// Patchify convolution stack: a stride-4 stem followed by stride-2 stages,
/// each stage output projected to D.
struct Backbone {
    std::vector<Linear> stages;
    std::vector<Linear> proj;
    std::size_t dim = 0;

    Backbone() = default;
    Backbone(ParamStore& store, std::size_t d, std::size_t levels, Rng& rng) : dim(d) {
        std::size_t in = 4 * 4 * 3;
        for (std::size_t l = 0; l < levels; ++l) {
            stages.emplace_back(store, "backbone.stage" + std::to_string(l), in, d, rng);
            proj.emplace_back(store, "backbone.proj" + std::to_string(l), d, d, rng);
            in = 2 * 2 * d;
        }
    }

    std::size_t min_extent() const { return std::size_t{4} << (stages.size() - 1); }

    /// pixels: (h*w) x 3 row-major.
    FeaturePyramid operator()(const Tensor& pixels, std::size_t h, std::size_t w, int frame = 0) const {
        const std::size_t need = std::max<std::size_t>(32, min_extent());
        if (h < need || w < need) throw ContractError("backbone: frame smaller than " + std::to_string(need) + "px");
        if (h % min_extent() != 0 || w % min_extent() != 0) throw ContractError("backbone: frame extent not divisible by the coarsest stride");
        std::vector<Tensor> levels;
        std::vector<std::pair<std::size_t, std::size_t>> hw;
        Tensor x = pixels;
        std::size_t ch = h, cw = w;
        for (std::size_t l = 0; l < stages.size(); ++l) {
            const std::size_t s = l == 0 ? 4 : 2;
            x = relu(stages[l](space_to_depth(x, ch, cw, s)));
            ch /= s;
            cw /= s;
            levels.push_back(proj[l](x));
            hw.emplace_back(ch, cw);
        }
        return make_pyramid(std::move(levels), hw, dim, frame);
    }

    FeaturePyramid operator()(const Image& img, int frame = 0) const {
        return (*this)(image_tensor(img), static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width), frame);
    }
};

// ---------------------------------------------------------------------------

/// Word tokens of one expression after the trainable projection.
struct WordEmbeddings {
    Tensor tokens;  // L x D
    std::vector<std::size_t> ids;
    std::string text;
};

/// Frozen seeded token table with a trainable linear map on top.
struct WordEncoder {
    Tensor table;  // |V| x D, frozen
    Linear proj;

    WordEncoder() = default;
    WordEncoder(ParamStore& store, std::size_t dim, Rng& rng) {
        table = store.add("text.table", {kVocabulary.size(), dim}, false);
        for (double& v : table.mutable_data()) v = rng.normal();
        proj = Linear(store, "text.proj", dim, dim, rng);
    }

    WordEmbeddings operator()(const std::string& text) const {
        WordEmbeddings w;
        w.text = text;
        w.ids = tokenize(text);
        if (w.ids.empty()) throw ContractError("expression has no tokens");
        w.tokens = proj(gather_rows(table, w.ids));
        return w;
    }
};

struct EncoderLayer {
    DeformAttnParams attn;
    LayerNorm norm1, norm2;
    Mlp ffn;

    EncoderLayer() = default;
    EncoderLayer(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads, std::size_t levels,
                 std::size_t points, std::size_t hidden, Rng& rng)
        : attn(store, name + ".attn", dim, heads, levels, points, rng),
          norm1(store, name + ".norm1", dim),
          norm2(store, name + ".norm2", dim),
          ffn(store, name + ".ffn", {dim, hidden, dim}, rng) {}
};

enum class EncoderOrder { Cme, Baseline };

inline const char* to_string(EncoderOrder o) { return o == EncoderOrder::Cme ? "cme" : "baseline"; }

struct EncoderConfig {
    std::size_t dim = 32;
    std::size_t heads = 4;
    std::size_t levels = 4;
    std::size_t points = 4;
    std::size_t layers = 2;
    std::size_t ffn_hidden = 64;
};

struct CrossModalEncoder {
    std::vector<EncoderLayer> layers;
    Tensor level_embed;  // levels x D
    AttentionParams fusion;

    CrossModalEncoder() = default;
    CrossModalEncoder(ParamStore& store, const EncoderConfig& c, Rng& rng) {
        for (std::size_t i = 0; i < c.layers; ++i) {
            layers.emplace_back(store, "enc.layer" + std::to_string(i), c.dim, c.heads, c.levels, c.points, c.ffn_hidden, rng);
        }
        level_embed = store.add("enc.level_embed", {c.levels, c.dim});
        for (double& v : level_embed.mutable_data()) v = 0.1 * rng.normal();
        fusion = AttentionParams(store, "enc.fusion", c.dim, c.heads, rng, false);
    }
};

/// One deformable self-attention layer: every cell queries around its own
/// center across all levels, then residual + norm and a residual FFN + norm.
inline FeaturePyramid encoder_layer(const EncoderLayer& layer, const Tensor& level_embed, const FeaturePyramid& in) {
    const Tensor q = add(add(in.tokens, in.pos), gather_rows(level_embed, in.level_of));
    const Tensor a = ms_deform_attn(layer.attn, q, in.ref, in.tokens, in.layout);
    const Tensor x = layer.norm1(add(in.tokens, a));
    return in.with_tokens(layer.norm2(add(x, layer.ffn(x))));
}

inline FeaturePyramid deform_self_encode(const CrossModalEncoder& enc, const FeaturePyramid& in) {
    FeaturePyramid p = in;
    for (const auto& layer : enc.layers) p = encoder_layer(layer, enc.level_embed, p);
    return p;
}

/// Residual cross-attention from every cell to the expression's words.
/// Queries carry the image code, keys the word-position code; values do not.
inline FeaturePyramid fuse_text(const CrossModalEncoder& enc, const PositionalEncoders& pe, const FeaturePyramid& in,
                                const WordEmbeddings& words) {
    if (words.tokens.rows() == 0) throw ContractError("fuse_text: empty expression");
    const Tensor a = attn(enc.fusion, in.tokens, words.tokens, words.tokens, in.pos, pe.words(words.tokens.rows()));
    return in.with_tokens(add(in.tokens, a));
}

inline FeaturePyramid encode(const CrossModalEncoder& enc, const PositionalEncoders& pe, const FeaturePyramid& in,
                             const WordEmbeddings& words, EncoderOrder order) {
    if (order == EncoderOrder::Cme) return fuse_text(enc, pe, deform_self_encode(enc, in), words);
    return deform_self_encode(enc, fuse_text(enc, pe, in, words));
}

}  // namespace rmot
