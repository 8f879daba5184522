// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "rmot/boxes.hpp"
#include "rmot/encoder.hpp"

namespace rmot {

enum class QueryKind { Detection, Track, Referring };
enum class RiqaVariant { None, Pre, In };
enum class RiqaMode { Det, Track, Both };

inline const char* to_string(RiqaVariant v) {
    static constexpr const char* names[] = {"none", "pre", "in"};
    return names[static_cast<int>(v)];
}
inline const char* to_string(RiqaMode m) {
    static constexpr const char* names[] = {"det", "track", "both"};
    return names[static_cast<int>(m)];
}

inline constexpr double kAnchorEps = 1e-6;

/// Decoder tokens. Each row is a position half and a content half, kept as
/// separate m x D tensors; `rows()` gives the m x 2D concatenation.
struct QuerySet {
    Tensor pos;
    Tensor content;
    Tensor anchor_logits;  // m x 4; the anchor box is its sigmoid
    std::vector<QueryKind> kinds;
    std::vector<int> ids;             // identity for track rows, -1 otherwise
    std::vector<std::size_t> ages;    // frames since birth, capped at the memory window; 0 for detection rows

    std::size_t size() const { return kinds.size(); }
    Tensor rows() const { return concat_cols({pos, content}); }
    Tensor anchors() const { return sigmoid(anchor_logits); }

    bool has_referring() const { return std::find(kinds.begin(), kinds.end(), QueryKind::Referring) != kinds.end(); }
    std::size_t count(QueryKind k) const { return static_cast<std::size_t>(std::count(kinds.begin(), kinds.end(), k)); }
    std::vector<std::size_t> indices(QueryKind k) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < kinds.size(); ++i)
            if (kinds[i] == k) out.push_back(i);
        return out;
    }

    void check() const {
        const std::size_t m = size();
        if (pos.rows() != m || content.rows() != m || anchor_logits.rows() != m || ids.size() != m || ages.size() != m) {
            throw DimensionError("query set: row counts disagree");
        }
        if (anchor_logits.cols() != 4) throw DimensionError("query set: anchors must be m x 4");
        if (count(QueryKind::Referring) > 1) throw ContractError("query set: more than one referring row");
    }
};

inline Tensor box_logits(const std::vector<Box>& boxes) {
    std::vector<double> v;
    for (const Box& b : boxes) {
        for (double x : b.to_array()) v.push_back(logit(std::clamp(x, kAnchorEps, 1.0 - kAnchorEps)));
    }
    return Tensor({boxes.size(), 4}, std::move(v));
}

/// Row-wise concatenation of two query sets (a first).
inline QuerySet concat_queries(const QuerySet& a, const QuerySet& b) {
    if (a.size() == 0) return b;
    if (b.size() == 0) return a;
    QuerySet q;
    q.pos = concat_rows({a.pos, b.pos});
    q.content = concat_rows({a.content, b.content});
    q.anchor_logits = concat_rows({a.anchor_logits, b.anchor_logits});
    q.kinds = a.kinds;
    q.kinds.insert(q.kinds.end(), b.kinds.begin(), b.kinds.end());
    q.ids = a.ids;
    q.ids.insert(q.ids.end(), b.ids.begin(), b.ids.end());
    q.ages = a.ages;
    q.ages.insert(q.ages.end(), b.ages.begin(), b.ages.end());
    q.check();
    return q;
}

inline QuerySet select_queries(const QuerySet& q, const std::vector<std::size_t>& idx) {
    QuerySet out;
    if (idx.empty()) return out;
    out.pos = gather_rows(q.pos, idx);
    out.content = gather_rows(q.content, idx);
    out.anchor_logits = gather_rows(q.anchor_logits, idx);
    for (std::size_t i : idx) {
        out.kinds.push_back(q.kinds.at(i));
        out.ids.push_back(q.ids.at(i));
        out.ages.push_back(q.ages.at(i));
    }
    return out;
}

struct SentenceEmbedding {
    Tensor vector;  // 1 x D
    std::string text;
};

/// Head outputs for the non-referring rows of one decoder layer.
struct PredictionSet {
    Tensor cls;         // m x 1, in [0,1]
    Tensor box_logits;  // m x 4
    Tensor box;         // m x 4, sigmoid(box_logits)
    Tensor ref;         // m x 1, in [0,1]
    std::vector<QueryKind> kinds;
    std::vector<int> ids;
    std::size_t layer = 0;
    bool final = false;

    std::size_t size() const { return kinds.size(); }
};

struct PredictionTriplet {
    double class_score = 0.0;
    Box box;
    double ref_score = 0.0;
    QueryKind kind = QueryKind::Detection;
    int id = -1;
    std::size_t layer = 0;
};

inline std::vector<PredictionTriplet> triplets(const PredictionSet& p) {
    std::vector<PredictionTriplet> out;
    for (std::size_t i = 0; i < p.size(); ++i) {
        out.push_back({p.cls.at(i, 0), box_row(p.box, i), p.ref.at(i, 0), p.kinds[i], p.ids[i], p.layer});
    }
    return out;
}

struct DecoderConfig {
    std::size_t dim = 32;
    std::size_t heads = 4;
    std::size_t levels = 4;
    std::size_t points = 4;
    std::size_t layers = 3;
    std::size_t n_det = 30;
    std::size_t ffn_hidden = 64;
};

struct DecoderLayerParams {
    AttentionParams self;
    DeformAttnParams cross;
    LayerNorm norm1, norm2, norm3;
    Mlp ffn;

    DecoderLayerParams() = default;
    DecoderLayerParams(ParamStore& store, const std::string& name, const DecoderConfig& c, Rng& rng)
        : self(store, name + ".self", c.dim, c.heads, rng),
          cross(store, name + ".cross", c.dim, c.heads, c.levels, c.points, rng, false),
          norm1(store, name + ".norm1", c.dim),
          norm2(store, name + ".norm2", c.dim),
          norm3(store, name + ".norm3", c.dim),
          ffn(store, name + ".ffn", {c.dim, c.ffn_hidden, c.dim}, rng) {}
};

/// Class, box and referring branches, shared by every decoder layer.
struct ReferentHead {
    Linear cls;
    Mlp box;
    Linear ref;

    ReferentHead() = default;
    ReferentHead(ParamStore& store, std::size_t dim, Rng& rng)
        : cls(store, "head.cls", dim, 1, rng), box(make_ffn3(store, "head.box", dim, dim, 4, rng)), ref(store, "head.ref", dim, 1, rng) {
        // prior probability 0.01 for a fresh detection
        for (double& v : cls.bias.mutable_data()) v = logit(0.01);
    }
};

struct Decoder {
    std::vector<DecoderLayerParams> layers;
    ReferentHead head;
    Tensor det_pos;      // N_det x D
    Tensor det_content;  // N_det x D
    Tensor det_anchor;   // N_det x 4 logits
    Mlp sentence_ffn;
    AttentionParams riqa_self;
    LayerNorm riqa_norm;
    Mlp referring_ffn;
    Tensor referring_pos;  // 1 x D, q_p

    Decoder() = default;
    Decoder(ParamStore& store, const DecoderConfig& c, Rng& rng) {
        for (std::size_t i = 0; i < c.layers; ++i) layers.emplace_back(store, "dec.layer" + std::to_string(i), c, rng);
        head = ReferentHead(store, c.dim, rng);
        det_pos = store.add("dec.det_pos", {c.n_det, c.dim});
        det_content = store.add("dec.det_content", {c.n_det, c.dim});
        det_anchor = store.add("dec.det_anchor", {c.n_det, 4});
        for (double& v : det_pos.mutable_data()) v = rng.normal();
        for (double& v : det_content.mutable_data()) v = rng.normal();
        auto a = det_anchor.mutable_data();
        for (std::size_t i = 0; i < c.n_det; ++i) {
            a[4 * i] = logit(rng.uniform(0.1, 0.9));
            a[4 * i + 1] = logit(rng.uniform(0.1, 0.9));
            a[4 * i + 2] = logit(0.15);
            a[4 * i + 3] = logit(0.15);
        }
        sentence_ffn = Mlp(store, "dec.sentence_ffn", {c.dim, c.ffn_hidden, c.dim}, rng);
        riqa_self = AttentionParams(store, "dec.riqa_self", c.dim, c.heads, rng);
        riqa_norm = LayerNorm(store, "dec.riqa_norm", c.dim);
        referring_ffn = Mlp(store, "dec.referring_ffn", {c.dim, c.ffn_hidden, c.dim}, rng);
        referring_pos = store.add("dec.referring_pos", {1, c.dim});
        for (double& v : referring_pos.mutable_data()) v = rng.normal();
    }

    std::size_t n_det() const { return det_pos.rows(); }
};

/// The detection rows every frame starts from.
inline QuerySet detection_queries(const Decoder& dec) {
    QuerySet q;
    q.pos = dec.det_pos;
    q.content = dec.det_content;
    q.anchor_logits = dec.det_anchor;
    q.kinds.assign(dec.n_det(), QueryKind::Detection);
    q.ids.assign(dec.n_det(), -1);
    q.ages.assign(dec.n_det(), 0);
    return q;
}

/// Mean of the frozen token vectors (stand-in sentence encoder), then the
/// trainable FFN.
inline SentenceEmbedding embed_sentence(const Decoder& dec, const WordEncoder& words, const std::string& text) {
    const auto ids = tokenize(text);
    if (ids.empty()) throw ContractError("expression has no tokens");
    const Tensor avg({1, ids.size()}, 1.0 / static_cast<double>(ids.size()));
    return {dec.sentence_ffn(matmul(avg, gather_rows(words.table, ids))), text};
}

inline bool riqa_selects(RiqaMode mode, QueryKind k) {
    if (k == QueryKind::Referring) return false;
    if (mode == RiqaMode::Both) return true;
    return (mode == RiqaMode::Det) == (k == QueryKind::Detection);
}

/// Adds the sentence vector to the content half of the rows picked by `mode`.
inline QuerySet add_sentence(const QuerySet& q, const SentenceEmbedding& s, RiqaMode mode) {
    if (q.has_referring()) throw ContractError("add_sentence: referring row present");
    std::vector<double> mask(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) mask[i] = riqa_selects(mode, q.kinds[i]) ? 1.0 : 0.0;
    QuerySet out = q;
    out.content = add(q.content, matmul(Tensor({q.size(), 1}, std::move(mask)), s.vector));
    return out;
}

/// Sentence injection before the decoder followed by one self-attention
/// layer whose queries and keys carry the temporal code of each row's age.
inline QuerySet pre_decoder_adapt(const Decoder& dec, const PositionalEncoders& pe, const QuerySet& q,
                                  const SentenceEmbedding& s, RiqaMode mode) {
    QuerySet out = add_sentence(q, s, mode);
    const Tensor t = pe.ages(out.ages);
    const Tensor a = attn(dec.riqa_self, out.content, out.content, out.content, t, t);
    out.content = dec.riqa_norm(add(out.content, a));
    return out;
}

/// Appends the referring row: FFN(sentence) as content, q_p as position.
inline QuerySet in_decoder_concat(const Decoder& dec, const QuerySet& q, const SentenceEmbedding& s) {
    if (q.has_referring()) throw ContractError("in_decoder_concat: referring row already present");
    QuerySet r;
    r.pos = dec.referring_pos;
    r.content = dec.referring_ffn(s.vector);
    r.anchor_logits = Tensor::zeros({1, 4});
    r.kinds = {QueryKind::Referring};
    r.ids = {-1};
    r.ages = {0};
    if (q.size() == 0) return r;
    return concat_queries(q, r);
}

/// Self-attention over all rows, deformable cross-attention for the
/// non-referring rows only, then a residual FFN over all rows.
inline QuerySet decoder_layer(const DecoderLayerParams& p, const QuerySet& q, const FeaturePyramid& fused) {
    q.check();
    const std::size_t m = q.size();
    Tensor x = p.norm1(add(q.content, attn(p.self, q.content, q.content, q.content, q.pos, q.pos)));
    const auto keep = [&] {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < m; ++i)
            if (q.kinds[i] != QueryKind::Referring) idx.push_back(i);
        return idx;
    }();
    const bool has_ref = keep.size() != m;
    if (!keep.empty()) {
        const Tensor xn = has_ref ? gather_rows(x, keep) : x;
        const Tensor pn = has_ref ? gather_rows(q.pos, keep) : q.pos;
        const Tensor an = has_ref ? gather_rows(q.anchor_logits, keep) : q.anchor_logits;
        const Tensor refpts = slice_cols(sigmoid(an), 0, 2);
        const Tensor ca = ms_deform_attn(p.cross, add(xn, pn), refpts, fused.tokens, fused.layout);
        const Tensor yn = p.norm2(add(xn, ca));
        if (has_ref) {
            // reassemble in the original row order
            std::vector<std::size_t> order(m);
            std::size_t k = 0;
            for (std::size_t i = 0; i < m; ++i) {
                if (k < keep.size() && keep[k] == i) {
                    order[i] = k++;
                } else {
                    order[i] = keep.size() + (i - k);
                }
            }
            const std::vector<std::size_t> ref_rows = q.indices(QueryKind::Referring);
            const Tensor stacked = concat_rows({yn, gather_rows(x, ref_rows)});
            x = gather_rows(stacked, order);
        } else {
            x = yn;
        }
    }
    QuerySet out = q;
    out.content = p.norm3(add(x, p.ffn(x)));
    return out;
}

/// Applies the shared head to the non-referring rows.
inline PredictionSet referent_head(const ReferentHead& h, const QuerySet& q, std::size_t layer = 0, bool final = false) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < q.size(); ++i)
        if (q.kinds[i] != QueryKind::Referring) keep.push_back(i);
    PredictionSet p;
    p.layer = layer;
    p.final = final;
    if (keep.empty()) return p;
    const bool all = keep.size() == q.size();
    const Tensor x = all ? q.content : gather_rows(q.content, keep);
    const Tensor anchors = all ? q.anchor_logits : gather_rows(q.anchor_logits, keep);
    p.cls = sigmoid(h.cls(x));
    p.box_logits = add(h.box(x), anchors);
    p.box = sigmoid(p.box_logits);
    p.ref = sigmoid(h.ref(x));
    for (std::size_t i : keep) {
        p.kinds.push_back(q.kinds[i]);
        p.ids.push_back(q.ids[i]);
    }
    return p;
}

struct DecodeResult {
    std::vector<PredictionSet> layers;
    QuerySet final_queries;  // non-referring rows after the last layer
};

inline DecodeResult decode(const Decoder& dec, const QuerySet& queries, const FeaturePyramid& fused, std::size_t depth) {
    if (depth == 0 || depth > dec.layers.size()) throw ContractError("decode: depth must be in [1, layer count]");
    DecodeResult r;
    QuerySet q = queries;
    for (std::size_t l = 0; l < depth; ++l) {
        q = decoder_layer(dec.layers[l], q, fused);
        r.layers.push_back(referent_head(dec.head, q, l, l + 1 == depth));
    }
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < q.size(); ++i)
        if (q.kinds[i] != QueryKind::Referring) keep.push_back(i);
    r.final_queries = keep.size() == q.size() ? q : select_queries(q, keep);
    return r;
}

}  // namespace rmot
