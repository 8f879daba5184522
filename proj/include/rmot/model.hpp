// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "rmot/decoder.hpp"
#include "rmot/encoder.hpp"
#include "rmot/temporal.hpp"

namespace rmot {

struct ModelConfig {
    std::size_t dim = 32;
    std::size_t heads = 4;
    std::size_t levels = 4;
    std::size_t points = 4;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 3;
    std::size_t n_det = 30;
    std::size_t ffn_hidden = 64;
    std::size_t window = 5;
    std::size_t max_words = 12;
    RiqaVariant riqa = RiqaVariant::Pre;
    RiqaMode riqa_mode = RiqaMode::Both;
    EncoderOrder order = EncoderOrder::Cme;
    std::uint64_t seed = 1;

    void validate() const {
        if (dim == 0 || heads == 0 || dim % heads != 0) throw ContractError("model: dim must be a positive multiple of heads");
        if (dim % 4 != 0) throw ContractError("model: dim must be divisible by 4");
        if (levels == 0 || points == 0 || enc_layers == 0 || dec_layers == 0 || n_det == 0 || window == 0) {
            throw ContractError("model: extents must be positive");
        }
    }

    EncoderConfig encoder() const { return {dim, heads, levels, points, enc_layers, ffn_hidden}; }
    DecoderConfig decoder() const { return {dim, heads, levels, points, dec_layers, n_det, ffn_hidden}; }
};

/// All parameters of the tracker network. Not copyable: parameter tensors
/// are shared handles.
class Model {
public:
    explicit Model(const ModelConfig& c) : config(c) {
        c.validate();
        Rng rng(c.seed);
        pe = PositionalEncoders(store, c.dim, c.max_words, c.window, rng);
        backbone = Backbone(store, c.dim, c.levels, rng);
        words = WordEncoder(store, c.dim, rng);
        encoder = CrossModalEncoder(store, c.encoder(), rng);
        decoder = Decoder(store, c.decoder(), rng);
        temporal = TemporalParams(store, c.dim, c.heads, rng);
    }
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    ModelConfig config;
    ParamStore store;
    PositionalEncoders pe;
    Backbone backbone;
    WordEncoder words;
    CrossModalEncoder encoder;
    Decoder decoder;
    TemporalParams temporal;
};

/// Expression-dependent inputs, computed once per sequence.
struct ExpressionInputs {
    WordEmbeddings words;
    SentenceEmbedding sentence;
};

inline ExpressionInputs embed_expression(const Model& m, const std::string& text) {
    return {m.words(text), embed_sentence(m.decoder, m.words, text)};
}

/// A live track query carried into the next frame.
struct TrackQuery {
    int id = 0;
    int birth = 0;
    Tensor pos;            // 1 x D
    Tensor content;        // 1 x D
    Tensor anchor_logits;  // 1 x 4
};

inline QuerySet track_queries(const std::vector<TrackQuery>& tracks, int frame, std::size_t window) {
    QuerySet q;
    if (tracks.empty()) return q;
    std::vector<Tensor> pos, content, anchors;
    for (const auto& t : tracks) {
        pos.push_back(t.pos);
        content.push_back(t.content);
        anchors.push_back(t.anchor_logits);
        q.kinds.push_back(QueryKind::Track);
        q.ids.push_back(t.id);
        const int age = std::max(1, frame - t.birth);
        q.ages.push_back(std::min<std::size_t>(window, static_cast<std::size_t>(age)));
    }
    q.pos = concat_rows(pos);
    q.content = concat_rows(content);
    q.anchor_logits = concat_rows(anchors);
    return q;
}

struct FrameOutput {
    DecodeResult decoded;
    Tensor refined_rows;         // m x D after temporal and cross-query refinement
    Tensor refined_box_logits;   // m x 4
    Tensor refined_boxes;        // m x 4
    std::size_t n_track = 0;     // track rows come first
};

/// One frame through backbone, encoder, query adaptation, decoder and the
/// temporal module. Track rows precede detection rows.
inline FrameOutput forward_frame(const Model& m, const FeaturePyramid& pyramid, const ExpressionInputs& expr,
                                 const std::vector<TrackQuery>& tracks, const MemoryBank& bank, int frame) {
    const auto& c = m.config;
    QuerySet q = concat_queries(track_queries(tracks, frame, c.window), detection_queries(m.decoder));
    if (c.riqa == RiqaVariant::Pre) q = pre_decoder_adapt(m.decoder, m.pe, q, expr.sentence, c.riqa_mode);
    if (c.riqa == RiqaVariant::In) q = in_decoder_concat(m.decoder, q, expr.sentence);
    const FeaturePyramid fused = encode(m.encoder, m.pe, pyramid, expr.words, c.order);
    FrameOutput out;
    out.decoded = decode(m.decoder, q, fused, m.decoder.layers.size());
    out.n_track = tracks.size();
    const QuerySet& fin = out.decoded.final_queries;
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < tracks.size(); ++i) {
        const Tensor row = slice_rows(fin.content, i, i + 1);
        rows.push_back(temporal_refine(m.temporal, m.pe, row, bank.history(tracks[i].id)));
    }
    if (fin.size() > tracks.size()) rows.push_back(slice_rows(fin.content, tracks.size(), fin.size()));
    const Tensor qt = rows.size() == 1 ? rows.front() : concat_rows(rows);
    out.refined_rows = cross_query_refine(m.temporal, qt, fin.pos);
    out.refined_box_logits = refine_box_logits(m.temporal, out.refined_rows, out.decoded.layers.back().box_logits);
    out.refined_boxes = sigmoid(out.refined_box_logits);
    return out;
}

}  // namespace rmot
