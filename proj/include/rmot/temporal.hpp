// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <map>
#include <string>
#include <vector>

#include "rmot/nn.hpp"

namespace rmot {

/// Per-identity ring buffer of the last K refined query rows.
class MemoryBank {
public:
    struct Entry {
        int frame;
        Tensor row;  // 1 x D
    };

    explicit MemoryBank(std::size_t window = 5) : window_(window) {
        if (window == 0) throw ContractError("memory bank: window must be positive");
    }

    std::size_t window() const { return window_; }

    void push(int id, const Tensor& row, int frame) {
        if (row.dim() != 2 || row.rows() != 1) throw DimensionError("memory bank: entries are 1 x D rows");
        auto& q = entries_[id];
        if (!q.empty() && frame <= q.back().frame) {
            throw ContractError("memory bank: stale frame stamp " + std::to_string(frame) + " for identity " +
                                std::to_string(id));
        }
        q.push_back({frame, row});
        while (q.size() > window_) q.pop_front();
    }

    void retire(int id) { entries_.erase(id); }
    bool contains(int id) const { return entries_.count(id) != 0; }
    std::size_t size(int id) const {
        auto it = entries_.find(id);
        return it == entries_.end() ? 0 : it->second.size();
    }
    std::vector<int> ids() const {
        std::vector<int> out;
        for (const auto& [id, q] : entries_) out.push_back(id);
        return out;
    }
    const std::deque<Entry>& entries(int id) const { return entries_.at(id); }

    /// Oldest to newest, k x D; undefined tensor when empty.
    Tensor history(int id) const {
        auto it = entries_.find(id);
        if (it == entries_.end() || it->second.empty()) return {};
        std::vector<Tensor> rows;
        for (const auto& e : it->second) rows.push_back(e.row);
        return rows.size() == 1 ? rows.front() : concat_rows(rows);
    }

    void clear() { entries_.clear(); }

    TensorMap to_map(const std::string& prefix = "bank.") const {
        TensorMap m;
        m.emplace(prefix + "window", Tensor::scalar(static_cast<double>(window_)));
        for (const auto& [id, q] : entries_) {
            std::vector<double> frames;
            std::vector<Tensor> rows;
            for (const auto& e : q) {
                frames.push_back(e.frame);
                rows.push_back(e.row.detach());
            }
            const std::string key = prefix + std::to_string(id);
            m.emplace(key + ".frames", Tensor({frames.size()}, frames));
            m.emplace(key + ".rows", concat_rows(rows).detach());
        }
        return m;
    }

    static MemoryBank from_map(const TensorMap& m, const std::string& prefix = "bank.") {
        auto w = m.find(prefix + "window");
        if (w == m.end()) throw CheckpointError("memory bank: missing window entry");
        MemoryBank bank(static_cast<std::size_t>(w->second.item()));
        for (const auto& [key, t] : m) {
            if (key.rfind(prefix, 0) != 0 || key.size() < prefix.size() + 7 || key.substr(key.size() - 7) != ".frames") continue;
            const std::string idstr = key.substr(prefix.size(), key.size() - prefix.size() - 7);
            const int id = std::stoi(idstr);
            const Tensor& rows = m.at(prefix + idstr + ".rows");
            if (rows.rows() != t.numel()) throw CheckpointError("memory bank: frame/row count mismatch");
            for (std::size_t i = 0; i < t.numel(); ++i) {
                bank.push(id, slice_rows(rows, i, i + 1).detach(), static_cast<int>(t[i]));
            }
        }
        return bank;
    }

private:
    std::size_t window_;
    std::map<int, std::deque<Entry>> entries_;
};

struct TemporalParams {
    AttentionParams history_attn;
    AttentionParams cross_attn;
    Mlp box_ffn;

    TemporalParams() = default;
    TemporalParams(ParamStore& store, std::size_t dim, std::size_t heads, Rng& rng)
        : history_attn(store, "temporal.history", dim, heads, rng),
          cross_attn(store, "temporal.cross", dim, heads, rng),
          box_ffn(make_ffn3(store, "temporal.box", dim, dim, 4, rng)) {
        // starts as the identity on boxes
        box_ffn.last().fill(0.0, 0.0);
    }
};

/// The current row attends to its own history; keys carry the temporal code
/// of their age (newest = 1). Empty history returns q unchanged.
inline Tensor temporal_refine(const TemporalParams& p, const PositionalEncoders& pe, const Tensor& q, const Tensor& history) {
    if (!history.defined() || history.rows() == 0) return q;
    const std::size_t k = history.rows();
    if (k > pe.window()) throw ContractError("temporal_refine: history longer than the memory window");
    std::vector<std::size_t> ages(k);
    for (std::size_t i = 0; i < k; ++i) ages[i] = k - i;
    return add(q, attn(p.history_attn, q, history, history, Tensor{}, pe.ages(ages)));
}

/// Residual self-attention across all rows of the frame with the query
/// position halves on queries and keys.
inline Tensor cross_query_refine(const TemporalParams& p, const Tensor& rows, const Tensor& pos) {
    if (rows.rows() == 0) throw ContractError("cross_query_refine: no rows");
    return add(rows, attn(p.cross_attn, rows, rows, rows, pos, pos));
}

/// Offsets added in logit space.
inline Tensor refine_box_logits(const TemporalParams& p, const Tensor& rows, const Tensor& box_logits) {
    return add(box_logits, p.box_ffn(rows));
}

inline Tensor refine_boxes(const TemporalParams& p, const Tensor& rows, const Tensor& boxes) {
    const Tensor b = minimum(maximum(boxes, Tensor::scalar(1e-6)), Tensor::scalar(1.0 - 1e-6));
    return sigmoid(refine_box_logits(p, rows, log(div(b, add_scalar(scale(b, -1.0), 1.0)))));
}

}  // namespace rmot
