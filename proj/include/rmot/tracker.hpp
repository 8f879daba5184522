// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rmot/model.hpp"
#include "rmot/world.hpp"

namespace rmot {

struct TrackerConfig {
    double beta_obj = 0.7;
    double beta_ref = 0.3;
    int miss_patience = 5;

    void validate() const {
        if (!(beta_obj > 0 && beta_obj < 1) || !(beta_ref > 0 && beta_ref < 1)) {
            throw ContractError("tracker: thresholds must lie in (0,1)");
        }
        if (miss_patience < 1) throw ContractError("tracker: miss_patience must be at least 1");
    }
};

struct TrackState {
    TrackQuery query;
    int misses = 0;
    bool alive = true;
};

/// One output row: a visible object at a frame with both scores.
struct TrackRecord {
    int frame = 0;
    int id = 0;
    Box box;
    double obj_score = 0.0;
    double ref_score = 0.0;

    friend bool operator==(const TrackRecord&, const TrackRecord&) = default;
};

struct StepResult {
    int frame = 0;
    std::vector<TrackRecord> visible;    // live tracks detected this frame, by id
    std::vector<TrackRecord> referents;  // subset with ref_score > beta_ref
    std::vector<int> spawned;
    std::vector<int> retired;
};

/// Detection rows whose class score clears beta_obj.
inline std::vector<std::size_t> spawn_candidates(const PredictionSet& p, double beta_obj) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p.kinds[i] == QueryKind::Detection && p.cls.at(i, 0) > beta_obj) out.push_back(i);
    return out;
}

inline std::vector<TrackRecord> filter_referents(const std::vector<TrackRecord>& rows, double beta_ref) {
    std::vector<TrackRecord> out;
    std::copy_if(rows.begin(), rows.end(), std::back_inserter(out), [&](const TrackRecord& r) { return r.ref_score > beta_ref; });
    return out;
}

/// Online tracker for one sequence at a time.
class Tracker {
public:
    Tracker(const Model& model, TrackerConfig cfg) : model_(model), cfg_(cfg), bank_(model.config.window) { cfg.validate(); }

    /// Starts a new sequence; throws VocabularyError on unknown words.
    void reset(const std::string& expression) {
        NoGradScope ng;
        expr_ = embed_expression(model_, expression);
        tracks_.clear();
        bank_.clear();
        frame_ = 0;
        next_id_ = 1;
        started_ = true;
    }

    const std::vector<TrackState>& tracks() const { return tracks_; }
    const MemoryBank& bank() const { return bank_; }
    int next_id() const { return next_id_; }

    StepResult step(const Image& img) {
        if (!started_) throw ContractError("tracker: reset() must be called before step()");
        NoGradScope ng;
        const int n = frame_++;
        const FeaturePyramid pyr = model_.backbone(img, n);
        std::vector<TrackQuery> live;
        for (const auto& t : tracks_) live.push_back(t.query);
        const FrameOutput out = forward_frame(model_, pyr, expr_, live, bank_, n);
        const PredictionSet& fin = out.decoded.layers.back();
        StepResult r;
        r.frame = n;
        auto record = [&](std::size_t row, int id) {
            const Box b = box_row(out.refined_boxes, row);
            r.visible.push_back({n, id, b, fin.cls.at(row, 0), fin.ref.at(row, 0)});
        };
        std::vector<TrackState> next;
        for (std::size_t i = 0; i < tracks_.size(); ++i) {
            TrackState t = tracks_[i];
            if (fin.cls.at(i, 0) > cfg_.beta_obj) {
                t.misses = 0;
                t.query.content = slice_rows(out.decoded.final_queries.content, i, i + 1);
                t.query.anchor_logits = slice_rows(out.refined_box_logits, i, i + 1);
                bank_.push(t.query.id, slice_rows(out.refined_rows, i, i + 1), n);
                record(i, t.query.id);
                next.push_back(std::move(t));
            } else if (++t.misses >= cfg_.miss_patience) {
                bank_.retire(t.query.id);
                r.retired.push_back(t.query.id);
            } else {
                next.push_back(std::move(t));
            }
        }
        for (std::size_t row : spawn_candidates(fin, cfg_.beta_obj)) {
            TrackState t;
            t.query.id = next_id_++;
            t.query.birth = n;
            t.query.pos = slice_rows(out.decoded.final_queries.pos, row, row + 1);
            t.query.content = slice_rows(out.decoded.final_queries.content, row, row + 1);
            t.query.anchor_logits = slice_rows(out.refined_box_logits, row, row + 1);
            bank_.push(t.query.id, slice_rows(out.refined_rows, row, row + 1), n);
            record(row, t.query.id);
            r.spawned.push_back(t.query.id);
            next.push_back(std::move(t));
        }
        tracks_ = std::move(next);
        std::sort(r.visible.begin(), r.visible.end(), [](const TrackRecord& a, const TrackRecord& b) { return a.id < b.id; });
        r.referents = filter_referents(r.visible, cfg_.beta_ref);
        return r;
    }

    /// Resets, runs every frame, returns the visible rows sorted by (frame, id).
    std::vector<TrackRecord> run_sequence(const std::vector<Image>& frames, const std::string& expression) {
        if (frames.empty()) throw ContractError("run_sequence: no frames");
        reset(expression);
        std::vector<TrackRecord> all;
        for (const auto& f : frames) {
            auto r = step(f);
            all.insert(all.end(), r.visible.begin(), r.visible.end());
        }
        return all;
    }

    /// Tracker state for resuming a run mid-sequence.
    TensorMap state() const {
        TensorMap m = bank_.to_map();
        m.emplace("tracker.frame", Tensor::scalar(frame_));
        m.emplace("tracker.next_id", Tensor::scalar(next_id_));
        std::vector<double> meta;
        for (const auto& t : tracks_) {
            const std::string k = "tracker.track." + std::to_string(t.query.id);
            m.emplace(k + ".pos", t.query.pos.detach());
            m.emplace(k + ".content", t.query.content.detach());
            m.emplace(k + ".anchor", t.query.anchor_logits.detach());
            meta.insert(meta.end(), {static_cast<double>(t.query.id), static_cast<double>(t.query.birth), static_cast<double>(t.misses)});
        }
        m.emplace("tracker.meta", Tensor({meta.size()}, meta));
        return m;
    }

    void load_state(const TensorMap& m, const std::string& expression) {
        reset(expression);
        bank_ = MemoryBank::from_map(m);
        frame_ = static_cast<int>(m.at("tracker.frame").item());
        next_id_ = static_cast<int>(m.at("tracker.next_id").item());
        const Tensor& meta = m.at("tracker.meta");
        for (std::size_t i = 0; i + 2 < meta.numel(); i += 3) {
            TrackState t;
            t.query.id = static_cast<int>(meta[i]);
            t.query.birth = static_cast<int>(meta[i + 1]);
            t.misses = static_cast<int>(meta[i + 2]);
            const std::string k = "tracker.track." + std::to_string(t.query.id);
            t.query.pos = m.at(k + ".pos");
            t.query.content = m.at(k + ".content");
            t.query.anchor_logits = m.at(k + ".anchor");
            tracks_.push_back(std::move(t));
        }
    }

private:
    const Model& model_;
    TrackerConfig cfg_;
    MemoryBank bank_;
    ExpressionInputs expr_;
    std::vector<TrackState> tracks_;
    int frame_ = 0;
    int next_id_ = 1;
    bool started_ = false;
};

// ---------------------------------------------------------------------------
// Prediction CSV

inline constexpr const char* kPredictionHeader = "frame,id,cx,cy,w,h,obj_score,ref_score";

inline std::string format_record(const TrackRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%d,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f", r.frame, r.id, r.box.cx, r.box.cy, r.box.w, r.box.h,
                  r.obj_score, r.ref_score);
    return buf;
}

inline void write_predictions(std::ostream& os, const std::vector<TrackRecord>& rows) {
    os << kPredictionHeader << '\n';
    for (const auto& r : rows) os << format_record(r) << '\n';
}

inline void save_predictions(const std::string& path, const std::vector<TrackRecord>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_predictions(os, rows);
}

class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::vector<TrackRecord> parse_predictions(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kPredictionHeader) {
        throw SchemaError("predictions: header must be exactly '" + std::string(kPredictionHeader) + "'");
    }
    std::vector<TrackRecord> out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 8) throw SchemaError("predictions line " + std::to_string(lineno) + ": expected 8 fields");
        try {
            std::size_t pos = 0;
            auto num = [&](const std::string& s) {
                const double v = std::stod(s, &pos);
                if (pos != s.size()) throw std::invalid_argument(s);
                return v;
            };
            auto integer = [&](const std::string& s) {
                const int v = std::stoi(s, &pos);
                if (pos != s.size()) throw std::invalid_argument(s);
                return v;
            };
            out.push_back({integer(f[0]), integer(f[1]), Box{num(f[2]), num(f[3]), num(f[4]), num(f[5])}, num(f[6]), num(f[7])});
        } catch (const std::logic_error&) {
            throw SchemaError("predictions line " + std::to_string(lineno) + ": malformed number");
        }
    }
    return out;
}

inline std::vector<TrackRecord> load_predictions(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open predictions " + path);
    return parse_predictions(is);
}

/// Renders prediction boxes over a frame; the label strip above each box
/// encodes the two scores as bar lengths (referring score / object score).
inline Image overlay(const Image& frame, const std::vector<TrackRecord>& rows, double beta_ref) {
    Image img = frame;
    for (const auto& r : rows) {
        const bool referent = r.ref_score > beta_ref;
        const std::array<double, 3> col = referent ? std::array<double, 3>{1.0, 0.9, 0.0} : std::array<double, 3>{0.6, 0.6, 0.6};
        draw_box(img, r.box, col);
        const int x0 = static_cast<int>(std::floor(r.box.x0() * img.width));
        const int y0 = static_cast<int>(std::floor(r.box.y0() * img.height)) - 2;
        const int span = std::max(1, static_cast<int>(std::lround(r.box.w * img.width)));
        for (int k = 0; k < static_cast<int>(std::lround(r.ref_score * span)); ++k) img.set(x0 + k, y0, {1.0, 0.2, 0.9});
        for (int k = 0; k < static_cast<int>(std::lround(r.obj_score * span)); ++k) img.set(x0 + k, y0 - 1, {0.1, 0.9, 0.9});
    }
    return img;
}

}  // namespace rmot
