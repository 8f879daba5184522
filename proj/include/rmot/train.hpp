// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rmot/losses.hpp"
#include "rmot/model.hpp"
#include "rmot/optim.hpp"
#include "rmot/world.hpp"

namespace rmot {

struct TrainConfig {
    AdamWConfig optim;
    LossWeights loss;
    bool cqm = true;
    int epochs = 20;
    int decay_epoch = 15;
    double decay = 0.1;
    /// Frames per optimizer step, sampled as a contiguous window; 0 = whole sequence.
    int clip_len = 0;
    std::uint64_t seed = 1;
    /// Where a non-finite loss writes its diagnostic dump; empty = no file.
    std::string dump_path;

    void validate() const {
        loss.validate();
        if (epochs < 0 || clip_len < 0) throw ContractError("train: epochs and clip_len must be nonnegative");
        if (!(optim.lr > 0)) throw ContractError("train: learning rate must be positive");
    }
};

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per-frame loss record of one clip.
struct FrameLog {
    int frame = 0;
    double total = 0, track = 0, detection = 0, temporal = 0, aux = 0;
    std::size_t tracks = 0, newborn = 0;
};

struct ClipLoss {
    Tensor value;  // mean over frames
    std::vector<FrameLog> frames;
};

/// Ground truth for one frame given the identities currently bound to track
/// queries. Identities absent from the frame become background targets.
inline FrameTargets frame_targets(const Scenario& s, int f, const std::vector<TrackQuery>& tracks) {
    FrameTargets gt;
    const auto& refs = s.referents.at(static_cast<std::size_t>(f));
    auto target = [&](const ObjectTruth& o) {
        return Target{o.id, o.box(f), std::binary_search(refs.begin(), refs.end(), o.id)};
    };
    std::set<int> tracked;
    for (const auto& t : tracks) {
        tracked.insert(t.id);
        const ObjectTruth& o = s.object(t.id);
        if (o.visible(f)) {
            gt.tracks[t.id] = target(o);
            gt.existing.push_back(target(o));
        } else {
            gt.tracks[t.id] = std::nullopt;
        }
    }
    for (const auto& o : s.objects)
        if (o.visible(f) && !tracked.count(o.id)) gt.newborn.push_back(target(o));
    return gt;
}

inline bool all_finite(const FrameOutput& fo) {
    for (const auto& l : fo.decoded.layers)
        if (!all_finite(l.cls) || !all_finite(l.box) || !all_finite(l.ref)) return false;
    return all_finite(fo.refined_boxes);
}

/// Teacher-forced loss over frames [start, start + len) of one scenario.
/// Track queries carry ground-truth identities: a final-layer match to a
/// newborn binds that row to the object from the next frame on, and a track
/// whose object left the frame pays a background loss and is dropped.
inline ClipLoss clip_loss(const Model& m, const Scenario& s, int start, int len, const TrainConfig& cfg) {
    if (start < 0 || len <= 0 || start + len > s.n_frames) throw ContractError("clip_loss: frame window out of range");
    const ExpressionInputs expr = embed_expression(m, s.expression.text);
    std::vector<TrackQuery> tracks;
    MemoryBank bank(m.config.window);
    std::vector<Tensor> terms;
    ClipLoss out;
    for (int f = start; f < start + len; ++f) {
        const FrameTargets gt = frame_targets(s, f, tracks);
        const FrameOutput fo = forward_frame(m, m.backbone(render(s, f), f), expr, tracks, bank, f);
        if (!all_finite(fo)) {
            FrameLog log{f, std::nan(""), 0, 0, 0, 0, tracks.size(), gt.newborn.size()};
            out.frames.push_back(log);
            out.value = Tensor::scalar(std::nan(""));
            return out;
        }
        const TemporalBoxes tb{fo.refined_boxes};
        const LossReport rep = total_loss(fo.decoded.layers, gt, &tb, cfg.loss, cfg.cqm);
        terms.push_back(rep.total);

        FrameLog log{f, rep.total.item(), rep.track, rep.detection, rep.temporal, 0.0, tracks.size(), gt.newborn.size()};
        for (double a : rep.aux) log.aux += a;
        out.frames.push_back(log);

        const QuerySet& fin = fo.decoded.final_queries;
        std::vector<TrackQuery> next;
        for (std::size_t i = 0; i < tracks.size(); ++i) {
            TrackQuery t = tracks[i];
            if (!gt.tracks.at(t.id)) {
                bank.retire(t.id);
                continue;
            }
            t.content = slice_rows(fin.content, i, i + 1);
            t.anchor_logits = slice_rows(fo.refined_box_logits, i, i + 1).detach();
            bank.push(t.id, slice_rows(fo.refined_rows, i, i + 1), f);
            next.push_back(std::move(t));
        }
        for (const auto& [row, target] : rep.final_matches) {
            TrackQuery t;
            t.id = target.id;
            t.birth = f;
            t.pos = slice_rows(fin.pos, row, row + 1);
            t.content = slice_rows(fin.content, row, row + 1);
            t.anchor_logits = slice_rows(fo.refined_box_logits, row, row + 1).detach();
            bank.push(t.id, slice_rows(fo.refined_rows, row, row + 1), f);
            next.push_back(std::move(t));
        }
        tracks = std::move(next);
    }
    out.value = scale(add_all(terms), 1.0 / static_cast<double>(len));
    return out;
}

inline nlohmann::json to_json(const FrameLog& l) {
    return {{"frame", l.frame},         {"total", l.total},     {"track", l.track},     {"detection", l.detection},
            {"temporal", l.temporal},   {"aux", l.aux},         {"tracks", l.tracks},   {"newborn", l.newborn}};
}

struct StepLog {
    long step = 0;
    int epoch = 0;
    std::uint64_t scenario_seed = 0;
    int start = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

class Trainer {
public:
    Trainer(Model& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)), opt_(model.store, cfg_.optim) {
        cfg_.validate();
    }

    int epoch() const { return epoch_; }
    const AdamW& optimizer() const { return opt_; }
    const TrainConfig& config() const { return cfg_; }

    double lr_for(int epoch) const { return epoch >= cfg_.decay_epoch ? cfg_.optim.lr * cfg_.decay : cfg_.optim.lr; }

    /// One optimizer step on a frame window of one scenario.
    StepLog step(const Scenario& s, int start, int len) {
        StepLog log{opt_.steps() + 1, epoch_, s.seed, start, 0.0, 0.0};
        Tape tape;
        TapeScope scope(tape);
        const ClipLoss cl = clip_loss(model_, s, start, len, cfg_);
        log.loss = cl.value.item();
        if (!std::isfinite(log.loss)) dump_and_throw(log, cl);
        tape.backward(cl.value);
        log.grad_norm = opt_.step();
        if (!std::isfinite(log.grad_norm)) dump_and_throw(log, cl);
        opt_.zero_grad();
        return log;
    }

    /// Loss of a window without updating anything.
    double evaluate_loss(const Scenario& s, int start, int len) const {
        NoGradScope ng;
        return clip_loss(model_, s, start, len, cfg_).value.item();
    }

    /// Scenario order and window starts of an epoch; a pure function of the
    /// seed and the epoch index.
    std::vector<std::pair<std::size_t, int>> schedule(const std::vector<Scenario>& data, int epoch) const {
        Rng rng(cfg_.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
        std::vector<std::pair<std::size_t, int>> out;
        for (std::size_t i : order) {
            const int len = window_len(data[i]);
            out.emplace_back(i, static_cast<int>(rng.integer(0, data[i].n_frames - len)));
        }
        return out;
    }

    int window_len(const Scenario& s) const { return cfg_.clip_len > 0 ? std::min(cfg_.clip_len, s.n_frames) : s.n_frames; }

    /// Runs one epoch; returns the mean step loss.
    double run_epoch(const std::vector<Scenario>& data, std::vector<StepLog>* steps = nullptr) {
        if (data.empty()) throw ContractError("train: empty dataset");
        opt_.set_lr(lr_for(epoch_));
        double total = 0.0;
        for (const auto& [i, start] : schedule(data, epoch_)) {
            const StepLog l = step(data[i], start, window_len(data[i]));
            total += l.loss;
            if (steps) steps->push_back(l);
        }
        ++epoch_;
        return total / static_cast<double>(data.size());
    }

    /// Trains up to the configured epoch count, appending `epoch,loss,lr`
    /// rows to `curve` when given.
    void fit(const std::vector<Scenario>& data, std::ostream* curve = nullptr, std::ostream* log = nullptr) {
        while (epoch_ < cfg_.epochs) {
            const double lr = lr_for(epoch_);
            const int e = epoch_;
            const double loss = run_epoch(data);
            if (curve) *curve << e << ',' << format_double(loss) << ',' << format_double(lr) << '\n' << std::flush;
            if (log) *log << "epoch " << e << " loss " << format_double(loss) << " lr " << format_double(lr) << '\n' << std::flush;
        }
    }

    TensorMap checkpoint() const {
        TensorMap m = model_.store.to_map();
        for (auto& [k, v] : opt_.to_map()) m.emplace(k, v);
        m.emplace("train.epoch", Tensor::scalar(epoch_));
        return m;
    }

    void restore(const TensorMap& m) {
        model_.store.load_map(m);
        opt_.load_map(m);
        auto it = m.find("train.epoch");
        if (it == m.end()) throw CheckpointError("checkpoint: missing train.epoch");
        epoch_ = static_cast<int>(it->second.item());
    }

private:
    [[noreturn]] void dump_and_throw(const StepLog& log, const ClipLoss& cl) const {
        nlohmann::json d = {{"error", "non-finite loss"}, {"step", log.step},  {"epoch", log.epoch},
                            {"scenario_seed", log.scenario_seed}, {"start", log.start}, {"loss", log.loss},
                            {"grad_norm", log.grad_norm}, {"lr", opt_.lr()}};
        for (const auto& f : cl.frames) d["frames"].push_back(to_json(f));
        std::string where;
        if (!cfg_.dump_path.empty()) {
            std::ofstream os(cfg_.dump_path);
            os << d.dump(2) << '\n';
            where = " (diagnostics in " + cfg_.dump_path + ")";
        }
        throw NonFiniteLoss("non-finite loss at step " + std::to_string(log.step) + " scenario " + std::to_string(log.scenario_seed) +
                            where);
    }

    Model& model_;
    TrainConfig cfg_;
    AdamW opt_;
    int epoch_ = 0;
};

}  // namespace rmot
