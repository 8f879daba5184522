// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "rmot/boxes.hpp"
#include "rmot/decoder.hpp"
#include "rmot/matching.hpp"

namespace rmot {

struct LossWeights {
    double cls = 2.0;
    double l1 = 5.0;
    double giou = 2.0;
    double ref = 2.0;
    double alpha = 0.25;
    double gamma = 2.0;
    /// Count the matched class term twice in the detection loss.
    bool duplicate_det_class = true;

    void validate() const {
        if (cls < 0 || l1 < 0 || giou < 0 || ref < 0) throw ContractError("loss weights must be nonnegative");
        if (alpha < 0 || alpha > 1 || gamma < 0) throw ContractError("focal parameters out of range");
    }
};

inline constexpr double kFocalEps = 1e-8;

inline double focal(double p, int target, double alpha, double gamma) {
    p = std::clamp(p, kFocalEps, 1.0 - kFocalEps);
    if (target == 1) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
    return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

/// Elementwise focal loss on probabilities p (any shape) against 0/1
/// targets of the same extent.
inline Tensor focal_loss(const Tensor& p, const std::vector<int>& targets, double alpha, double gamma) {
    if (targets.size() != p.numel()) throw DimensionError("focal_loss: one target per probability");
    std::vector<double> out(p.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = focal(p[i], targets[i], alpha, gamma);
    return detail::record(p.shape(), std::move(out), {&p}, [pn = p.impl(), targets, alpha, gamma](detail::Node& o) {
        for (std::size_t i = 0; i < o.data.size(); ++i) {
            const double raw = pn->data[i];
            if (raw < kFocalEps || raw > 1.0 - kFocalEps) continue;
            const double q = 1.0 - raw;
            double d = 0.0;
            if (targets[i] == 1) {
                d = alpha * gamma * std::pow(q, gamma - 1.0) * std::log(raw) - alpha * std::pow(q, gamma) / raw;
            } else {
                d = -(1.0 - alpha) * (gamma * std::pow(raw, gamma - 1.0) * std::log(q) - std::pow(raw, gamma) / q);
            }
            pn->grad[i] += o.grad[i] * d;
        }
    });
}

/// lambda_L1 * |b - g|_1 + lambda_giou * (1 - GIoU) per row; n x 1.
inline Tensor box_loss(const Tensor& pred, const Tensor& target, const LossWeights& w) {
    return add(scale(l1_rows(pred, target), w.l1), scale(add_scalar(scale(giou_rows(pred, target), -1.0), 1.0), w.giou));
}

inline double box_cost(const Box& pred, const Box& gt, const LossWeights& w) {
    return w.l1 * l1_distance(pred, gt) + w.giou * (1.0 - giou(pred, gt));
}

/// Matching cost: box terms plus the focal-style class cost (positive minus
/// negative focal term).
inline double pair_cost(const PredictionTriplet& pred, const Box& gt, const LossWeights& w) {
    const double cls = focal(pred.class_score, 1, w.alpha, w.gamma) - focal(pred.class_score, 0, w.alpha, w.gamma);
    return box_cost(pred.box, gt, w) + w.cls * cls;
}

struct Target {
    int id = 0;
    Box box;
    bool referent = false;
};

inline Tensor target_boxes(const std::vector<Target>& t) {
    std::vector<double> v;
    for (const auto& x : t)
        for (double c : x.box.to_array()) v.push_back(c);
    return Tensor({t.size(), 4}, std::move(v));
}

inline CostMatrix cost_matrix(const std::vector<PredictionTriplet>& preds, const std::vector<Target>& targets,
                              const LossWeights& w) {
    CostMatrix c(preds.size(), targets.size());
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (std::size_t j = 0; j < targets.size(); ++j) c(i, j) = pair_cost(preds[i], targets[j].box, w);
    return c;
}

enum class LayerRole { Intermediate, Final };

/// Detection targets for one decoder layer: existing and newborn targets in
/// intermediate layers, newborn only in the final layer.
inline std::vector<Target> cqm_aux_targets(const std::vector<Target>& existing, const std::vector<Target>& newborn,
                                           LayerRole role) {
    std::set<int> ids;
    for (const auto& t : existing) ids.insert(t.id);
    for (const auto& t : newborn) {
        if (ids.count(t.id)) throw ContractError("cqm_aux_targets: identity " + std::to_string(t.id) + " is both existing and newborn");
    }
    if (role == LayerRole::Final) return newborn;
    std::vector<Target> out = existing;
    out.insert(out.end(), newborn.begin(), newborn.end());
    return out;
}

/// Row indices of `p` with the given kind.
inline std::vector<std::size_t> rows_of(const PredictionSet& p, QueryKind k) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p.kinds[i] == k) out.push_back(i);
    return out;
}

/// Track-query targets keyed by identity; nullopt marks an identity absent
/// from the frame (background).
using TrackTargets = std::map<int, std::optional<Target>>;

/// Identity-assigned loss over the track rows of `p`.
inline Tensor track_loss(const PredictionSet& p, const TrackTargets& gts, const LossWeights& w) {
    const auto rows = rows_of(p, QueryKind::Track);
    if (rows.empty()) return Tensor::scalar(0.0);
    std::vector<int> cls_t, ref_t;
    std::vector<std::size_t> present;
    std::vector<Target> present_t;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        auto it = gts.find(p.ids[rows[k]]);
        if (it == gts.end()) throw ContractError("track_loss: unknown identity " + std::to_string(p.ids[rows[k]]));
        cls_t.push_back(it->second ? 1 : 0);
        ref_t.push_back(it->second && it->second->referent ? 1 : 0);
        if (it->second) {
            present.push_back(k);
            present_t.push_back(*it->second);
        }
    }
    std::vector<Tensor> terms;
    terms.push_back(scale(sum(focal_loss(gather_rows(p.cls, rows), cls_t, w.alpha, w.gamma)), w.cls));
    terms.push_back(scale(sum(focal_loss(gather_rows(p.ref, rows), ref_t, w.alpha, w.gamma)), w.ref));
    if (!present.empty()) {
        std::vector<std::size_t> prow;
        for (std::size_t k : present) prow.push_back(rows[k]);
        terms.push_back(sum(box_loss(gather_rows(p.box, prow), target_boxes(present_t), w)));
    }
    return add_all(terms);
}

struct DetectionLoss {
    Tensor value;
    Assignment assignment;  // detection-row position -> target index
    std::vector<std::size_t> rows;  // detection rows of the prediction set
};

/// Hungarian-matched loss over the detection rows. Every row pays the class
/// term against its matched/unmatched label; matched rows add the class term
/// again (unless disabled) and the box loss.
inline DetectionLoss detection_loss(const PredictionSet& p, const std::vector<Target>& targets, const LossWeights& w) {
    DetectionLoss out;
    out.rows = rows_of(p, QueryKind::Detection);
    if (out.rows.empty()) {
        out.value = Tensor::scalar(0.0);
        return out;
    }
    const auto all = triplets(p);
    std::vector<PredictionTriplet> preds;
    for (std::size_t r : out.rows) preds.push_back(all[r]);
    out.assignment = hungarian(cost_matrix(preds, targets, w));
    std::vector<int> cls_t(out.rows.size(), 0);
    std::vector<std::size_t> mrows;
    std::vector<Target> mt;
    for (const auto& [i, j] : out.assignment.pairs) {
        cls_t[i] = 1;
        mrows.push_back(out.rows[i]);
        mt.push_back(targets[j]);
    }
    const Tensor cls = gather_rows(p.cls, out.rows);
    std::vector<Tensor> terms;
    terms.push_back(scale(sum(focal_loss(cls, cls_t, w.alpha, w.gamma)), w.cls));
    if (!mrows.empty()) {
        if (w.duplicate_det_class) {
            terms.push_back(scale(sum(focal_loss(gather_rows(p.cls, mrows), std::vector<int>(mrows.size(), 1), w.alpha, w.gamma)), w.cls));
        }
        terms.push_back(sum(box_loss(gather_rows(p.box, mrows), target_boxes(mt), w)));
    }
    out.value = add_all(terms);
    return out;
}

/// Ground truth seen by one frame's loss.
struct FrameTargets {
    std::vector<Target> newborn;   // visible, not yet bound to a track query
    std::vector<Target> existing;  // visible and bound to a track query
    TrackTargets tracks;           // per live track query identity
};

struct LossReport {
    Tensor total;
    double track = 0.0;
    double detection = 0.0;
    double temporal = 0.0;
    std::vector<double> aux;
    /// Matched detection rows per layer (intermediate layers first).
    std::vector<std::size_t> matched_per_layer;
    /// Final-layer assignment over detection rows (row index in the final
    /// PredictionSet -> newborn target).
    std::vector<std::pair<std::size_t, Target>> final_matches;
};

/// Refined boxes of the final layer rows (same row order as the final
/// PredictionSet).
struct TemporalBoxes {
    Tensor boxes;  // m x 4
};

inline LossReport total_loss(const std::vector<PredictionSet>& layers, const FrameTargets& gt, const TemporalBoxes* temporal,
                             const LossWeights& w, bool cqm) {
    if (layers.empty()) throw ContractError("total_loss: no decoder layers");
    LossReport r;
    std::vector<Tensor> terms;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const PredictionSet& p = layers[l];
        const bool final = l + 1 == layers.size();
        const auto targets = cqm ? cqm_aux_targets(gt.existing, gt.newborn, final ? LayerRole::Final : LayerRole::Intermediate)
                                 : gt.newborn;
        const Tensor lt = track_loss(p, gt.tracks, w);
        DetectionLoss ld = detection_loss(p, targets, w);
        r.matched_per_layer.push_back(ld.assignment.pairs.size());
        if (final) {
            r.track = lt.item();
            r.detection = ld.value.item();
            for (const auto& [i, j] : ld.assignment.pairs) r.final_matches.emplace_back(ld.rows[i], targets[j]);
        } else {
            r.aux.push_back(lt.item() + ld.value.item());
        }
        terms.push_back(lt);
        terms.push_back(ld.value);
    }
    if (temporal != nullptr && temporal->boxes.defined()) {
        const PredictionSet& p = layers.back();
        std::vector<std::size_t> rows;
        std::vector<Target> tg;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p.kinds[i] != QueryKind::Track) continue;
            const auto& t = gt.tracks.at(p.ids[i]);
            if (!t) continue;
            rows.push_back(i);
            tg.push_back(*t);
        }
        for (const auto& [row, t] : r.final_matches) {
            rows.push_back(row);
            tg.push_back(t);
        }
        if (!rows.empty()) {
            const Tensor lt = sum(box_loss(gather_rows(temporal->boxes, rows), target_boxes(tg), w));
            r.temporal = lt.item();
            terms.push_back(lt);
        }
    }
    r.total = add_all(terms);
    return r;
}

}  // namespace rmot
