// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rmot/hota.hpp"
#include "rmot/tracker.hpp"
#include "rmot/train.hpp"

namespace rmot {

/// Visible-object rows of every scenario, tracked with its own expression.
inline std::vector<std::vector<TrackRecord>> track_dataset(const Model& m, const TrackerConfig& cfg,
                                                           const std::vector<Scenario>& data) {
    std::vector<std::vector<TrackRecord>> out;
    Tracker t(m, cfg);
    for (const auto& s : data) {
        std::vector<Image> frames;
        for (int f = 0; f < s.n_frames; ++f) frames.push_back(render(s, f));
        out.push_back(t.run_sequence(frames, s.expression.text));
    }
    return out;
}

/// Referent ground truth against the given prediction rows (unfiltered; the
/// caller applies beta_ref through `sweep` or `filter_referents`).
inline std::vector<SequenceData> referent_sequences(const std::vector<Scenario>& data,
                                                    const std::vector<std::vector<TrackRecord>>& preds) {
    if (data.size() != preds.size()) throw ContractError("evaluation: one prediction list per scenario");
    std::vector<SequenceData> out;
    for (std::size_t i = 0; i < data.size(); ++i) out.push_back({data[i].n_frames, referent_truth(data[i]), preds[i]});
    return out;
}

/// Detection recall around births: ground truth is every object in the
/// visible frames of [birth - 1, birth + 1]; predictions are all visible rows
/// of the frames that hold such ground truth, with no referring filter.
inline std::vector<SequenceData> newborn_sequences(const std::vector<Scenario>& data,
                                                   const std::vector<std::vector<TrackRecord>>& preds) {
    if (data.size() != preds.size()) throw ContractError("evaluation: one prediction list per scenario");
    std::vector<SequenceData> out;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Scenario& s = data[i];
        SequenceData d;
        d.n_frames = s.n_frames;
        std::vector<char> used(static_cast<std::size_t>(s.n_frames), 0);
        for (const auto& o : s.objects) {
            for (int f = o.birth - 1; f <= o.birth + 1; ++f) {
                if (f < 0 || f >= s.n_frames || !o.visible(f)) continue;
                d.gt.push_back({f, o.id, o.box(f), 1.0, 1.0});
                used[static_cast<std::size_t>(f)] = 1;
            }
        }
        for (const auto& r : preds[i])
            if (used[static_cast<std::size_t>(r.frame)]) d.pred.push_back(r);
        out.push_back(std::move(d));
    }
    return out;
}

struct AblationSetup {
    ModelConfig model;
    TrainConfig train;
    TrackerConfig tracker;
};

struct AblationCell {
    bool riqa = false, cqm = false, cme = false;
    EvalReport report;
    double newborn_detre = 0.0;
    double final_loss = 0.0;
    double seconds = 0.0;
};

inline std::string cell_name(const AblationCell& c) {
    std::string s;
    if (c.riqa) s += "RIQA+";
    if (c.cqm) s += "CQM+";
    if (c.cme) s += "CME+";
    return s.empty() ? "baseline" : s.substr(0, s.size() - 1);
}

/// Trains one component combination from the shared seed and scores it on
/// the evaluation scenarios.
inline AblationCell run_cell(const AblationSetup& base, bool riqa, bool cqm, bool cme, const std::vector<Scenario>& train,
                             const std::vector<Scenario>& eval, std::ostream* log = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    AblationCell c;
    c.riqa = riqa;
    c.cqm = cqm;
    c.cme = cme;
    ModelConfig mc = base.model;
    mc.riqa = riqa ? RiqaVariant::Pre : RiqaVariant::None;
    mc.order = cme ? EncoderOrder::Cme : EncoderOrder::Baseline;
    TrainConfig tc = base.train;
    tc.cqm = cqm;
    Model m(mc);
    Trainer tr(m, tc);
    while (tr.epoch() < tc.epochs) {
        const int e = tr.epoch();
        c.final_loss = tr.run_epoch(train);
        if (log) *log << cell_name(c) << " epoch " << e << " loss " << format_double(c.final_loss) << '\n' << std::flush;
    }
    const auto preds = track_dataset(m, base.tracker, eval);
    std::vector<SequenceData> ref = referent_sequences(eval, preds);
    for (auto& s : ref) s.pred = filter_referents(s.pred, base.tracker.beta_ref);
    c.report = evaluate(ref);
    c.newborn_detre = evaluate(newborn_sequences(eval, preds)).detre;
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return c;
}

/// All eight combinations, baseline first and the full model last.
inline std::vector<AblationCell> run_ablation(const AblationSetup& base, const std::vector<Scenario>& train,
                                              const std::vector<Scenario>& eval, std::ostream* log = nullptr) {
    std::vector<AblationCell> out;
    for (int bits = 0; bits < 8; ++bits) out.push_back(run_cell(base, bits & 1, bits & 2, bits & 4, train, eval, log));
    return out;
}

/// Gaps this small between alpha-averaged metrics come from summation order,
/// not from different counts, and are treated as ties.
inline constexpr double kMetricTieTol = 1e-12;

struct AblationVerdict {
    double hota_delta = 0.0;           // full - baseline
    double newborn_detre_delta = 0.0;  // CQM only - baseline
    bool full_beats_baseline = false;
    bool cqm_recall_holds = false;
};

inline AblationVerdict verdict(const std::vector<AblationCell>& cells) {
    auto find = [&](bool r, bool q, bool e) -> const AblationCell& {
        for (const auto& c : cells)
            if (c.riqa == r && c.cqm == q && c.cme == e) return c;
        throw ContractError("ablation: missing cell");
    };
    const AblationCell& base = find(false, false, false);
    AblationVerdict v;
    v.hota_delta = find(true, true, true).report.hota - base.report.hota;
    v.newborn_detre_delta = find(false, true, false).newborn_detre - base.newborn_detre;
    v.full_beats_baseline = v.hota_delta >= -kMetricTieTol;
    v.cqm_recall_holds = v.newborn_detre_delta >= -kMetricTieTol;
    return v;
}

inline std::string ablation_table(const std::vector<AblationCell>& cells) {
    std::string out = " RIQA  CQM  CME     HOTA     DetA     AssA    DetRe  NewbornRe   loss\n";
    char buf[160];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof buf, "  %3s  %3s  %3s  %7.2f  %7.2f  %7.2f  %7.2f  %9.2f  %6.3f\n", c.riqa ? "x" : "-",
                      c.cqm ? "x" : "-", c.cme ? "x" : "-", 100 * c.report.hota, 100 * c.report.deta, 100 * c.report.assa,
                      100 * c.report.detre, 100 * c.newborn_detre, c.final_loss);
        out += buf;
    }
    const AblationVerdict v = verdict(cells);
    std::snprintf(buf, sizeof buf, "full vs baseline HOTA delta %+.2f (%s); CQM vs baseline newborn DetRe delta %+.2f (%s)\n",
                  100 * v.hota_delta, v.full_beats_baseline ? "holds" : "does not hold", 100 * v.newborn_detre_delta,
                  v.cqm_recall_holds ? "holds" : "does not hold");
    return out + buf;
}

inline nlohmann::json to_json(const std::vector<AblationCell>& cells) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : cells) {
        j.push_back({{"riqa", c.riqa},
                     {"cqm", c.cqm},
                     {"cme", c.cme},
                     {"name", cell_name(c)},
                     {"report", to_json(c.report)},
                     {"newborn_detre", c.newborn_detre},
                     {"final_loss", c.final_loss},
                     {"seconds", c.seconds}});
    }
    return j;
}

}  // namespace rmot
