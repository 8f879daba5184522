// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rmot/boxes.hpp"
#include "rmot/matching.hpp"
#include "rmot/tracker.hpp"
#include "rmot/world.hpp"

namespace rmot {

/// Ground truth and predictions of one sequence.
struct SequenceData {
    int n_frames = 0;
    std::vector<TrackRecord> gt;
    std::vector<TrackRecord> pred;
};

struct EvalReport {
    double hota = 0, deta = 0, assa = 0, detre = 0, detpr = 0, assre = 0, asspr = 0, loca = 0;
    std::vector<double> alphas;
    std::vector<double> hota_a, deta_a, assa_a, detre_a, detpr_a, assre_a, asspr_a, loca_a;
};

inline std::vector<double> hota_alphas() {
    std::vector<double> a;
    for (int i = 1; i <= 19; ++i) a.push_back(0.05 * i);
    return a;
}

/// Referent rows of a scenario as ground-truth records.
inline std::vector<TrackRecord> referent_truth(const Scenario& s) {
    std::vector<TrackRecord> out;
    for (int f = 0; f < s.n_frames; ++f) {
        for (int id : s.referents[static_cast<std::size_t>(f)]) out.push_back({f, id, s.object(id).box(f), 1.0, 1.0});
    }
    return out;
}

namespace detail {

inline void check_unique(const std::vector<TrackRecord>& rows, const char* side) {
    std::set<std::pair<int, int>> seen;
    for (const auto& r : rows) {
        if (!seen.insert({r.frame, r.id}).second) {
            throw ContractError(std::string("evaluate: duplicate (frame, id) = (") + std::to_string(r.frame) + ", " +
                                std::to_string(r.id) + ") in " + side);
        }
    }
}

}  // namespace detail

/// HOTA family. Sequences are evaluated jointly with identities kept apart
/// per sequence, which matches TP-weighted combination of per-sequence
/// association scores. The headline HOTA is sqrt(DetA * AssA) of the
/// alpha-averaged components.
inline EvalReport evaluate(const std::vector<SequenceData>& seqs) {
    const auto alphas = hota_alphas();
    const std::size_t na = alphas.size();
    const double eps = std::numeric_limits<double>::epsilon();
    std::vector<double> tp(na, 0), fn(na, 0), fp(na, 0), loc(na, 0);
    // association counts keyed by global (gt, pred) id pair
    std::vector<std::map<std::pair<long, long>, double>> matches(na);
    std::map<long, double> gt_count_all, pr_count_all;

    long offset = 0;
    for (const auto& s : seqs) {
        detail::check_unique(s.gt, "ground truth");
        detail::check_unique(s.pred, "predictions");
        long max_id = 0;
        for (const auto& r : s.gt) max_id = std::max<long>(max_id, r.id);
        for (const auto& r : s.pred) max_id = std::max<long>(max_id, r.id);
        int last_frame = s.n_frames - 1;
        for (const auto& r : s.gt) last_frame = std::max(last_frame, r.frame);
        for (const auto& r : s.pred) last_frame = std::max(last_frame, r.frame);
        std::vector<std::vector<const TrackRecord*>> gt_f(static_cast<std::size_t>(last_frame + 1)), pr_f(gt_f.size());
        for (const auto& r : s.gt) gt_f[static_cast<std::size_t>(r.frame)].push_back(&r);
        for (const auto& r : s.pred) pr_f[static_cast<std::size_t>(r.frame)].push_back(&r);

        // global alignment from soft co-occurrence
        std::map<std::pair<long, long>, double> potential;
        std::map<long, double> gt_count, pr_count;
        std::vector<std::vector<double>> sims(gt_f.size());
        for (std::size_t f = 0; f < gt_f.size(); ++f) {
            const auto& g = gt_f[f];
            const auto& p = pr_f[f];
            for (const auto* r : g) gt_count[r->id + offset] += 1;
            for (const auto* r : p) pr_count[r->id + offset] += 1;
            auto& sim = sims[f];
            sim.assign(g.size() * p.size(), 0.0);
            std::vector<double> row_sum(g.size(), 0.0), col_sum(p.size(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) {
                for (std::size_t j = 0; j < p.size(); ++j) {
                    sim[i * p.size() + j] = iou(g[i]->box, p[j]->box);
                    row_sum[i] += sim[i * p.size() + j];
                    col_sum[j] += sim[i * p.size() + j];
                }
            }
            for (std::size_t i = 0; i < g.size(); ++i) {
                for (std::size_t j = 0; j < p.size(); ++j) {
                    const double v = sim[i * p.size() + j];
                    const double denom = row_sum[i] + col_sum[j] - v;
                    if (denom > eps) potential[{g[i]->id + offset, p[j]->id + offset}] += v / denom;
                }
            }
        }
        auto alignment = [&](long gi, long pj) {
            auto it = potential.find({gi, pj});
            if (it == potential.end()) return 0.0;
            return it->second / (gt_count[gi] + pr_count[pj] - it->second);
        };
        for (std::size_t f = 0; f < gt_f.size(); ++f) {
            const auto& g = gt_f[f];
            const auto& p = pr_f[f];
            for (std::size_t a = 0; a < na; ++a) {
                fn[a] += static_cast<double>(g.size());
                fp[a] += static_cast<double>(p.size());
            }
            if (g.empty() || p.empty()) continue;
            CostMatrix c(g.size(), p.size());
            for (std::size_t i = 0; i < g.size(); ++i)
                for (std::size_t j = 0; j < p.size(); ++j)
                    c(i, j) = -alignment(g[i]->id + offset, p[j]->id + offset) * sims[f][i * p.size() + j];
            const Assignment asg = hungarian(c);
            for (const auto& [i, j] : asg.pairs) {
                const double s_ij = sims[f][i * p.size() + j];
                for (std::size_t a = 0; a < na; ++a) {
                    if (s_ij >= alphas[a] - eps) {
                        tp[a] += 1;
                        fn[a] -= 1;
                        fp[a] -= 1;
                        loc[a] += s_ij;
                        matches[a][{g[i]->id + offset, p[j]->id + offset}] += 1;
                    }
                }
            }
        }
        for (const auto& [k, v] : gt_count) gt_count_all[k] += v;
        for (const auto& [k, v] : pr_count) pr_count_all[k] += v;
        offset += max_id + 1;
    }

    EvalReport r;
    r.alphas = alphas;
    for (std::size_t a = 0; a < na; ++a) {
        double assa = 0, assre = 0, asspr = 0;
        for (const auto& [key, m] : matches[a]) {
            const double g = gt_count_all[key.first], p = pr_count_all[key.second];
            assa += m * (m / std::max(1.0, g + p - m));
            assre += m * (m / std::max(1.0, g));
            asspr += m * (m / std::max(1.0, p));
        }
        const double t = tp[a];
        r.assa_a.push_back(assa / std::max(1.0, t));
        r.assre_a.push_back(assre / std::max(1.0, t));
        r.asspr_a.push_back(asspr / std::max(1.0, t));
        r.detre_a.push_back(t / std::max(1.0, t + fn[a]));
        r.detpr_a.push_back(t / std::max(1.0, t + fp[a]));
        r.deta_a.push_back(t / std::max(1.0, t + fn[a] + fp[a]));
        r.loca_a.push_back(std::max(1e-10, loc[a]) / std::max(1e-10, t));
        r.hota_a.push_back(std::sqrt(r.deta_a.back() * r.assa_a.back()));
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    r.deta = mean(r.deta_a);
    r.assa = mean(r.assa_a);
    r.detre = mean(r.detre_a);
    r.detpr = mean(r.detpr_a);
    r.assre = mean(r.assre_a);
    r.asspr = mean(r.asspr_a);
    r.loca = mean(r.loca_a);
    r.hota = std::sqrt(r.deta * r.assa);
    return r;
}

inline EvalReport evaluate(const SequenceData& s) { return evaluate(std::vector<SequenceData>{s}); }

/// One report per threshold; predictions are kept when ref_score > beta.
inline std::vector<EvalReport> sweep(const std::vector<SequenceData>& seqs, const std::vector<double>& betas) {
    std::vector<EvalReport> out;
    for (double b : betas) {
        std::vector<SequenceData> f = seqs;
        for (auto& s : f) s.pred = filter_referents(s.pred, b);
        out.push_back(evaluate(f));
    }
    return out;
}

inline nlohmann::json to_json(const EvalReport& r) {
    return {{"HOTA", r.hota},       {"DetA", r.deta},         {"AssA", r.assa},       {"DetRe", r.detre},
            {"DetPr", r.detpr},     {"AssRe", r.assre},       {"AssPr", r.asspr},     {"LocA", r.loca},
            {"alpha", r.alphas},    {"HOTA_alpha", r.hota_a}, {"DetA_alpha", r.deta_a}, {"AssA_alpha", r.assa_a},
            {"DetRe_alpha", r.detre_a}, {"DetPr_alpha", r.detpr_a}, {"AssRe_alpha", r.assre_a},
            {"AssPr_alpha", r.asspr_a}, {"LocA_alpha", r.loca_a}};
}

inline const std::vector<std::string>& report_fields() {
    static const std::vector<std::string> f = {"HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA"};
    return f;
}

inline std::vector<double> report_values(const EvalReport& r) {
    return {r.hota, r.deta, r.assa, r.detre, r.detpr, r.assre, r.asspr, r.loca};
}

/// Aligned columns; values in percent with two decimals.
inline std::string to_text(const EvalReport& r) {
    std::string head, vals;
    char buf[32];
    const auto v = report_values(r);
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%8s", report_fields()[i].c_str());
        head += buf;
        std::snprintf(buf, sizeof buf, "%8.2f", 100.0 * v[i]);
        vals += buf;
    }
    return head + "\n" + vals + "\n";
}

}  // namespace rmot
