// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "rmot/hota.hpp"
#include "test_oracles.hpp"

using namespace rmot;

namespace {

TrackRecord rec(int f, int id, Box b, double ref = 1.0) { return {f, id, b, 1.0, ref}; }

std::vector<oracle::Det> to_oracle(const std::vector<TrackRecord>& rows) {
    std::vector<oracle::Det> out;
    for (const auto& r : rows) out.push_back({r.frame, r.id, {r.box.x0(), r.box.y0(), r.box.x1(), r.box.y1()}});
    return out;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

void expect_matches_oracle(const SequenceData& s, double tol = 1e-9) {
    const EvalReport r = evaluate(s);
    const auto o = oracle::hota_by_definition(to_oracle(s.gt), to_oracle(s.pred), hota_alphas());
    ASSERT_EQ(o.size(), r.alphas.size());
    for (std::size_t a = 0; a < o.size(); ++a) {
        EXPECT_NEAR(r.deta_a[a], o[a].deta, tol) << "alpha " << r.alphas[a];
        EXPECT_NEAR(r.assa_a[a], o[a].assa, tol) << "alpha " << r.alphas[a];
        EXPECT_NEAR(r.detre_a[a], o[a].detre, tol);
        EXPECT_NEAR(r.detpr_a[a], o[a].detpr, tol);
        EXPECT_NEAR(r.assre_a[a], o[a].assre, tol);
        EXPECT_NEAR(r.asspr_a[a], o[a].asspr, tol);
        EXPECT_NEAR(r.loca_a[a], o[a].loca, tol);
    }
    std::vector<double> deta, assa;
    for (const auto& h : o) {
        deta.push_back(h.deta);
        assa.push_back(h.assa);
    }
    EXPECT_NEAR(r.hota, std::sqrt(mean(deta) * mean(assa)), tol);
}

SequenceData random_sequence(Rng& rng) {
    SequenceData s;
    s.n_frames = 6;
    const int n_obj = static_cast<int>(rng.integer(1, 3));
    for (int id = 1; id <= n_obj; ++id) {
        Box b{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)};
        const int born = static_cast<int>(rng.integer(0, 2));
        int pid = id * 10;
        for (int f = born; f < s.n_frames; ++f) {
            b.cx += rng.uniform(-0.03, 0.03);
            s.gt.push_back(rec(f, id, b));
            if (rng.bernoulli(0.15)) continue;  // miss
            if (rng.bernoulli(0.15)) pid += 1;  // identity switch
            Box p = b;
            p.cx += rng.uniform(-0.08, 0.08);
            p.cy += rng.uniform(-0.08, 0.08);
            p.w *= rng.uniform(0.7, 1.3);
            s.pred.push_back(rec(f, pid, p));
        }
    }
    for (int f = 0; f < s.n_frames; ++f) {
        if (rng.bernoulli(0.3)) s.pred.push_back(rec(f, 99, {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.2, 0.2}));
    }
    return s;
}

}  // namespace

TEST(Hota, PerfectPredictionsScoreOne) {
    Rng rng(1);
    SequenceData s = random_sequence(rng);
    s.pred = s.gt;
    const EvalReport r = evaluate(s);
    for (double v : report_values(r)) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Hota, NoPredictionsScoreZero) {
    Rng rng(2);
    SequenceData s = random_sequence(rng);
    s.pred.clear();
    const EvalReport r = evaluate(s);
    EXPECT_EQ(r.hota, 0.0);
    EXPECT_EQ(r.deta, 0.0);
    EXPECT_EQ(r.detre, 0.0);
    EXPECT_EQ(r.assa, 0.0);
}

TEST(Hota, IdentitySwitchHalvesAssociation) {
    SequenceData s;
    s.n_frames = 6;
    const Box b{0.5, 0.5, 0.2, 0.2};
    for (int f = 0; f < 6; ++f) {
        s.gt.push_back(rec(f, 1, b));
        s.pred.push_back(rec(f, f < 3 ? 1 : 2, b));
    }
    const EvalReport r = evaluate(s);
    EXPECT_NEAR(r.deta, 1.0, 1e-12);
    EXPECT_NEAR(r.assa, 0.5, 1e-12);
    EXPECT_NEAR(r.hota, std::sqrt(0.5), 1e-12);
    expect_matches_oracle(s);
}

TEST(Hota, MatchesDefinitionOracleOnRandomSequences) {
    Rng rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        SCOPED_TRACE(trial);
        expect_matches_oracle(random_sequence(rng));
    }
}

TEST(Hota, HeadlineIsGeometricMeanOfComponents) {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const EvalReport r = evaluate(random_sequence(rng));
        EXPECT_DOUBLE_EQ(r.hota, std::sqrt(r.deta * r.assa));
        EXPECT_GE(r.hota, 0.0);
        EXPECT_LE(r.hota, 1.0);
    }
}

TEST(Hota, InvariantToRowOrderAndPredictionRelabeling) {
    Rng rng(5);
    const SequenceData s = random_sequence(rng);
    SequenceData t = s;
    std::reverse(t.gt.begin(), t.gt.end());
    std::reverse(t.pred.begin(), t.pred.end());
    for (auto& p : t.pred) p.id = 1000 - p.id;
    const auto a = report_values(evaluate(s));
    const auto b = report_values(evaluate(t));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Hota, DuplicateRowsAreContractErrors) {
    SequenceData s;
    s.n_frames = 1;
    s.gt = {rec(0, 1, {0.5, 0.5, 0.2, 0.2})};
    s.pred = {rec(0, 4, {0.5, 0.5, 0.2, 0.2}), rec(0, 4, {0.3, 0.5, 0.2, 0.2})};
    EXPECT_THROW(evaluate(s), ContractError);
    std::swap(s.gt, s.pred);
    EXPECT_THROW(evaluate(s), ContractError);
}

TEST(Hota, SequencesKeepIdentitiesApart) {
    Rng rng(6);
    const SequenceData a = random_sequence(rng), b = random_sequence(rng);
    SequenceData joined = a;
    joined.n_frames = a.n_frames + b.n_frames;
    for (auto r : b.gt) {
        r.frame += a.n_frames;
        r.id += 5000;
        joined.gt.push_back(r);
    }
    for (auto r : b.pred) {
        r.frame += a.n_frames;
        r.id += 5000;
        joined.pred.push_back(r);
    }
    const auto x = report_values(evaluate(std::vector<SequenceData>{a, b}));
    const auto y = report_values(evaluate(joined));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-12);
}

TEST(Hota, SweepFiltersByReferringScore) {
    Rng rng(7);
    std::vector<SequenceData> seqs;
    for (int i = 0; i < 5; ++i) {
        SequenceData s = random_sequence(rng);
        for (auto& p : s.pred) p.ref_score = rng.uniform(0.01, 0.99);
        seqs.push_back(s);
    }
    std::vector<double> betas;
    for (int i = 0; i < 10; ++i) betas.push_back(0.1 * i);
    const auto reports = sweep(seqs, betas);
    ASSERT_EQ(reports.size(), betas.size());
    const auto all = evaluate(seqs);
    EXPECT_EQ(report_values(reports[0]), report_values(all));
    for (std::size_t i = 1; i < reports.size(); ++i) EXPECT_LE(reports[i].detre, reports[i - 1].detre + 1e-12);
}

TEST(Hota, JsonCarriesEveryMetric) {
    Rng rng(8);
    const EvalReport r = evaluate(random_sequence(rng));
    const auto j = to_json(r);
    for (const auto& k : report_fields()) {
        ASSERT_TRUE(j.contains(k)) << k;
        EXPECT_EQ(j.at(k).get<double>(), report_values(r)[static_cast<std::size_t>(&k - report_fields().data())]);
        EXPECT_EQ(j.at(k + "_alpha").size(), 19u);
    }
    EXPECT_NE(to_text(r).find("HOTA"), std::string::npos);
}

TEST(Hota, ReferentTruthListsReferentBoxes) {
    const Scenario s = generate(11, WorldParams{});
    const auto rows = referent_truth(s);
    std::size_t n = 0;
    for (const auto& f : s.referents) n += f.size();
    EXPECT_EQ(rows.size(), n);
    for (const auto& r : rows) EXPECT_EQ(r.box, s.object(r.id).box(r.frame));
}
