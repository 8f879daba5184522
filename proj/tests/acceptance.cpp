// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria. `--only N[,M...]` restricts the run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rmot/commands.hpp"
#include "test_oracles.hpp"

using namespace rmot;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kFocalTol = 1e-9;
constexpr double kRasterTol = 5e-3;
constexpr double kHotaTol = 1e-9;
constexpr double kHeadlineTol = 1e-10;
constexpr double kOverfitDrop = 0.5;
constexpr int kOverfitSteps = 200;
constexpr double kOverfitSeconds = 300.0;
constexpr double kMatchingSeconds = 10.0;
constexpr double kGradSeconds = 120.0;
constexpr double kAblationSeconds = 7200.0;
constexpr int kAblationScenarios = 200;
constexpr int kAblationEvalScenarios = 40;
constexpr int kAblationEpochs = 8;
constexpr int kAblationDecayEpoch = 6;
constexpr int kAblationClipLen = 5;

struct Outcome {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

Box random_box(Rng& rng) { return {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)}; }

// ---------------------------------------------------------------------------
// 1

Outcome matching_optimality() {
    const auto t0 = Clock::now();
    Rng rng(101);
    Outcome o;
    int checked = 0, wrong = 0;
    for (std::size_t p = 1; p <= 7; ++p) {
        for (std::size_t t = 1; t <= 7; ++t) {
            for (int k = 0; k < 200; ++k) {
                std::vector<double> v(p * t);
                for (double& x : v) x = rng.uniform(0.0, 10.0);
                const CostMatrix c(p, t, v);
                const Assignment a = hungarian(c);
                const auto b = oracle::brute_force_assignment(c);
                ++checked;
                if (a.total_cost != b.cost || a.pairs.size() != std::min(p, t)) ++wrong;
            }
        }
    }
    const double secs = since(t0);
    o.pass = wrong == 0 && secs < kMatchingSeconds;
    o.detail = std::to_string(checked) + " matrices 1x1..7x7, " + std::to_string(wrong) + " mismatches, " + fmt("%.2f s", secs);
    return o;
}

// ---------------------------------------------------------------------------
// 2

struct Blocks {
    ParamStore store;
    Rng rng{5};
    PositionalEncoders pe{store, 8, 12, 5, rng};
    WordEncoder words{store, 8, rng};
    CrossModalEncoder enc{store, EncoderConfig{8, 2, 2, 2, 2, 16}, rng};
    Decoder dec{store, DecoderConfig{8, 2, 2, 2, 3, 4, 16}, rng};
    TemporalParams temporal{store, 8, 2, rng};
};

FeaturePyramid random_pyramid(std::size_t dim, Rng& rng) {
    return make_pyramid({random_tensor({16, dim}, rng), random_tensor({4, dim}, rng)}, {{4, 4}, {2, 2}}, dim);
}

QuerySet mixed_queries(const Blocks& s, Rng& rng) {
    QuerySet t;
    t.pos = random_tensor({2, 8}, rng);
    t.content = random_tensor({2, 8}, rng);
    t.anchor_logits = random_tensor({2, 4}, rng);
    t.kinds = {QueryKind::Track, QueryKind::Track};
    t.ids = {3, 7};
    t.ages = {1, 4};
    return concat_queries(t, detection_queries(s.dec));
}

struct PredRow {
    QueryKind kind;
    int id;
    double cls;
    Box box;
    double ref;
};

PredictionSet make_pred(const std::vector<PredRow>& rows) {
    PredictionSet p;
    std::vector<double> cls, box, ref, lg;
    for (const auto& r : rows) {
        cls.push_back(r.cls);
        ref.push_back(r.ref);
        for (double v : r.box.to_array()) {
            box.push_back(v);
            lg.push_back(logit(v));
        }
        p.kinds.push_back(r.kind);
        p.ids.push_back(r.id);
    }
    p.cls = Tensor({rows.size(), 1}, cls);
    p.ref = Tensor({rows.size(), 1}, ref);
    p.box = Tensor({rows.size(), 4}, box);
    p.box_logits = Tensor({rows.size(), 4}, lg);
    return p;
}

struct LossCase {
    std::vector<PredictionSet> layers;
    FrameTargets gt;
};

// E existing targets with their track rows, B newborn targets, n_det detection rows.
LossCase loss_case(std::size_t e, std::size_t b, std::size_t n_det, Rng& rng) {
    LossCase c;
    std::vector<Target> all;
    for (std::size_t i = 0; i < e + b; ++i) all.push_back({static_cast<int>(i) + 1, random_box(rng), i % 2 == 0});
    for (std::size_t i = 0; i < e + b; ++i) {
        if (i < e) {
            c.gt.existing.push_back(all[i]);
            c.gt.tracks[all[i].id] = all[i];
        } else {
            c.gt.newborn.push_back(all[i]);
        }
    }
    for (std::size_t l = 0; l < 3; ++l) {
        std::vector<PredRow> rows;
        for (std::size_t i = 0; i < e; ++i)
            rows.push_back({QueryKind::Track, all[i].id, rng.uniform(0.2, 0.8), random_box(rng), rng.uniform(0.2, 0.8)});
        for (std::size_t k = 0; k < n_det; ++k)
            rows.push_back({QueryKind::Detection, -1, rng.uniform(0.1, 0.9), random_box(rng), rng.uniform(0.2, 0.8)});
        c.layers.push_back(make_pred(rows));
        c.layers.back().layer = l;
        c.layers.back().final = l == 2;
    }
    return c;
}

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    std::vector<std::pair<std::string, double>> errs;
    {
        ParamStore store;
        Rng rng(6);
        AttentionParams p(store, "a", 8, 2, rng);
        Tensor q = random_tensor({3, 8}, rng), k = random_tensor({4, 8}, rng), v = random_tensor({4, 8}, rng);
        const Tensor pq = random_tensor({3, 8}, rng), pk = random_tensor({4, 8}, rng);
        errs.emplace_back("attn", grad_check([&] { return attn(p, q, k, v, pq, pk); }, {q, k, v, p.q.weight, p.k.weight, p.v.weight, p.o.bias}));
    }
    {
        ParamStore store;
        Rng rng(12);
        DeformAttnParams p(store, "d", 8, 2, 2, 2, rng);
        init_uniform_fan_in(p.offsets.weight, 8, rng);
        init_uniform_fan_in(p.weights.weight, 8, rng);
        const PyramidLayout layout = {LevelShape{4, 4, 0}, LevelShape{2, 2, 16}};
        Tensor q = random_tensor({3, 8}, rng), v = random_tensor({20, 8}, rng), ref = random_tensor({3, 2}, rng, 0.1, 0.9);
        errs.emplace_back("ms_deform_attn", grad_check([&] { return ms_deform_attn(p, q, ref, v, layout); },
                                                       {q, v, ref, p.offsets.weight, p.weights.weight, p.value.weight}));
    }
    {
        ParamStore store;
        Rng rng(15);
        Mlp f = make_ffn3(store, "f", 6, 10, 4, rng);
        Tensor x = random_tensor({4, 6}, rng);
        errs.emplace_back("ffn3", grad_check([&] { return sigmoid(f(x)); }, {x, f.layers[0].weight, f.layers[1].bias, f.layers[2].weight}));
    }
    {
        Blocks s;
        Rng rng(8);
        init_uniform_fan_in(s.enc.layers[0].attn.offsets.weight, 8, rng);
        init_uniform_fan_in(s.enc.layers[0].attn.weights.weight, 8, rng);
        FeaturePyramid p = random_pyramid(8, rng);
        const auto& l = s.enc.layers[0];
        errs.emplace_back("encoder_layer", grad_check([&] { return encoder_layer(l, s.enc.level_embed, p).tokens; },
                                                      {p.tokens, l.attn.value.weight, l.attn.offsets.weight, l.norm1.gamma,
                                                       l.ffn.layers[0].weight, s.enc.level_embed}));
    }
    {
        Blocks s;
        Rng rng(21);
        auto& layer = s.dec.layers[1];
        init_uniform_fan_in(layer.cross.offsets.weight, 8, rng);
        init_uniform_fan_in(layer.cross.weights.weight, 8, rng);
        QuerySet q = in_decoder_concat(s.dec, mixed_queries(s, rng), embed_sentence(s.dec, s.words, "cars"));
        q.content = Tensor(q.content.shape(), q.content.to_vector());
        FeaturePyramid p = random_pyramid(8, rng);
        errs.emplace_back("decoder_layer", grad_check([&] { return decoder_layer(layer, q, p).content; },
                                                      {q.content, p.tokens, layer.self.q.weight, layer.cross.offsets.weight,
                                                       layer.cross.value.weight, layer.norm3.beta, layer.ffn.layers[1].weight}));
    }
    {
        Blocks s;
        Rng rng(31);
        init_uniform_fan_in(s.temporal.box_ffn.layers[2].weight, 8, rng);
        Tensor q = random_tensor({1, 8}, rng), hist = random_tensor({3, 8}, rng);
        Tensor rows = random_tensor({4, 8}, rng), pos = random_tensor({4, 8}, rng);
        Tensor boxes = random_tensor({4, 4}, rng, 0.2, 0.8);
        errs.emplace_back("temporal_refine", grad_check([&] { return temporal_refine(s.temporal, s.pe, q, hist); },
                                                        {q, hist, s.temporal.history_attn.k.weight, s.pe.temporal}));
        errs.emplace_back("cross_query_refine", grad_check([&] { return cross_query_refine(s.temporal, rows, pos); },
                                                           {rows, pos, s.temporal.cross_attn.v.weight}));
        errs.emplace_back("refine_boxes", grad_check([&] { return refine_boxes(s.temporal, rows, boxes); },
                                                     {rows, boxes, s.temporal.box_ffn.layers[0].weight}));
    }
    {
        Rng rng(7);
        LossCase c = loss_case(1, 2, 6, rng);
        std::vector<Tensor> wrt;
        for (auto& l : c.layers) {
            wrt.push_back(l.cls);
            wrt.push_back(l.box);
            wrt.push_back(l.ref);
        }
        std::vector<double> tb;
        for (std::size_t i = 0; i < c.layers.back().size() * 4; ++i) tb.push_back(rng.uniform(0.2, 0.6));
        TemporalBoxes temporal{Tensor({c.layers.back().size(), 4}, tb)};
        wrt.push_back(temporal.boxes);
        const LossWeights w;
        errs.emplace_back("total_loss", grad_check([&] { return total_loss(c.layers, c.gt, &temporal, w, true).total; }, wrt));
    }
    const double secs = since(t0);
    Outcome o;
    double worst = 0.0;
    std::string worst_name;
    for (const auto& [name, e] : errs) {
        if (!(e <= kGradTol)) o.pass = false;
        if (!(e <= worst)) {
            worst = e;
            worst_name = name;
        }
    }
    o.pass = o.pass && secs < kGradSeconds;
    o.detail = std::to_string(errs.size()) + " blocks, worst " + worst_name + fmt(" %.2e", worst) + fmt(", %.1f s", secs);
    return o;
}

// ---------------------------------------------------------------------------
// 3

Outcome loss_closed_forms() {
    Outcome o;
    const double focal_err = std::abs(focal(0.5, 1, 0.25, 2.0) - 0.25 * 0.25 * std::log(2.0));
    Rng rng(303);
    bool identical = true;
    for (int i = 0; i < 100; ++i) {
        const Box b = random_box(rng);
        identical = identical && giou(b, b) == 1.0;
    }
    double raster = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Box a = random_box(rng), b = random_box(rng);
        const double r = oracle::rasterized_giou({a.x0(), a.y0(), a.x1(), a.y1()}, {b.x0(), b.y0(), b.x1(), b.y1()});
        raster = std::max(raster, std::abs(giou(a, b) - r));
    }
    o.pass = focal_err <= kFocalTol && identical && raster <= kRasterTol;
    o.detail = "focal err" + fmt(" %.1e", focal_err) + ", GIoU(b,b)=1 " + (identical ? "exact" : "violated") + ", raster max err" +
               fmt(" %.2e", raster) + " on 100 pairs";
    return o;
}

// ---------------------------------------------------------------------------
// 4

Outcome cqm_semantics() {
    Outcome o;
    Rng rng(404);
    int cases = 0, bad = 0;
    const LossWeights w;
    for (std::size_t e = 0; e <= 4; ++e) {
        for (std::size_t b = 0; b <= 4; ++b) {
            for (std::size_t n = 1; n <= 6; ++n) {
                const LossCase c = loss_case(e, b, n, rng);
                const LossReport with = total_loss(c.layers, c.gt, nullptr, w, true);
                const LossReport without = total_loss(c.layers, c.gt, nullptr, w, false);
                ++cases;
                bool ok = with.matched_per_layer.size() == 3;
                for (std::size_t l = 0; ok && l < 2; ++l) ok = with.matched_per_layer[l] == std::min(n, e + b);
                ok = ok && with.matched_per_layer[2] == without.matched_per_layer[2] && with.final_matches.size() == without.final_matches.size();
                for (std::size_t i = 0; ok && i < with.final_matches.size(); ++i)
                    ok = with.final_matches[i].first == without.final_matches[i].first &&
                         with.final_matches[i].second.id == without.final_matches[i].second.id;
                if (!ok) ++bad;
            }
        }
    }
    // The E=2, B=1 instance with three detection queries.
    const LossCase fig = loss_case(2, 1, 3, rng);
    const LossReport r = total_loss(fig.layers, fig.gt, nullptr, w, true);
    const bool instance = r.matched_per_layer == std::vector<std::size_t>{3, 3, 1};
    o.pass = bad == 0 && instance;
    o.detail = std::to_string(cases) + " frames (E<=4, B<=4, N_det<=6), " + std::to_string(bad) + " violations; E=2,B=1 gives " +
               std::to_string(r.matched_per_layer[0]) + " intermediate / " + std::to_string(r.matched_per_layer[2]) + " final";
    return o;
}

// ---------------------------------------------------------------------------
// 5

std::vector<oracle::Det> to_oracle(const std::vector<TrackRecord>& rows) {
    std::vector<oracle::Det> out;
    for (const auto& r : rows) out.push_back({r.frame, r.id, {r.box.x0(), r.box.y0(), r.box.x1(), r.box.y1()}});
    return out;
}

SequenceData small_sequence(Rng& rng) {
    SequenceData s;
    s.n_frames = static_cast<int>(rng.integer(1, 4));
    const int n_obj = static_cast<int>(rng.integer(1, 3));
    for (int id = 1; id <= n_obj; ++id) {
        Box b{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)};
        int pid = id * 10;
        for (int f = static_cast<int>(rng.integer(0, s.n_frames - 1)); f < s.n_frames; ++f) {
            b.cx += rng.uniform(-0.03, 0.03);
            s.gt.push_back({f, id, b, 1.0, 1.0});
            if (rng.bernoulli(0.15)) continue;
            if (rng.bernoulli(0.2)) pid += 1;
            Box p = b;
            p.cx += rng.uniform(-0.08, 0.08);
            p.cy += rng.uniform(-0.08, 0.08);
            p.w *= rng.uniform(0.7, 1.3);
            s.pred.push_back({f, pid, p, 1.0, 1.0});
        }
    }
    for (int f = 0; f < s.n_frames; ++f)
        if (rng.bernoulli(0.3)) s.pred.push_back({f, 99, {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.2, 0.2}, 1.0, 1.0});
    return s;
}

Outcome hota_oracle() {
    Outcome o;
    Rng rng(505);
    double worst = 0.0, headline = 0.0;
    const int n = 300;
    for (int k = 0; k < n; ++k) {
        const SequenceData s = small_sequence(rng);
        const EvalReport r = evaluate(s);
        const auto ref = oracle::hota_by_definition(to_oracle(s.gt), to_oracle(s.pred), hota_alphas());
        double deta = 0.0, assa = 0.0;
        for (std::size_t a = 0; a < ref.size(); ++a) {
            for (auto [x, y] : {std::pair{r.deta_a[a], ref[a].deta}, {r.assa_a[a], ref[a].assa}, {r.detre_a[a], ref[a].detre},
                                {r.detpr_a[a], ref[a].detpr}, {r.assre_a[a], ref[a].assre}, {r.asspr_a[a], ref[a].asspr},
                                {r.loca_a[a], ref[a].loca}})
                worst = std::max(worst, std::abs(x - y));
            deta += ref[a].deta / static_cast<double>(ref.size());
            assa += ref[a].assa / static_cast<double>(ref.size());
        }
        worst = std::max(worst, std::abs(r.hota - std::sqrt(deta * assa)));
        headline = std::max(headline, std::abs(r.hota - std::sqrt(r.deta * r.assa)));
    }
    SequenceData perfect = small_sequence(rng);
    perfect.pred = perfect.gt;
    const EvalReport p = evaluate(perfect);
    double perfect_err = 0.0;
    for (double v : report_values(p)) perfect_err = std::max(perfect_err, std::abs(v - 1.0));
    headline = std::max(headline, std::abs(p.hota - std::sqrt(p.deta * p.assa)));
    o.pass = worst <= kHotaTol && headline <= kHeadlineTol && perfect_err <= kHotaTol;
    o.detail = std::to_string(n) + " sequences (<=4 frames, <=3 ids), max oracle err" + fmt(" %.1e", worst) + ", perfect err" +
               fmt(" %.1e", perfect_err) + ", headline err" + fmt(" %.1e", headline);
    return o;
}

// ---------------------------------------------------------------------------
// 6

Outcome threshold_monotonicity() {
    Outcome o;
    ModelConfig mc;
    mc.seed = 3;
    Model m(mc);
    Rng init(5);
    init_uniform_fan_in(m.decoder.head.cls.weight, 1, init);
    m.decoder.head.cls.bias.mutable_data()[0] = 0.0;
    init_uniform_fan_in(m.decoder.head.ref.weight, 1, init);

    const auto data = generate_dataset(606, 6, WorldParams{});
    const auto preds = track_dataset(m, TrackerConfig{0.5, 0.5, 3}, data);
    const std::vector<double> betas = {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
    const auto seqs = referent_sequences(data, preds);
    const auto reports = sweep(seqs, betas);
    bool detre_ok = true, sets_ok = true;
    for (std::size_t i = 1; i < betas.size(); ++i) {
        detre_ok = detre_ok && reports[i].detre <= reports[i - 1].detre;
        for (const auto& s : seqs) {
            std::set<std::pair<int, int>> lo, hi;
            for (const auto& r : filter_referents(s.pred, betas[i - 1])) lo.insert({r.frame, r.id});
            for (const auto& r : filter_referents(s.pred, betas[i])) hi.insert({r.frame, r.id});
            sets_ok = sets_ok && std::includes(lo.begin(), lo.end(), hi.begin(), hi.end());
        }
    }
    // Spawn candidates on each frame's prediction set, from no tracks.
    std::size_t spawn_lo = 0, spawn_hi = 0;
    bool spawn_ok = true;
    for (const auto& s : data) {
        const ExpressionInputs expr = embed_expression(m, s.expression.text);
        for (int f = 0; f < s.n_frames; f += 4) {
            NoGradScope ng;
            const FrameOutput fo = forward_frame(m, m.backbone(render(s, f), f), expr, {}, MemoryBank(mc.window), f);
            const PredictionSet& p = fo.decoded.layers.back();
            const auto a = spawn_candidates(p, 0.3), b = spawn_candidates(p, 0.9);
            spawn_lo += a.size();
            spawn_hi += b.size();
            spawn_ok = spawn_ok && b.size() <= a.size() && std::includes(a.begin(), a.end(), b.begin(), b.end());
        }
    }
    o.pass = detre_ok && sets_ok && spawn_ok;
    o.detail = "DetRe " + fmt("%.3f", reports.front().detre) + " -> " + fmt("%.3f", reports.back().detre) +
               (detre_ok ? " nonincreasing" : " INCREASES") + ", referent sets " + (sets_ok ? "nested" : "NOT nested") +
               ", spawns " + std::to_string(spawn_lo) + " at 0.3 vs " + std::to_string(spawn_hi) + " at 0.9";
    return o;
}

// ---------------------------------------------------------------------------
// 7

Outcome overfit(Model& m, const Scenario& s) {
    Outcome o;
    const auto t0 = Clock::now();
    TrainConfig tc;
    tc.epochs = kOverfitSteps;
    tc.decay_epoch = kOverfitSteps;
    Trainer tr(m, tc);
    const double first = tr.evaluate_loss(s, 0, s.n_frames);
    bool finite = std::isfinite(first);
    for (int i = 0; i < kOverfitSteps && finite; ++i) finite = std::isfinite(tr.step(s, 0, s.n_frames).loss);
    const double last = finite ? tr.evaluate_loss(s, 0, s.n_frames) : std::nan("");
    const double secs = since(t0);
    const double drop = 1.0 - last / first;
    o.pass = finite && drop >= kOverfitDrop && secs < kOverfitSeconds;
    o.detail = "loss " + fmt("%.3f", first) + " -> " + fmt("%.3f", last) + " (" + fmt("%.1f%%", 100 * drop) + ") in " +
               std::to_string(kOverfitSteps) + " steps, " + fmt("%.1f s", secs) + (finite ? "" : ", NON-FINITE");
    return o;
}

// ---------------------------------------------------------------------------
// 8

Outcome ablation() {
    Outcome o;
    const auto t0 = Clock::now();
    const auto train = generate_dataset(1, kAblationScenarios, WorldParams{});
    const auto eval = generate_dataset(2, kAblationEvalScenarios, WorldParams{});
    AblationSetup setup;
    setup.train.epochs = kAblationEpochs;
    setup.train.decay_epoch = kAblationDecayEpoch;
    setup.train.clip_len = kAblationClipLen;
    std::vector<AblationCell> cells;
    for (int bits = 0; bits < 8; ++bits) {
        cells.push_back(run_cell(setup, bits & 1, bits & 2, bits & 4, train, eval));
        std::cout << "  cell " << cell_name(cells.back()) << fmt(": HOTA %.4f", cells.back().report.hota)
                  << fmt(" newborn DetRe %.4f", cells.back().newborn_detre) << fmt(" (%.0f s)", cells.back().seconds) << '\n'
                  << std::flush;
    }
    const double secs = since(t0);
    std::istringstream table(ablation_table(cells));
    for (std::string line; std::getline(table, line);) std::cout << "  " << line << '\n';
    const AblationVerdict v = verdict(cells);
    o.pass = v.full_beats_baseline && v.cqm_recall_holds && secs < kAblationSeconds;
    o.detail = "full-baseline HOTA" + fmt(" %+.4f", v.hota_delta) + ", CQM-baseline newborn DetRe" + fmt(" %+.4f", v.newborn_detre_delta) +
               ", 8 cells in " + fmt("%.0f s", secs);
    return o;
}

// ---------------------------------------------------------------------------
// 9

Outcome referring_invariance() {
    Outcome o;
    ModelConfig mc;
    mc.riqa = RiqaVariant::In;
    Model m(mc);
    const Scenario s = generate(909, WorldParams{});
    const ExpressionInputs expr = embed_expression(m, s.expression.text);
    const QuerySet q = in_decoder_concat(m.decoder, detection_queries(m.decoder), expr.sentence);
    const std::size_t r = q.size() - 1;
    int substitutions = 0, differing = 0;
    bool others_move = true;
    std::vector<FeaturePyramid> fused;
    for (int f : {0, 7, 19}) fused.push_back(encode(m.encoder, m.pe, m.backbone(render(s, f), f), expr.words, mc.order));
    {
        Rng rng(9);
        FeaturePyramid noise = fused[0];
        noise.tokens = random_tensor(noise.tokens.shape(), rng, -3, 3);
        fused.push_back(noise);
    }
    // Each layer sees the same query input under every pyramid.
    QuerySet input = q;
    for (std::size_t l = 0; l < m.decoder.layers.size(); ++l) {
        const QuerySet ref_out = decoder_layer(m.decoder.layers[l], input, fused[0]);
        for (std::size_t k = 1; k < fused.size(); ++k) {
            const QuerySet x = decoder_layer(m.decoder.layers[l], input, fused[k]);
            ++substitutions;
            bool same = x.kinds[r] == QueryKind::Referring;
            for (std::size_t c = 0; c < mc.dim; ++c)
                same = same && x.content.at(r, c) == ref_out.content.at(r, c) && x.pos.at(r, c) == ref_out.pos.at(r, c);
            if (!same) ++differing;
            bool moved = false;
            for (std::size_t i = 0; i < r && !moved; ++i)
                for (std::size_t c = 0; c < mc.dim && !moved; ++c) moved = x.content.at(i, c) != ref_out.content.at(i, c);
            others_move = others_move && moved;
        }
        input = ref_out;
    }
    o.pass = differing == 0 && others_move;
    o.detail = std::to_string(substitutions) + " layer outputs under 3 substituted pyramids, " + std::to_string(differing) +
               " referring rows differ; detection rows " + (others_move ? "do change" : "DO NOT change");
    return o;
}

// ---------------------------------------------------------------------------
// 10

std::string dataset_bytes(std::uint64_t seed) {
    std::string out;
    for (const auto& s : generate_dataset(seed, 20, WorldParams{})) out += to_json(s).dump() + "\n";
    return out;
}

std::string checkpoint_bytes(const std::vector<Scenario>& data) {
    Model m(ModelConfig{});
    TrainConfig tc;
    tc.epochs = 1;
    tc.clip_len = 3;
    Trainer tr(m, tc);
    tr.fit(data);
    std::ostringstream os;
    write_tensor_map(os, tr.checkpoint());
    return os.str();
}

// Low spawn threshold so a briefly trained model still emits rows.
TrackerConfig stream_config() {
    TrackerConfig c;
    c.beta_obj = 0.1;
    return c;
}

std::string prediction_bytes(const Model& m, const std::vector<Scenario>& data) {
    std::ostringstream os;
    for (const auto& rows : track_dataset(m, stream_config(), data)) write_predictions(os, rows);
    return os.str();
}

Outcome determinism(const Model& trained) {
    Outcome o;
    const bool data_same = dataset_bytes(1010) == dataset_bytes(1010);
    const auto small = generate_dataset(1011, 3, WorldParams{});
    const bool ckpt_same = checkpoint_bytes(small) == checkpoint_bytes(small);
    const auto eval = generate_dataset(1012, 4, WorldParams{});
    const std::string pa = prediction_bytes(trained, eval), pb = prediction_bytes(trained, eval);
    const bool preds_same = pa == pb;
    auto report = [&] {
        const auto seqs = referent_sequences(eval, track_dataset(trained, stream_config(), eval));
        return to_json(evaluate(seqs)).dump();
    };
    const bool report_same = report() == report();

    bool prefix_ok = true;
    std::size_t rows = 0;
    Tracker t(trained, stream_config());
    for (const auto& s : eval) {
        std::vector<Image> frames;
        for (int f = 0; f < s.n_frames; ++f) frames.push_back(render(s, f));
        const auto full = t.run_sequence(frames, s.expression.text);
        rows += full.size();
        for (int cut : {1, 7, 13}) {
            const auto head = t.run_sequence(std::vector<Image>(frames.begin(), frames.begin() + cut), s.expression.text);
            std::vector<TrackRecord> expect;
            for (const auto& r : full)
                if (r.frame < cut) expect.push_back(r);
            prefix_ok = prefix_ok && head == expect;
        }
    }
    o.pass = data_same && ckpt_same && preds_same && report_same && prefix_ok && rows > 0;
    o.detail = std::string("dataset ") + (data_same ? "same" : "DIFFERS") + ", checkpoint " + (ckpt_same ? "same" : "DIFFERS") +
               ", predictions " + (preds_same ? "same" : "DIFFERS") + ", report " + (report_same ? "same" : "DIFFERS") +
               ", prefixes " + (prefix_ok ? "match" : "DIFFER") + " over " + std::to_string(rows) + " rows";
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) != "--only") continue;
        std::stringstream ss(argv[i + 1]);
        for (std::string item; std::getline(ss, item, ',');) only.insert(std::stoi(item));
    }
    auto wanted = [&](int k) { return only.empty() || only.count(k); };

    ModelConfig trained_cfg;
    Model trained(trained_cfg);
    const Scenario overfit_scene = generate(707, WorldParams{});
    bool trained_ready = false;

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"matching optimality", matching_optimality},
        {"gradient suite", gradient_suite},
        {"loss closed forms", loss_closed_forms},
        {"collaborative query matching", cqm_semantics},
        {"HOTA oracle equivalence", hota_oracle},
        {"threshold monotonicity", threshold_monotonicity},
        {"overfit sanity",
         [&] {
             trained_ready = true;
             return overfit(trained, overfit_scene);
         }},
        {"directional ablation", ablation},
        {"referring-row invariance", referring_invariance},
        {"determinism and causality",
         [&] {
             if (!trained_ready) overfit(trained, overfit_scene);
             return determinism(trained);
         }},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int k = static_cast<int>(i) + 1;
        if (!wanted(k)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << k << "] " << criteria[i].first << ": " << o.detail << '\n' << std::flush;
    }
    return failed;
}
