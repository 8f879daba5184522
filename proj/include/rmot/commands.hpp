// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rmot/ablate.hpp"
#include "rmot/config.hpp"

namespace rmot {

namespace detail {

inline void ensure_parent(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline std::ofstream open_out(const std::string& path) {
    ensure_parent(path);
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    return os;
}

inline std::string seq_name(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "seq_%04zu", k);
    return buf;
}

}  // namespace detail

/// Writes the resolved configuration, prefixed by the command name.
inline void write_run_log(const RunConfig& cfg, const std::string& command) {
    auto os = detail::open_out(cfg.run_log);
    os << "command = " << command << '\n' << dump_config(cfg);
}

struct DatasetSummary {
    std::size_t scenarios = 0;
    std::size_t objects = 0;
    std::size_t newborns = 0;  // objects born after frame 0
    std::size_t visible = 0;   // visible object-frames
    std::size_t referent = 0;  // referent object-frames

    double referent_density() const { return visible ? static_cast<double>(referent) / static_cast<double>(visible) : 0.0; }
};

inline DatasetSummary summarize(const std::vector<Scenario>& data) {
    DatasetSummary s;
    s.scenarios = data.size();
    for (const auto& sc : data) {
        s.objects += sc.objects.size();
        s.newborns += count_mid_sequence_newborns(sc);
        for (int f = 0; f < sc.n_frames; ++f) {
            for (const auto& o : sc.objects) s.visible += o.visible(f);
            s.referent += sc.referents[static_cast<std::size_t>(f)].size();
        }
    }
    return s;
}

inline std::string to_text(const DatasetSummary& s) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "scenarios %zu objects %zu newborns %zu referent_density %.4f", s.scenarios, s.objects,
                  s.newborns, s.referent_density());
    return buf;
}

/// Training and evaluation datasets.
inline void cmd_generate(const RunConfig& cfg, std::ostream& out) {
    const auto train = generate_dataset(cfg.data_seed, static_cast<std::size_t>(cfg.scenarios), cfg.world);
    const auto eval = generate_dataset(cfg.eval_seed, static_cast<std::size_t>(cfg.eval_scenarios), cfg.world);
    detail::ensure_parent(cfg.dataset);
    save_dataset(cfg.dataset, train);
    detail::ensure_parent(cfg.eval_dataset);
    save_dataset(cfg.eval_dataset, eval);
    out << cfg.dataset << ": " << to_text(summarize(train)) << '\n';
    out << cfg.eval_dataset << ": " << to_text(summarize(eval)) << '\n';
}

inline TrainConfig resolved_train(const RunConfig& cfg) {
    TrainConfig tc = cfg.train;
    if (tc.dump_path.empty()) tc.dump_path = cfg.checkpoint + ".nan.json";
    return tc;
}

inline void cmd_train(const RunConfig& cfg, std::ostream& out) {
    const auto data = load_dataset(cfg.dataset);
    Model m(cfg.model);
    const TrainConfig tc = resolved_train(cfg);
    detail::ensure_parent(tc.dump_path);
    Trainer tr(m, tc);
    auto curve = detail::open_out(cfg.loss_curve);
    curve << "epoch,loss,lr\n";
    tr.fit(data, &curve, &out);
    detail::ensure_parent(cfg.checkpoint);
    save_tensor_map(cfg.checkpoint, tr.checkpoint());
    out << "checkpoint " << cfg.checkpoint << '\n';
}

inline void load_model(Model& m, const std::string& checkpoint) { m.store.load_map(load_tensor_map(checkpoint)); }

/// One predictions CSV per scenario of the evaluation dataset, named
/// seq_NNNN.csv under the predictions directory.
inline void cmd_track(const RunConfig& cfg, std::ostream& out) {
    Model m(cfg.model);
    load_model(m, cfg.checkpoint);
    const auto data = load_dataset(cfg.eval_dataset);
    std::filesystem::create_directories(cfg.predictions);
    Tracker t(m, cfg.tracker);
    std::size_t rows = 0;
    for (std::size_t k = 0; k < data.size(); ++k) {
        const Scenario& s = data[k];
        std::vector<Image> frames;
        for (int f = 0; f < s.n_frames; ++f) frames.push_back(render(s, f));
        const auto preds = t.run_sequence(frames, cfg.expression.empty() ? s.expression.text : cfg.expression);
        rows += preds.size();
        save_predictions((std::filesystem::path(cfg.predictions) / (detail::seq_name(k) + ".csv")).string(), preds);
        if (cfg.overlay_dir.empty()) continue;
        const auto dir = std::filesystem::path(cfg.overlay_dir) / detail::seq_name(k);
        std::filesystem::create_directories(dir);
        for (int f = 0; f < s.n_frames; ++f) {
            std::vector<TrackRecord> here;
            for (const auto& r : preds)
                if (r.frame == f) here.push_back(r);
            char name[32];
            std::snprintf(name, sizeof name, "frame_%03d.ppm", f);
            write_ppm((dir / name).string(), overlay(frames[static_cast<std::size_t>(f)], here, cfg.tracker.beta_ref));
        }
    }
    out << "tracked " << data.size() << " scenarios, " << rows << " rows -> " << cfg.predictions << '\n';
}

/// Referent ground truth paired with the stored predictions (unfiltered).
inline std::vector<SequenceData> load_eval_pairs(const RunConfig& cfg) {
    const auto data = load_dataset(cfg.eval_dataset);
    std::vector<std::vector<TrackRecord>> preds;
    for (std::size_t k = 0; k < data.size(); ++k) {
        const auto path = (std::filesystem::path(cfg.predictions) / (detail::seq_name(k) + ".csv")).string();
        try {
            preds.push_back(load_predictions(path));
        } catch (const SchemaError& e) {
            throw SchemaError(path + ": " + e.what());
        }
    }
    return referent_sequences(data, preds);
}

inline EvalReport cmd_eval(const RunConfig& cfg, std::ostream& out) {
    auto seqs = load_eval_pairs(cfg);
    for (auto& s : seqs) s.pred = filter_referents(s.pred, cfg.tracker.beta_ref);
    const EvalReport r = evaluate(seqs);
    out << to_text(r);
    auto os = detail::open_out(cfg.report);
    os << to_json(r).dump(2) << '\n';
    return r;
}

inline std::string sweep_table(const std::vector<double>& betas, const std::vector<EvalReport>& reports) {
    std::string out = "  beta";
    char buf[32];
    for (const auto& f : report_fields()) {
        std::snprintf(buf, sizeof buf, "%8s", f.c_str());
        out += buf;
    }
    out += '\n';
    for (std::size_t i = 0; i < betas.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%6.2f", betas[i]);
        out += buf;
        for (double v : report_values(reports[i])) {
            std::snprintf(buf, sizeof buf, "%8.2f", 100.0 * v);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

inline std::vector<EvalReport> cmd_sweep(const RunConfig& cfg, std::ostream& out) {
    const auto betas = parse_betas(cfg.betas);
    const auto reports = sweep(load_eval_pairs(cfg), betas);
    out << sweep_table(betas, reports);
    nlohmann::json j = nlohmann::json::array();
    for (std::size_t i = 0; i < betas.size(); ++i) {
        nlohmann::json row = to_json(reports[i]);
        row["beta_ref"] = betas[i];
        j.push_back(std::move(row));
    }
    auto os = detail::open_out(cfg.report);
    os << j.dump(2) << '\n';
    return reports;
}

inline std::vector<AblationCell> cmd_ablate(const RunConfig& cfg, std::ostream& out) {
    const auto train = load_dataset(cfg.dataset);
    const auto eval = load_dataset(cfg.eval_dataset);
    const AblationSetup setup{cfg.model, resolved_train(cfg), cfg.tracker};
    const auto cells = run_ablation(setup, train, eval, &out);
    out << ablation_table(cells);
    const AblationVerdict v = verdict(cells);
    nlohmann::json j = {{"cells", to_json(cells)},
                        {"verdict",
                         {{"hota_delta", v.hota_delta},
                          {"newborn_detre_delta", v.newborn_detre_delta},
                          {"full_beats_baseline", v.full_beats_baseline},
                          {"cqm_recall_holds", v.cqm_recall_holds}}}};
    auto os = detail::open_out(cfg.report);
    os << j.dump(2) << '\n';
    return cells;
}

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> n = {"generate", "train", "track", "eval", "sweep", "ablate"};
    return n;
}

/// Validates, writes the run log, and dispatches.
inline void run_command(const std::string& name, const RunConfig& cfg, std::ostream& out) {
    validate(cfg);
    write_run_log(cfg, name);
    if (name == "generate") cmd_generate(cfg, out);
    else if (name == "train") cmd_train(cfg, out);
    else if (name == "track") cmd_track(cfg, out);
    else if (name == "eval") cmd_eval(cfg, out);
    else if (name == "sweep") cmd_sweep(cfg, out);
    else if (name == "ablate") cmd_ablate(cfg, out);
    else throw ConfigError("unknown command '" + name + "'");
}

}  // namespace rmot
