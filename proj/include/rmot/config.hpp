// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmot/ablate.hpp"

namespace rmot {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Everything a command needs, fully defaulted.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    TrackerConfig tracker;
    WorldParams world;
    std::uint64_t data_seed = 1;
    int scenarios = 200;
    std::uint64_t eval_seed = 2;
    int eval_scenarios = 40;
    std::string dataset = "data/train.jsonl";
    std::string eval_dataset = "data/eval.jsonl";
    std::string checkpoint = "runs/model.ckpt";
    std::string predictions = "runs/predictions";
    std::string overlay_dir;
    std::string expression;  // overrides each scenario's expression when set
    std::string loss_curve = "runs/loss.csv";
    std::string report = "runs/report.json";
    std::string run_log = "runs/run.log";
    std::string betas = "0.2,0.3,0.4,0.5,0.6,0.7,0.8";
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream is(v);
    T out{};
    if (!(is >> out) || !is.eof()) throw ConfigError("config: bad value '" + v + "' for " + key);
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define RMOT_NUM_FIELD(key, member, T)                                                                      \
    {key, {[](RunConfig& c, const std::string& v) { c.member = parse_number<T>(key, v); },                 \
           [](const RunConfig& c) { return std::is_floating_point_v<T> ? format_double(static_cast<double>(c.member)) \
                                                                        : std::to_string(c.member); }}}
#define RMOT_BOOL_FIELD(key, member)                                                               \
    {key, {[](RunConfig& c, const std::string& v) { c.member = parse_bool(key, v); },              \
           [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}}
#define RMOT_STR_FIELD(key, member)                                                  \
    {key, {[](RunConfig& c, const std::string& v) { c.member = v; },                \
           [](const RunConfig& c) { return c.member; }}}

inline const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> f = {
        RMOT_NUM_FIELD("model.dim", model.dim, std::size_t),
        RMOT_NUM_FIELD("model.heads", model.heads, std::size_t),
        RMOT_NUM_FIELD("model.levels", model.levels, std::size_t),
        RMOT_NUM_FIELD("model.points", model.points, std::size_t),
        RMOT_NUM_FIELD("model.enc_layers", model.enc_layers, std::size_t),
        RMOT_NUM_FIELD("model.dec_layers", model.dec_layers, std::size_t),
        RMOT_NUM_FIELD("model.n_det", model.n_det, std::size_t),
        RMOT_NUM_FIELD("model.ffn_hidden", model.ffn_hidden, std::size_t),
        RMOT_NUM_FIELD("model.window", model.window, std::size_t),
        RMOT_NUM_FIELD("model.max_words", model.max_words, std::size_t),
        RMOT_NUM_FIELD("model.seed", model.seed, std::uint64_t),
        {"model.riqa",
         {[](RunConfig& c, const std::string& v) {
              if (v == "none") c.model.riqa = RiqaVariant::None;
              else if (v == "pre") c.model.riqa = RiqaVariant::Pre;
              else if (v == "in") c.model.riqa = RiqaVariant::In;
              else throw ConfigError("config: model.riqa must be none, pre or in");
          },
          [](const RunConfig& c) { return std::string(to_string(c.model.riqa)); }}},
        {"model.riqa_mode",
         {[](RunConfig& c, const std::string& v) {
              if (v == "det") c.model.riqa_mode = RiqaMode::Det;
              else if (v == "track") c.model.riqa_mode = RiqaMode::Track;
              else if (v == "both") c.model.riqa_mode = RiqaMode::Both;
              else throw ConfigError("config: model.riqa_mode must be det, track or both");
          },
          [](const RunConfig& c) { return std::string(to_string(c.model.riqa_mode)); }}},
        {"model.order",
         {[](RunConfig& c, const std::string& v) {
              if (v == "cme") c.model.order = EncoderOrder::Cme;
              else if (v == "baseline") c.model.order = EncoderOrder::Baseline;
              else throw ConfigError("config: model.order must be cme or baseline");
          },
          [](const RunConfig& c) { return std::string(to_string(c.model.order)); }}},
        RMOT_NUM_FIELD("loss.cls", train.loss.cls, double),
        RMOT_NUM_FIELD("loss.l1", train.loss.l1, double),
        RMOT_NUM_FIELD("loss.giou", train.loss.giou, double),
        RMOT_NUM_FIELD("loss.ref", train.loss.ref, double),
        RMOT_NUM_FIELD("loss.alpha", train.loss.alpha, double),
        RMOT_NUM_FIELD("loss.gamma", train.loss.gamma, double),
        RMOT_BOOL_FIELD("loss.duplicate_det_class", train.loss.duplicate_det_class),
        RMOT_BOOL_FIELD("train.cqm", train.cqm),
        RMOT_NUM_FIELD("train.lr", train.optim.lr, double),
        RMOT_NUM_FIELD("train.weight_decay", train.optim.weight_decay, double),
        RMOT_NUM_FIELD("train.clip_norm", train.optim.clip_norm, double),
        RMOT_NUM_FIELD("train.epochs", train.epochs, int),
        RMOT_NUM_FIELD("train.decay_epoch", train.decay_epoch, int),
        RMOT_NUM_FIELD("train.decay", train.decay, double),
        RMOT_NUM_FIELD("train.clip_len", train.clip_len, int),
        RMOT_NUM_FIELD("train.seed", train.seed, std::uint64_t),
        RMOT_STR_FIELD("train.dump_path", train.dump_path),
        RMOT_NUM_FIELD("tracker.beta_obj", tracker.beta_obj, double),
        RMOT_NUM_FIELD("tracker.beta_ref", tracker.beta_ref, double),
        RMOT_NUM_FIELD("tracker.miss_patience", tracker.miss_patience, int),
        RMOT_NUM_FIELD("world.n_objects", world.n_objects, int),
        RMOT_NUM_FIELD("world.n_frames", world.n_frames, int),
        RMOT_NUM_FIELD("world.spawn_rate", world.spawn_rate, double),
        RMOT_NUM_FIELD("world.exit_rate", world.exit_rate, double),
        RMOT_NUM_FIELD("data.seed", data_seed, std::uint64_t),
        RMOT_NUM_FIELD("data.scenarios", scenarios, int),
        RMOT_NUM_FIELD("data.eval_seed", eval_seed, std::uint64_t),
        RMOT_NUM_FIELD("data.eval_scenarios", eval_scenarios, int),
        RMOT_STR_FIELD("path.dataset", dataset),
        RMOT_STR_FIELD("path.eval_dataset", eval_dataset),
        RMOT_STR_FIELD("path.checkpoint", checkpoint),
        RMOT_STR_FIELD("path.predictions", predictions),
        RMOT_STR_FIELD("path.overlay_dir", overlay_dir),
        RMOT_STR_FIELD("path.loss_curve", loss_curve),
        RMOT_STR_FIELD("path.report", report),
        RMOT_STR_FIELD("path.run_log", run_log),
        RMOT_STR_FIELD("track.expression", expression),
        RMOT_STR_FIELD("sweep.betas", betas),
    };
    return f;
}

#undef RMOT_NUM_FIELD
#undef RMOT_BOOL_FIELD
#undef RMOT_STR_FIELD

}  // namespace detail

inline void set_option(RunConfig& c, const std::string& key, const std::string& value) {
    const auto& f = detail::fields();
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second.set(c, value);
}

/// Applies one `key=value` assignment.
inline void apply_assignment(RunConfig& c, const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("config: expected key=value, got '" + text + "'");
    set_option(c, detail::trim(text.substr(0, eq)), detail::trim(text.substr(eq + 1)));
}

/// Key=value lines; '#' starts a comment.
inline void parse_config(RunConfig& c, std::istream& is, const std::string& origin = "config") {
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        try {
            apply_assignment(c, line);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + " line " + std::to_string(n) + ": " + e.what());
        }
    }
}

inline void load_config(RunConfig& c, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    parse_config(c, is, path);
}

inline void validate(const RunConfig& c) {
    c.model.validate();
    c.train.validate();
    c.tracker.validate();
    if (c.scenarios <= 0 || c.eval_scenarios <= 0) throw ConfigError("config: scenario counts must be positive");
    if (c.world.n_frames <= 0 || c.world.n_objects <= 0) throw ConfigError("config: world extents must be positive");
}

/// Every field as `key = value`, sorted by key.
inline std::string dump_config(const RunConfig& c) {
    std::string out;
    for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(c) + "\n";
    return out;
}

inline std::vector<double> parse_betas(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(detail::parse_number<double>("sweep.betas", detail::trim(item)));
    if (out.empty()) throw ConfigError("config: sweep.betas is empty");
    return out;
}

}  // namespace rmot
