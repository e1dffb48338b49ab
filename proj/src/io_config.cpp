#include "moat/io.hpp"

#include <fstream>
#include <json.hpp>
#include <set>

namespace moat {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <typename V>
V require(const json& obj, const std::string& key, const std::string& where) {
    if (!obj.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
    try {
        return obj.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError(where + ": bad value for '" + key + "'");
    }
}

template <typename V>
void maybe(const json& obj, const std::string& key, V& out, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError(where + ": bad value for '" + key + "'");
    }
}

}  // namespace

ModelConfig parse_config(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: malformed document: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config: top level must be a map");
    check_keys(doc, {"name", "stages", "num_classes", "input_size", "mode", "window_plan",
                     "rel_bias", "sd_survival", "attn_inner_residual", "train"},
               "config");

    ModelConfig cfg;
    maybe(doc, "name", cfg.name, "config");
    cfg.num_classes = require<int>(doc, "num_classes", "config");
    cfg.input_size = require<int>(doc, "input_size", "config");
    maybe(doc, "mode", cfg.mode, "config");
    maybe(doc, "rel_bias", cfg.rel_bias, "config");
    maybe(doc, "sd_survival", cfg.sd_survival, "config");
    maybe(doc, "attn_inner_residual", cfg.attn_inner_residual, "config");
    maybe(doc, "window_plan", cfg.window_plan, "config");

    if (!doc.contains("stages")) throw ConfigError("config: missing 'stages'");
    const json& stages = doc.at("stages");
    if (!stages.is_array()) throw ConfigError("config: 'stages' must be a list");
    int idx = 0;
    for (const auto& st : stages) {
        ++idx;
        std::string where = "stage " + std::to_string(idx);
        if (!st.is_object()) throw ConfigError(where + ": must be a map");
        check_keys(st, {"kind", "blocks", "channels"}, where);
        StageSpec spec;
        spec.kind = require<std::string>(st, "kind", where);
        spec.blocks = require<int>(st, "blocks", where);
        spec.channels = require<int64_t>(st, "channels", where);
        cfg.stages.push_back(spec);
    }

    if (doc.contains("train")) {
        const json& tr = doc.at("train");
        if (!tr.is_object()) throw ConfigError("config: 'train' must be a map");
        check_keys(tr, {"peak_lr", "min_lr", "warmup_steps", "total_steps", "batch_size",
                        "label_smoothing", "grad_clip_norm", "weight_decay", "ema"},
                   "train");
        cfg.has_train = true;
        maybe(tr, "peak_lr", cfg.train.peak_lr, "train");
        maybe(tr, "min_lr", cfg.train.min_lr, "train");
        maybe(tr, "warmup_steps", cfg.train.warmup_steps, "train");
        maybe(tr, "total_steps", cfg.train.total_steps, "train");
        maybe(tr, "batch_size", cfg.train.batch_size, "train");
        maybe(tr, "label_smoothing", cfg.train.label_smoothing, "train");
        maybe(tr, "grad_clip_norm", cfg.train.grad_clip_norm, "train");
        maybe(tr, "weight_decay", cfg.train.weight_decay, "train");
        maybe(tr, "ema", cfg.train.ema, "train");
        if (!(cfg.train.label_smoothing >= 0.0 && cfg.train.label_smoothing < 1.0))
            throw ConfigError("train: label_smoothing must be in [0,1)");
        if (cfg.train.warmup_steps > cfg.train.total_steps)
            throw ConfigError("train: warmup_steps exceeds total_steps");
    }

    resolve_geometry(cfg, true);  // full invariant validation
    return cfg;
}

std::string emit_config(const ModelConfig& cfg) {
    json doc;
    doc["name"] = cfg.name;
    doc["num_classes"] = cfg.num_classes;
    doc["input_size"] = cfg.input_size;
    doc["mode"] = cfg.mode;
    doc["rel_bias"] = cfg.rel_bias;
    doc["sd_survival"] = cfg.sd_survival;
    doc["attn_inner_residual"] = cfg.attn_inner_residual;
    if (!cfg.window_plan.empty()) doc["window_plan"] = cfg.window_plan;
    doc["stages"] = json::array();
    for (const auto& st : cfg.stages)
        doc["stages"].push_back({{"kind", st.kind}, {"blocks", st.blocks}, {"channels", st.channels}});
    if (cfg.has_train) {
        json tr;
        tr["peak_lr"] = cfg.train.peak_lr;
        tr["min_lr"] = cfg.train.min_lr;
        tr["warmup_steps"] = cfg.train.warmup_steps;
        tr["total_steps"] = cfg.train.total_steps;
        tr["batch_size"] = cfg.train.batch_size;
        tr["label_smoothing"] = cfg.train.label_smoothing;
        tr["grad_clip_norm"] = cfg.train.grad_clip_norm;
        tr["weight_decay"] = cfg.train.weight_decay;
        tr["ema"] = cfg.train.ema;
        doc["train"] = tr;
    }
    return doc.dump(2) + "\n";
}

ModelConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

}  // namespace moat
