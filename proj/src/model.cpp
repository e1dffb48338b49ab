#include "moat/model.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

namespace moat {

namespace {

struct FamilyRow {
    std::array<int, 5> blocks;
    std::array<int64_t, 5> channels;
    double sd_rate;  // terminal stochastic-depth drop rate (ImageNet-1K recipe)
};

const std::map<std::string, FamilyRow>& family_table() {
    static const std::map<std::string, FamilyRow> t = {
        {"moat-0", {{2, 2, 3, 7, 2}, {64, 96, 192, 384, 768}, 0.2}},
        {"moat-1", {{2, 2, 6, 14, 2}, {64, 96, 192, 384, 768}, 0.3}},
        {"moat-2", {{2, 2, 6, 14, 2}, {128, 128, 256, 512, 1024}, 0.5}},
        {"moat-3", {{2, 2, 12, 28, 2}, {160, 160, 320, 640, 1280}, 0.7}},
        {"moat-4", {{2, 2, 12, 28, 2}, {256, 256, 512, 1024, 2048}, 0.7}},
        {"tiny-moat-0", {{2, 2, 3, 7, 2}, {32, 32, 64, 128, 256}, 0.0}},
        {"tiny-moat-1", {{2, 2, 3, 7, 2}, {40, 40, 80, 160, 320}, 0.0}},
        {"tiny-moat-2", {{2, 2, 3, 7, 2}, {56, 56, 112, 224, 448}, 0.0}},
        {"tiny-moat-3", {{2, 2, 3, 7, 2}, {80, 80, 160, 320, 640}, 0.1}},
    };
    return t;
}

bool stage_kind_known(const std::string& k) {
    if (k == "conv_stem" || k == "mbconv" || k == "moat") return true;
    BlockKind bk;
    return block_kind_from_name(k, bk);
}

bool stage_kind_has_attention(const std::string& k) {
    return k != "conv_stem" && k != "mbconv";
}

}  // namespace

std::vector<std::string> family_names() {
    std::vector<std::string> v;
    for (const auto& [name, row] : family_table()) v.push_back(name);
    return v;
}

ModelConfig family_config(const std::string& name) {
    auto it = family_table().find(name);
    if (it == family_table().end())
        throw ConfigError("unknown model family: " + name);
    const FamilyRow& row = it->second;
    ModelConfig cfg;
    cfg.name = name;
    cfg.num_classes = 1000;
    cfg.input_size = 224;
    cfg.mode = "classification";
    cfg.rel_bias = true;
    cfg.sd_survival = 1.0 - row.sd_rate;
    static const char* kinds[5] = {"conv_stem", "mbconv", "mbconv", "moat", "moat"};
    for (int i = 0; i < 5; ++i)
        cfg.stages.push_back({kinds[i], row.blocks[static_cast<size_t>(i)],
                              row.channels[static_cast<size_t>(i)]});
    return cfg;
}

int parse_window(const std::string& entry) {
    if (entry.empty() || entry == "global" || entry == "none") return 0;
    if (entry.rfind("win", 0) == 0) {
        int k = 0;
        if (std::sscanf(entry.c_str() + 3, "%d", &k) == 1 && k > 0) return k;
    }
    throw ConfigError("bad window plan entry '" + entry + "' (expected global|none|win<k>)");
}

ModelGeometry resolve_geometry(const ModelConfig& cfg, bool strict_heads) {
    if (cfg.stages.size() != 5)
        throw ConfigError("model needs exactly 5 stages, got " + std::to_string(cfg.stages.size()));
    if (cfg.stages[0].kind != "conv_stem")
        throw ConfigError("stage 1 must be conv_stem, got '" + cfg.stages[0].kind + "'");
    for (size_t i = 0; i < 5; ++i) {
        const StageSpec& st = cfg.stages[i];
        if (!stage_kind_known(st.kind))
            throw ConfigError("stage " + std::to_string(i + 1) + ": unknown kind '" + st.kind + "'");
        if (i > 0 && st.kind == "conv_stem")
            throw ConfigError("stage " + std::to_string(i + 1) + ": conv_stem is only valid as stage 1");
        if (st.blocks < 1)
            throw ConfigError("stage " + std::to_string(i + 1) + ": needs at least one block");
        if (st.channels < 1)
            throw ConfigError("stage " + std::to_string(i + 1) + ": channels must be positive");
    }
    if (cfg.input_size < 1) throw ConfigError("input_size must be positive");
    if (cfg.num_classes < 1) throw ConfigError("num_classes must be positive");
    if (cfg.mode != "classification" && cfg.mode != "downstream")
        throw ConfigError("mode must be classification or downstream, got '" + cfg.mode + "'");
    if (cfg.mode == "downstream" && cfg.rel_bias)
        throw ConfigError("downstream mode removes the positional embedding; set rel_bias to false");
    if (!(cfg.sd_survival > 0.0 && cfg.sd_survival <= 1.0))
        throw ConfigError("sd_survival must be in (0,1]");
    if (!cfg.window_plan.empty() && cfg.window_plan.size() != 5)
        throw ConfigError("window_plan needs one entry per stage (5), got " +
                          std::to_string(cfg.window_plan.size()));
    if (cfg.has_train && cfg.train.ema)
        throw ConfigError("EMA of weights is reserved but not implemented; disable train.ema");

    std::array<int, 5> windows = {0, 0, 0, 0, 0};
    for (size_t i = 0; i < cfg.window_plan.size(); ++i)
        windows[i] = parse_window(cfg.window_plan[i]);

    ModelGeometry geo;
    geo.input_size = cfg.input_size;
    geo.stem_c = cfg.stages[0].channels;
    geo.num_classes = cfg.num_classes;

    int64_t h = (cfg.input_size + 1) / 2;  // stem conv stride 2
    geo.stage_out_hw[0] = h;
    geo.stage_stride[0] = 2;
    geo.stage_channels[0] = geo.stem_c;

    int64_t c_prev = geo.stem_c;
    int total_blocks = 0;
    for (int s = 1; s < 5; ++s) total_blocks += cfg.stages[static_cast<size_t>(s)].blocks;
    int bi = 0;
    for (int s = 1; s < 5; ++s) {
        const StageSpec& st = cfg.stages[static_cast<size_t>(s)];
        std::string kind_name = st.kind == "moat" ? "moat" : st.kind;
        BlockKind kind;
        if (st.kind == "mbconv") kind = BlockKind::MBConv;
        else if (!block_kind_from_name(kind_name, kind))
            throw ConfigError("stage " + std::to_string(s + 1) + ": unknown kind '" + st.kind + "'");

        if (strict_heads && stage_kind_has_attention(st.kind)) {
            if (st.channels % kHeadDim != 0)
                throw ConfigError("stage " + std::to_string(s + 1) + ": channels " +
                                  std::to_string(st.channels) + " not divisible by the attention head size " +
                                  std::to_string(kHeadDim));
            if (kind == BlockKind::AttnMBConvDownFirst && c_prev % kHeadDim != 0)
                throw ConfigError("stage " + std::to_string(s + 1) + ": input channels " +
                                  std::to_string(c_prev) + " not divisible by the attention head size " +
                                  std::to_string(kHeadDim));
        }

        for (int b = 0; b < st.blocks; ++b) {
            BlockSpec spec;
            spec.kind = kind;
            spec.stride = b == 0 ? 2 : 1;  // downsampling in the first block of each stage
            spec.c_in = b == 0 ? c_prev : st.channels;
            spec.c_out = st.channels;
            spec.use_se = kind == BlockKind::MBConv;
            spec.window = windows[static_cast<size_t>(s)];
            spec.rel_bias = cfg.rel_bias && stage_kind_has_attention(st.kind);
            spec.attn_inner_residual = cfg.attn_inner_residual;
            spec.in_h = h;
            spec.in_w = h;
            if (total_blocks > 1)
                spec.sd_survival = 1.0 - (static_cast<double>(bi) / (total_blocks - 1)) * (1.0 - cfg.sd_survival);
            else
                spec.sd_survival = cfg.sd_survival;
            h = spec.out_h();
            if (spec.window > 0 && (h % spec.window != 0))
                throw ConfigError("stage " + std::to_string(s + 1) + ": feature extent " + std::to_string(h) +
                                  " not divisible by window " + std::to_string(spec.window) +
                                  "; input size must be a multiple of " +
                                  std::to_string(static_cast<int64_t>(spec.window) << (s + 1)));
            char path[32];
            std::snprintf(path, sizeof(path), "s%d.b%02d", s + 1, b);
            geo.blocks.push_back({spec, s + 1, b, path});
            ++bi;
        }
        geo.stage_out_hw[static_cast<size_t>(s)] = h;
        geo.stage_stride[static_cast<size_t>(s)] = 2LL << s;
        geo.stage_channels[static_cast<size_t>(s)] = st.channels;
        c_prev = st.channels;
    }
    geo.head_c = c_prev;
    return geo;
}

ModelConfig adapted_config(const ModelConfig& base, int stage4_window, int input_size) {
    ModelConfig cfg = base;
    cfg.mode = "downstream";
    cfg.rel_bias = false;
    cfg.input_size = input_size;
    cfg.window_plan = {"global", "global", "global",
                       stage4_window > 0 ? "win" + std::to_string(stage4_window) : "global",
                       "global"};
    resolve_geometry(cfg, true);  // surfaces divisibility errors early
    return cfg;
}

ScaleCheckReport scale_family_check(const std::vector<ModelConfig>& cfgs) {
    ScaleCheckReport rep;
    if (cfgs.size() < 2) throw ConfigError("scale_family_check needs at least two configs");
    for (const auto& cfg : cfgs) {
        ScaleCheckRow row;
        row.name = cfg.name;
        for (const auto& st : cfg.stages) row.depth += st.blocks;
        row.width = cfg.stages.back().channels;
        rep.rows.push_back(row);
    }
    rep.monotone = true;
    rep.alternates = true;
    for (size_t i = 1; i < rep.rows.size(); ++i) {
        const auto& a = rep.rows[i - 1];
        const auto& b = rep.rows[i];
        if (b.depth < a.depth || b.width < a.width) {
            rep.monotone = false;
            rep.detail += b.name + " shrinks vs " + a.name + "; ";
        }
        if (b.depth == a.depth && b.width == a.width) {
            rep.alternates = false;
            rep.detail += b.name + " changes neither depth nor width vs " + a.name + "; ";
        }
    }
    return rep;
}

}  // namespace moat
