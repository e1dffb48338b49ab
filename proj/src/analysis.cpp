#include "moat/analysis.hpp"

#include <cinttypes>
#include <cstdio>
#include <map>

namespace moat {

namespace {

// Accounting convention (1 FLOP = 1 multiply-accumulate):
//   conv: out_positions * kh * kw * cin * cout     (bias add folded in)
//   depthwise conv: out_positions * kh * kw * c
//   dense: cin * cout per position
//   attention: q/k/v/out projections as dense, 2*S^2*C for logits and the
//     weighted sum, 3*S^2*heads for the softmax (exp, accumulate, normalize),
//     S^2*heads for the relative-bias add
//   normalizations, activations, poolings, residual adds: 1 per element
struct Emitter {
    std::vector<CostRow>& rows;

    void row(const std::string& path, const std::string& kind, int64_t params, int64_t flops) {
        rows.push_back({path, kind, params, flops});
    }
    void conv(const std::string& p, int64_t kh, int64_t kw, int64_t cin, int64_t cout,
              bool bias, int64_t positions) {
        row(p, "conv", kh * kw * cin * cout + (bias ? cout : 0), positions * kh * kw * cin * cout);
    }
    void dw(const std::string& p, int64_t k, int64_t c, int64_t positions) {
        row(p, "depthwise_conv", k * k * c, positions * k * k * c);
    }
    void dense(const std::string& p, int64_t cin, int64_t cout, bool bias, int64_t count = 1) {
        row(p, "dense", cin * cout + (bias ? cout : 0), count * cin * cout);
    }
    void bn(const std::string& p, int64_t c, int64_t elements) { row(p, "batch_norm", 2 * c, elements); }
    void ln(const std::string& p, int64_t c, int64_t elements) { row(p, "layer_norm", 2 * c, elements); }
    void act(const std::string& p, const char* kind, int64_t elements) { row(p, kind, 0, elements); }
    void pool(const std::string& p, int64_t elements) { row(p, "avg_pool", 0, elements); }
    void addop(const std::string& p, int64_t elements) { row(p, "add", 0, elements); }

    void attention(const std::string& p, int64_t cin, int64_t cout, int64_t S, int64_t reps,
                   int64_t grid_h, int64_t grid_w, bool rel) {
        int64_t heads = std::max<int64_t>(1, cout / kHeadDim);
        row(p + ".qkv", "dense", 3 * cin * cout, reps * 3 * S * cin * cout);
        row(p + ".wo", "dense", cout * cout, reps * S * cout * cout);
        row(p + ".logits", "attention_matmul", 0, reps * 2 * S * S * cout);
        row(p + ".softmax", "softmax", 0, reps * 3 * S * S * heads);
        if (rel)
            row(p + ".rel_bias", "rel_bias",
                heads * (2 * grid_h - 1) * (2 * grid_w - 1), reps * S * S * heads);
    }
};

struct AttnGeom {
    int64_t S, reps, grid_h, grid_w;
};

AttnGeom attn_geom(const BlockSpec& s, int64_t h, int64_t w) {
    if (s.window > 0 && (h != s.window || w != s.window)) {
        int64_t reps = (h / s.window) * (w / s.window);
        return {static_cast<int64_t>(s.window) * s.window, reps, s.window, s.window};
    }
    return {h * w, 1, h, w};
}

void emit_mbconv_branch(Emitter& e, const std::string& p, const BlockSpec& s,
                        int64_t c_in, int64_t c_out, int stride, bool use_se,
                        int64_t in_h, int64_t in_w) {
    int64_t E = c_out * s.expansion;
    int64_t oh = (in_h + stride - 1) / stride, ow = (in_w + stride - 1) / stride;
    int64_t in_pos = in_h * in_w, out_pos = oh * ow;
    e.bn(p + ".pre_bn", c_in, in_pos * c_in);
    e.conv(p + ".expand", 1, 1, c_in, E, false, in_pos);
    e.bn(p + ".expand_bn", E, in_pos * E);
    e.act(p + ".gelu0", "gelu", in_pos * E);
    e.dw(p + ".dw", 3, E, out_pos);
    e.bn(p + ".dw_bn", E, out_pos * E);
    e.act(p + ".gelu1", "gelu", out_pos * E);
    if (use_se) {
        int64_t hid = std::max<int64_t>(1, c_out / 4);
        e.pool(p + ".se.gap", out_pos * E);
        e.dense(p + ".se.w1", E, hid, true);
        e.act(p + ".se.hswish", "hard_swish", hid);
        e.dense(p + ".se.w2", hid, E, true);
        e.act(p + ".se.sigmoid", "sigmoid", E);
        e.act(p + ".se.scale", "mul", out_pos * E);
    }
    e.conv(p + ".shrink", 1, 1, E, c_out, true, out_pos);
}

void emit_shortcut(Emitter& e, const std::string& p, int64_t c_in, int64_t c_out,
                   int stride, int64_t out_pos) {
    if (stride == 2) e.pool(p + ".shortcut.pool", out_pos * c_in);
    if (c_in != c_out) e.conv(p + ".shortcut.proj", 1, 1, c_in, c_out, true, out_pos);
}

void emit_block(Emitter& e, const BlockGeom& bg) {
    const BlockSpec& s = bg.spec;
    const std::string& p = bg.path;
    int64_t oh = s.out_h(), ow = s.out_w();
    int64_t out_pos = oh * ow, in_pos = s.in_h * s.in_w;

    switch (s.kind) {
        case BlockKind::MBConv: {
            emit_mbconv_branch(e, p, s, s.c_in, s.c_out, s.stride, s.use_se, s.in_h, s.in_w);
            emit_shortcut(e, p, s.c_in, s.c_out, s.stride, out_pos);
            e.addop(p + ".residual", out_pos * s.c_out);
            break;
        }
        case BlockKind::MOAT: {
            emit_mbconv_branch(e, p, s, s.c_in, s.c_out, s.stride, false, s.in_h, s.in_w);
            AttnGeom a = attn_geom(s, oh, ow);
            e.ln(p + ".attn_ln", s.c_out, out_pos * s.c_out);
            e.attention(p + ".attn", s.c_out, s.c_out, a.S, a.reps, a.grid_h, a.grid_w, s.rel_bias);
            e.addop(p + ".attn_residual", out_pos * s.c_out);
            emit_shortcut(e, p, s.c_in, s.c_out, s.stride, out_pos);
            e.addop(p + ".residual", out_pos * s.c_out);
            break;
        }
        case BlockKind::Transformer:
        case BlockKind::AttnMlpDwConv:
        case BlockKind::AvgPoolAttnMlp:
        case BlockKind::PatchEmbedAttnMlp: {
            int64_t attn_cin = s.c_in;
            bool patch = s.kind == BlockKind::PatchEmbedAttnMlp;
            bool changes = s.stride == 2 || s.c_in != s.c_out;
            if (patch && changes) {
                e.conv(p + ".patch", 2, 2, s.c_in, s.c_out, true, out_pos);
                e.bn(p + ".patch_bn", s.c_out, out_pos * s.c_out);
                attn_cin = s.c_out;
            }
            int64_t ln_pos = (patch && changes) ? out_pos : in_pos;
            e.ln(p + ".attn_ln", attn_cin, ln_pos * attn_cin);
            if (!patch && s.stride == 2) e.pool(p + ".attn_pool", 2 * out_pos * s.c_in);
            AttnGeom a = attn_geom(s, oh, ow);
            e.attention(p + ".attn", attn_cin, s.c_out, a.S, a.reps, a.grid_h, a.grid_w, s.rel_bias);
            if (!patch && changes) e.conv(p + ".attn_proj", 1, 1, s.c_in, s.c_out, true, out_pos);
            e.addop(p + ".attn_residual", out_pos * s.c_out);
            int64_t E = s.hidden();
            e.ln(p + ".mlp_ln", s.c_out, out_pos * s.c_out);
            e.conv(p + ".mlp1", 1, 1, s.c_out, E, true, out_pos);
            e.act(p + ".mlp_gelu", "gelu", out_pos * E);
            if (s.kind == BlockKind::AttnMlpDwConv) e.dw(p + ".mlp_dw", 3, E, out_pos);
            e.conv(p + ".mlp2", 1, 1, E, s.c_out, true, out_pos);
            e.addop(p + ".residual", out_pos * s.c_out);
            break;
        }
        case BlockKind::AttnMBConv: {
            bool changes = s.stride == 2 || s.c_in != s.c_out;
            e.ln(p + ".attn_ln", s.c_in, in_pos * s.c_in);
            if (s.stride == 2) e.pool(p + ".attn_pool", 2 * out_pos * s.c_in);
            AttnGeom a = attn_geom(s, oh, ow);
            e.attention(p + ".attn", s.c_in, s.c_out, a.S, a.reps, a.grid_h, a.grid_w, s.rel_bias);
            if (changes) e.conv(p + ".attn_proj", 1, 1, s.c_in, s.c_out, true, out_pos);
            e.addop(p + ".attn_residual", out_pos * s.c_out);
            emit_mbconv_branch(e, p, s, s.c_out, s.c_out, 1, false, oh, ow);
            e.addop(p + ".residual", out_pos * s.c_out);
            break;
        }
        case BlockKind::AttnMBConvDownFirst: {
            e.ln(p + ".attn_ln", s.c_in, in_pos * s.c_in);
            AttnGeom a = attn_geom(s, s.in_h, s.in_w);
            e.attention(p + ".attn", s.c_in, s.c_in, a.S, a.reps, a.grid_h, a.grid_w, s.rel_bias);
            e.addop(p + ".attn_residual", in_pos * s.c_in);
            emit_mbconv_branch(e, p, s, s.c_in, s.c_out, s.stride, false, s.in_h, s.in_w);
            emit_shortcut(e, p, s.c_in, s.c_out, s.stride, out_pos);
            e.addop(p + ".residual", out_pos * s.c_out);
            break;
        }
        case BlockKind::AttnMBConvExpandAtAttn: {
            if (s.c_in != s.c_out) e.conv(p + ".pre_expand", 1, 1, s.c_in, s.c_out, true, in_pos);
            e.ln(p + ".attn_ln", s.c_out, in_pos * s.c_out);
            AttnGeom a = attn_geom(s, s.in_h, s.in_w);
            e.attention(p + ".attn", s.c_out, s.c_out, a.S, a.reps, a.grid_h, a.grid_w, s.rel_bias);
            e.addop(p + ".attn_residual", in_pos * s.c_out);
            emit_mbconv_branch(e, p, s, s.c_out, s.c_out, s.stride, false, s.in_h, s.in_w);
            emit_shortcut(e, p, s.c_out, s.c_out, s.stride, out_pos);
            e.addop(p + ".residual", out_pos * s.c_out);
            break;
        }
    }
}

std::vector<CostRow> emit_rows(const ModelConfig& cfg) {
    ModelGeometry geo = resolve_geometry(cfg, false);
    std::vector<CostRow> rows;
    Emitter e{rows};
    int64_t sh = geo.stage_out_hw[0];
    e.conv("s1.conv0", 3, 3, 3, geo.stem_c, false, sh * sh);
    e.bn("s1.bn0", geo.stem_c, sh * sh * geo.stem_c);
    e.act("s1.gelu0", "gelu", sh * sh * geo.stem_c);
    e.conv("s1.conv1", 3, 3, geo.stem_c, geo.stem_c, true, sh * sh);
    for (const auto& bg : geo.blocks) emit_block(e, bg);
    int64_t fh = geo.stage_out_hw[4];
    e.pool("head.gap", fh * fh * geo.head_c);
    e.dense("head.fc", geo.head_c, geo.num_classes, true);
    return rows;
}

}  // namespace

CostReport cost_report(const ModelConfig& cfg, int64_t flops_input_size) {
    CostReport rep;
    rep.input_size = flops_input_size > 0 ? flops_input_size : cfg.input_size;
    std::vector<CostRow> prows = emit_rows(cfg);
    if (rep.input_size == cfg.input_size) {
        rep.rows = std::move(prows);
    } else {
        ModelConfig fc = cfg;
        fc.input_size = static_cast<int>(rep.input_size);
        std::vector<CostRow> frows = emit_rows(fc);
        if (frows.size() != prows.size())
            throw ConfigError("cost walk mismatch across input sizes");
        rep.rows = std::move(prows);
        for (size_t i = 0; i < rep.rows.size(); ++i) rep.rows[i].flops = frows[i].flops;
    }
    for (const auto& r : rep.rows) {
        rep.total_params += r.params;
        rep.total_flops += r.flops;
    }
    return rep;
}

int64_t count_params(const ModelConfig& cfg) { return cost_report(cfg).total_params; }

std::vector<std::string> ablation_suites() { return {"block", "order", "downsample", "stage", "meta"}; }

std::vector<AblationRow> ablation_cost_table(const std::string& suite, const std::string& layout) {
    ModelConfig base = family_config(layout);
    std::vector<AblationRow> out;
    auto with_stage45 = [&](const std::string& kind) {
        ModelConfig c = base;
        c.stages[3].kind = kind;
        c.stages[4].kind = kind;
        return c;
    };
    auto push = [&](const std::string& label, const ModelConfig& c) {
        CostReport r = cost_report(c);
        out.push_back({label, r.total_params, r.total_flops});
    };
    if (suite == "block") {
        push("Attn + MLP", with_stage45("transformer"));
        push("Attn + MLP (w/ depth. conv)", with_stage45("attn_mlp_dwconv"));
        push("Attn + MBConv", with_stage45("attn_mbconv"));
        push("MBConv + Attn", with_stage45("moat"));
    } else if (suite == "order") {
        push("Attn + MLP (down: Attn, expand: Attn)", with_stage45("transformer"));
        push("Attn + MBConv (down: Attn, expand: Attn)", with_stage45("attn_mbconv"));
        push("Attn + MBConv (down: MBConv, expand: MBConv)", with_stage45("attn_mbconv_downfirst"));
        push("MBConv + Attn (down: MBConv, expand: MBConv)", with_stage45("moat"));
        push("Attn + MBConv (down: MBConv, expand: Attn)", with_stage45("attn_mbconv_expand_at_attn"));
    } else if (suite == "downsample") {
        push("AveragePooling + Attn + MLP", with_stage45("avgpool_attn_mlp"));
        push("PatchEmbedding + Attn + MLP", with_stage45("patchembed_attn_mlp"));
        push("MBConv + Attn", with_stage45("moat"));
    } else if (suite == "stage") {
        const char* assigns[5][4] = {
            {"moat", "moat", "moat", "moat"},
            {"mbconv", "moat", "moat", "moat"},
            {"mbconv", "mbconv", "moat", "moat"},
            {"mbconv", "mbconv", "mbconv", "moat"},
            {"mbconv", "mbconv", "mbconv", "mbconv"},
        };
        for (auto& a : assigns) {
            ModelConfig c = base;
            std::string label;
            for (int s = 0; s < 4; ++s) {
                c.stages[static_cast<size_t>(s) + 1].kind = a[s];
                label += std::string(s ? " / " : "") + a[s];
            }
            push(label, c);
        }
    } else if (suite == "meta") {
        const int layouts[5][5] = {
            {2, 2, 2, 16, 2}, {2, 2, 4, 15, 2}, {2, 2, 6, 14, 2}, {2, 2, 8, 13, 2}, {2, 2, 10, 12, 2}};
        for (auto& l : layouts) {
            ModelConfig c = base;
            std::string label = "(";
            for (int s = 0; s < 5; ++s) {
                c.stages[static_cast<size_t>(s)].blocks = l[s];
                label += (s ? ", " : "") + std::to_string(l[s]);
            }
            label += ")";
            push(label, c);
        }
    } else {
        throw ConfigError("unknown ablation suite: " + suite +
                          " (expected block|order|downsample|stage|meta)");
    }
    return out;
}

std::string format_cost_report(const CostReport& rep, bool csv, bool per_layer) {
    std::string out;
    char buf[256];
    if (csv) {
        out += "path,kind,params,flops\n";
        for (const auto& r : rep.rows) {
            std::snprintf(buf, sizeof(buf), "%s,%s,%" PRId64 ",%" PRId64 "\n",
                          r.path.c_str(), r.kind.c_str(), r.params, r.flops);
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "total,,%" PRId64 ",%" PRId64 "\n",
                      rep.total_params, rep.total_flops);
        out += buf;
        return out;
    }
    std::snprintf(buf, sizeof(buf), "%-28s %-16s %14s %16s\n", "path", "kind", "params", "flops");
    out += buf;
    if (per_layer) {
        for (const auto& r : rep.rows) {
            std::snprintf(buf, sizeof(buf), "%-28s %-16s %14" PRId64 " %16" PRId64 "\n",
                          r.path.c_str(), r.kind.c_str(), r.params, r.flops);
            out += buf;
        }
    } else {
        // aggregate by block prefix (text before the second '.')
        std::string cur;
        int64_t p = 0, f = 0;
        auto flush = [&]() {
            if (cur.empty()) return;
            std::snprintf(buf, sizeof(buf), "%-28s %-16s %14" PRId64 " %16" PRId64 "\n",
                          cur.c_str(), "", p, f);
            out += buf;
        };
        for (const auto& r : rep.rows) {
            size_t dot = r.path.find('.');
            dot = r.path.find('.', dot == std::string::npos ? 0 : dot + 1);
            std::string prefix = dot == std::string::npos ? r.path : r.path.substr(0, dot);
            if (prefix != cur) {
                flush();
                cur = prefix;
                p = f = 0;
            }
            p += r.params;
            f += r.flops;
        }
        flush();
    }
    std::snprintf(buf, sizeof(buf),
                  "total params %" PRId64 " (%.2fM)  flops %" PRId64 " (%.2fB) at %" PRId64 "^2\n",
                  rep.total_params, rep.total_params / 1e6, rep.total_flops, rep.total_flops / 1e9,
                  rep.input_size);
    out += buf;
    return out;
}

}  // namespace moat
