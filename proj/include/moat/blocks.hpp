#pragma once

#include <memory>
#include <optional>
#include <string>

#include "moat/nn.hpp"

namespace moat {

enum class BlockKind {
    MBConv,
    Transformer,
    MOAT,
    AttnMlpDwConv,
    AttnMBConv,
    AttnMBConvDownFirst,
    AttnMBConvExpandAtAttn,
    AvgPoolAttnMlp,
    PatchEmbedAttnMlp,
};

inline const char* block_kind_name(BlockKind k) {
    switch (k) {
        case BlockKind::MBConv: return "mbconv";
        case BlockKind::Transformer: return "transformer";
        case BlockKind::MOAT: return "moat";
        case BlockKind::AttnMlpDwConv: return "attn_mlp_dwconv";
        case BlockKind::AttnMBConv: return "attn_mbconv";
        case BlockKind::AttnMBConvDownFirst: return "attn_mbconv_downfirst";
        case BlockKind::AttnMBConvExpandAtAttn: return "attn_mbconv_expand_at_attn";
        case BlockKind::AvgPoolAttnMlp: return "avgpool_attn_mlp";
        case BlockKind::PatchEmbedAttnMlp: return "patchembed_attn_mlp";
    }
    return "?";
}

inline bool block_kind_from_name(const std::string& s, BlockKind& out) {
    for (BlockKind k : {BlockKind::MBConv, BlockKind::Transformer, BlockKind::MOAT,
                        BlockKind::AttnMlpDwConv, BlockKind::AttnMBConv, BlockKind::AttnMBConvDownFirst,
                        BlockKind::AttnMBConvExpandAtAttn, BlockKind::AvgPoolAttnMlp,
                        BlockKind::PatchEmbedAttnMlp})
        if (s == block_kind_name(k)) { out = k; return true; }
    return false;
}

struct BlockSpec {
    BlockKind kind = BlockKind::MBConv;
    int64_t c_in = 0, c_out = 0;
    int stride = 1;
    int expansion = 4;
    bool use_se = false;           // mbconv only
    int window = 0;                // attention window, 0 = global
    bool rel_bias = true;
    double sd_survival = 1.0;
    bool attn_inner_residual = true;
    int64_t in_h = 0, in_w = 0;    // feature extents entering the block

    int64_t out_h() const { return (in_h + stride - 1) / stride; }
    int64_t out_w() const { return (in_w + stride - 1) / stride; }
    int64_t hidden() const { return c_out * expansion; }
    int64_t se_hidden() const { return std::max<int64_t>(1, c_out / 4); }
    bool needs_shortcut_conv() const { return c_in != c_out; }
};

template <typename T>
class Block {
public:
    BlockSpec spec;
    explicit Block(BlockSpec s) : spec(s) {}
    virtual ~Block() = default;
    virtual Var<T> forward(Var<T> x, Phase phase, std::mt19937_64* sd_rng) = 0;
    virtual const MultiHeadAttention<T>* attention() const { return nullptr; }
    virtual bool has_se() const { return false; }
    virtual void batch_norms(std::vector<BatchNorm<T>*>&) {}
    // -1 until the first forward
    int64_t last_attn_tokens() const {
        auto* a = attention();
        return a ? a->last_tokens : -1;
    }
};

// Inverted bottleneck: pre-norm, 1x1 expand (+BN+GeLU), 3x3 depthwise with the
// block stride (+BN+GeLU), optional SE on the expanded features, 1x1 project.
template <typename T>
struct MBConvBranch {
    BatchNorm<T> pre_bn;
    Conv2d<T> expand;
    BatchNorm<T> expand_bn;
    DepthwiseConv2d<T> dw;
    BatchNorm<T> dw_bn;
    std::optional<SqueezeExcite<T>> se;
    Conv2d<T> shrink;

    MBConvBranch(ParamStore<T>& store, const std::string& name, int64_t c_in, int64_t c_out,
                 int stride, int expansion, bool use_se, int64_t se_hidden, std::mt19937_64& g)
        : pre_bn(store, name + ".pre_bn", c_in),
          expand(store, name + ".expand", 1, 1, c_in, c_out * expansion, 1, g, false),
          expand_bn(store, name + ".expand_bn", c_out * expansion),
          dw(store, name + ".dw", 3, c_out * expansion, stride, g),
          dw_bn(store, name + ".dw_bn", c_out * expansion),
          shrink(store, name + ".shrink", 1, 1, c_out * expansion, c_out, 1, g, true) {
        if (use_se) se.emplace(store, name + ".se", c_out * expansion, se_hidden, g);
    }

    Var<T> forward(Var<T> x, Phase phase) {
        Var<T> y = pre_bn.forward(std::move(x), phase);
        y = gelu(expand_bn.forward(expand.forward(std::move(y)), phase));
        y = gelu(dw_bn.forward(dw.forward(std::move(y)), phase));
        if (se) y = se->forward(std::move(y));
        return shrink.forward(std::move(y));
    }

    void collect_bns(std::vector<BatchNorm<T>*>& out) {
        out.push_back(&pre_bn);
        out.push_back(&expand_bn);
        out.push_back(&dw_bn);
    }
};

// Residual shortcut: 2x2 average pool iff stride 2, 1x1 conv iff the channel
// count changes.
template <typename T>
struct ShortcutPath {
    bool pool = false;
    std::optional<Conv2d<T>> proj;

    ShortcutPath(ParamStore<T>& store, const std::string& name, int64_t c_in, int64_t c_out,
                 int stride, std::mt19937_64& g)
        : pool(stride == 2) {
        if (c_in != c_out) proj.emplace(store, name + ".proj", 1, 1, c_in, c_out, 1, g, true);
    }

    Var<T> forward(Var<T> x) const {
        if (pool) x = avg_pool2x2(std::move(x));
        if (proj) x = proj->forward(std::move(x));
        return x;
    }
};

template <typename T>
class MBConvBlock : public Block<T> {
public:
    MBConvBlock(ParamStore<T>& store, const std::string& name, BlockSpec s, std::mt19937_64& g)
        : Block<T>(s),
          branch_(store, name, s.c_in, s.c_out, s.stride, s.expansion, s.use_se, s.se_hidden(), g),
          shortcut_(store, name + ".shortcut", s.c_in, s.c_out, s.stride, g) {}

    Var<T> forward(Var<T> x, Phase phase, std::mt19937_64* sd_rng) override {
        Var<T> sc = shortcut_.forward(x);
        Var<T> br = branch_.forward(std::move(x), phase);
        return add(std::move(sc), stochastic_depth(std::move(br), this->spec.sd_survival, phase, sd_rng));
    }

    bool has_se() const override { return this->spec.use_se; }

    void batch_norms(std::vector<BatchNorm<T>*>& out) override { branch_.collect_bns(out); }

private:
    MBConvBranch<T> branch_;
    ShortcutPath<T> shortcut_;
};

// MBConv (without SE) followed by self-attention on the downsampled grid.
// The attention sublayer keeps a pre-LN inner residual; the outer residual
// adds the shortcut path, and stochastic depth wraps the whole branch once.
template <typename T>
class MOATBlock : public Block<T> {
public:
    MOATBlock(ParamStore<T>& store, const std::string& name, BlockSpec s, std::mt19937_64& g)
        : Block<T>(s),
          branch_(store, name, s.c_in, s.c_out, s.stride, s.expansion, false, 0, g),
          attn_ln_(store, name + ".attn_ln", s.c_out),
          attn_(store, name + ".attn", s.c_out, s.c_out, s.out_h(), s.out_w(), s.rel_bias, s.window, g),
          shortcut_(store, name + ".shortcut", s.c_in, s.c_out, s.stride, g) {}

    Var<T> forward(Var<T> x, Phase phase, std::mt19937_64* sd_rng) override {
        Var<T> sc = shortcut_.forward(x);
        Var<T> m = branch_.forward(std::move(x), phase);
        Var<T> a = attn_.forward(attn_ln_.forward(m));
        Var<T> z = this->spec.attn_inner_residual ? add(std::move(m), std::move(a)) : std::move(a);
        return add(std::move(sc), stochastic_depth(std::move(z), this->spec.sd_survival, phase, sd_rng));
    }

    const MultiHeadAttention<T>* attention() const override { return &attn_; }

    void batch_norms(std::vector<BatchNorm<T>*>& out) override { branch_.collect_bns(out); }

private:
    MBConvBranch<T> branch_;
    LayerNorm<T> attn_ln_;
    MultiHeadAttention<T> attn_;
    ShortcutPath<T> shortcut_;
};

// Transformer block (and its downsampling/MLP variants). Downsampling blocks
// average-pool before attention (CoAtNet style) or use a strided 2x2
// patch-embedding conv (Swin/ConvNeXt style); the channel change happens in
// the attention projections for the pooled form.
template <typename T>
class TransformerBlock : public Block<T> {
public:
    TransformerBlock(ParamStore<T>& store, const std::string& name, BlockSpec s, std::mt19937_64& g)
        : Block<T>(s) {
        patch_mode_ = s.kind == BlockKind::PatchEmbedAttnMlp;
        int64_t attn_c_in = s.c_in;
        if (patch_mode_ && (s.stride == 2 || s.c_in != s.c_out)) {
            patch_.emplace(store, name + ".patch", 2, 2, s.c_in, s.c_out, s.stride, g, true);
            patch_bn_.emplace(store, name + ".patch_bn", s.c_out);
            attn_c_in = s.c_out;
        }
        pre_ln_.emplace(store, name + ".attn_ln", attn_c_in);
        attn_.emplace(store, name + ".attn", attn_c_in, s.c_out, s.out_h(), s.out_w(),
                      s.rel_bias, s.window, g);
        if (!patch_mode_ && (s.stride == 2 || s.c_in != s.c_out))
            inner_proj_.emplace(store, name + ".attn_proj", 1, 1, s.c_in, s.c_out, 1, g, true);
        mlp_ln_.emplace(store, name + ".mlp_ln", s.c_out);
        mlp1_.emplace(store, name + ".mlp1", 1, 1, s.c_out, s.hidden(), 1, g, true);
        if (s.kind == BlockKind::AttnMlpDwConv)
            mlp_dw_.emplace(store, name + ".mlp_dw", 3, s.hidden(), 1, g);
        mlp2_.emplace(store, name + ".mlp2", 1, 1, s.hidden(), s.c_out, 1, g, true);
    }

    Var<T> forward(Var<T> x, Phase phase, std::mt19937_64* sd_rng) override {
        const BlockSpec& s = this->spec;
        if (patch_) x = patch_bn_->forward(patch_->forward(std::move(x)), phase);
        Var<T> y = pre_ln_->forward(x);
        Var<T> att_in = (!patch_mode_ && s.stride == 2) ? avg_pool2x2(y) : y;
        Var<T> a = attn_->forward(std::move(att_in));
        Var<T> s1;
        if (patch_mode_ || (s.stride == 1 && s.c_in == s.c_out)) {
            s1 = y;
        } else {
            Var<T> sc = s.stride == 2 ? avg_pool2x2(x) : x;
            s1 = inner_proj_->forward(std::move(sc));
        }
        Var<T> z = s.attn_inner_residual ? add(s1, std::move(a)) : std::move(a);
        Var<T> outer = (patch_mode_ || (s.stride == 1 && s.c_in == s.c_out)) ? std::move(x) : s1;
        Var<T> m = gelu(mlp1_->forward(mlp_ln_->forward(std::move(z))));
        if (mlp_dw_) m = mlp_dw_->forward(std::move(m));
        m = mlp2_->forward(std::move(m));
        return add(std::move(outer), stochastic_depth(std::move(m), s.sd_survival, phase, sd_rng));
    }

    const MultiHeadAttention<T>* attention() const override { return &*attn_; }

    void batch_norms(std::vector<BatchNorm<T>*>& out) override {
        if (patch_bn_) out.push_back(&*patch_bn_);
    }

private:
    bool patch_mode_ = false;
    std::optional<Conv2d<T>> patch_;
    std::optional<BatchNorm<T>> patch_bn_;
    std::optional<LayerNorm<T>> pre_ln_;
    std::optional<MultiHeadAttention<T>> attn_;
    std::optional<Conv2d<T>> inner_proj_;
    std::optional<LayerNorm<T>> mlp_ln_;
    std::optional<Conv2d<T>> mlp1_;
    std::optional<DepthwiseConv2d<T>> mlp_dw_;
    std::optional<Conv2d<T>> mlp2_;
};

// Attn + MBConv ordering variants from the ablations. Where the spatial
// downsampling and channel expansion land depends on the variant:
//  - AttnMBConv: pool + channel change at the attention, stride-1 MBConv tail
//  - AttnMBConvDownFirst: attention at input channels and resolution, strided
//    MBConv does both downsampling and expansion
//  - AttnMBConvExpandAtAttn: extra 1x1 conv expands channels first, attention
//    at full resolution, strided MBConv keeps channels
template <typename T>
class AttnMBConvBlock : public Block<T> {
public:
    AttnMBConvBlock(ParamStore<T>& store, const std::string& name, BlockSpec s, std::mt19937_64& g)
        : Block<T>(s) {
        if (s.kind == BlockKind::AttnMBConv) {
            pre_ln_.emplace(store, name + ".attn_ln", s.c_in);
            attn_.emplace(store, name + ".attn", s.c_in, s.c_out, s.out_h(), s.out_w(),
                          s.rel_bias, s.window, g);
            if (s.stride == 2 || s.c_in != s.c_out)
                inner_proj_.emplace(store, name + ".attn_proj", 1, 1, s.c_in, s.c_out, 1, g, true);
            tail_.emplace(store, name, s.c_out, s.c_out, 1, s.expansion, false, 0, g);
            tail_sc_.emplace(store, name + ".shortcut", s.c_out, s.c_out, 1, g);
        } else if (s.kind == BlockKind::AttnMBConvDownFirst) {
            pre_ln_.emplace(store, name + ".attn_ln", s.c_in);
            attn_.emplace(store, name + ".attn", s.c_in, s.c_in, s.in_h, s.in_w, s.rel_bias, s.window, g);
            tail_.emplace(store, name, s.c_in, s.c_out, s.stride, s.expansion, false, 0, g);
            tail_sc_.emplace(store, name + ".shortcut", s.c_in, s.c_out, s.stride, g);
        } else {  // AttnMBConvExpandAtAttn
            if (s.c_in != s.c_out)
                pre_expand_.emplace(store, name + ".pre_expand", 1, 1, s.c_in, s.c_out, 1, g, true);
            pre_ln_.emplace(store, name + ".attn_ln", s.c_out);
            attn_.emplace(store, name + ".attn", s.c_out, s.c_out, s.in_h, s.in_w, s.rel_bias, s.window, g);
            tail_.emplace(store, name, s.c_out, s.c_out, s.stride, s.expansion, false, 0, g);
            tail_sc_.emplace(store, name + ".shortcut", s.c_out, s.c_out, s.stride, g);
        }
    }

    Var<T> forward(Var<T> x, Phase phase, std::mt19937_64* sd_rng) override {
        const BlockSpec& s = this->spec;
        if (pre_expand_) x = pre_expand_->forward(std::move(x));
        Var<T> y = pre_ln_->forward(x);
        Var<T> z;
        if (s.kind == BlockKind::AttnMBConv) {
            Var<T> att_in = s.stride == 2 ? avg_pool2x2(std::move(y)) : std::move(y);
            Var<T> a = attn_->forward(std::move(att_in));
            Var<T> s1;
            if (s.stride == 2 || s.c_in != s.c_out) {
                Var<T> sc = s.stride == 2 ? avg_pool2x2(std::move(x)) : std::move(x);
                s1 = inner_proj_->forward(std::move(sc));
            } else {
                s1 = std::move(x);
            }
            z = s.attn_inner_residual ? add(std::move(s1), std::move(a)) : std::move(a);
        } else {
            Var<T> a = attn_->forward(std::move(y));
            z = s.attn_inner_residual ? add(std::move(x), std::move(a)) : std::move(a);
        }
        Var<T> sc = tail_sc_->forward(z);
        Var<T> br = tail_->forward(std::move(z), phase);
        return add(std::move(sc), stochastic_depth(std::move(br), s.sd_survival, phase, sd_rng));
    }

    const MultiHeadAttention<T>* attention() const override { return &*attn_; }

    void batch_norms(std::vector<BatchNorm<T>*>& out) override { tail_->collect_bns(out); }

private:
    std::optional<Conv2d<T>> pre_expand_;
    std::optional<LayerNorm<T>> pre_ln_;
    std::optional<MultiHeadAttention<T>> attn_;
    std::optional<Conv2d<T>> inner_proj_;
    std::optional<MBConvBranch<T>> tail_;
    std::optional<ShortcutPath<T>> tail_sc_;
};

template <typename T>
std::unique_ptr<Block<T>> build_variant(ParamStore<T>& store, const std::string& name,
                                        BlockSpec s, std::mt19937_64& g) {
    switch (s.kind) {
        case BlockKind::MBConv:
            return std::make_unique<MBConvBlock<T>>(store, name, s, g);
        case BlockKind::MOAT:
            return std::make_unique<MOATBlock<T>>(store, name, s, g);
        case BlockKind::Transformer:
        case BlockKind::AttnMlpDwConv:
        case BlockKind::AvgPoolAttnMlp:
        case BlockKind::PatchEmbedAttnMlp:
            return std::make_unique<TransformerBlock<T>>(store, name, s, g);
        case BlockKind::AttnMBConv:
        case BlockKind::AttnMBConvDownFirst:
        case BlockKind::AttnMBConvExpandAtAttn:
            return std::make_unique<AttnMBConvBlock<T>>(store, name, s, g);
    }
    throw ConfigError("unknown block kind");
}

}  // namespace moat
