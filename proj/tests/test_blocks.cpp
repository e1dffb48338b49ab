#include <doctest.h>

#include "moat/blocks.hpp"
#include "moat/gradcheck.hpp"
#include "oracles.hpp"

using namespace moat;

namespace {

BlockSpec make_spec(BlockKind kind, int64_t c_in, int64_t c_out, int stride, int64_t hw,
                    bool rel = true) {
    BlockSpec s;
    s.kind = kind;
    s.c_in = c_in;
    s.c_out = c_out;
    s.stride = stride;
    s.use_se = kind == BlockKind::MBConv;
    s.rel_bias = rel && kind != BlockKind::MBConv;
    s.in_h = hw;
    s.in_w = hw;
    return s;
}

template <typename T>
void zero_param(ParamStore<T>& store, const std::string& name) {
    Param<T>* p = store.find(name);
    REQUIRE(p != nullptr);
    for (int64_t i = 0; i < p->value().numel(); ++i) p->value()[i] = 0;
}

// the branch-output projections whose zeroing must turn each kind into the
// identity map (weights and biases)
std::vector<std::string> branch_output_params(BlockKind kind, const std::string& name) {
    switch (kind) {
        case BlockKind::MBConv:
            return {name + ".shrink.w", name + ".shrink.b"};
        case BlockKind::MOAT:
            return {name + ".shrink.w", name + ".shrink.b", name + ".attn.wo"};
        case BlockKind::Transformer:
        case BlockKind::AttnMlpDwConv:
        case BlockKind::AvgPoolAttnMlp:
        case BlockKind::PatchEmbedAttnMlp:
            return {name + ".mlp2.w", name + ".mlp2.b", name + ".attn.wo"};
        case BlockKind::AttnMBConv:
        case BlockKind::AttnMBConvDownFirst:
        case BlockKind::AttnMBConvExpandAtAttn:
            return {name + ".shrink.w", name + ".shrink.b", name + ".attn.wo"};
    }
    return {};
}

}  // namespace

TEST_CASE("every block kind is the exact identity with zeroed output projections") {
    for (BlockKind kind : {BlockKind::MBConv, BlockKind::MOAT, BlockKind::Transformer,
                           BlockKind::AttnMlpDwConv, BlockKind::AttnMBConv,
                           BlockKind::AttnMBConvDownFirst, BlockKind::AttnMBConvExpandAtAttn,
                           BlockKind::AvgPoolAttnMlp, BlockKind::PatchEmbedAttnMlp}) {
        CAPTURE(block_kind_name(kind));
        RngHub hub(100);
        ParamStore<double> store;
        auto block = build_variant<double>(store, "b", make_spec(kind, 32, 32, 1, 4), hub.stream("init"));
        for (const auto& pname : branch_output_params(kind, "b")) zero_param(store, pname);
        auto x = oracle::random_tensor<double>({1, 4, 4, 32}, hub.stream("x"));
        Var<double> y = block->forward(Var<double>(x), Phase::Eval, nullptr);
        CHECK(oracle::max_abs_diff(y.val(), x) == 0.0);
    }
}

TEST_CASE("mbconv stride 2 shape contract on 1x8x8xC") {
    RngHub hub(101);
    ParamStore<double> store;
    auto block = build_variant<double>(store, "b", make_spec(BlockKind::MBConv, 8, 16, 2, 8),
                                       hub.stream("init"));
    auto x = oracle::random_tensor<double>({1, 8, 8, 8}, hub.stream("x"));
    Var<double> y = block->forward(Var<double>(x), Phase::Eval, nullptr);
    CHECK(y.val().shape() == Shape{1, 4, 4, 16});
}

TEST_CASE("mbconv matches the straight-line composition oracle (C=4, SE)") {
    RngHub hub(102);
    ParamStore<double> store;
    BlockSpec spec = make_spec(BlockKind::MBConv, 4, 4, 1, 5);
    auto block = build_variant<double>(store, "b", spec, hub.stream("init"));
    // give the running stats and affines non-trivial values
    for (auto& p : store.all()) {
        if (p->name.find("running_var") != std::string::npos)
            fill_uniform(p->value(), hub.stream(p->name), 0.5, 1.5);
        else if (p->name.find("running_mean") != std::string::npos ||
                 p->name.find("gamma") != std::string::npos ||
                 p->name.find("beta") != std::string::npos)
            fill_uniform(p->value(), hub.stream(p->name), -0.4, 1.2);
    }
    auto x = oracle::random_tensor<double>({1, 5, 5, 4}, hub.stream("x"));
    Var<double> y = block->forward(Var<double>(x), Phase::Eval, nullptr);

    auto v = [&](const char* n) -> const Tensor<double>& { return store.find(std::string("b.") + n)->value(); };
    Tensor<double> t = oracle::bn_eval_ref(x, v("pre_bn.gamma"), v("pre_bn.beta"),
                                           v("pre_bn.running_mean"), v("pre_bn.running_var"), kBnEps);
    t = oracle::conv2d_ref(t, v("expand.w"), 1);
    t = oracle::gelu_ref(oracle::bn_eval_ref(std::move(t), v("expand_bn.gamma"), v("expand_bn.beta"),
                                             v("expand_bn.running_mean"), v("expand_bn.running_var"), kBnEps));
    t = oracle::depthwise_ref(t, v("dw.w"), 1);
    t = oracle::gelu_ref(oracle::bn_eval_ref(std::move(t), v("dw_bn.gamma"), v("dw_bn.beta"),
                                             v("dw_bn.running_mean"), v("dw_bn.running_var"), kBnEps));
    {  // SE: gap -> w1 -> hard-swish -> w2 -> sigmoid -> scale
        int64_t E = 16, hid = 1;
        std::vector<double> gap(static_cast<size_t>(E), 0.0);
        for (int64_t h = 0; h < 5; ++h)
            for (int64_t w = 0; w < 5; ++w)
                for (int64_t c = 0; c < E; ++c) gap[static_cast<size_t>(c)] += t.at(0, h, w, c) / 25.0;
        std::vector<double> hidv(static_cast<size_t>(hid), 0.0);
        for (int64_t j = 0; j < hid; ++j) {
            double acc = v("se.w1.b")[j];
            for (int64_t c = 0; c < E; ++c) acc += gap[static_cast<size_t>(c)] * v("se.w1.w")[c * hid + j];
            hidv[static_cast<size_t>(j)] = acc * std::clamp(acc + 3.0, 0.0, 6.0) / 6.0;
        }
        for (int64_t c = 0; c < E; ++c) {
            double z = v("se.w2.b")[c];
            for (int64_t j = 0; j < hid; ++j) z += hidv[static_cast<size_t>(j)] * v("se.w2.w")[j * E + c];
            double gate = 1.0 / (1.0 + std::exp(-z));
            for (int64_t h = 0; h < 5; ++h)
                for (int64_t w = 0; w < 5; ++w) t.at(0, h, w, c) *= gate;
        }
    }
    t = oracle::bias_add_ref(oracle::conv2d_ref(t, v("shrink.w"), 1), v("shrink.b"));
    Tensor<double> want = oracle::add_ref(std::move(t), x);
    CHECK(oracle::max_abs_diff(y.val(), want) < 1e-10);
}

TEST_CASE("moat block: stride-2 shape and attention on the downsampled grid") {
    RngHub hub(103);
    ParamStore<double> store;
    auto block = build_variant<double>(store, "b", make_spec(BlockKind::MOAT, 64, 128, 2, 8),
                                       hub.stream("init"));
    auto x = oracle::random_tensor<double>({1, 8, 8, 64}, hub.stream("x"));
    Var<double> y = block->forward(Var<double>(x), Phase::Eval, nullptr);
    CHECK(y.val().shape() == Shape{1, 4, 4, 128});
    CHECK(block->last_attn_tokens() == 16);  // 4x4, never the 8x8 input grid
}

TEST_CASE("moat block matches the mbconv-then-attention straight line (C=32, 4x4)") {
    RngHub hub(104);
    ParamStore<double> store;
    BlockSpec spec = make_spec(BlockKind::MOAT, 32, 32, 1, 4);
    auto block = build_variant<double>(store, "b", spec, hub.stream("init"));
    auto v = [&](const char* n) -> const Tensor<double>& { return store.find(std::string("b.") + n)->value(); };
    store.find("b.attn.rel_bias")->value() = oracle::random_tensor<double>({1, 7, 7}, hub.stream("rel"), -0.3, 0.3);
    auto x = oracle::random_tensor<double>({1, 4, 4, 32}, hub.stream("x"));
    Var<double> y = block->forward(Var<double>(x), Phase::Eval, nullptr);

    Tensor<double> m = oracle::bn_eval_ref(x, v("pre_bn.gamma"), v("pre_bn.beta"),
                                           v("pre_bn.running_mean"), v("pre_bn.running_var"), kBnEps);
    m = oracle::conv2d_ref(m, v("expand.w"), 1);
    m = oracle::gelu_ref(oracle::bn_eval_ref(std::move(m), v("expand_bn.gamma"), v("expand_bn.beta"),
                                             v("expand_bn.running_mean"), v("expand_bn.running_var"), kBnEps));
    m = oracle::depthwise_ref(m, v("dw.w"), 1);
    m = oracle::gelu_ref(oracle::bn_eval_ref(std::move(m), v("dw_bn.gamma"), v("dw_bn.beta"),
                                             v("dw_bn.running_mean"), v("dw_bn.running_var"), kBnEps));
    m = oracle::bias_add_ref(oracle::conv2d_ref(m, v("shrink.w"), 1), v("shrink.b"));
    Tensor<double> ln = oracle::ln_ref(m, v("attn_ln.gamma"), v("attn_ln.beta"), kLnEps);
    Tensor<double> a = oracle::attention_ref(ln, v("attn.wq"), v("attn.wk"), v("attn.wv"),
                                             v("attn.wo"), &v("attn.rel_bias"), kHeadDim);
    Tensor<double> z = oracle::add_ref(std::move(a), m);
    Tensor<double> want = oracle::add_ref(std::move(z), x);
    CHECK(oracle::max_abs_diff(y.val(), want) < 1e-10);
}

TEST_CASE("transformer block: shape contract and straight-line oracle (1x2x2x32)") {
    RngHub hub(105);
    ParamStore<double> store;
    BlockSpec spec = make_spec(BlockKind::Transformer, 32, 32, 1, 2);
    spec.rel_bias = false;
    auto block = build_variant<double>(store, "b", spec, hub.stream("init"));
    auto v = [&](const char* n) -> const Tensor<double>& { return store.find(std::string("b.") + n)->value(); };
    auto x = oracle::random_tensor<double>({1, 2, 2, 32}, hub.stream("x"));
    Var<double> y = block->forward(Var<double>(x), Phase::Eval, nullptr);
    CHECK(y.val().shape() == x.shape());

    Tensor<double> yn = oracle::ln_ref(x, v("attn_ln.gamma"), v("attn_ln.beta"), kLnEps);
    Tensor<double> a = oracle::attention_ref(yn, v("attn.wq"), v("attn.wk"), v("attn.wv"), v("attn.wo"),
                                             static_cast<const Tensor<double>*>(nullptr), kHeadDim);
    Tensor<double> z = oracle::add_ref(std::move(a), yn);
    Tensor<double> m = oracle::ln_ref(z, v("mlp_ln.gamma"), v("mlp_ln.beta"), kLnEps);
    m = oracle::gelu_ref(oracle::bias_add_ref(oracle::conv2d_ref(m, v("mlp1.w"), 1), v("mlp1.b")));
    m = oracle::bias_add_ref(oracle::conv2d_ref(m, v("mlp2.w"), 1), v("mlp2.b"));
    Tensor<double> want = oracle::add_ref(std::move(m), x);
    CHECK(oracle::max_abs_diff(y.val(), want) < 1e-10);
}

TEST_CASE("downsampling ordering: pooling precedes attention in the CoAtNet-style variant") {
    RngHub hub(106);
    ParamStore<double> store;
    auto block = build_variant<double>(store, "b", make_spec(BlockKind::AvgPoolAttnMlp, 32, 64, 2, 8),
                                       hub.stream("init"));
    auto x = oracle::random_tensor<double>({1, 8, 8, 32}, hub.stream("x"));
    Var<double> y = block->forward(Var<double>(x), Phase::Eval, nullptr);
    CHECK(y.val().shape() == Shape{1, 4, 4, 64});
    CHECK(block->last_attn_tokens() == 16);  // attention sees the pooled 4x4 grid
}

TEST_CASE("down-at-mbconv variant attends at full input resolution") {
    RngHub hub(107);
    ParamStore<double> store;
    auto block = build_variant<double>(store, "b",
                                       make_spec(BlockKind::AttnMBConvDownFirst, 32, 64, 2, 8),
                                       hub.stream("init"));
    auto x = oracle::random_tensor<double>({1, 8, 8, 32}, hub.stream("x"));
    Var<double> y = block->forward(Var<double>(x), Phase::Eval, nullptr);
    CHECK(y.val().shape() == Shape{1, 4, 4, 64});
    CHECK(block->last_attn_tokens() == 64);  // pre-downsampling 8x8 grid
}

TEST_CASE("patch-embedding variant downsamples before attention") {
    RngHub hub(108);
    ParamStore<double> store;
    auto block = build_variant<double>(store, "b",
                                       make_spec(BlockKind::PatchEmbedAttnMlp, 32, 64, 2, 8),
                                       hub.stream("init"));
    auto x = oracle::random_tensor<double>({1, 8, 8, 32}, hub.stream("x"));
    Var<double> y = block->forward(Var<double>(x), Phase::Eval, nullptr);
    CHECK(y.val().shape() == Shape{1, 4, 4, 64});
    CHECK(block->last_attn_tokens() == 16);
}

TEST_CASE("every block kind passes gradcheck at micro scale") {
    struct Case {
        BlockKind kind;
        int64_t c_in, c_out;
        int stride;
        int64_t hw;
        uint64_t seed;
    };
    // evaluation points are conditioned (see condition_params_for_fd) so no
    // sampled gradient coordinate sits below finite-difference resolution
    std::vector<Case> cases = {
        {BlockKind::MBConv, 8, 8, 1, 6, 0},
        {BlockKind::MBConv, 8, 16, 2, 6, 0},
        {BlockKind::MOAT, 32, 32, 1, 4, 1},
        {BlockKind::MOAT, 32, 32, 2, 6, 1},
        {BlockKind::Transformer, 32, 32, 1, 3, 0},
        {BlockKind::Transformer, 32, 64, 2, 6, 0},
        {BlockKind::AttnMlpDwConv, 32, 32, 1, 3, 0},
        {BlockKind::AttnMBConv, 32, 32, 2, 6, 0},
        {BlockKind::AttnMBConvDownFirst, 32, 64, 2, 4, 1},
        {BlockKind::AttnMBConvExpandAtAttn, 32, 64, 2, 4, 1},
        {BlockKind::AvgPoolAttnMlp, 32, 64, 2, 4, 0},
        {BlockKind::PatchEmbedAttnMlp, 32, 64, 2, 4, 1},
    };
    for (const auto& c : cases) {
        CAPTURE(block_kind_name(c.kind));
        CAPTURE(c.stride);
        RngHub hub(1000 * c.seed + static_cast<uint64_t>(c.kind) * 7 +
                   static_cast<uint64_t>(c.stride));
        ParamStore<double> store;
        auto block = build_variant<double>(store, "b", make_spec(c.kind, c.c_in, c.c_out, c.stride, c.hw),
                                           hub.stream("init"));
        condition_params_for_fd(store, hub.stream("condition"));
        Param<double>& x = store.add("x", oracle::random_tensor<double>({1, c.hw, c.hw, c.c_in},
                                                                        hub.stream("x")));
        std::vector<Param<double>*> params;
        for (auto& p : store.all())
            if (p->trainable) params.push_back(p.get());
        auto loss_fn = [&] {
            return sum_all(gelu(block->forward(x.var, Phase::Eval, nullptr)));
        };
        auto rep = gradcheck<double>(loss_fn, params, 1e-5, 150, hub.stream("gc"));
        INFO("worst " << rep.worst_param << " err " << rep.max_rel_err);
        CHECK(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("unknown stage kinds are rejected by the factory path") {
    BlockKind k;
    CHECK_FALSE(block_kind_from_name("not_a_kind", k));
    CHECK(block_kind_from_name("moat", k));
    CHECK(k == BlockKind::MOAT);
}
