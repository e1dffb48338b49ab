#include <doctest.h>

#include "moat/model.hpp"
#include "oracles.hpp"

using namespace moat;

namespace {

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.name = "micro";
    cfg.stages = {{"conv_stem", 1, 8}, {"mbconv", 1, 8}, {"mbconv", 1, 32},
                  {"moat", 1, 32}, {"moat", 1, 64}};
    cfg.num_classes = 2;
    cfg.input_size = 32;
    cfg.sd_survival = 1.0;
    return cfg;
}

Var<float> eval_forward(Model<float>& m, const Tensor<float>& x) {
    return m.forward(Var<float>(Tensor<float>(x)), Phase::Eval, nullptr);
}

}  // namespace

TEST_CASE("family table rows match the reference layouts") {
    auto m1 = family_config("moat-1");
    std::vector<int> blocks;
    std::vector<int64_t> chans;
    for (auto& s : m1.stages) { blocks.push_back(s.blocks); chans.push_back(s.channels); }
    CHECK(blocks == std::vector<int>{2, 2, 6, 14, 2});
    CHECK(chans == std::vector<int64_t>{64, 96, 192, 384, 768});

    auto t0 = family_config("tiny-moat-0");
    chans.clear();
    blocks.clear();
    for (auto& s : t0.stages) { blocks.push_back(s.blocks); chans.push_back(s.channels); }
    CHECK(blocks == std::vector<int>{2, 2, 3, 7, 2});
    CHECK(chans == std::vector<int64_t>{32, 32, 64, 128, 256});

    auto m4 = family_config("moat-4");
    chans.clear();
    blocks.clear();
    for (auto& s : m4.stages) { blocks.push_back(s.blocks); chans.push_back(s.channels); }
    CHECK(blocks == std::vector<int>{2, 2, 12, 28, 2});
    CHECK(chans == std::vector<int64_t>{256, 256, 512, 1024, 2048});

    CHECK(m1.num_classes == 1000);
    CHECK(m1.rel_bias);
    CHECK_THROWS_AS(family_config("moat-9"), ConfigError);
}

TEST_CASE("output stride ladder is (2,4,8,16,32) for every family member") {
    for (const auto& name : family_names()) {
        auto geo = resolve_geometry(family_config(name));
        CHECK(geo.stage_stride == std::array<int64_t, 5>{2, 4, 8, 16, 32});
        CHECK(geo.stage_out_hw == std::array<int64_t, 5>{112, 56, 28, 14, 7});
        // downsampling happens in the first block of each stage
        for (const auto& bg : geo.blocks)
            CHECK(bg.spec.stride == (bg.index == 0 ? 2 : 1));
    }
}

TEST_CASE("geometry validation rejects bad configs with stage context") {
    ModelConfig cfg = micro_config();
    cfg.stages[3].channels = 100;  // not divisible by the 32-channel heads
    try {
        resolve_geometry(cfg);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find("stage 4") != std::string::npos);
        CHECK(msg.find("32") != std::string::npos);
    }
    cfg = micro_config();
    cfg.stages.pop_back();
    CHECK_THROWS_AS(resolve_geometry(cfg), ConfigError);
    cfg = micro_config();
    cfg.stages[0].kind = "mbconv";
    CHECK_THROWS_AS(resolve_geometry(cfg), ConfigError);
    cfg = micro_config();
    cfg.stages[2].blocks = 0;
    CHECK_THROWS_AS(resolve_geometry(cfg), ConfigError);
    cfg = micro_config();
    cfg.mode = "downstream";  // keeps rel_bias on
    CHECK_THROWS_AS(resolve_geometry(cfg), ConfigError);
}

TEST_CASE("micro model forward runs and produces finite logits") {
    ModelConfig cfg = micro_config();
    Model<float> model(cfg, 3);
    RngHub hub(4);
    Tensor<float> x({2, 32, 32, 3});
    fill_uniform(x, hub.stream("x"), -1.f, 1.f);
    Var<float> logits = model.forward(Var<float>(std::move(x)), Phase::Eval, nullptr);
    CHECK(logits.val().shape() == Shape{2, 2});
    for (int64_t i = 0; i < logits.val().numel(); ++i) CHECK(std::isfinite(logits.val()[i]));
    // stage trace: 32 -> 16 (stem) -> 8 -> 4 -> 2 -> 1
    const auto& shapes = model.last_stage_shapes();
    REQUIRE(shapes.size() == 5);
    CHECK(shapes[0] == Shape{2, 16, 16, 8});
    CHECK(shapes[1] == Shape{2, 8, 8, 8});
    CHECK(shapes[2] == Shape{2, 4, 4, 32});
    CHECK(shapes[3] == Shape{2, 2, 2, 32});
    CHECK(shapes[4] == Shape{2, 1, 1, 64});
}

TEST_CASE("SE sits in stages 2-3 only; attention in stages 4-5 only") {
    Model<float> model(family_config("tiny-moat-0"), 5);
    for (Block<float>* b : model.blocks_view()) {
        bool want_se = false, want_attn = false;
        // find the stage of this block via its spec channels
        if (b->spec.kind == BlockKind::MBConv) { want_se = true; want_attn = false; }
        if (b->spec.kind == BlockKind::MOAT) { want_se = false; want_attn = true; }
        CHECK(b->has_se() == want_se);
        CHECK((b->attention() != nullptr) == want_attn);
    }
    const auto& geo = model.geometry();
    for (const auto& bg : geo.blocks) {
        if (bg.stage <= 3) CHECK(bg.spec.kind == BlockKind::MBConv);
        else CHECK(bg.spec.kind == BlockKind::MOAT);
    }
}

TEST_CASE("moat-0 full forward at 224: stage sizes, logits, determinism") {
    Model<float> model(family_config("moat-0"), 7);
    RngHub hub(8);
    Tensor<float> x({1, 224, 224, 3});
    fill_uniform(x, hub.stream("x"), -1.f, 1.f);
    NoGradGuard ng;
    Var<float> a = model.forward(Var<float>(Tensor<float>(x)), Phase::Eval, nullptr);
    CHECK(a.val().shape() == Shape{1, 1000});
    const auto& shapes = model.last_stage_shapes();
    CHECK(shapes[0] == Shape{1, 112, 112, 64});
    CHECK(shapes[1] == Shape{1, 56, 56, 96});
    CHECK(shapes[2] == Shape{1, 28, 28, 192});
    CHECK(shapes[3] == Shape{1, 14, 14, 384});
    CHECK(shapes[4] == Shape{1, 7, 7, 768});
    for (Block<float>* b : model.blocks_view())
        if (b->attention()) CHECK(b->last_attn_tokens() == (b->spec.c_out == 384 ? 196 : 49));
    // eval forward is a pure function: two runs bit-identical
    Var<float> b2 = model.forward(Var<float>(Tensor<float>(x)), Phase::Eval, nullptr);
    for (int64_t i = 0; i < 1000; ++i) CHECK(a.val()[i] == b2.val()[i]);
}

TEST_CASE("downstream adaptation geometry at detection scale (1344 input)") {
    ModelConfig cfg = adapted_config(family_config("moat-0"), 14, 1344);
    auto geo = resolve_geometry(cfg);
    CHECK(geo.stage_out_hw[3] == 84);  // stride-16 features of 1344^2
    CHECK(geo.blocks.back().spec.window == 0);
    bool saw_window = false;
    for (const auto& bg : geo.blocks)
        if (bg.stage == 4) {
            CHECK(bg.spec.window == 14);
            CHECK((geo.stage_out_hw[3] / 14) * (geo.stage_out_hw[3] / 14) == 36);
            saw_window = true;
        }
    CHECK(saw_window);
    CHECK_FALSE(cfg.rel_bias);
    // indivisible feature size names the required multiple
    try {
        adapted_config(family_config("moat-0"), 14, 1024);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("multiple") != std::string::npos);
    }
}

TEST_CASE("adaptation preserves weights, drops exactly the rel_bias tables") {
    ModelConfig cfg = micro_config();
    Model<float> model(cfg, 11);
    TransferReport rep;
    Model<float> adapted = adapt_downstream(model, 2, 32, &rep);

    std::vector<std::string> expect_dropped;
    for (const auto& p : model.params().all())
        if (p->name.find("rel_bias") != std::string::npos) expect_dropped.push_back(p->name);
    std::sort(rep.dropped.begin(), rep.dropped.end());
    std::sort(expect_dropped.begin(), expect_dropped.end());
    CHECK(rep.dropped == expect_dropped);
    CHECK(!rep.dropped.empty());

    for (const auto& p : adapted.params().all()) {
        const Param<float>* src = model.params().find(p->name);
        REQUIRE(src != nullptr);
        for (int64_t i = 0; i < p->value().numel(); ++i) CHECK(p->value()[i] == src->value()[i]);
    }
}

TEST_CASE("window equal to the feature extent matches global attention without rel_bias") {
    ModelConfig cfg = micro_config();
    Model<float> model(cfg, 13);
    // stage-4 features are 2x2 at input 32, so window 2 degenerates to global
    Model<float> adapted = adapt_downstream(model, 2, 32, nullptr);

    ModelConfig norel = cfg;
    norel.rel_bias = false;
    Model<float> global_ref(norel, 13);
    for (const auto& p : global_ref.params().all()) {
        const Param<float>* src = model.params().find(p->name);
        REQUIRE(src != nullptr);
        p->value() = src->value();
    }
    RngHub hub(14);
    Tensor<float> x({1, 32, 32, 3});
    fill_uniform(x, hub.stream("x"), -1.f, 1.f);
    NoGradGuard ng;
    Var<float> ya = eval_forward(adapted, x);
    Var<float> yg = eval_forward(global_ref, x);
    for (int64_t i = 0; i < ya.val().numel(); ++i)
        CHECK(ya.val()[i] == doctest::Approx(yg.val()[i]).epsilon(1e-6));
}

TEST_CASE("scale family check: depth/width monotone with alternation") {
    std::vector<ModelConfig> cfgs;
    for (const char* n : {"moat-0", "moat-1", "moat-2", "moat-3", "moat-4"})
        cfgs.push_back(family_config(n));
    auto rep = scale_family_check(cfgs);
    CHECK(rep.monotone);
    CHECK(rep.alternates);
    CHECK(rep.rows[0].depth == 16);
    CHECK(rep.rows[1].depth == 26);
    CHECK(rep.rows[0].width == 768);
    CHECK(rep.rows[1].width == 768);
    CHECK(rep.rows[2].width == 1024);
    CHECK(rep.rows[1].depth == rep.rows[2].depth);

    std::vector<ModelConfig> tiny;
    for (const char* n : {"tiny-moat-0", "tiny-moat-1", "tiny-moat-2", "tiny-moat-3"})
        tiny.push_back(family_config(n));
    auto trep = scale_family_check(tiny);
    CHECK(trep.monotone);
    CHECK(trep.rows[0].width == 256);
    CHECK(trep.rows[1].width == 320);
    CHECK(trep.rows[2].width == 448);
    CHECK(trep.rows[3].width == 640);
    for (size_t i = 0; i + 1 < trep.rows.size(); ++i) {
        CHECK(trep.rows[i].depth == trep.rows[i + 1].depth);
        CHECK(trep.rows[i].width < trep.rows[i + 1].width);
    }
}

TEST_CASE("stochastic depth schedule ramps linearly from 1.0 to the terminal survival") {
    ModelConfig cfg = family_config("moat-0");
    cfg.sd_survival = 0.8;
    auto geo = resolve_geometry(cfg);
    int M = static_cast<int>(geo.blocks.size());
    CHECK(geo.blocks.front().spec.sd_survival == doctest::Approx(1.0));
    CHECK(geo.blocks.back().spec.sd_survival == doctest::Approx(0.8));
    for (int i = 1; i < M; ++i)
        CHECK(geo.blocks[size_t(i)].spec.sd_survival < geo.blocks[size_t(i) - 1].spec.sd_survival);
}
