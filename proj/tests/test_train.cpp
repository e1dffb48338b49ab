#include <doctest.h>

#include <sstream>

#include "moat/gradcheck.hpp"
#include "moat/train.hpp"
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

}  // namespace

TEST_CASE("adamw: zero gradient and zero decay leave parameters unchanged") {
    ParamStore<double> store;
    Param<double>& w = store.add("w", Tensor<double>({3}, {1.0, -2.0, 0.5}));
    AdamW<double> opt(store, 0.9, 0.999, 1e-8, 0.0);
    w.var.zero_grad();  // allocates a zero gradient
    opt.step(0.1);
    CHECK(w.value()[0] == 1.0);
    CHECK(w.value()[1] == -2.0);
    CHECK(w.value()[2] == 0.5);
}

TEST_CASE("adamw: pure decay multiplies by (1 - lr*wd)") {
    ParamStore<double> store;
    Param<double>& w = store.add("w", Tensor<double>({2}, {2.0, -4.0}));
    AdamW<double> opt(store, 0.9, 0.999, 1e-8, 0.05);
    w.var.zero_grad();
    opt.step(0.1);
    CHECK(w.value()[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.05)).epsilon(1e-12));
    CHECK(w.value()[1] == doctest::Approx(-4.0 * (1.0 - 0.1 * 0.05)).epsilon(1e-12));
}

TEST_CASE("adamw single-scalar recurrence matches a scripted reference") {
    double theta_ref = 0.7;
    double m = 0, v = 0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.05, lr = 0.01;

    ParamStore<double> store;
    Param<double>& w = store.add("w", Tensor<double>({1}, {0.7}));
    AdamW<double> opt(store, b1, b2, eps, wd);

    for (int t = 1; t <= 7; ++t) {
        double g = 1.0 + 0.25 * t;  // deterministic gradient schedule
        w.var.zero_grad();
        {
            Var<double> loss = scalar_mul(sum_all(w.var), g);
            backward(loss);
        }
        opt.step(lr);
        // scripted reference: theta <- theta - lr*(mhat/(sqrt(vhat)+eps) + wd*theta)
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mhat = m / (1 - std::pow(b1, t));
        double vhat = v / (1 - std::pow(b2, t));
        theta_ref -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta_ref);
        CHECK(w.value()[0] == doctest::Approx(theta_ref).epsilon(1e-12));
    }
}

TEST_CASE("adamw first step with constant gradient 1 equals -lr/(1+eps) - lr*wd*theta") {
    ParamStore<double> store;
    Param<double>& w = store.add("w", Tensor<double>({1}, {0.3}));
    AdamW<double> opt(store, 0.9, 0.999, 1e-8, 0.05);
    w.var.zero_grad();
    {
        Var<double> loss = sum_all(w.var);  // gradient exactly 1
        backward(loss);
    }
    opt.step(0.01);
    double want = 0.3 - 0.01 * (1.0 / (1.0 + 1e-8) + 0.05 * 0.3);
    CHECK(w.value()[0] == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("adamw aborts on non-finite gradients naming the parameter") {
    ParamStore<double> store;
    Param<double>& w = store.add("w.weird", Tensor<double>({1}, {0.0}));
    AdamW<double> opt(store);
    w.var.zero_grad();
    const_cast<Tensor<double>&>(w.grad())[0] = std::nan("");
    try {
        opt.step(0.1);
        FAIL("expected NanGradient");
    } catch (const NanGradient& e) {
        CHECK(e.param == "w.weird");
    }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    TrainSettings ts;
    ts.peak_lr = 3e-3;
    ts.min_lr = 1e-5;
    ts.warmup_steps = 100;
    ts.total_steps = 1100;
    CHECK(cosine_lr(0, ts) == 0.0);
    CHECK(cosine_lr(100, ts) == doctest::Approx(3e-3).epsilon(1e-15));
    CHECK(cosine_lr(1100, ts) == doctest::Approx(1e-5).epsilon(1e-15));
    CHECK(cosine_lr(600, ts) == doctest::Approx(1e-5 + (3e-3 - 1e-5) / 2).epsilon(1e-12));
    CHECK(cosine_lr(50, ts) == doctest::Approx(1.5e-3).epsilon(1e-12));
}

TEST_CASE("gradient clipping: identity below the threshold, exact 3-4-5 scaling above") {
    ParamStore<double> store;
    Param<double>& w = store.add("w", Tensor<double>({2}, {0.0, 0.0}));
    w.var.zero_grad();
    auto& g = const_cast<Tensor<double>&>(w.grad());
    g[0] = 0.3;
    g[1] = 0.4;
    double norm = clip_global_norm(store, 1.0);
    CHECK(norm == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(g[0] == 0.3);  // bit-identical below threshold
    CHECK(g[1] == 0.4);

    g[0] = 3.0;
    g[1] = 4.0;
    norm = clip_global_norm(store, 1.0);
    CHECK(norm == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(g[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("clipping leaves the global norm at min(pre-norm, max), never larger") {
    RngHub hub(31);
    ParamStore<double> store;
    Param<double>& a = store.add("a", Tensor<double>({40}));
    Param<double>& b = store.add("b", Tensor<double>({7}));
    for (int trial = 0; trial < 10; ++trial) {
        a.var.zero_grad();
        b.var.zero_grad();
        fill_uniform(const_cast<Tensor<double>&>(a.grad()), hub.stream("ga"), -2.0, 2.0);
        fill_uniform(const_cast<Tensor<double>&>(b.grad()), hub.stream("gb"), -2.0, 2.0);
        double pre = clip_global_norm(store, 1.5);
        double post = 0;
        for (auto& p : store.all())
            for (int64_t i = 0; i < p->grad().numel(); ++i) post += p->grad()[i] * p->grad()[i];
        post = std::sqrt(post);
        CHECK(post <= pre + 1e-12);
        CHECK(post == doctest::Approx(std::min(pre, 1.5)).epsilon(1e-9));
    }
}

TEST_CASE("label-smoothed cross entropy: closed forms") {
    // alpha = 0, uniform logits over K=4 -> ln 4
    Var<double> u(Tensor<double>({2, 4}));
    Var<double> l1 = label_smoothed_ce(u, {0, 3}, 0.0);
    CHECK(l1.val()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // alpha = 0, margin 20 on the correct class -> loss < 1e-3
    Tensor<double> conf({1, 3});
    conf.at2(0, 1) = 20.0;
    Var<double> l2 = label_smoothed_ce(Var<double>(conf), {1}, 0.0);
    CHECK(l2.val()[0] < 1e-3);

    CHECK_THROWS_AS(label_smoothed_ce(Var<double>(Tensor<double>({1, 3})), {5}, 0.1), ConfigError);
}

TEST_CASE("label-smoothed cross entropy matches the straight-line oracle (alpha=0.1, K=10)") {
    RngHub hub(32);
    auto logits = oracle::random_tensor<double>({4, 10}, hub.stream("x"), -2.0, 2.0);
    std::vector<int> labels = {3, 9, 0, 5};
    double alpha = 0.1;
    Var<double> loss = label_smoothed_ce(Var<double>(logits), labels, alpha);

    double want = 0;
    for (int64_t n = 0; n < 4; ++n) {
        double mx = logits.at2(n, 0);
        for (int64_t k = 1; k < 10; ++k) mx = std::max(mx, logits.at2(n, k));
        double lse = 0;
        for (int64_t k = 0; k < 10; ++k) lse += std::exp(logits.at2(n, k) - mx);
        lse = mx + std::log(lse);
        for (int64_t k = 0; k < 10; ++k) {
            double target = alpha / 10 + (k == labels[static_cast<size_t>(n)] ? 1.0 - alpha : 0.0);
            want -= target * (logits.at2(n, k) - lse) / 4.0;
        }
    }
    CHECK(loss.val()[0] == doctest::Approx(want).epsilon(1e-12));

    // bounded below by the entropy of the smoothed target
    double h = 0;
    for (int64_t k = 0; k < 10; ++k) {
        double t = alpha / 10 + (k == 0 ? 1.0 - alpha : 0.0);
        h -= t * std::log(t);
    }
    CHECK(loss.val()[0] >= h - 1e-9);
}

TEST_CASE("label-smoothed gradient matches finite differences") {
    RngHub hub(33);
    ParamStore<double> store;
    Param<double>& x = store.add("x", oracle::random_tensor<double>({3, 5}, hub.stream("x")));
    std::vector<int> labels = {1, 4, 2};
    auto loss_fn = [&] { return label_smoothed_ce(x.var, labels, 0.1); };
    auto rep = gradcheck<double>(loss_fn, {&x}, 1e-6, 100, hub.stream("gc"));
    CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("synthetic datasets: determinism and class balance") {
    auto a = synth_dataset<float>("stripe-orientation", 100, 32, 17);
    auto b = synth_dataset<float>("stripe-orientation", 100, 32, 17);
    auto c = synth_dataset<float>("stripe-orientation", 100, 32, 18);
    for (int64_t i = 0; i < a.images.numel(); ++i) CHECK(a.images[i] == b.images[i]);
    CHECK(a.labels == b.labels);
    bool differs = false;
    for (int64_t i = 0; i < a.images.numel() && !differs; ++i) differs = a.images[i] != c.images[i];
    CHECK(differs);
    int ones = 0;
    for (int y : a.labels) ones += y;
    CHECK(ones == 50);

    auto g = synth_dataset<double>("two-gaussians-image", 40, 16, 3);
    CHECK(g.images.shape() == Shape{40, 16, 16, 3});
    CHECK_THROWS_AS(synth_dataset<float>("nope", 10, 32, 0), ConfigError);
    CHECK_THROWS_AS(synth_dataset<float>("stripe-orientation", 10, 8, 0), ConfigError);
}

TEST_CASE("one small AdamW step decreases the first-batch loss for 19+ of 20 seeds") {
    Dataset<float> ds = synth_dataset<float>("stripe-orientation", 64, 32, 5);
    int improved = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        ModelConfig cfg = micro_config();
        Model<float> model(cfg, seed);
        RngHub hub(seed + 1000);
        AdamW<float> opt(model.params(), 0.9, 0.999, 1e-8, 0.05);
        std::vector<int64_t> idx(16);
        std::iota(idx.begin(), idx.end(), 0);
        std::vector<int> labels;
        Tensor<float> batch = gather_batch(ds, idx, labels);

        auto loss_of = [&](Phase phase) {
            Var<float> logits = model.forward(Var<float>(Tensor<float>(batch)), phase, &hub);
            return label_smoothed_ce(logits, labels, 0.1);
        };
        Var<float> l0 = loss_of(Phase::Train);
        double before = l0.val()[0];
        backward(l0);
        clip_global_norm(model.params(), 1.0);
        opt.step(1e-3);
        model.params().zero_grad();
        NoGradGuard ng;
        double after = loss_of(Phase::Train).val()[0];
        if (after < before) ++improved;
    }
    CHECK(improved >= 19);
}

TEST_CASE("training is deterministic given the seed") {
    ModelConfig cfg = micro_config();
    cfg.has_train = true;
    cfg.train.total_steps = 5;
    cfg.train.batch_size = 8;
    cfg.train.warmup_steps = 2;

    Dataset<float> ds = synth_dataset<float>("stripe-orientation", 32, 32, 9);
    std::ostringstream m1, m2;
    Model<float> a(cfg, 42);
    Model<float> b(cfg, 42);
    TrainResult r1 = train_model(a, ds, cfg.train, 42, m1);
    TrainResult r2 = train_model(b, ds, cfg.train, 42, m2);
    CHECK(m1.str() == m2.str());
    CHECK(r1.final_train_accuracy == r2.final_train_accuracy);
    // and the trained weights agree bit-exactly
    for (const auto& p : a.params().all()) {
        const Param<float>* q = b.params().find(p->name);
        REQUIRE(q != nullptr);
        for (int64_t i = 0; i < p->value().numel(); ++i) CHECK(p->value()[i] == q->value()[i]);
    }
}

TEST_CASE("ema flag is reserved and rejected") {
    ModelConfig cfg = micro_config();
    cfg.has_train = true;
    cfg.train.ema = true;
    CHECK_THROWS_AS(resolve_geometry(cfg), ConfigError);
}
