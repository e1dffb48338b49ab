#include <doctest.h>

#include "moat/gradcheck.hpp"
#include "moat/ops.hpp"
#include "oracles.hpp"

using namespace moat;

TEST_CASE("loss = sum(w*x) with x fixed -> grad(w) == x") {
    Tensor<double> wt({2, 3}), xt({2, 3});
    RngHub hub(1);
    fill_uniform(wt, hub.stream("w"), -1.0, 1.0);
    fill_uniform(xt, hub.stream("x"), -1.0, 1.0);
    Var<double> w(wt, true);
    Var<double> x(xt, false);
    Var<double> loss = sum_all(mul(w, x));
    backward(loss);
    for (int64_t i = 0; i < 6; ++i) CHECK(w.grad()[i] == doctest::Approx(xt[i]).epsilon(1e-12));
}

TEST_CASE("loss = sum(w^2)/2 -> grad(w) == w") {
    Tensor<double> wt({5});
    RngHub hub(2);
    fill_uniform(wt, hub.stream("w"), -2.0, 2.0);
    Var<double> w(wt, true);
    Var<double> loss = scalar_mul(sum_all(mul(w, w)), 0.5);
    backward(loss);
    for (int64_t i = 0; i < 5; ++i) CHECK(w.grad()[i] == doctest::Approx(wt[i]).epsilon(1e-12));
}

TEST_CASE("repeated backward accumulates until zero_grad") {
    Var<double> w(Tensor<double>::full({3}, 2.0), true);
    auto make_loss = [&] { return sum_all(mul(w, w)); };
    Var<double> l1 = make_loss();
    backward(l1);
    CHECK(w.grad()[0] == doctest::Approx(4.0));
    Var<double> l2 = make_loss();
    backward(l2);
    CHECK(w.grad()[0] == doctest::Approx(8.0));
    w.zero_grad();
    Var<double> l3 = make_loss();
    backward(l3);
    CHECK(w.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("non-scalar loss is rejected") {
    Var<double> w(Tensor<double>::full({3}, 1.0), true);
    Var<double> y = mul(w, w);
    CHECK_THROWS_AS(backward(y), DimError);
}

TEST_CASE("diamond-shaped graph visits each node once") {
    Var<double> w(Tensor<double>::full({1}, 3.0), true);
    Var<double> a = scalar_mul(w, 2.0);
    Var<double> loss = sum_all(add(a, a));  // d/dw (4w) = 4
    backward(loss);
    CHECK(w.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("no-grad mode produces detached nodes") {
    Var<double> w(Tensor<double>::full({2}, 1.5), true);
    NoGradGuard ng;
    Var<double> y = mul(w, w);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("composite graph gradcheck in double precision") {
    RngHub hub(11);
    ParamStore<double> store;
    Tensor<double> at({3, 4}), bt({4, 2}), ct({2});
    fill_uniform(at, hub.stream("a"), -1.0, 1.0);
    fill_uniform(bt, hub.stream("b"), -1.0, 1.0);
    fill_uniform(ct, hub.stream("c"), -1.0, 1.0);
    Param<double>& a = store.add("a", at);
    Param<double>& b = store.add("b", bt);
    Param<double>& c = store.add("c", ct);
    auto loss_fn = [&] {
        Var<double> y = matmul(a.var, b.var);         // [3,2]
        y = add(y, c.var);                            // broadcast [2]
        y = gelu(y);
        y = softmax(y, 1);
        return sum_all(mul(y, y));
    };
    auto rep = gradcheck<double>(loss_fn, {&a, &b, &c}, 1e-5, 10000, hub.stream("gc"));
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("linear model gradcheck hits near-exact agreement") {
    ParamStore<double> store;
    Param<double>& w = store.add("w", Tensor<double>({4}, {0.3, -0.2, 0.9, 0.1}));
    Tensor<double> xt({4}, {1.0, 2.0, -1.0, 0.5});
    auto loss_fn = [&] { return sum_all(mul(w.var, constant(Tensor<double>(xt)))); };
    RngHub hub(0);
    auto rep = gradcheck<double>(loss_fn, {&w}, 1e-5, 100, hub.stream("gc"));
    CHECK(rep.max_rel_err < 1e-10);
}

TEST_CASE("injected backward fault is caught and named") {
    ParamStore<double> store;
    RngHub hub(5);
    Tensor<double> wt({3, 3});
    fill_uniform(wt, hub.stream("w"), -1.0, 1.0);
    Param<double>& w = store.add("w", wt);
    Tensor<double> xt({3, 3});
    fill_uniform(xt, hub.stream("x"), -1.0, 1.0);
    auto loss_fn = [&] {
        Var<double> y = matmul(w.var, constant(Tensor<double>(xt)));
        return sum_all(mul(y, y));
    };
    set_backward_fault("matmul");
    auto rep = gradcheck<double>(loss_fn, {&w}, 1e-5, 100, hub.stream("gc"));
    clear_backward_fault();
    CHECK(rep.max_rel_err > 1e-4);
    auto rep2 = gradcheck<double>(loss_fn, {&w}, 1e-5, 100, hub.stream("gc2"));
    CHECK(rep2.max_rel_err < 1e-7);
}

TEST_CASE("nondeterministic forward is detected") {
    ParamStore<double> store;
    Param<double>& w = store.add("w", Tensor<double>::full({1}, 1.0));
    int calls = 0;
    auto loss_fn = [&] {
        ++calls;
        return scalar_mul(w.var, static_cast<double>(calls));
    };
    RngHub hub(0);
    CHECK_THROWS_AS(gradcheck<double>(loss_fn, {&w}, 1e-5, 10, hub.stream("gc")),
                    NondeterministicForward);
}
