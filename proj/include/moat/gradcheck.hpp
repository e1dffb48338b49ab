#pragma once

#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "moat/autograd.hpp"
#include "moat/rng.hpp"

namespace moat {

struct NondeterministicForward : std::runtime_error {
    explicit NondeterministicForward(const std::string& msg) : std::runtime_error(msg) {}
};

// Redraws parameters at magnitudes that keep every gradient coordinate well
// above finite-difference roundoff (fresh trunc-normal(0.02) weights leave
// attention/SE path gradients near 1e-8, where central differences at
// h = 1e-5 lose all signal). Gradients mathematically independent of weight
// values are unaffected by the redraw.
template <typename T>
void condition_params_for_fd(ParamStore<T>& store, std::mt19937_64& g) {
    for (auto& p : store.all()) {
        const std::string& n = p->name;
        if (p->decay) fill_uniform<T>(p->value(), g, T(-0.3), T(0.3));
        else if (n.size() >= 11 && n.substr(n.size() - 11) == "running_var")
            fill_uniform<T>(p->value(), g, T(0.5), T(2.0));
        else if (n.size() >= 12 && n.substr(n.size() - 12) == "running_mean")
            fill_uniform<T>(p->value(), g, T(-0.5), T(0.5));
        else if (n.size() >= 5 && n.substr(n.size() - 5) == "gamma")
            fill_uniform<T>(p->value(), g, T(0.5), T(1.5));
        else
            fill_uniform<T>(p->value(), g, T(-0.3), T(0.3));
    }
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_coord = -1;
    int64_t coords_checked = 0;
    bool pass(double tol) const { return max_rel_err < tol; }
};

// Central-difference check of analytic gradients. Every coordinate is checked
// when the total fits in max_coords, otherwise a seeded random subsample.
// rel err = |analytic - fd| / max(|analytic|, |fd|, 1e-8).
template <typename T>
GradCheckReport gradcheck(const std::function<Var<T>()>& loss_fn,
                          const std::vector<Param<T>*>& params,
                          double h, int64_t max_coords, std::mt19937_64& g) {
    auto eval_loss = [&]() {
        NoGradGuard ng;
        Var<T> l = loss_fn();
        if (l.val().numel() != 1)
            throw DimError("gradcheck loss must be scalar, got " + shape_str(l.val().shape()));
        return static_cast<double>(l.val()[0]);
    };

    double f0 = eval_loss();
    double f0b = eval_loss();
    if (f0 != f0b)
        throw NondeterministicForward("two forward passes disagree: " + std::to_string(f0) +
                                      " vs " + std::to_string(f0b));
    if (!std::isfinite(f0)) throw std::runtime_error("gradcheck: non-finite forward value");

    for (auto* p : params) p->var.zero_grad();
    {
        Var<T> loss = loss_fn();
        backward(loss);
    }

    int64_t total = 0;
    for (auto* p : params) total += p->value().numel();

    std::vector<std::pair<size_t, int64_t>> coords;
    if (total <= max_coords) {
        for (size_t pi = 0; pi < params.size(); ++pi)
            for (int64_t i = 0; i < params[pi]->value().numel(); ++i) coords.emplace_back(pi, i);
    } else {
        std::set<std::pair<size_t, int64_t>> picked;
        std::uniform_int_distribution<int64_t> flat(0, total - 1);
        while (static_cast<int64_t>(picked.size()) < max_coords) {
            int64_t f = flat(g);
            size_t pi = 0;
            while (f >= params[pi]->value().numel()) f -= params[pi]->value().numel(), ++pi;
            picked.emplace(pi, f);
        }
        coords.assign(picked.begin(), picked.end());
    }

    GradCheckReport rep;
    rep.coords_checked = static_cast<int64_t>(coords.size());
    for (auto [pi, i] : coords) {
        Param<T>* p = params[pi];
        T saved = p->value()[i];
        p->value()[i] = saved + static_cast<T>(h);
        double fp = eval_loss();
        p->value()[i] = saved - static_cast<T>(h);
        double fm = eval_loss();
        p->value()[i] = saved;
        double fd = (fp - fm) / (2.0 * h);
        double an = p->grad().numel() ? static_cast<double>(p->grad()[i]) : 0.0;
        double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_param = p->name;
            rep.worst_coord = i;
        }
    }
    return rep;
}

}  // namespace moat
