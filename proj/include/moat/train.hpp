#pragma once

#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "moat/model.hpp"

namespace moat {

struct NanGradient : std::runtime_error {
    std::string param;
    explicit NanGradient(const std::string& name)
        : std::runtime_error("non-finite gradient in parameter " + name), param(name) {}
};

struct TrainDiverged : std::runtime_error {
    int64_t step;
    explicit TrainDiverged(int64_t s)
        : std::runtime_error("training diverged (non-finite loss) at step " + std::to_string(s)), step(s) {}
};

// Adam with decoupled weight decay. Decay applies only to parameters flagged
// for it (conv/dense/attention weights; not norm affines, biases, or the
// relative-position tables).
template <typename T>
class AdamW {
public:
    explicit AdamW(ParamStore<T>& store, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8, double weight_decay = 0.05)
        : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
        for (auto& p : store.all())
            if (p->trainable)
                slots_.push_back({Tensor<T>::zeros(p->value().shape()),
                                  Tensor<T>::zeros(p->value().shape()), p.get()});
    }

    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (auto& s : slots_) {
            if (s.p->grad().numel() == 0) continue;
            Tensor<T>& theta = s.p->value();
            const Tensor<T>& g = s.p->grad();
            double wd = s.p->decay ? wd_ : 0.0;
            for (int64_t i = 0; i < theta.numel(); ++i) {
                double gi = static_cast<double>(g[i]);
                if (!std::isfinite(gi)) throw NanGradient(s.p->name);
                double m = b1_ * static_cast<double>(s.m[i]) + (1.0 - b1_) * gi;
                double v = b2_ * static_cast<double>(s.v[i]) + (1.0 - b2_) * gi * gi;
                s.m[i] = static_cast<T>(m);
                s.v[i] = static_cast<T>(v);
                double update = (m / bc1) / (std::sqrt(v / bc2) + eps_) + wd * static_cast<double>(theta[i]);
                theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * update);
            }
        }
    }

    int64_t step_count() const { return t_; }

private:
    struct Slot {
        Tensor<T> m, v;
        Param<T>* p;
    };
    std::vector<Slot> slots_;
    int64_t t_ = 0;
    double b1_, b2_, eps_, wd_;
};

inline int64_t effective_warmup(const TrainSettings& ts) {
    if (ts.warmup_steps >= 0) return ts.warmup_steps;
    return std::min<int64_t>(10000, ts.total_steps / 10);
}

// Linear warm-up to the peak, then cosine decay to the floor.
inline double cosine_lr(int64_t step, const TrainSettings& ts) {
    int64_t warmup = effective_warmup(ts);
    if (step <= warmup && warmup > 0)
        return ts.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= ts.total_steps) return ts.min_lr;
    double progress = static_cast<double>(step - warmup) / static_cast<double>(ts.total_steps - warmup);
    return ts.min_lr + (ts.peak_lr - ts.min_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Scales all gradients by max_norm/norm when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm.
template <typename T>
double clip_global_norm(ParamStore<T>& store, double max_norm) {
    double sq = 0.0;
    for (auto& p : store.all()) {
        if (!p->trainable || p->grad().numel() == 0) continue;
        for (int64_t i = 0; i < p->grad().numel(); ++i) {
            double g = static_cast<double>(p->grad()[i]);
            sq += g * g;
        }
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        T scale = static_cast<T>(max_norm / norm);
        for (auto& p : store.all()) {
            if (!p->trainable || p->grad().numel() == 0) continue;
            Tensor<T>& g = const_cast<Tensor<T>&>(p->grad());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= scale;
        }
    }
    return norm;
}

// Cross entropy against (1-alpha)*onehot + alpha/K targets, mean over batch.
template <typename T>
Var<T> label_smoothed_ce(Var<T> logits, const std::vector<int>& labels, double alpha) {
    const auto& lv = logits.val();
    if (lv.rank() != 2 || lv.dim(0) != static_cast<int64_t>(labels.size()))
        throw DimError("label_smoothed_ce expects [N,K] logits and N labels, got " + shape_str(lv.shape()));
    int64_t N = lv.dim(0), K = lv.dim(1);
    Tensor<T> target({N, K});
    for (int64_t n = 0; n < N; ++n) {
        int y = labels[static_cast<size_t>(n)];
        if (y < 0 || y >= K)
            throw ConfigError("label " + std::to_string(y) + " out of range [0," + std::to_string(K) + ")");
        for (int64_t k = 0; k < K; ++k)
            target.at2(n, k) = static_cast<T>(alpha / static_cast<double>(K) + (k == y ? 1.0 - alpha : 0.0));
    }
    Var<T> ls = log_softmax(std::move(logits), 1);
    Var<T> weighted = mul(std::move(ls), constant(std::move(target)));
    return scalar_mul(sum_all(std::move(weighted)), static_cast<T>(-1.0 / static_cast<double>(N)));
}

template <typename T>
double accuracy(const Tensor<T>& logits, const std::vector<int>& labels) {
    int64_t N = logits.dim(0), K = logits.dim(1);
    int64_t hit = 0;
    for (int64_t n = 0; n < N; ++n) {
        int64_t arg = 0;
        for (int64_t k = 1; k < K; ++k)
            if (logits.at2(n, k) > logits.at2(n, arg)) arg = k;
        if (arg == labels[static_cast<size_t>(n)]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(N);
}

// ---------------------------------------------------------------------------
// synthetic datasets

template <typename T>
struct Dataset {
    Tensor<T> images;  // [n, size, size, 3]
    std::vector<int> labels;
    int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

// stripe-orientation: horizontal vs vertical sinusoid gratings with random
// frequency and phase plus pixel noise; solvable by local filters but carries
// no class signal in any single pixel's mean.
// two-gaussians-image: the class shifts the global mean, exercising the
// GAP/attention paths.
template <typename T>
Dataset<T> synth_dataset(const std::string& kind, int64_t n, int64_t size, uint64_t seed) {
    if (size < 16) throw ConfigError("synth_dataset: size must be >= 16");
    if (kind != "stripe-orientation" && kind != "two-gaussians-image")
        throw ConfigError("unknown dataset kind: " + kind);
    RngHub hub(seed);
    auto& g = hub.stream("data:" + kind);
    Dataset<T> ds;
    ds.images = Tensor<T>({n, size, size, 3});
    ds.labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int label = static_cast<int>(i % 2);
        ds.labels[static_cast<size_t>(i)] = label;
        if (kind == "stripe-orientation") {
            double freq = uniform<double>(g, 2.0, 6.0);
            double phase = uniform<double>(g, 0.0, 2.0 * M_PI);
            for (int64_t h = 0; h < size; ++h)
                for (int64_t w = 0; w < size; ++w) {
                    double t = static_cast<double>(label == 0 ? h : w) / static_cast<double>(size);
                    double v = std::sin(2.0 * M_PI * freq * t + phase);
                    for (int64_t c = 0; c < 3; ++c)
                        ds.images.at(i, h, w, c) = static_cast<T>(v + normal<double>(g, 0.0, 0.7));
                }
        } else {
            double mu = label == 0 ? -0.25 : 0.25;
            for (int64_t h = 0; h < size; ++h)
                for (int64_t w = 0; w < size; ++w)
                    for (int64_t c = 0; c < 3; ++c)
                        ds.images.at(i, h, w, c) = static_cast<T>(normal<double>(g, mu, 1.0));
        }
    }
    return ds;
}

template <typename T>
Tensor<T> gather_batch(const Dataset<T>& ds, const std::vector<int64_t>& idx,
                       std::vector<int>& labels_out) {
    int64_t bs = static_cast<int64_t>(idx.size());
    int64_t hw = ds.images.dim(1);
    Tensor<T> batch({bs, hw, hw, 3});
    labels_out.resize(idx.size());
    int64_t per = hw * hw * 3;
    for (int64_t b = 0; b < bs; ++b) {
        const T* src = ds.images.data() + idx[static_cast<size_t>(b)] * per;
        T* dst = batch.data() + b * per;
        std::copy(src, src + per, dst);
        labels_out[static_cast<size_t>(b)] = ds.labels[static_cast<size_t>(idx[static_cast<size_t>(b)])];
    }
    return batch;
}

struct TrainResult {
    double final_train_accuracy = 0.0;
    int64_t steps = 0;
    double last_loss = 0.0;
};

// Recomputes the BN running statistics as exact cumulative averages over the
// dataset (the EMA written during training describes a mixture of older
// networks; with a fast cosine schedule that mismatch costs real eval
// accuracy). Weights are untouched.
template <typename T>
void refresh_batch_stats(Model<T>& model, const Dataset<T>& ds, int batch_size) {
    auto bns = model.batch_norms();
    NoGradGuard ng;
    int i = 0;
    for (int64_t start = 0; start + batch_size <= ds.size(); start += batch_size, ++i) {
        std::vector<int64_t> idx(static_cast<size_t>(batch_size));
        std::iota(idx.begin(), idx.end(), start);
        std::vector<int> labels;
        Tensor<T> batch = gather_batch(ds, idx, labels);
        T cumulative = static_cast<T>(static_cast<double>(i) / static_cast<double>(i + 1));
        for (auto* bn : bns) bn->momentum = cumulative;
        model.forward(Var<T>(std::move(batch)), Phase::Train, nullptr);
    }
    for (auto* bn : bns) bn->momentum = static_cast<T>(kBnMomentum);
}

// Deterministic given the seed: data order, init, and stochastic depth all
// draw from named streams of one hub.
template <typename T>
TrainResult train_model(Model<T>& model, const Dataset<T>& ds, const TrainSettings& ts,
                        uint64_t seed, std::ostream& metrics) {
    if (ts.ema) throw ConfigError("EMA of weights is reserved but not implemented");
    RngHub hub(seed);
    AdamW<T> opt(model.params(), 0.9, 0.999, 1e-8, ts.weight_decay);
    auto& order_rng = hub.stream("batch_order");
    std::vector<int64_t> order(static_cast<size_t>(ds.size()));
    std::iota(order.begin(), order.end(), 0);
    int64_t cursor = ds.size();  // force an initial shuffle

    TrainResult res;
    char line[160];
    for (int64_t step = 0; step < ts.total_steps; ++step) {
        if (cursor + ts.batch_size > ds.size()) {
            std::shuffle(order.begin(), order.end(), order_rng);
            cursor = 0;
        }
        std::vector<int64_t> idx(order.begin() + cursor, order.begin() + cursor + ts.batch_size);
        cursor += ts.batch_size;
        std::vector<int> labels;
        Tensor<T> batch = gather_batch(ds, idx, labels);

        Var<T> logits = model.forward(Var<T>(std::move(batch)), Phase::Train, &hub);
        Var<T> loss = label_smoothed_ce(logits, labels, ts.label_smoothing);
        double lval = static_cast<double>(loss.val()[0]);
        if (!std::isfinite(lval)) throw TrainDiverged(step);
        backward(loss);
        clip_global_norm(model.params(), ts.grad_clip_norm);
        double lr = cosine_lr(step + 1, ts);
        opt.step(lr);
        model.params().zero_grad();

        double acc = accuracy(logits.val(), labels);
        std::snprintf(line, sizeof(line), "step=%lld lr=%.8g loss=%.8g acc=%.6g\n",
                      static_cast<long long>(step), lr, lval, acc);
        metrics << line;
        res.last_loss = lval;
        res.steps = step + 1;
    }
    refresh_batch_stats(model, ds, ts.batch_size);
    res.final_train_accuracy = evaluate(model, ds, ts.batch_size);
    return res;
}

template <typename T>
double evaluate(Model<T>& model, const Dataset<T>& ds, int batch_size) {
    NoGradGuard ng;
    int64_t hit = 0;
    for (int64_t start = 0; start < ds.size(); start += batch_size) {
        int64_t bs = std::min<int64_t>(batch_size, ds.size() - start);
        std::vector<int64_t> idx(static_cast<size_t>(bs));
        std::iota(idx.begin(), idx.end(), start);
        std::vector<int> labels;
        Tensor<T> batch = gather_batch(ds, idx, labels);
        Var<T> logits = model.forward(Var<T>(std::move(batch)), Phase::Eval, nullptr);
        hit += static_cast<int64_t>(std::lround(accuracy(logits.val(), labels) * static_cast<double>(bs)));
    }
    return static_cast<double>(hit) / static_cast<double>(ds.size());
}

}  // namespace moat
