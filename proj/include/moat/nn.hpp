#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "moat/ops.hpp"
#include "moat/rng.hpp"

namespace moat {

enum class Phase { Train, Eval };

constexpr int kHeadDim = 32;          // channels per attention head
constexpr double kInitStd = 0.02;     // truncated-normal weight init
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.99;
constexpr double kLnEps = 1e-5;

template <typename T>
struct Dense {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;
    int64_t in = 0, out = 0;

    Dense() = default;
    Dense(ParamStore<T>& store, const std::string& name, int64_t in_, int64_t out_,
          std::mt19937_64& g, bool bias = true)
        : in(in_), out(out_) {
        Tensor<T> wt({in, out});
        fill_trunc_normal(wt, g, kInitStd);
        w = &store.add(name + ".w", std::move(wt), true, true);
        if (bias) b = &store.add(name + ".b", Tensor<T>::zeros({out}), true, false);
    }

    Var<T> forward(Var<T> x) const {
        if (x.val().rank() != 2 || x.val().dim(1) != in)
            throw DimError("dense expects [*, " + std::to_string(in) + "], got " + shape_str(x.val().shape()));
        Var<T> y = matmul(std::move(x), w->var);
        if (b) y = add(std::move(y), b->var);
        return y;
    }
};

template <typename T>
struct Conv2d {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;
    int stride = 1;
    int64_t c_in = 0, c_out = 0;

    Conv2d() = default;
    Conv2d(ParamStore<T>& store, const std::string& name, int64_t kh, int64_t kw,
           int64_t cin, int64_t cout, int stride_, std::mt19937_64& g, bool bias)
        : stride(stride_), c_in(cin), c_out(cout) {
        Tensor<T> wt({kh, kw, cin, cout});
        fill_trunc_normal(wt, g, kInitStd);
        w = &store.add(name + ".w", std::move(wt), true, true);
        if (bias) b = &store.add(name + ".b", Tensor<T>::zeros({cout}), true, false);
    }

    Var<T> forward(Var<T> x) const {
        Var<T> y = conv2d(std::move(x), w->var, stride);
        if (b) y = add(std::move(y), b->var);
        return y;
    }
};

template <typename T>
struct DepthwiseConv2d {
    Param<T>* w = nullptr;
    int stride = 1;

    DepthwiseConv2d() = default;
    DepthwiseConv2d(ParamStore<T>& store, const std::string& name, int64_t k, int64_t c,
                    int stride_, std::mt19937_64& g)
        : stride(stride_) {
        Tensor<T> wt({k, k, c});
        fill_trunc_normal(wt, g, kInitStd);
        w = &store.add(name + ".w", std::move(wt), true, true);
    }

    Var<T> forward(Var<T> x) const { return depthwise_conv2d(std::move(x), w->var, stride); }
};

// Batch normalization over N,H,W per channel. Train mode normalizes with
// batch statistics (gradients flow through them) and updates the running
// stats; eval mode is a per-channel affine map using the running stats.
template <typename T>
struct BatchNorm {
    Param<T>* gamma = nullptr;
    Param<T>* beta = nullptr;
    Param<T>* running_mean = nullptr;
    Param<T>* running_var = nullptr;
    int64_t channels = 0;
    T eps = T(kBnEps);
    T momentum = T(kBnMomentum);

    BatchNorm() = default;
    BatchNorm(ParamStore<T>& store, const std::string& name, int64_t c) : channels(c) {
        gamma = &store.add(name + ".gamma", Tensor<T>::full({c}, T(1)), true, false);
        beta = &store.add(name + ".beta", Tensor<T>::zeros({c}), true, false);
        running_mean = &store.add(name + ".running_mean", Tensor<T>::zeros({c}), false, false);
        running_var = &store.add(name + ".running_var", Tensor<T>::full({c}, T(1)), false, false);
    }

    Var<T> forward(Var<T> x, Phase phase) {
        const auto& xv = x.val();
        if (xv.rank() != 4 || xv.dim(3) != channels)
            throw DimError("batch_norm channel mismatch: input " + shape_str(xv.shape()) +
                           " vs " + std::to_string(channels) + " channels");
        if (phase == Phase::Train) {
            Var<T> mean = reduce_mean(x, {0, 1, 2});
            Var<T> xc = sub(x, mean);
            Var<T> var = reduce_mean(mul(xc, xc), {0, 1, 2});
            Var<T> rstd = rsqrt(add(var, constant(Tensor<T>::full({channels}, eps))));
            Var<T> y = add(mul(mul(xc, rstd), gamma->var), beta->var);
            for (int64_t c = 0; c < channels; ++c) {
                running_mean->value()[c] = momentum * running_mean->value()[c] + (T(1) - momentum) * mean.val()[c];
                running_var->value()[c] = momentum * running_var->value()[c] + (T(1) - momentum) * var.val()[c];
            }
            return y;
        }
        Tensor<T> rstd({channels});
        for (int64_t c = 0; c < channels; ++c)
            rstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var->value()[c] + eps)));
        Var<T> scale = mul(gamma->var, constant(std::move(rstd)));
        Var<T> xm = sub(std::move(x), constant(Tensor<T>(running_mean->value())));
        return add(mul(std::move(xm), std::move(scale)), beta->var);
    }
};

template <typename T>
struct LayerNorm {
    Param<T>* gamma = nullptr;
    Param<T>* beta = nullptr;
    int64_t channels = 0;
    T eps = T(kLnEps);

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& store, const std::string& name, int64_t c, T eps_ = T(kLnEps))
        : channels(c), eps(eps_) {
        gamma = &store.add(name + ".gamma", Tensor<T>::full({c}, T(1)), true, false);
        beta = &store.add(name + ".beta", Tensor<T>::zeros({c}), true, false);
    }

    Var<T> forward(Var<T> x) const { return layer_norm(std::move(x), gamma->var, beta->var, eps); }
};

// Squeeze-and-excitation gate: GAP -> dense -> hard-swish -> dense -> sigmoid,
// broadcast-multiplied back onto the input channels.
template <typename T>
struct SqueezeExcite {
    Dense<T> w1, w2;

    SqueezeExcite() = default;
    SqueezeExcite(ParamStore<T>& store, const std::string& name, int64_t channels, int64_t hidden,
                  std::mt19937_64& g)
        : w1(store, name + ".w1", channels, hidden, g),
          w2(store, name + ".w2", hidden, channels, g) {}

    Var<T> forward(Var<T> x) const {
        if (x.val().rank() != 4 || x.val().dim(3) != w1.in)
            throw DimError("squeeze_excite channel mismatch: " + shape_str(x.val().shape()));
        Var<T> gap = reduce_mean(x, {1, 2});  // [N,C]
        Var<T> gate = sigmoid(w2.forward(hard_swish(w1.forward(std::move(gap)))));
        return channel_scale(std::move(x), std::move(gate));
    }
};

// Multi-head self-attention over the flattened spatial grid, 32 channels per
// head, optional additive relative-position bias, optional non-overlapping
// window restriction.
template <typename T>
struct MultiHeadAttention {
    Param<T>* wq = nullptr;
    Param<T>* wk = nullptr;
    Param<T>* wv = nullptr;
    Param<T>* wo = nullptr;
    Param<T>* rel = nullptr;
    int64_t c_in = 0, c_out = 0, heads = 0;
    int64_t grid_h = 0, grid_w = 0;  // attention grid the rel table is sized for
    int window = 0;                  // 0 = global
    mutable int64_t last_tokens = -1;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<T>& store, const std::string& name, int64_t cin, int64_t cout,
                       int64_t fh, int64_t fw, bool rel_bias, int window_, std::mt19937_64& g)
        : c_in(cin), c_out(cout), window(window_) {
        if (cout % kHeadDim != 0)
            throw ConfigError("attention channels " + std::to_string(cout) +
                              " not divisible by head size " + std::to_string(kHeadDim));
        heads = cout / kHeadDim;
        grid_h = window > 0 ? window : fh;
        grid_w = window > 0 ? window : fw;
        auto mk = [&](const char* nm) {
            Tensor<T> wt({cin, cout});
            fill_trunc_normal(wt, g, kInitStd);
            return &store.add(name + std::string(".") + nm, std::move(wt), true, true);
        };
        wq = mk("wq");
        wk = mk("wk");
        wv = mk("wv");
        {
            Tensor<T> wt({cout, cout});
            fill_trunc_normal(wt, g, kInitStd);
            wo = &store.add(name + ".wo", std::move(wt), true, true);
        }
        if (rel_bias)
            rel = &store.add(name + ".rel_bias",
                             Tensor<T>::zeros({heads, 2 * grid_h - 1, 2 * grid_w - 1}), true, false);
    }

    Var<T> forward(Var<T> x) const {
        const auto& xv = x.val();
        if (xv.rank() != 4 || xv.dim(3) != c_in)
            throw DimError("attention expects [N,H,W," + std::to_string(c_in) + "], got " + shape_str(xv.shape()));
        int64_t H = xv.dim(1), W = xv.dim(2);
        if (window > 0 && (H != window || W != window)) {
            Var<T> parts = window_partition(std::move(x), window);
            Var<T> out = attend(std::move(parts));
            return window_merge(std::move(out), window, H, W);
        }
        return attend(std::move(x));
    }

private:
    Var<T> attend(Var<T> x) const {
        int64_t B = x.val().dim(0), H = x.val().dim(1), W = x.val().dim(2);
        int64_t S = H * W;
        last_tokens = S;
        if (rel && (H != grid_h || W != grid_w))
            throw DimError("attention grid " + std::to_string(H) + "x" + std::to_string(W) +
                           " does not match relative-bias table grid " + std::to_string(grid_h) +
                           "x" + std::to_string(grid_w));
        Var<T> x2 = reshape(std::move(x), {B * S, c_in});
        auto split = [&](Var<T> m) {
            m = reshape(std::move(m), {B, S, heads, kHeadDim});
            m = permute(std::move(m), {0, 2, 1, 3});
            return reshape(std::move(m), {B * heads, S, kHeadDim});
        };
        Var<T> q = split(scalar_mul(matmul(x2, wq->var), static_cast<T>(1.0 / std::sqrt(double(kHeadDim)))));
        Var<T> k = split(matmul(x2, wk->var));
        Var<T> v = split(matmul(x2, wv->var));
        Var<T> logits = bmm(std::move(q), std::move(k), true);  // [B*heads, S, S]
        if (rel) logits = rel_bias_add(std::move(logits), rel->var, H, W);
        Var<T> attn = softmax(std::move(logits), 2);
        Var<T> ctx = bmm(std::move(attn), std::move(v));  // [B*heads, S, head_dim]
        ctx = reshape(std::move(ctx), {B, heads, S, kHeadDim});
        ctx = permute(std::move(ctx), {0, 2, 1, 3});
        ctx = reshape(std::move(ctx), {B * S, c_out});
        Var<T> out = matmul(std::move(ctx), wo->var);
        return reshape(std::move(out), {B, H, W, c_out});
    }
};

// Train mode: drop the branch with probability 1-survival, else scale by
// 1/survival (inverted scaling, so eval needs no rescale). The RNG stream is
// consumed only when a draw actually happens (survival < 1 in train mode).
template <typename T>
Var<T> stochastic_depth(Var<T> branch, double survival, Phase phase, std::mt19937_64* g) {
    if (phase == Phase::Eval || survival >= 1.0) return branch;
    if (survival <= 0.0) throw ConfigError("stochastic depth survival must be in (0,1]");
    if (!g) throw ConfigError("stochastic depth in train mode requires an RNG stream");
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(*g);
    if (u < survival) return scalar_mul(std::move(branch), static_cast<T>(1.0 / survival));
    return scalar_mul(std::move(branch), T(0));
}

}  // namespace moat
