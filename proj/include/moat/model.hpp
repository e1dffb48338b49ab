#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "moat/blocks.hpp"

namespace moat {

struct StageSpec {
    std::string kind;  // conv_stem | mbconv | moat | <ablation block kind>
    int blocks = 0;
    int64_t channels = 0;
};

struct TrainSettings {
    double peak_lr = 3e-3;
    double min_lr = 1e-5;
    int64_t warmup_steps = -1;  // -1: min(10000, total/10)
    int64_t total_steps = 500;
    int batch_size = 32;
    double label_smoothing = 0.1;
    double grad_clip_norm = 1.0;
    double weight_decay = 0.05;
    bool ema = false;  // reserved; rejected when enabled
};

struct ModelConfig {
    std::string name = "custom";
    std::vector<StageSpec> stages;          // exactly five, first is conv_stem
    int num_classes = 1000;
    int input_size = 224;
    std::string mode = "classification";    // classification | downstream
    std::vector<std::string> window_plan;   // per stage: global | win<k>; empty = all global
    bool rel_bias = true;
    double sd_survival = 1.0;               // terminal survival probability
    bool attn_inner_residual = true;
    bool has_train = false;
    TrainSettings train;
};

std::vector<std::string> family_names();
ModelConfig family_config(const std::string& name);

int parse_window(const std::string& entry);  // "global"/"none" -> 0, "win14" -> 14

struct BlockGeom {
    BlockSpec spec;
    int stage = 0;  // 2..5
    int index = 0;  // within stage
    std::string path;
};

struct ModelGeometry {
    int64_t input_size = 0;
    int64_t stem_c = 0;
    std::vector<BlockGeom> blocks;
    std::array<int64_t, 5> stage_out_hw = {};   // feature extent after each stage
    std::array<int64_t, 5> stage_stride = {};   // cumulative output stride per stage
    std::array<int64_t, 5> stage_channels = {};
    int64_t head_c = 0;
    int num_classes = 0;
};

// Resolves channels, strides and feature extents for every block; validates
// the config. strict_heads additionally enforces the 32-channel head rule so
// the result is buildable (the cost model can walk non-buildable variants).
ModelGeometry resolve_geometry(const ModelConfig& cfg, bool strict_heads = true);

ModelConfig adapted_config(const ModelConfig& base, int stage4_window, int input_size);

struct ScaleCheckRow {
    std::string name;
    int64_t depth = 0;
    int64_t width = 0;
};
struct ScaleCheckReport {
    std::vector<ScaleCheckRow> rows;
    bool monotone = false;
    bool alternates = false;
    std::string detail;
};
ScaleCheckReport scale_family_check(const std::vector<ModelConfig>& cfgs);

// ---------------------------------------------------------------------------

template <typename T>
class Model {
public:
    explicit Model(const ModelConfig& cfg, uint64_t init_seed = 0)
        : cfg_(cfg), geom_(resolve_geometry(cfg, true)) {
        RngHub hub(init_seed);
        auto& g = hub.stream("init");
        stem0_.emplace(store_, "s1.conv0", 3, 3, 3, geom_.stem_c, 2, g, false);
        stem_bn_.emplace(store_, "s1.bn0", geom_.stem_c);
        stem1_.emplace(store_, "s1.conv1", 3, 3, geom_.stem_c, geom_.stem_c, 1, g, true);
        for (const auto& bg : geom_.blocks)
            blocks_.push_back(build_variant<T>(store_, bg.path, bg.spec, g));
        head_.emplace(store_, "head.fc", geom_.head_c, geom_.num_classes, g);
    }

    Var<T> forward(Var<T> x, Phase phase, RngHub* rng = nullptr) {
        const auto& xv = x.val();
        if (xv.rank() != 4 || xv.dim(3) != 3)
            throw DimError("model input must be [N,H,W,3], got " + shape_str(xv.shape()));
        if (xv.dim(1) != geom_.input_size || xv.dim(2) != geom_.input_size)
            throw DimError("model built for input size " + std::to_string(geom_.input_size) +
                           ", got " + shape_str(xv.shape()));
        std::mt19937_64* sd = nullptr;
        if (phase == Phase::Train && rng) sd = &rng->stream("stochastic_depth");

        stage_shapes_.clear();
        x = gelu(stem_bn_->forward(stem0_->forward(std::move(x)), phase));
        x = stem1_->forward(std::move(x));
        stage_shapes_.push_back(x.val().shape());
        int cur_stage = 2;
        for (size_t i = 0; i < blocks_.size(); ++i) {
            if (geom_.blocks[i].stage != cur_stage) {
                stage_shapes_.push_back(x.val().shape());
                cur_stage = geom_.blocks[i].stage;
            }
            x = blocks_[i]->forward(std::move(x), phase, sd);
        }
        stage_shapes_.push_back(x.val().shape());
        Var<T> pooled = reduce_mean(std::move(x), {1, 2});  // [N, C5]
        return head_->forward(std::move(pooled));
    }

    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    const ModelConfig& config() const { return cfg_; }
    const ModelGeometry& geometry() const { return geom_; }
    const std::vector<Shape>& last_stage_shapes() const { return stage_shapes_; }

    std::vector<Block<T>*> blocks_view() {
        std::vector<Block<T>*> v;
        for (auto& b : blocks_) v.push_back(b.get());
        return v;
    }

    std::vector<BatchNorm<T>*> batch_norms() {
        std::vector<BatchNorm<T>*> v;
        v.push_back(&*stem_bn_);
        for (auto& b : blocks_) b->batch_norms(v);
        return v;
    }

    void set_all_survival(double s) {
        for (auto& b : blocks_) b->spec.sd_survival = s;
    }

private:
    ModelConfig cfg_;
    ModelGeometry geom_;
    ParamStore<T> store_;
    std::optional<Conv2d<T>> stem0_;
    std::optional<BatchNorm<T>> stem_bn_;
    std::optional<Conv2d<T>> stem1_;
    std::vector<std::unique_ptr<Block<T>>> blocks_;
    std::optional<Dense<T>> head_;
    std::vector<Shape> stage_shapes_;
};

struct TransferReport {
    std::vector<std::string> copied;
    std::vector<std::string> dropped;  // present in src, intentionally absent in dst
};

// Copies every parameter of src into the same-named parameter of dst.
// rel_bias tables missing from dst are reported as dropped when allowed.
template <typename T>
TransferReport transfer_params(Model<T>& dst, const Model<T>& src, bool allow_drop_rel_bias) {
    TransferReport rep;
    for (const auto& sp : src.params().all()) {
        Param<T>* dp = dst.params().find(sp->name);
        if (!dp) {
            bool is_rel = sp->name.size() >= 8 && sp->name.substr(sp->name.size() - 8) == "rel_bias";
            if (allow_drop_rel_bias && is_rel) {
                rep.dropped.push_back(sp->name);
                continue;
            }
            throw ConfigError("parameter " + sp->name + " has no destination");
        }
        if (dp->value().shape() != sp->value().shape())
            throw DimError("parameter " + sp->name + " shape mismatch: " + shape_str(sp->value().shape()) +
                           " vs " + shape_str(dp->value().shape()));
        dp->value() = sp->value();
        rep.copied.push_back(sp->name);
    }
    for (const auto& dp : dst.params().all())
        if (!src.params().find(dp->name))
            throw ConfigError("destination parameter " + dp->name + " has no source");
    return rep;
}

// Downstream adaptation: drop relative-position tables, switch stage 4 to
// non-overlapping window attention, keep stage 5 global; every conv/BN/LN
// weight is preserved bit-exact.
template <typename T>
Model<T> adapt_downstream(const Model<T>& src, int stage4_window, int input_size,
                          TransferReport* report = nullptr) {
    ModelConfig cfg = adapted_config(src.config(), stage4_window, input_size);
    Model<T> dst(cfg, 0);
    TransferReport rep = transfer_params(dst, src, true);
    if (report) *report = rep;
    return dst;
}

}  // namespace moat
