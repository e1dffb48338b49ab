#pragma once

#include <string>
#include <vector>

#include "moat/model.hpp"

namespace moat {

struct CostRow {
    std::string path;
    std::string kind;
    int64_t params = 0;
    int64_t flops = 0;
};

struct CostReport {
    std::vector<CostRow> rows;
    int64_t total_params = 0;
    int64_t total_flops = 0;
    int64_t input_size = 0;
};

// Static cost walk; no forward pass and no parameter allocation.
// FLOPs are multiply-accumulates for one input image at flops_input_size
// (<=0 uses the config's own input size). Parameters are counted for the
// model as built at the config's input size, so they do not vary with the
// requested FLOP evaluation size.
CostReport cost_report(const ModelConfig& cfg, int64_t flops_input_size = 0);

int64_t count_params(const ModelConfig& cfg);

struct AblationRow {
    std::string variant;
    int64_t params = 0;
    int64_t flops = 0;
};

std::vector<std::string> ablation_suites();
std::vector<AblationRow> ablation_cost_table(const std::string& suite, const std::string& layout);

std::string format_cost_report(const CostReport& rep, bool csv, bool per_layer);

}  // namespace moat
