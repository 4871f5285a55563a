#pragma once

#include <cstdint>
#include <string>

#include "tacq/correction.hpp"
#include "tacq/model.hpp"
#include "tacq/quant.hpp"

namespace tacq {

/// Flat key=value experiment configuration with dotted sections. Every key
/// has a default; only dataset.kind is required. Unknown keys are rejected
/// with their line number.
struct RunConfig {
    // dataset
    std::string dataset_kind;  // gauss2d | rings2d | blobs8x8 (required)
    size_t dataset_n = 4096;

    // model
    std::string model_arch = "auto";  // auto | mlp | conv
    size_t hidden_width = 128;
    size_t hidden_layers = 3;
    size_t time_embed_dim = 32;
    size_t conv_width = 32;

    // schedule
    size_t schedule_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    // train
    size_t train_steps = 5000;
    size_t train_batch = 128;
    double lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;

    // quant
    int weight_bits = 3;
    int act_bits = 8;
    std::string weight_scheme = "minmax_symmetric";
    std::string act_scheme = "minmax_asymmetric";
    size_t n_calib = 256;
    bool per_channel_weights = false;

    // correction
    CorrectionConfig correction;

    // sampler
    std::string sampler_kind = "ddim";
    size_t sampler_steps = 100;
    double eta = 0.0;
    bool dpmpp_apply_ibc = false;

    // sample / eval
    size_t sample_n = 1024;
    bool dump_trajectory = false;
    size_t dump_batch = 8;
    size_t reference_n = 10000;

    uint64_t seed = 1234;

    std::string resolved_arch() const;
    std::array<size_t, 3> io_shape() const;
    void validate() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

/// Applies one of the named correction variants onto the config's
/// correction/sampling flags (the CLI --variant switch).
void apply_variant(RunConfig& cfg, const std::string& variant);

}  // namespace tacq
