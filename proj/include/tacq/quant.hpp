#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tacq/model.hpp"
#include "tacq/schedule.hpp"
#include "tacq/tensor.hpp"

namespace tacq {

/// Uniform affine quantizer parameters. Values are simulated on the grid
/// s*(q + zero_point) for integer q in [q_min, q_max]; bits >= 32 marks a
/// pass-through (no quantization).
struct QuantParams {
    double scale = 1.0;
    int64_t zero_point = 0;
    int64_t q_min = 0;
    int64_t q_max = 0;
    int bits = 32;

    bool passthrough() const { return bits >= 32; }
    void validate() const;
};

enum class QuantScheme { minmax_symmetric, minmax_asymmetric };
QuantScheme parse_scheme(const std::string& name);

/// Min-max calibration of a value range into quantizer parameters.
/// Symmetric: signed grid, zero_point 0, scale = absmax / q_max.
/// Asymmetric: unsigned grid, scale = (hi-lo)/(2^bits-1), zero_point anchors lo.
/// Degenerate ranges are widened by 1e-8 (scale floor).
QuantParams calibrate_range(double lo, double hi, int bits, QuantScheme scheme);

/// Fake quantization: clip(round(x/s) - z, q_min, q_max) then dequantize
/// s*(q + z). Rounds half away from zero. Idempotent and monotone.
double quantize(double x, const QuantParams& p);
Tensor quantize(const Tensor& x, const QuantParams& p);

/// Per-tensor (or per-output-channel) weight quantizers for every
/// quantizable parameter, min-max calibrated. Returned in param order.
std::vector<std::vector<QuantParams>> calibrate_weights(const NoiseModel& model, QuantScheme scheme,
                                                        int bits, bool per_channel = false);

/// Noise model with fake-quantized weights and per-boundary activation
/// quantizers. Forward refuses to run until activation calibration sets the
/// calibrated flag. Immutable once calibrated.
struct QuantizedModel {
    NoiseModel base;
    std::vector<std::vector<QuantParams>> weight_qparams;  // per param tensor
    std::vector<QuantParams> act_qparams;                  // per boundary
    std::vector<std::pair<double, double>> act_ranges;     // observed (lo,hi) per boundary
    int weight_bits = 32;
    int act_bits = 32;
    QuantScheme weight_scheme = QuantScheme::minmax_symmetric;
    QuantScheme act_scheme = QuantScheme::minmax_asymmetric;
    bool per_channel_weights = false;
    bool calibrated = false;

    std::vector<Tensor> fq_params;  // params with weights projected to the grid

    void rebuild_fq_params();
};

/// Fake-quantize the model weights (activation quantizers still need
/// calibrate_activations unless act_bits is 32).
QuantizedModel quantize_model(const NoiseModel& model, int weight_bits, int act_bits,
                              QuantScheme weight_scheme = QuantScheme::minmax_symmetric,
                              QuantScheme act_scheme = QuantScheme::minmax_asymmetric,
                              bool per_channel_weights = false);

struct CalibrationConfig {
    size_t n_calib = 256;    // model evaluations spread uniformly over the grid
    size_t chain_batch = 16; // trajectories carried per evaluation
    double eta = 0.0;
    uint64_t seed = 0;
};

/// Collect per-boundary activation ranges by running the full-precision
/// sampler over the grid and observing every boundary tensor, then fit the
/// activation quantizers. Sets the calibrated flag.
void calibrate_activations(QuantizedModel& qmodel, const Schedule& schedule,
                           const TimestepGrid& grid, const CalibrationConfig& cfg);

/// Forward pass with fake-quantized weights and activations.
Tensor quantized_forward(const QuantizedModel& qmodel, const Tensor& x, const std::vector<double>& t);

int validate_weight_bits(int bits);
int validate_act_bits(int bits);

}  // namespace tacq
