#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tacq/quant.hpp"
#include "tacq/schedule.hpp"
#include "tacq/tensor.hpp"

namespace tacq {

enum class SamplerKind { ddim, dpmpp_2s };
SamplerKind parse_sampler_kind(const std::string& name);

/// Hyperparameters of the timestep-aware correction. lambda1 weights the
/// relative-error (rQNSR) term against the mean squared error, lambda2 is
/// the pull-to-one regularizer; together they keep the per-channel
/// reconstruction loss strictly convex (lambda1 < 1, lambda2 > 0).
struct CorrectionConfig {
    double lambda1 = 0.5;
    double lambda2 = 1e-2;
    double k_threshold = 2.0;
    size_t calib_batch = 64;
    double eps_floor = 1e-8;  // pixels with |eps| at or below are left out of rQNSR statistics

    bool apply_ner = true;
    bool apply_ibc = true;
    bool first_step_only = false;
    bool estimation_bias_only = false;   // shift the noise estimate's mean instead of the state
    bool eq22_literal_placement = false; // no bias correction of the final output
    bool signed_mask = false;            // mask on eps > tau instead of |eps| > tau
    bool sequential_coupling = true;     // calibration lane advances already corrected

    void validate() const;
};

/// Pre-calculated correction tables. Row p corresponds to the p-th model
/// evaluation of the sampler grid: K[p] scales the noise estimate
/// channel-wise at that evaluation; B[p] is the batch-mean bias of the
/// state produced right after it (subtracted when that state is next
/// consumed, and from the final output). In estimation-bias mode B[p]
/// instead holds the mean bias of the (scaled) noise estimate itself.
struct CorrectionTable {
    Tensor K;                           // [P, C]
    Tensor B;                           // [P, C, H, W]
    std::vector<double> tau;            // [P]
    std::vector<double> mask_coverage;  // [P] fraction of pixels kept by the mask
    CorrectionConfig config;
    TimestepGrid grid;
    SamplerKind sampler = SamplerKind::ddim;

    size_t rows() const { return K.shape.empty() ? 0 : K.shape[0]; }
    /// Flat descending list of evaluation timesteps (main points for ddim;
    /// interleaved main/mid for the second-order solver).
    std::vector<double> eval_points() const;
    size_t index_of(double t) const;
};

CorrectionTable make_identity_table(const TimestepGrid& grid, SamplerKind kind,
                                    std::array<size_t, 3> io_shape);

/// Inverse root quantization-to-noise ratio of one channel:
/// sqrt(sum (eps_hat - eps)^2 / sum eps^2) over the channel's pixels.
double rqnsr(const Tensor& eps_hat, const Tensor& eps, size_t channel);

/// Per-channel reconstruction loss of the scaling coefficient k on one
/// sample: (1-lambda1) * MSE(k*eps_hat, eps) + lambda1 * rQNSR(k*eps_hat,
/// eps)^2 + lambda2 * (k-1)^2, restricted to the masked pixels (null mask
/// keeps everything). Strictly convex in k.
double reconstruction_loss(double k, const Tensor& eps_hat, const Tensor& eps, size_t channel,
                           const CorrectionConfig& cfg, const Tensor* mask = nullptr);

/// Closed-form minimizer of the batch-mean reconstruction loss per channel.
/// eps_hat/eps/mask are [S,C,H,W]; channels whose masked support is empty
/// in every sample fall back to k = 1.
std::vector<double> solve_k(const Tensor& eps_hat, const Tensor& eps, const Tensor& mask,
                            const CorrectionConfig& cfg);

/// tau = k_threshold * mean |eps| over batch, channels and pixels.
double compute_threshold(const Tensor& eps, double k_threshold);

/// 0/1 mask, 1 where |eps| > tau (or eps > tau with signed_mask).
Tensor build_mask(const Tensor& eps, double tau, bool signed_mask);

/// Batch-mean discrepancy B = mean_s (x_hat - x), shape [C,H,W].
Tensor compute_bias(const Tensor& x_hat_batch, const Tensor& x_batch);

// Broadcast helpers used by the samplers.
void apply_channel_scale(Tensor& batch, const Tensor& k_row);      // [S,C,H,W] *= k[C]
void subtract_bias(Tensor& batch, const Tensor& bias);             // [S,C,H,W] -= bias[C,H,W]

/// Lock-stepped full-precision / quantized trajectories sharing the initial
/// noise and every per-step z (ddim chains only).
struct PairedTrace {
    TimestepGrid grid;
    double eta = 0.0;
    bool shared_z = true;
    bool corrected = false;  // quantized lane advanced with a table applied
    size_t batch = 0;
    std::vector<Tensor> x_fp, x_q;      // one state per evaluation point, plus the output
    std::vector<Tensor> eps_fp, eps_q;  // one estimate per evaluation point
    std::vector<Tensor> z;              // per step; empty tensor where no noise was injected
};

struct PrecalcDiagnostics {
    // Largest elementwise |batch-mean(x_q - x_fp)| after each production,
    // i.e. the residual input bias the next step will see.
    std::vector<double> post_correction_mean_abs;
};

struct PrecalcResult {
    CorrectionTable table;
    PrecalcDiagnostics diag;
};

/// Algorithm: run cfg.calib_batch paired trajectories from shared noise; at
/// every model evaluation solve K from the masked estimate pair and rescale
/// the quantized lane's estimate; after every sampler step measure the
/// batch-mean state bias B and (in sequential mode) advance the quantized
/// lane already corrected.
PrecalcResult precalculate(const NoiseModel& fp_model, const QuantizedModel& qmodel,
                           const Schedule& schedule, const TimestepGrid& grid, SamplerKind kind,
                           double eta, const CorrectionConfig& cfg, Rng& rng);

/// Corrected noise estimate at timestep t (must lie on the table's grid):
/// the state is bias-corrected with the row that produced it, the estimate
/// is evaluated on the corrected state and scaled channel-wise by K. In
/// estimation-bias mode the state is left untouched and the estimate's mean
/// is shifted instead.
Tensor corrected_eps(const QuantizedModel& qmodel, const CorrectionTable& table, const Tensor& x_hat,
                     double t);

}  // namespace tacq
