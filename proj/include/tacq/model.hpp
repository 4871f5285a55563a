#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tacq/rng.hpp"
#include "tacq/schedule.hpp"
#include "tacq/tensor.hpp"

namespace tacq {

struct Param {
    std::string name;
    Tensor value;
    bool quantizable = false;  // weight matrices/kernels; biases stay full precision
};

/// Hook applied to every activation flowing into an affine operator
/// ("boundary"). Used for range calibration, fake quantization, and
/// trajectory dumps; the identity hook is a plain pass-through.
struct BoundaryHook {
    virtual ~BoundaryHook() = default;
    virtual Tensor transform(size_t boundary, Tensor v) = 0;
};

struct ForwardHooks {
    const std::vector<Tensor>* weight_override = nullptr;  // aligned with params
    BoundaryHook* boundary = nullptr;
};

/// Tiny noise-estimation network eps_theta(x_t, t).
///
/// mlp: concat(x_flat, sinusoidal time features) -> hidden_layers x
///      hidden_width with SiLU -> linear head, head zero-initialized.
/// conv: 3x3 conv (conv_width) -> +time embedding per channel -> SiLU ->
///      3x3 conv -> SiLU -> 3x3 head conv, head zero-initialized.
struct NoiseModel {
    enum class Arch { mlp, conv };

    Arch arch = Arch::mlp;
    std::array<size_t, 3> io_shape{};  // C,H,W
    size_t time_embed_dim = 32;
    size_t hidden_width = 128;
    size_t hidden_layers = 3;
    size_t conv_width = 32;
    std::vector<Param> params;

    size_t n_boundaries() const;
    size_t flat_dim() const { return io_shape[0] * io_shape[1] * io_shape[2]; }
};

struct ModelOptions {
    size_t hidden_width = 128;
    size_t hidden_layers = 3;
    size_t time_embed_dim = 32;
    size_t conv_width = 32;
};

NoiseModel make_model(NoiseModel::Arch arch, std::array<size_t, 3> io_shape,
                      const ModelOptions& opts, Rng& rng);
NoiseModel::Arch parse_arch(const std::string& name);

/// Sinusoidal features of a (possibly fractional) timestep, dim entries.
std::vector<double> time_features(double t, size_t dim);

/// Batched forward pass; t may be fractional (second-order solver
/// midpoints). Output shape equals x's.
Tensor forward(const NoiseModel& model, const Tensor& x, const std::vector<double>& t,
               const ForwardHooks& hooks = {});

struct LossGrads {
    double loss = 0.0;
    std::vector<Tensor> grads;  // aligned with model.params
};

/// Noise-prediction objective: mean squared error between eps_batch and the
/// model output at x_t = forward_noise(x0, t, eps), with analytic gradients.
LossGrads loss_and_grads(const NoiseModel& model, const Tensor& x0_batch,
                         const std::vector<double>& t_batch, const Tensor& eps_batch,
                         const Schedule& schedule);

struct TrainConfig {
    size_t steps = 5000;
    size_t batch = 128;
    double lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    uint64_t seed = 0;
};

struct AdamState {
    std::vector<Tensor> m, v;
    size_t step = 0;
    void init(const std::vector<Param>& params);
    void update(std::vector<Param>& params, const std::vector<Tensor>& grads, const TrainConfig& cfg);
};

struct TrainResult {
    NoiseModel model;
    std::vector<double> loss_curve;  // per-step training loss
};

TrainResult train(NoiseModel model, const Tensor& dataset, const Schedule& schedule,
                  const TrainConfig& cfg);

/// The ten logged windows of a training curve: mean loss over geometric
/// spans (narrow while the loss falls fast, wide on the plateau).
std::vector<double> loss_curve_windows(const std::vector<double>& curve);

/// Bundled toy datasets. gauss2d/rings2d produce (n,2,1,1); blobs8x8
/// produces (n,1,8,8) with values in [-1,1].
Tensor make_toy_dataset(const std::string& kind, size_t n, uint64_t seed);

}  // namespace tacq
