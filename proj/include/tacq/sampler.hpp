#pragma once

#include <functional>
#include <optional>

#include "tacq/correction.hpp"
#include "tacq/model.hpp"
#include "tacq/quant.hpp"
#include "tacq/schedule.hpp"

namespace tacq {

/// Uniform handle over a full-precision or quantized noise model.
class NoiseEvaluator {
public:
    virtual ~NoiseEvaluator() = default;
    virtual Tensor eval(const Tensor& x, const std::vector<double>& t) const = 0;
    virtual std::array<size_t, 3> io_shape() const = 0;
};

class FpEvaluator : public NoiseEvaluator {
public:
    explicit FpEvaluator(const NoiseModel& m, BoundaryHook* hook = nullptr) : m_(&m), hook_(hook) {}
    Tensor eval(const Tensor& x, const std::vector<double>& t) const override {
        ForwardHooks h;
        h.boundary = hook_;
        return forward(*m_, x, t, h);
    }
    std::array<size_t, 3> io_shape() const override { return m_->io_shape; }

private:
    const NoiseModel* m_;
    BoundaryHook* hook_;
};

class QuantEvaluator : public NoiseEvaluator {
public:
    explicit QuantEvaluator(const QuantizedModel& m) : m_(&m) {}
    Tensor eval(const Tensor& x, const std::vector<double>& t) const override {
        return quantized_forward(*m_, x, t);
    }
    std::array<size_t, 3> io_shape() const override { return m_->base.io_shape; }

private:
    const QuantizedModel* m_;
};

struct SamplerConfig {
    SamplerKind kind = SamplerKind::ddim;
    size_t steps = 100;
    double eta = 0.0;
    TimestepGrid grid;
    const CorrectionTable* correction = nullptr;
    bool dpmpp_apply_ibc = false;  // opt-in: the 2S solver normally applies K only
};

SamplerConfig make_sampler_config(const Schedule& schedule, SamplerKind kind, size_t steps,
                                  double eta, const CorrectionTable* table = nullptr);

/// Captures every state (and optionally boundary activations) along a
/// single-lane sampling run, for diagnostics and histograms.
struct TrajectoryDump {
    std::vector<double> eval_points;
    std::vector<Tensor> x;                           // state entering each evaluation, then the output
    std::vector<Tensor> eps;                         // estimate at each evaluation
    std::vector<std::vector<Tensor>> activations;    // [eval][boundary], captured via hooks
};

struct SampleRun {
    Tensor samples;  // [n, C, H, W]
    uint64_t seed = 0;
    double wall_seconds = 0.0;
    std::optional<TrajectoryDump> trajectory;
};

/// Reverse sampling over the grid with the coarsened ancestral step; with a
/// correction table, every noise estimate is rescaled by K and every
/// produced state is bias-corrected with its B row (the final output too,
/// unless the table carries the literal-placement flag).
SampleRun sample_ddim(const NoiseEvaluator& model, const Schedule& schedule, const SamplerConfig& cfg,
                      size_t n, Rng& rng, bool record_trajectory = false);

/// Full-precision sampling run that additionally captures every boundary
/// activation per evaluation (feeds the histogram tooling).
SampleRun sample_ddim_with_dump(const NoiseModel& model, const Schedule& schedule,
                                const SamplerConfig& cfg, size_t n, Rng& rng);

/// One step (index i) of the second-order solver in half-log-SNR time, with
/// an evaluation at the step's lambda midpoint. K rescales both estimates
/// when a table is present.
Tensor dpmpp_2s_step(const NoiseEvaluator& model, const Schedule& schedule, const Tensor& x, size_t i,
                     const TimestepGrid& grid, const CorrectionTable* table = nullptr);

SampleRun sample_dpmpp(const NoiseEvaluator& model, const Schedule& schedule, const SamplerConfig& cfg,
                       size_t n, Rng& rng);

/// Callbacks of the paired full-precision / quantized walk. on_eval may
/// rescale or shift eps_q in place; on_produced may shift x_q in place
/// (sequential calibration coupling).
struct PairedCallbacks {
    std::function<void(size_t eval_idx, double t, const Tensor& x_fp, const Tensor& x_q,
                       const Tensor& eps_fp, Tensor& eps_q)>
        on_eval;
    std::function<void(size_t eval_idx, const Tensor& x_fp, Tensor& x_q)> on_produced;
    std::function<void(size_t eval_idx, const Tensor& z)> on_z;  // ddim only
};

/// Lock-stepped walk of both lanes from shared initial noise with shared
/// per-step z. Drives pre-calculation and paired diagnostics.
void paired_walk(const NoiseModel& fp_model, const QuantizedModel& qmodel, const Schedule& schedule,
                 const TimestepGrid& grid, SamplerKind kind, double eta, size_t batch, Rng& rng,
                 const PairedCallbacks& cb);

/// Paired ddim trajectories recorded into a PairedTrace; with a table the
/// quantized lane advances corrected (recorded states are pre-correction).
PairedTrace run_paired(const NoiseModel& fp_model, const QuantizedModel& qmodel,
                       const Schedule& schedule, const TimestepGrid& grid, double eta, size_t batch,
                       Rng& rng, const CorrectionTable* table = nullptr);

}  // namespace tacq
