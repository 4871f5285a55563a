#pragma once

#include <cstddef>
#include <vector>

#include "tacq/rng.hpp"
#include "tacq/tensor.hpp"

namespace tacq {

/// Per-timestep constants of the forward noising process. alpha[t] = 1 -
/// beta[t], alpha_bar is the running product, lambda is the half-log-SNR
/// log(sqrt(abar)/sqrt(1-abar)). Immutable after construction.
struct Schedule {
    size_t T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> lambda;

    /// Posterior sampling std for the adjacent step t -> t-1, scaled by eta
    /// (eta = 0 gives the deterministic limit).
    double sigma(size_t t, double eta) const;

    /// Half-log-SNR at a possibly fractional timestep (linear interpolation
    /// between integer neighbors; exact at integers).
    double lambda_at(double t) const;
    /// (sqrt(abar), sqrt(1-abar)) at a possibly fractional timestep. At
    /// fractional t the pair is derived from lambda_at in closed form so
    /// that alpha^2 + sigma^2 = 1 holds exactly.
    void alpha_sigma_at(double t, double& alpha_out, double& sigma_out) const;
};

Schedule make_linear_schedule(size_t T, double beta_start, double beta_end);

/// Descending list of sampler timesteps. `main` holds the model-evaluation
/// timesteps t_0 > t_1 > ...; `mid` (second-order grids only) holds one
/// intermediate point per solver step with t_{i-1} > mid[i-1] > t_i.
struct TimestepGrid {
    std::vector<double> main;
    std::vector<double> mid;

    bool operator==(const TimestepGrid& o) const { return main == o.main && mid == o.mid; }
    void validate(size_t T) const;
};

/// Uniform (rounded linspace) grid over [0, T-1] including t = 0, descending.
TimestepGrid make_ddim_grid(size_t T, size_t steps);

/// Grid for the second-order solver: steps+1 main points plus one
/// lambda-space midpoint per step (fractional timesteps).
TimestepGrid make_dpmpp_grid(const Schedule& schedule, size_t steps);

/// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
Tensor forward_noise(const Schedule& schedule, const Tensor& x0, size_t t, const Tensor& eps);

/// Reverse step x_t -> x_{t-1}:
///   (1/sqrt(alpha_t)) (x_t - beta_t/sqrt(1-abar_t) * eps_hat) + sigma_t(eta) * z.
/// z is always caller-supplied so paired runs can share it.
Tensor ddpm_step(const Schedule& schedule, const Tensor& x_t, const Tensor& eps_hat, size_t t,
                 double eta, const Tensor& z);

/// Constants of one reverse step between consecutive grid points (the last
/// step lands on the clean output, abar_to = 1). The step is the affine map
///   x_next = inv_sqrt_alpha * (x - eps_inner * eps_hat) + sigma * z,
/// so state and estimation discrepancies propagate as
///   dx_next = inv_sqrt_alpha * dx - eps_coef * deps  (shared z),
/// with eps_coef = eps_inner * inv_sqrt_alpha.
struct StepCoeffs {
    double alpha = 0.0;      // abar_from / abar_to
    double beta = 0.0;       // 1 - alpha
    double abar_from = 0.0;  // abar at the evaluated timestep
    double abar_to = 0.0;
    double inv_sqrt_alpha = 0.0;
    double eps_inner = 0.0;
    double eps_coef = 0.0;
    double sigma = 0.0;  // eta-scaled std; eta = 1 recovers the ancestral posterior
};

/// Subsequence-sampler coefficients: x0 prediction re-noised to the next
/// level (deterministic at eta = 0), i.e. eps_inner = sqrt(1-abar_from) -
/// sqrt(alpha * (1-abar_to-sigma^2)). For adjacent steps with eta = 1 this
/// coincides with the ancestral step.
std::vector<StepCoeffs> make_step_coeffs(const Schedule& schedule, const TimestepGrid& grid, double eta);

/// The affine reverse-step kernel shared by ddpm_step and the grid sampler.
Tensor reverse_step(const Tensor& x, const Tensor& eps_hat, const StepCoeffs& c, const Tensor& z);

}  // namespace tacq
