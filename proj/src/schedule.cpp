#include "tacq/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "tacq/errors.hpp"

namespace tacq {

double Schedule::sigma(size_t t, double eta) const {
    if (t >= T) throw ConfigError("sigma: timestep " + std::to_string(t) + " out of range");
    const double abar_prev = (t == 0) ? 1.0 : alpha_bar[t - 1];
    const double beta_tilde = (1.0 - abar_prev) / (1.0 - alpha_bar[t]) * beta[t];
    return eta * std::sqrt(beta_tilde);
}

double Schedule::lambda_at(double t) const {
    if (t < 0.0 || t > static_cast<double>(T - 1))
        throw ConfigError("lambda_at: timestep out of range");
    const double fl = std::floor(t);
    const size_t lo = static_cast<size_t>(fl);
    if (fl == t || lo + 1 >= T) return lambda[lo];
    const double w = t - fl;
    return lambda[lo] + w * (lambda[lo + 1] - lambda[lo]);
}

void Schedule::alpha_sigma_at(double t, double& alpha_out, double& sigma_out) const {
    const double fl = std::floor(t);
    if (fl == t) {
        const double ab = alpha_bar[static_cast<size_t>(fl)];
        alpha_out = std::sqrt(ab);
        sigma_out = std::sqrt(1.0 - ab);
        return;
    }
    const double lam = lambda_at(t);
    // lambda = log(alpha/sigma) with alpha^2 + sigma^2 = 1.
    alpha_out = 1.0 / std::sqrt(1.0 + std::exp(-2.0 * lam));
    sigma_out = 1.0 / std::sqrt(1.0 + std::exp(2.0 * lam));
}

Schedule make_linear_schedule(size_t T, double beta_start, double beta_end) {
    if (T < 2) throw ConfigError("make_linear_schedule: T must be >= 2");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
    Schedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.lambda.resize(T);
    double prod = 1.0;
    for (size_t t = 0; t < T; ++t) {
        s.beta[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t) / static_cast<double>(T - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
        s.lambda[t] = 0.5 * std::log(prod / (1.0 - prod));
    }
    return s;
}

void TimestepGrid::validate(size_t T) const {
    if (main.empty()) throw ConfigError("timestep grid is empty");
    for (double t : main)
        if (t < 0.0 || t > static_cast<double>(T - 1))
            throw ConfigError("timestep grid endpoint outside [0, T-1]");
    for (size_t i = 1; i < main.size(); ++i)
        if (!(main[i] < main[i - 1])) throw ConfigError("timestep grid is not strictly decreasing");
    if (!mid.empty()) {
        if (mid.size() != main.size() - 1)
            throw ConfigError("second-order grid needs one midpoint per step");
        for (size_t i = 0; i < mid.size(); ++i)
            if (!(main[i] > mid[i] && mid[i] > main[i + 1]))
                throw ConfigError("grid midpoints do not interleave the main points");
    }
}

TimestepGrid make_ddim_grid(size_t T, size_t steps) {
    if (steps < 1 || steps > T) throw ConfigError("make_ddim_grid: steps must be in [1, T]");
    TimestepGrid g;
    g.main.resize(steps);
    if (steps == 1) {
        g.main[0] = static_cast<double>(T - 1);
        return g;
    }
    for (size_t i = 0; i < steps; ++i) {
        const double frac = static_cast<double>(steps - 1 - i) / static_cast<double>(steps - 1);
        g.main[i] = std::round(frac * static_cast<double>(T - 1));
    }
    g.validate(T);
    return g;
}

TimestepGrid make_dpmpp_grid(const Schedule& schedule, size_t steps) {
    if (steps < 1 || steps + 1 > schedule.T)
        throw ConfigError("make_dpmpp_grid: steps must be in [1, T-1]");
    TimestepGrid g = make_ddim_grid(schedule.T, steps + 1);
    g.mid.resize(steps);
    for (size_t i = 0; i < steps; ++i) {
        const double lam_mid =
            0.5 * (schedule.lambda_at(g.main[i]) + schedule.lambda_at(g.main[i + 1]));
        // Invert lambda over the bracketing integer timesteps; the linear
        // interpolation in lambda_at maps this fractional t back to lam_mid.
        size_t lo = static_cast<size_t>(g.main[i + 1]);
        size_t hi = static_cast<size_t>(g.main[i]);
        // lambda decreases in t: lambda[lo] >= lam_mid >= lambda[hi].
        size_t tl = lo;
        while (tl + 1 <= hi && schedule.lambda[tl + 1] >= lam_mid) ++tl;
        const double l0 = schedule.lambda[tl];
        const double l1 = schedule.lambda[tl + 1];
        const double w = (l0 - lam_mid) / (l0 - l1);
        g.mid[i] = static_cast<double>(tl) + w;
    }
    g.validate(schedule.T);
    return g;
}

Tensor forward_noise(const Schedule& schedule, const Tensor& x0, size_t t, const Tensor& eps) {
    if (t >= schedule.T) throw ConfigError("forward_noise: timestep out of range");
    if (!x0.same_shape(eps))
        throw ConfigError("forward_noise: shape mismatch " + shape_str(x0.shape) + " vs " + shape_str(eps.shape));
    const double ab = schedule.alpha_bar[t];
    const double c0 = std::sqrt(ab);
    const double c1 = std::sqrt(1.0 - ab);
    Tensor out = x0;
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = c0 * x0.data[i] + c1 * eps.data[i];
    return out;
}

Tensor reverse_step(const Tensor& x, const Tensor& eps_hat, const StepCoeffs& c, const Tensor& z) {
    if (!x.same_shape(eps_hat))
        throw ConfigError("reverse_step: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(eps_hat.shape));
    Tensor out = x;
    if (c.sigma != 0.0) {
        if (!x.same_shape(z))
            throw ConfigError("reverse_step: z shape mismatch " + shape_str(x.shape) + " vs " + shape_str(z.shape));
        for (size_t i = 0; i < out.numel(); ++i)
            out.data[i] = c.inv_sqrt_alpha * (x.data[i] - c.eps_inner * eps_hat.data[i]) + c.sigma * z.data[i];
    } else {
        for (size_t i = 0; i < out.numel(); ++i)
            out.data[i] = c.inv_sqrt_alpha * (x.data[i] - c.eps_inner * eps_hat.data[i]);
    }
    return out;
}

Tensor ddpm_step(const Schedule& schedule, const Tensor& x_t, const Tensor& eps_hat, size_t t,
                 double eta, const Tensor& z) {
    if (t >= schedule.T) throw ConfigError("ddpm_step: timestep " + std::to_string(t) + " out of range");
    const double abar_prev = (t == 0) ? 1.0 : schedule.alpha_bar[t - 1];
    StepCoeffs c;
    c.alpha = schedule.alpha[t];
    c.beta = schedule.beta[t];
    c.abar_from = schedule.alpha_bar[t];
    c.abar_to = abar_prev;
    c.inv_sqrt_alpha = 1.0 / std::sqrt(c.alpha);
    c.eps_inner = c.beta / std::sqrt(1.0 - c.abar_from);
    c.eps_coef = c.eps_inner * c.inv_sqrt_alpha;
    c.sigma = schedule.sigma(t, eta);
    return reverse_step(x_t, eps_hat, c, z);
}

std::vector<StepCoeffs> make_step_coeffs(const Schedule& schedule, const TimestepGrid& grid, double eta) {
    grid.validate(schedule.T);
    std::vector<StepCoeffs> out;
    out.reserve(grid.main.size());
    for (size_t i = 0; i < grid.main.size(); ++i) {
        const double abar_from = schedule.alpha_bar[static_cast<size_t>(grid.main[i])];
        const double abar_to =
            (i + 1 < grid.main.size()) ? schedule.alpha_bar[static_cast<size_t>(grid.main[i + 1])] : 1.0;
        StepCoeffs c;
        c.alpha = abar_from / abar_to;
        c.beta = 1.0 - c.alpha;
        c.abar_from = abar_from;
        c.abar_to = abar_to;
        c.inv_sqrt_alpha = 1.0 / std::sqrt(c.alpha);
        const double var_posterior = (abar_to < 1.0) ? (1.0 - abar_to) / (1.0 - abar_from) * c.beta : 0.0;
        const double sigma2 = eta * eta * var_posterior;
        if (sigma2 > 1.0 - abar_to)
            throw NumericError("make_step_coeffs: eta too large for this grid step");
        c.sigma = std::sqrt(sigma2);
        c.eps_inner = std::sqrt(1.0 - abar_from) - std::sqrt(c.alpha * (1.0 - abar_to - sigma2));
        c.eps_coef = c.eps_inner * c.inv_sqrt_alpha;
        out.push_back(c);
    }
    return out;
}

}  // namespace tacq
