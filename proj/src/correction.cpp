#include "tacq/correction.hpp"

#include <cmath>

#include "tacq/errors.hpp"
#include "tacq/sampler.hpp"

namespace tacq {

SamplerKind parse_sampler_kind(const std::string& name) {
    if (name == "ddim") return SamplerKind::ddim;
    if (name == "dpmpp_2s") return SamplerKind::dpmpp_2s;
    throw ConfigError("unknown sampler kind '" + name + "' (expected ddim or dpmpp_2s)");
}

void CorrectionConfig::validate() const {
    if (!(lambda1 >= 0.0 && lambda1 < 1.0))
        throw ConfigError("correction: lambda1 must lie in [0,1)");
    if (!(lambda2 > 0.0)) throw ConfigError("correction: lambda2 must be positive");
    if (!(k_threshold >= 0.0)) throw ConfigError("correction: k_threshold must be >= 0");
    if (calib_batch < 1) throw ConfigError("correction: calibration batch must be >= 1");
    if (!(eps_floor >= 0.0)) throw ConfigError("correction: eps_floor must be >= 0");
}

std::vector<double> CorrectionTable::eval_points() const {
    if (grid.mid.empty()) return grid.main;
    std::vector<double> pts;
    pts.reserve(2 * grid.mid.size());
    for (size_t i = 0; i < grid.mid.size(); ++i) {
        pts.push_back(grid.main[i]);
        pts.push_back(grid.mid[i]);
    }
    return pts;
}

size_t CorrectionTable::index_of(double t) const {
    const std::vector<double> pts = eval_points();
    for (size_t i = 0; i < pts.size(); ++i)
        if (std::fabs(pts[i] - t) < 1e-9) return i;
    throw ConfigError("timestep " + std::to_string(t) + " is not on the correction table's grid");
}

CorrectionTable make_identity_table(const TimestepGrid& grid, SamplerKind kind,
                                    std::array<size_t, 3> io_shape) {
    CorrectionTable t;
    t.grid = grid;
    t.sampler = kind;
    const size_t P = grid.mid.empty() ? grid.main.size() : 2 * grid.mid.size();
    t.K = Tensor::full({P, io_shape[0]}, 1.0);
    t.B = Tensor::zeros({P, io_shape[0], io_shape[1], io_shape[2]});
    t.tau.assign(P, 0.0);
    t.mask_coverage.assign(P, 1.0);
    return t;
}

namespace {

void check_chw(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rank() != 3 || !a.same_shape(b))
        throw ConfigError(std::string(op) + ": expected matching [C,H,W] tensors, got " +
                          shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace

double rqnsr(const Tensor& eps_hat, const Tensor& eps, size_t channel) {
    check_chw(eps_hat, eps, "rqnsr");
    if (channel >= eps.shape[0]) throw ConfigError("rqnsr: channel out of range");
    const size_t hw = eps.shape[1] * eps.shape[2];
    const double* e = eps.data.data() + channel * hw;
    const double* eh = eps_hat.data.data() + channel * hw;
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < hw; ++i) {
        const double d = eh[i] - e[i];
        num += d * d;
        den += e[i] * e[i];
    }
    if (!(den > 0.0))
        throw NumericError("rqnsr: reference channel " + std::to_string(channel) +
                           " has zero power, ratio undefined");
    return std::sqrt(num / den);
}

double reconstruction_loss(double k, const Tensor& eps_hat, const Tensor& eps, size_t channel,
                           const CorrectionConfig& cfg, const Tensor* mask) {
    check_chw(eps_hat, eps, "reconstruction_loss");
    if (mask) check_chw(*mask, eps, "reconstruction_loss");
    if (channel >= eps.shape[0]) throw ConfigError("reconstruction_loss: channel out of range");
    const size_t hw = eps.shape[1] * eps.shape[2];
    const double* e = eps.data.data() + channel * hw;
    const double* eh = eps_hat.data.data() + channel * hw;
    const double* m = mask ? mask->data.data() + channel * hw : nullptr;

    size_t supp = 0;
    double se = 0.0;                      // squared error over the support
    double se_rq = 0.0, pow_rq = 0.0;     // rQNSR statistics over pixels above the floor
    for (size_t i = 0; i < hw; ++i) {
        if (m && m[i] == 0.0) continue;
        ++supp;
        const double d = k * eh[i] - e[i];
        se += d * d;
        if (std::fabs(e[i]) > cfg.eps_floor) {
            se_rq += d * d;
            pow_rq += e[i] * e[i];
        }
    }
    if (supp == 0)
        throw NumericError("reconstruction_loss: empty masked support on channel " +
                           std::to_string(channel));
    double loss = (1.0 - cfg.lambda1) * se / static_cast<double>(supp);
    if (pow_rq > 0.0) loss += cfg.lambda1 * se_rq / pow_rq;
    loss += cfg.lambda2 * (k - 1.0) * (k - 1.0);
    return loss;
}

std::vector<double> solve_k(const Tensor& eps_hat, const Tensor& eps, const Tensor& mask,
                            const CorrectionConfig& cfg) {
    cfg.validate();
    if (eps.rank() != 4 || !eps.same_shape(eps_hat) || !eps.same_shape(mask))
        throw ConfigError("solve_k: expected matching [S,C,H,W] tensors, got " +
                          shape_str(eps_hat.shape) + " vs " + shape_str(eps.shape));
    const size_t S = eps.shape[0], C = eps.shape[1];
    const size_t hw = eps.shape[2] * eps.shape[3];
    std::vector<double> k(C, 1.0);

    // The loss is quadratic in k: per sample the MSE term contributes
    // (sum eh^2) k^2 - 2 (sum eh*e) k over the masked support (normalized by
    // the support size) and the rQNSR term the same ratios over the
    // above-floor support (normalized by sum e^2); the regularizer adds
    // lambda2 (k-1)^2. The minimizer is the ratio of the averaged linear
    // to quadratic coefficients.
    for (size_t c = 0; c < C; ++c) {
        double acc_a = 0.0, acc_b = 0.0;
        size_t n_valid = 0;
        for (size_t s = 0; s < S; ++s) {
            const double* e = eps.data.data() + (s * C + c) * hw;
            const double* eh = eps_hat.data.data() + (s * C + c) * hw;
            const double* m = mask.data.data() + (s * C + c) * hw;
            size_t supp = 0;
            double a2 = 0.0, ae = 0.0;
            double a2r = 0.0, aer = 0.0, pr = 0.0;
            for (size_t i = 0; i < hw; ++i) {
                if (m[i] == 0.0) continue;
                ++supp;
                a2 += eh[i] * eh[i];
                ae += eh[i] * e[i];
                if (std::fabs(e[i]) > cfg.eps_floor) {
                    a2r += eh[i] * eh[i];
                    aer += eh[i] * e[i];
                    pr += e[i] * e[i];
                }
            }
            if (supp == 0) continue;
            double a = (1.0 - cfg.lambda1) * a2 / static_cast<double>(supp);
            double b = (1.0 - cfg.lambda1) * ae / static_cast<double>(supp);
            if (pr > 0.0) {
                a += cfg.lambda1 * a2r / pr;
                b += cfg.lambda1 * aer / pr;
            }
            acc_a += a;
            acc_b += b;
            ++n_valid;
        }
        if (n_valid == 0) continue;  // keep the fallback k = 1
        const double A = acc_a / static_cast<double>(n_valid) + cfg.lambda2;
        const double Bc = acc_b / static_cast<double>(n_valid) + cfg.lambda2;
        const double kc = Bc / A;
        if (!std::isfinite(kc))
            throw NumericError("solve_k: non-finite statistics on channel " + std::to_string(c));
        k[c] = kc;
    }
    return k;
}

double compute_threshold(const Tensor& eps, double k_threshold) {
    double acc = 0.0;
    for (double v : eps.data) acc += std::fabs(v);
    return k_threshold * acc / static_cast<double>(eps.numel());
}

Tensor build_mask(const Tensor& eps, double tau, bool signed_mask) {
    Tensor m = eps;
    if (signed_mask) {
        for (double& v : m.data) v = (v > tau) ? 1.0 : 0.0;
    } else {
        for (double& v : m.data) v = (std::fabs(v) > tau) ? 1.0 : 0.0;
    }
    return m;
}

Tensor compute_bias(const Tensor& x_hat_batch, const Tensor& x_batch) {
    if (x_hat_batch.rank() != 4 || !x_hat_batch.same_shape(x_batch))
        throw ConfigError("compute_bias: shape mismatch " + shape_str(x_hat_batch.shape) + " vs " +
                          shape_str(x_batch.shape));
    const size_t S = x_batch.shape[0];
    const size_t chw = x_batch.numel() / S;
    Tensor b({x_batch.shape[1], x_batch.shape[2], x_batch.shape[3]});
    for (size_t s = 0; s < S; ++s)
        for (size_t i = 0; i < chw; ++i) b.data[i] += x_hat_batch.data[s * chw + i] - x_batch.data[s * chw + i];
    const double inv = 1.0 / static_cast<double>(S);
    for (double& v : b.data) v *= inv;
    return b;
}

void apply_channel_scale(Tensor& batch, const Tensor& k_row) {
    const size_t S = batch.shape[0], C = batch.shape[1];
    const size_t hw = batch.shape[2] * batch.shape[3];
    for (size_t s = 0; s < S; ++s)
        for (size_t c = 0; c < C; ++c) {
            const double k = k_row.data[c];
            double* p = batch.data.data() + (s * C + c) * hw;
            for (size_t i = 0; i < hw; ++i) p[i] *= k;
        }
}

void subtract_bias(Tensor& batch, const Tensor& bias) {
    const size_t S = batch.shape[0];
    const size_t chw = batch.numel() / S;
    for (size_t s = 0; s < S; ++s) {
        double* p = batch.data.data() + s * chw;
        for (size_t i = 0; i < chw; ++i) p[i] -= bias.data[i];
    }
}

PrecalcResult precalculate(const NoiseModel& fp_model, const QuantizedModel& qmodel,
                           const Schedule& schedule, const TimestepGrid& grid, SamplerKind kind,
                           double eta, const CorrectionConfig& cfg, Rng& rng) {
    cfg.validate();
    if (fp_model.io_shape != qmodel.base.io_shape)
        throw ConfigError("precalculate: models disagree on io shape");
    if (!qmodel.calibrated) throw ConfigError("precalculate: quantized model is not calibrated");

    const auto io = fp_model.io_shape;
    PrecalcResult out;
    out.table = make_identity_table(grid, kind, io);
    out.table.config = cfg;
    const size_t P = out.table.rows();
    out.diag.post_correction_mean_abs.assign(P, 0.0);

    PairedCallbacks cb;
    cb.on_eval = [&](size_t idx, double /*t*/, const Tensor& /*x_fp*/, const Tensor& /*x_q*/,
                     const Tensor& eps_fp, Tensor& eps_q) {
        try {
            const bool active_step = !cfg.first_step_only || idx == 0;
            const double tau = compute_threshold(eps_fp, cfg.k_threshold);
            const Tensor mask = build_mask(eps_fp, tau, cfg.signed_mask);
            out.table.tau[idx] = tau;
            out.table.mask_coverage[idx] = mean(mask);
            if (cfg.apply_ner && active_step) {
                const std::vector<double> k = solve_k(eps_q, eps_fp, mask, cfg);
                for (size_t c = 0; c < k.size(); ++c) out.table.K.data[idx * k.size() + c] = k[c];
            }
            Tensor k_row({io[0]});
            for (size_t c = 0; c < io[0]; ++c) k_row.data[c] = out.table.K.data[idx * io[0] + c];
            apply_channel_scale(eps_q, k_row);
            if (cfg.estimation_bias_only && active_step) {
                const Tensor ebias = compute_bias(eps_q, eps_fp);
                const size_t chw = ebias.numel();
                for (size_t i = 0; i < chw; ++i) out.table.B.data[idx * chw + i] = ebias.data[i];
                if (cfg.sequential_coupling) subtract_bias(eps_q, ebias);
            }
        } catch (const NumericError& e) {
            throw NumericError("precalculate at evaluation " + std::to_string(idx) + ": " + e.what());
        }
    };
    cb.on_produced = [&](size_t idx, const Tensor& x_fp, Tensor& x_q) {
        try {
            const bool active_step = !cfg.first_step_only || idx == 0;
            if (!cfg.estimation_bias_only && cfg.apply_ibc && active_step) {
                const Tensor bias = compute_bias(x_q, x_fp);
                const size_t chw = bias.numel();
                for (size_t i = 0; i < chw; ++i) out.table.B.data[idx * chw + i] = bias.data[i];
                if (cfg.sequential_coupling) subtract_bias(x_q, bias);
            }
            const Tensor residual = compute_bias(x_q, x_fp);
            double m = 0.0;
            for (double v : residual.data) m = std::max(m, std::fabs(v));
            out.diag.post_correction_mean_abs[idx] = m;
        } catch (const NumericError& e) {
            throw NumericError("precalculate at step " + std::to_string(idx) + ": " + e.what());
        }
    };

    paired_walk(fp_model, qmodel, schedule, grid, kind, eta, cfg.calib_batch, rng, cb);
    return out;
}

Tensor corrected_eps(const QuantizedModel& qmodel, const CorrectionTable& table, const Tensor& x_hat,
                     double t) {
    const size_t idx = table.index_of(t);
    const size_t C = table.K.shape[1];
    const size_t chw = table.B.numel() / table.rows();
    Tensor k_row({C});
    for (size_t c = 0; c < C; ++c) k_row.data[c] = table.K.data[idx * C + c];
    Tensor b_row({table.B.shape[1], table.B.shape[2], table.B.shape[3]});

    const std::vector<double> tvec(x_hat.shape[0], t);
    if (table.config.estimation_bias_only) {
        Tensor eps = quantized_forward(qmodel, x_hat, tvec);
        apply_channel_scale(eps, k_row);
        for (size_t i = 0; i < chw; ++i) b_row.data[i] = table.B.data[idx * chw + i];
        subtract_bias(eps, b_row);
        return eps;
    }
    Tensor x = x_hat;
    if (idx > 0) {
        // The state at evaluation idx was produced by evaluation idx-1.
        for (size_t i = 0; i < chw; ++i) b_row.data[i] = table.B.data[(idx - 1) * chw + i];
        subtract_bias(x, b_row);
    }
    Tensor eps = quantized_forward(qmodel, x, tvec);
    apply_channel_scale(eps, k_row);
    return eps;
}

}  // namespace tacq
