#include "tacq/sampler.hpp"

#include <chrono>
#include <cmath>

#include "tacq/errors.hpp"

namespace tacq {

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

struct TableView {
    const CorrectionTable* t = nullptr;

    bool active() const { return t != nullptr; }
    bool est_bias() const { return t->config.estimation_bias_only; }
    bool output_row_applied() const {
        return !t->config.estimation_bias_only && !t->config.eq22_literal_placement;
    }
    Tensor k_row(size_t idx) const {
        const size_t C = t->K.shape[1];
        Tensor k({C});
        for (size_t c = 0; c < C; ++c) k.data[c] = t->K.data[idx * C + c];
        return k;
    }
    Tensor b_row(size_t idx) const {
        Tensor b({t->B.shape[1], t->B.shape[2], t->B.shape[3]});
        const size_t chw = b.numel();
        for (size_t i = 0; i < chw; ++i) b.data[i] = t->B.data[idx * chw + i];
        return b;
    }
};

void check_grid_match(const CorrectionTable* table, const TimestepGrid& grid) {
    if (table && !(table->grid == grid))
        throw ConfigError("correction table grid does not match the sampler grid");
}

}  // namespace

SamplerConfig make_sampler_config(const Schedule& schedule, SamplerKind kind, size_t steps,
                                  double eta, const CorrectionTable* table) {
    SamplerConfig cfg;
    cfg.kind = kind;
    cfg.steps = steps;
    cfg.eta = eta;
    cfg.grid = (kind == SamplerKind::ddim) ? make_ddim_grid(schedule.T, steps)
                                           : make_dpmpp_grid(schedule, steps);
    cfg.correction = table;
    return cfg;
}

SampleRun sample_ddim(const NoiseEvaluator& model, const Schedule& schedule, const SamplerConfig& cfg,
                      size_t n, Rng& rng, bool record_trajectory) {
    if (cfg.kind != SamplerKind::ddim) throw ConfigError("sample_ddim: config is not a ddim config");
    cfg.grid.validate(schedule.T);
    check_grid_match(cfg.correction, cfg.grid);
    const auto io = model.io_shape();
    const std::vector<StepCoeffs> coeffs = make_step_coeffs(schedule, cfg.grid, cfg.eta);
    const size_t M = cfg.grid.main.size();
    TableView table{cfg.correction};

    const double t0 = now_seconds();
    SampleRun run;
    run.seed = rng.seed();
    if (record_trajectory) run.trajectory.emplace();

    Tensor x = rng.randn({n, io[0], io[1], io[2]});
    for (size_t i = 0; i < M; ++i) {
        const double t = cfg.grid.main[i];
        if (record_trajectory) {
            run.trajectory->eval_points.push_back(t);
            run.trajectory->x.push_back(x);
        }
        Tensor eps = model.eval(x, std::vector<double>(n, t));
        if (table.active()) {
            apply_channel_scale(eps, table.k_row(i));
            if (table.est_bias()) subtract_bias(eps, table.b_row(i));
        }
        if (record_trajectory) run.trajectory->eps.push_back(eps);
        Tensor z = (coeffs[i].sigma != 0.0) ? rng.randn(x.shape) : Tensor();
        x = reverse_step(x, eps, coeffs[i], z);
        // Produced-state bias correction; the state consumed by evaluation
        // i+1 is the one produced by evaluation i.
        if (table.active() && !table.est_bias()) {
            const bool last = (i + 1 == M);
            if (!last || table.output_row_applied()) subtract_bias(x, table.b_row(i));
        }
    }
    if (record_trajectory) run.trajectory->x.push_back(x);
    run.samples = std::move(x);
    run.wall_seconds = now_seconds() - t0;
    return run;
}

SampleRun sample_ddim_with_dump(const NoiseModel& model, const Schedule& schedule,
                                const SamplerConfig& cfg, size_t n, Rng& rng) {
    struct CaptureHook : BoundaryHook {
        std::vector<Tensor>* slot = nullptr;
        Tensor transform(size_t, Tensor v) override {
            if (slot) slot->push_back(v);
            return v;
        }
    };
    CaptureHook hook;
    FpEvaluator eval(model, &hook);

    cfg.grid.validate(schedule.T);
    check_grid_match(cfg.correction, cfg.grid);
    const std::vector<StepCoeffs> coeffs = make_step_coeffs(schedule, cfg.grid, cfg.eta);
    const size_t M = cfg.grid.main.size();
    const auto io = model.io_shape;

    SampleRun run;
    run.seed = rng.seed();
    run.trajectory.emplace();
    const double t0 = now_seconds();
    Tensor x = rng.randn({n, io[0], io[1], io[2]});
    for (size_t i = 0; i < M; ++i) {
        const double t = cfg.grid.main[i];
        run.trajectory->eval_points.push_back(t);
        run.trajectory->x.push_back(x);
        run.trajectory->activations.emplace_back();
        hook.slot = &run.trajectory->activations.back();
        Tensor eps = eval.eval(x, std::vector<double>(n, t));
        hook.slot = nullptr;
        run.trajectory->eps.push_back(eps);
        Tensor z = (coeffs[i].sigma != 0.0) ? rng.randn(x.shape) : Tensor();
        x = reverse_step(x, eps, coeffs[i], z);
    }
    run.trajectory->x.push_back(x);
    run.samples = std::move(x);
    run.wall_seconds = now_seconds() - t0;
    return run;
}

namespace {

struct DpmppStepVals {
    double lam_prev, lam_s, lam_next, h, r;
    double a_prev, s_prev, a_s, s_s, a_next, s_next;
};

DpmppStepVals dpmpp_step_vals(const Schedule& schedule, const TimestepGrid& grid, size_t i) {
    DpmppStepVals v{};
    const double t_prev = grid.main[i], t_s = grid.mid[i], t_next = grid.main[i + 1];
    v.lam_prev = schedule.lambda_at(t_prev);
    v.lam_s = schedule.lambda_at(t_s);
    v.lam_next = schedule.lambda_at(t_next);
    v.h = v.lam_next - v.lam_prev;
    if (v.h == 0.0) throw NumericError("dpmpp step: degenerate grid (h = 0)");
    v.r = (v.lam_s - v.lam_prev) / v.h;
    schedule.alpha_sigma_at(t_prev, v.a_prev, v.s_prev);
    schedule.alpha_sigma_at(t_s, v.a_s, v.s_s);
    schedule.alpha_sigma_at(t_next, v.a_next, v.s_next);
    return v;
}

// x_theta = (x - sigma * eps) / alpha   (data prediction)
Tensor data_prediction(const Tensor& x, const Tensor& eps, double alpha, double sigma) {
    Tensor out = x;
    for (size_t j = 0; j < out.numel(); ++j) out.data[j] = (x.data[j] - sigma * eps.data[j]) / alpha;
    return out;
}

}  // namespace

Tensor dpmpp_2s_step(const NoiseEvaluator& model, const Schedule& schedule, const Tensor& x, size_t i,
                     const TimestepGrid& grid, const CorrectionTable* table) {
    if (grid.mid.empty()) throw ConfigError("dpmpp_2s_step: grid has no midpoints");
    if (i >= grid.mid.size()) throw ConfigError("dpmpp_2s_step: step index out of range");
    const DpmppStepVals v = dpmpp_step_vals(schedule, grid, i);
    const size_t n = x.shape[0];
    TableView tv{table};

    Tensor eps1 = model.eval(x, std::vector<double>(n, grid.main[i]));
    if (tv.active()) apply_channel_scale(eps1, tv.k_row(2 * i));
    Tensor x_theta1 = data_prediction(x, eps1, v.a_prev, v.s_prev);

    // Midpoint state u_i.
    Tensor u = x;
    const double cu1 = v.s_s / v.s_prev;
    const double cu2 = v.a_s * (std::exp(-v.r * v.h) - 1.0);
    for (size_t j = 0; j < u.numel(); ++j) u.data[j] = cu1 * x.data[j] - cu2 * x_theta1.data[j];

    Tensor eps2 = model.eval(u, std::vector<double>(n, grid.mid[i]));
    if (tv.active()) apply_channel_scale(eps2, tv.k_row(2 * i + 1));
    Tensor x_theta2 = data_prediction(u, eps2, v.a_s, v.s_s);

    const double w2 = 1.0 / (2.0 * v.r);
    const double w1 = 1.0 - w2;
    const double cx1 = v.s_next / v.s_prev;
    const double cx2 = v.a_next * (std::exp(-v.h) - 1.0);
    Tensor out = x;
    for (size_t j = 0; j < out.numel(); ++j) {
        const double d = w1 * x_theta1.data[j] + w2 * x_theta2.data[j];
        out.data[j] = cx1 * x.data[j] - cx2 * d;
    }
    return out;
}

SampleRun sample_dpmpp(const NoiseEvaluator& model, const Schedule& schedule, const SamplerConfig& cfg,
                       size_t n, Rng& rng) {
    if (cfg.kind != SamplerKind::dpmpp_2s) throw ConfigError("sample_dpmpp: config is not a dpmpp_2s config");
    cfg.grid.validate(schedule.T);
    if (cfg.grid.mid.empty()) throw ConfigError("sample_dpmpp: grid has no midpoints");
    check_grid_match(cfg.correction, cfg.grid);
    const auto io = model.io_shape();
    const size_t M = cfg.grid.mid.size();
    TableView table{cfg.correction};

    const double t0 = now_seconds();
    SampleRun run;
    run.seed = rng.seed();
    Tensor x = rng.randn({n, io[0], io[1], io[2]});
    for (size_t i = 0; i < M; ++i) {
        if (cfg.dpmpp_apply_ibc && table.active() && !table.est_bias() && i > 0)
            subtract_bias(x, table.b_row(2 * i - 1));
        x = dpmpp_2s_step(model, schedule, x, i, cfg.grid, cfg.correction);
    }
    if (cfg.dpmpp_apply_ibc && table.active() && !table.est_bias() && table.output_row_applied())
        subtract_bias(x, table.b_row(2 * M - 1));
    run.samples = std::move(x);
    run.wall_seconds = now_seconds() - t0;
    return run;
}

void paired_walk(const NoiseModel& fp_model, const QuantizedModel& qmodel, const Schedule& schedule,
                 const TimestepGrid& grid, SamplerKind kind, double eta, size_t batch, Rng& rng,
                 const PairedCallbacks& cb) {
    grid.validate(schedule.T);
    if (fp_model.io_shape != qmodel.base.io_shape)
        throw ConfigError("paired_walk: models disagree on io shape");
    const auto io = fp_model.io_shape;
    Tensor x_fp = rng.randn({batch, io[0], io[1], io[2]});
    Tensor x_q = x_fp;

    auto eval_both = [&](size_t idx, double t, const Tensor& sfp, Tensor& sq, Tensor& eps_fp,
                         Tensor& eps_q) {
        std::vector<double> tv(batch, t);
        eps_fp = forward(fp_model, sfp, tv);
        eps_q = quantized_forward(qmodel, sq, tv);
        if (cb.on_eval) cb.on_eval(idx, t, sfp, sq, eps_fp, eps_q);
    };

    if (kind == SamplerKind::ddim) {
        const std::vector<StepCoeffs> coeffs = make_step_coeffs(schedule, grid, eta);
        for (size_t i = 0; i < grid.main.size(); ++i) {
            Tensor eps_fp, eps_q;
            eval_both(i, grid.main[i], x_fp, x_q, eps_fp, eps_q);
            Tensor z = (coeffs[i].sigma != 0.0) ? rng.randn(x_fp.shape) : Tensor();
            if (cb.on_z) cb.on_z(i, z);
            x_fp = reverse_step(x_fp, eps_fp, coeffs[i], z);
            x_q = reverse_step(x_q, eps_q, coeffs[i], z);
            if (cb.on_produced) cb.on_produced(i, x_fp, x_q);
        }
        return;
    }

    if (grid.mid.empty()) throw ConfigError("paired_walk: second-order walk needs grid midpoints");
    for (size_t i = 0; i < grid.mid.size(); ++i) {
        const DpmppStepVals v = dpmpp_step_vals(schedule, grid, i);
        Tensor eps_fp, eps_q;
        eval_both(2 * i, grid.main[i], x_fp, x_q, eps_fp, eps_q);
        Tensor xt_fp = data_prediction(x_fp, eps_fp, v.a_prev, v.s_prev);
        Tensor xt_q = data_prediction(x_q, eps_q, v.a_prev, v.s_prev);
        const double cu1 = v.s_s / v.s_prev;
        const double cu2 = v.a_s * (std::exp(-v.r * v.h) - 1.0);
        Tensor u_fp = x_fp, u_q = x_q;
        for (size_t j = 0; j < u_fp.numel(); ++j) {
            u_fp.data[j] = cu1 * x_fp.data[j] - cu2 * xt_fp.data[j];
            u_q.data[j] = cu1 * x_q.data[j] - cu2 * xt_q.data[j];
        }
        if (cb.on_produced) cb.on_produced(2 * i, u_fp, u_q);

        Tensor eps2_fp, eps2_q;
        eval_both(2 * i + 1, grid.mid[i], u_fp, u_q, eps2_fp, eps2_q);
        Tensor xt2_fp = data_prediction(u_fp, eps2_fp, v.a_s, v.s_s);
        Tensor xt2_q = data_prediction(u_q, eps2_q, v.a_s, v.s_s);
        const double w2 = 1.0 / (2.0 * v.r);
        const double w1 = 1.0 - w2;
        const double cx1 = v.s_next / v.s_prev;
        const double cx2 = v.a_next * (std::exp(-v.h) - 1.0);
        for (size_t j = 0; j < x_fp.numel(); ++j) {
            x_fp.data[j] = cx1 * x_fp.data[j] - cx2 * (w1 * xt_fp.data[j] + w2 * xt2_fp.data[j]);
            x_q.data[j] = cx1 * x_q.data[j] - cx2 * (w1 * xt_q.data[j] + w2 * xt2_q.data[j]);
        }
        if (cb.on_produced) cb.on_produced(2 * i + 1, x_fp, x_q);
    }
}

PairedTrace run_paired(const NoiseModel& fp_model, const QuantizedModel& qmodel,
                       const Schedule& schedule, const TimestepGrid& grid, double eta, size_t batch,
                       Rng& rng, const CorrectionTable* table) {
    if (table) check_grid_match(table, grid);
    PairedTrace trace;
    trace.grid = grid;
    trace.eta = eta;
    trace.batch = batch;
    trace.shared_z = true;
    trace.corrected = (table != nullptr);
    TableView tv{table};

    PairedCallbacks cb;
    cb.on_eval = [&](size_t idx, double /*t*/, const Tensor& sfp, const Tensor& sq,
                     const Tensor& eps_fp, Tensor& eps_q) {
        if (trace.x_fp.empty()) {
            // Shared initial state, recorded once.
            trace.x_fp.push_back(sfp);
            trace.x_q.push_back(sq);
        }
        trace.eps_fp.push_back(eps_fp);
        trace.eps_q.push_back(eps_q);
        if (tv.active()) {
            apply_channel_scale(eps_q, tv.k_row(idx));
            if (tv.est_bias()) subtract_bias(eps_q, tv.b_row(idx));
        }
    };
    cb.on_produced = [&](size_t idx, const Tensor& sfp, Tensor& sq) {
        trace.x_fp.push_back(sfp);
        trace.x_q.push_back(sq);  // pre-correction state
        if (tv.active() && !tv.est_bias()) {
            const bool last = (idx + 1 == grid.main.size());
            if (!last || tv.output_row_applied()) subtract_bias(sq, tv.b_row(idx));
        }
    };
    cb.on_z = [&](size_t, const Tensor& z) { trace.z.push_back(z); };

    paired_walk(fp_model, qmodel, schedule, grid, SamplerKind::ddim, eta, batch, rng, cb);
    return trace;
}

}  // namespace tacq
