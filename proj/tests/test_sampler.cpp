#include <doctest.h>

#include <cmath>

#include "tacq/correction.hpp"
#include "tacq/quant.hpp"
#include "tacq/sampler.hpp"
#include "tacq/schedule.hpp"

using namespace tacq;

namespace {

struct SamplerFixture {
    Schedule schedule = make_linear_schedule(200, 1e-4, 0.02);
    NoiseModel model;

    SamplerFixture() {
        Rng rng(60);
        model = make_model(NoiseModel::Arch::mlp, {2, 1, 1}, {.hidden_width = 24, .hidden_layers = 2}, rng);
        for (Param& p : model.params)
            for (double& v : p.value.data) v += 0.08 * rng.normal();
    }

    QuantizedModel quantized(int wb, int ab) const {
        QuantizedModel qm = quantize_model(model, wb, ab);
        CalibrationConfig cal;
        cal.n_calib = 40;
        cal.seed = 5;
        calibrate_activations(qm, schedule, make_ddim_grid(schedule.T, 10), cal);
        return qm;
    }
};

// Scalar linear model: eps(x, t) = c * x, timestep-independent.
class LinearEvaluator : public NoiseEvaluator {
public:
    explicit LinearEvaluator(double c) : c_(c) {}
    Tensor eval(const Tensor& x, const std::vector<double>&) const override { return scale(x, c_); }
    std::array<size_t, 3> io_shape() const override { return {1, 1, 1}; }

private:
    double c_;
};

// First-order solver in half-log-SNR time (data-prediction form) on a
// lambda-uniform grid; the fine-step reference for the order check.
double first_order_reference(const LinearEvaluator& model, const Schedule& s, double x0, size_t steps) {
    const double lam_lo = s.lambda[s.T - 1];
    const double lam_hi = s.lambda[0];
    Tensor x({1, 1, 1, 1}, {x0});
    double lam_prev = lam_lo;
    for (size_t i = 1; i <= steps; ++i) {
        const double lam = lam_lo + (lam_hi - lam_lo) * static_cast<double>(i) / static_cast<double>(steps);
        const double a_prev = 1.0 / std::sqrt(1.0 + std::exp(-2.0 * lam_prev));
        const double s_prev = 1.0 / std::sqrt(1.0 + std::exp(2.0 * lam_prev));
        const double a_cur = 1.0 / std::sqrt(1.0 + std::exp(-2.0 * lam));
        const double s_cur = 1.0 / std::sqrt(1.0 + std::exp(2.0 * lam));
        const double h = lam - lam_prev;
        Tensor eps = model.eval(x, {0.0});
        const double xtheta = (x.data[0] - s_prev * eps.data[0]) / a_prev;
        x.data[0] = (s_cur / s_prev) * x.data[0] - a_cur * (std::exp(-h) - 1.0) * xtheta;
        lam_prev = lam;
    }
    return x.data[0];
}

double solver_error(const LinearEvaluator& model, const Schedule& s, double x0, size_t M, double ref) {
    TimestepGrid grid = make_dpmpp_grid(s, M);
    Tensor x({1, 1, 1, 1}, {x0});
    for (size_t i = 0; i < M; ++i) x = dpmpp_2s_step(model, s, x, i, grid);
    return std::fabs(x.data[0] - ref);
}

}  // namespace

TEST_CASE("ddim sampling is deterministic and shape-correct") {
    SamplerFixture f;
    FpEvaluator eval(f.model);
    SamplerConfig cfg = make_sampler_config(f.schedule, SamplerKind::ddim, 10, 0.0);
    Rng r1(9), r2(9);
    SampleRun a = sample_ddim(eval, f.schedule, cfg, 8, r1);
    SampleRun b = sample_ddim(eval, f.schedule, cfg, 8, r2);
    CHECK(a.samples.shape == std::vector<size_t>{8, 2, 1, 1});
    CHECK(a.samples.data == b.samples.data);
    CHECK(a.samples.all_finite());
}

TEST_CASE("identity correction table is transparent for ddim") {
    SamplerFixture f;
    QuantizedModel qm = f.quantized(3, 8);
    QuantEvaluator eval(qm);
    SamplerConfig cfg = make_sampler_config(f.schedule, SamplerKind::ddim, 10, 0.0);
    CorrectionTable identity = make_identity_table(cfg.grid, SamplerKind::ddim, f.model.io_shape);
    SamplerConfig cfg_tab = cfg;
    cfg_tab.correction = &identity;
    Rng r1(4), r2(4);
    SampleRun plain = sample_ddim(eval, f.schedule, cfg, 6, r1);
    SampleRun with_table = sample_ddim(eval, f.schedule, cfg_tab, 6, r2);
    CHECK(plain.samples.data == with_table.samples.data);
}

TEST_CASE("identity correction table is transparent for dpmpp") {
    SamplerFixture f;
    QuantizedModel qm = f.quantized(3, 8);
    QuantEvaluator eval(qm);
    SamplerConfig cfg = make_sampler_config(f.schedule, SamplerKind::dpmpp_2s, 8, 0.0);
    CorrectionTable identity = make_identity_table(cfg.grid, SamplerKind::dpmpp_2s, f.model.io_shape);
    SamplerConfig cfg_tab = cfg;
    cfg_tab.correction = &identity;
    Rng r1(4), r2(4);
    SampleRun plain = sample_dpmpp(eval, f.schedule, cfg, 6, r1);
    SampleRun with_table = sample_dpmpp(eval, f.schedule, cfg_tab, 6, r2);
    CHECK(plain.samples.data == with_table.samples.data);
}

TEST_CASE("grid mismatch between table and sampler is rejected") {
    SamplerFixture f;
    QuantizedModel qm = f.quantized(3, 8);
    QuantEvaluator eval(qm);
    SamplerConfig cfg = make_sampler_config(f.schedule, SamplerKind::ddim, 10, 0.0);
    CorrectionTable other =
        make_identity_table(make_ddim_grid(f.schedule.T, 12), SamplerKind::ddim, f.model.io_shape);
    cfg.correction = &other;
    Rng rng(1);
    CHECK_THROWS_AS(sample_ddim(eval, f.schedule, cfg, 2, rng), ConfigError);
}

TEST_CASE("eta controls stochasticity") {
    SamplerFixture f;
    FpEvaluator eval(f.model);
    SamplerConfig det = make_sampler_config(f.schedule, SamplerKind::ddim, 10, 0.0);
    SamplerConfig sto = make_sampler_config(f.schedule, SamplerKind::ddim, 10, 1.0);
    Rng r1(3), r2(3), r3(7);
    Tensor a = sample_ddim(eval, f.schedule, det, 4, r1).samples;
    Tensor b = sample_ddim(eval, f.schedule, sto, 4, r2).samples;
    Tensor c = sample_ddim(eval, f.schedule, sto, 4, r3).samples;
    CHECK(a.data != b.data);  // noise injected
    CHECK(b.data != c.data);  // seed-dependent
}

TEST_CASE("dpmpp step with zero noise prediction reduces to the closed-form affine map") {
    Schedule s = make_linear_schedule(100, 1e-3, 0.02);
    TimestepGrid grid = make_dpmpp_grid(s, 4);
    LinearEvaluator zero(0.0);
    Tensor x({1, 1, 1, 1}, {1.7});
    Tensor y = dpmpp_2s_step(zero, s, x, 0, grid);

    // With eps = 0: x_theta = x/alpha at both evaluations, and the update
    // composes the two exponential-integrator lines directly.
    const double lam_prev = s.lambda_at(grid.main[0]);
    const double lam_s = s.lambda_at(grid.mid[0]);
    const double lam_next = s.lambda_at(grid.main[1]);
    const double h = lam_next - lam_prev;
    const double r = (lam_s - lam_prev) / h;
    double a_prev, s_prev, a_s, s_s, a_next, s_next;
    s.alpha_sigma_at(grid.main[0], a_prev, s_prev);
    s.alpha_sigma_at(grid.mid[0], a_s, s_s);
    s.alpha_sigma_at(grid.main[1], a_next, s_next);
    const double xt1 = x.data[0] / a_prev;
    const double u = (s_s / s_prev) * x.data[0] - a_s * (std::exp(-r * h) - 1.0) * xt1;
    const double xt2 = u / a_s;
    const double w2 = 1.0 / (2.0 * r);
    const double d = (1.0 - w2) * xt1 + w2 * xt2;
    const double expected = (s_next / s_prev) * x.data[0] - a_next * (std::exp(-h) - 1.0) * d;
    CHECK(y.data[0] == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("dpmpp sampling of one step equals the single step call") {
    SamplerFixture f;
    FpEvaluator eval(f.model);
    SamplerConfig cfg = make_sampler_config(f.schedule, SamplerKind::dpmpp_2s, 1, 0.0);
    Rng r1(5);
    SampleRun run = sample_dpmpp(eval, f.schedule, cfg, 3, r1);
    Rng r2(5);
    Tensor x0 = r2.randn({3, 2, 1, 1});
    Tensor stepped = dpmpp_2s_step(eval, f.schedule, x0, 0, cfg.grid);
    CHECK(run.samples.data == stepped.data);
}

TEST_CASE("dpmpp is second order on the linear testbed") {
    Schedule s = make_linear_schedule(1000, 1e-4, 0.02);
    LinearEvaluator model(0.4);
    const double x0 = 1.3;
    const double ref = first_order_reference(model, s, x0, 10000);

    std::vector<double> log_m, log_e;
    for (size_t M : {5, 10, 20, 40}) {
        const double err = solver_error(model, s, x0, M, ref);
        CHECK(err > 0.0);
        log_m.push_back(std::log(static_cast<double>(M)));
        log_e.push_back(std::log(err));
    }
    // Least-squares slope of log error vs log steps.
    double mx = 0, my = 0;
    for (size_t i = 0; i < 4; ++i) {
        mx += log_m[i];
        my += log_e[i];
    }
    mx /= 4;
    my /= 4;
    double num = 0, den = 0;
    for (size_t i = 0; i < 4; ++i) {
        num += (log_m[i] - mx) * (log_e[i] - my);
        den += (log_m[i] - mx) * (log_m[i] - mx);
    }
    const double slope = num / den;
    CHECK(slope <= -1.8);
}

TEST_CASE("paired trace shares z and keeps lanes lock-stepped") {
    SamplerFixture f;
    QuantizedModel qm = f.quantized(3, 8);
    TimestepGrid grid = make_ddim_grid(f.schedule.T, 10);
    Rng rng(8);
    PairedTrace trace = run_paired(f.model, qm, f.schedule, grid, 0.0, 4, rng);
    CHECK(trace.shared_z);
    CHECK_FALSE(trace.corrected);
    CHECK(trace.x_fp.size() == 11);
    CHECK(trace.eps_fp.size() == 10);
    CHECK(trace.x_fp[0].data == trace.x_q[0].data);  // shared start
    bool diverged = false;
    for (size_t i = 1; i < trace.x_fp.size(); ++i)
        if (trace.x_fp[i].data != trace.x_q[i].data) diverged = true;
    CHECK(diverged);
}

TEST_CASE("corrected paired trace reproduces the stored bias rows") {
    SamplerFixture f;
    QuantizedModel qm = f.quantized(3, 8);
    TimestepGrid grid = make_ddim_grid(f.schedule.T, 10);
    CorrectionConfig cc;
    cc.calib_batch = 8;
    Rng rng1(8);
    CorrectionTable table =
        precalculate(f.model, qm, f.schedule, grid, SamplerKind::ddim, 0.0, cc, rng1).table;
    Rng rng2(8);
    PairedTrace trace = run_paired(f.model, qm, f.schedule, grid, 0.0, 8, rng2, &table);
    CHECK(trace.corrected);
    const size_t chw = table.B.numel() / table.rows();
    for (size_t i = 0; i < table.rows(); ++i) {
        const Tensor bias = compute_bias(trace.x_q[i + 1], trace.x_fp[i + 1]);
        for (size_t j = 0; j < chw; ++j)
            CHECK(bias.data[j] == doctest::Approx(table.B.data[i * chw + j]).epsilon(1e-9));
    }
}

TEST_CASE("trajectory recording captures states and estimates") {
    SamplerFixture f;
    FpEvaluator eval(f.model);
    SamplerConfig cfg = make_sampler_config(f.schedule, SamplerKind::ddim, 6, 0.0);
    Rng rng(2);
    SampleRun run = sample_ddim(eval, f.schedule, cfg, 3, rng, true);
    REQUIRE(run.trajectory.has_value());
    CHECK(run.trajectory->x.size() == 7);
    CHECK(run.trajectory->eps.size() == 6);
    CHECK(run.trajectory->x.back().data == run.samples.data);

    Rng rng2(2);
    SampleRun dumped = sample_ddim_with_dump(f.model, f.schedule, cfg, 3, rng2);
    REQUIRE(dumped.trajectory.has_value());
    CHECK(dumped.trajectory->activations.size() == 6);
    CHECK(dumped.trajectory->activations[0].size() == f.model.n_boundaries());
    CHECK(dumped.samples.data == run.samples.data);
}
