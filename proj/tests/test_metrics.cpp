#include <doctest.h>

#include <cmath>

#include "tacq/metrics.hpp"
#include "tacq/quant.hpp"
#include "tacq/sampler.hpp"

using namespace tacq;

namespace {

double naive_energy_distance(const Tensor& a, const Tensor& b) {
    const size_t n = a.shape[0], m = b.shape[0], d = a.shape[1];
    auto dist = [d](const double* x, const double* y) {
        double sq = 0.0;
        for (size_t k = 0; k < d; ++k) sq += (x[k] - y[k]) * (x[k] - y[k]);
        return std::sqrt(sq);
    };
    double eab = 0.0, eaa = 0.0, ebb = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j) eab += dist(&a.data[i * d], &b.data[j * d]);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) eaa += dist(&a.data[i * d], &a.data[j * d]);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < m; ++j) ebb += dist(&b.data[i * d], &b.data[j * d]);
    return 2.0 * eab / (n * m) - eaa / (double(n) * n) - ebb / (double(m) * m);
}

}  // namespace

TEST_CASE("energy distance of identical samples is zero") {
    Rng rng(1);
    Tensor a = rng.randn({50, 3});
    CHECK(std::fabs(energy_distance(a, a)) <= 1e-12);
}

TEST_CASE("energy distance needs at least two samples per side") {
    Tensor a({1, 1}, {0.0});
    Tensor b({1, 1}, {1.0});
    CHECK_THROWS_AS(energy_distance(a, b), ConfigError);
}

TEST_CASE("energy distance is symmetric and nonnegative") {
    Rng rng(2);
    Tensor a = rng.randn({40, 2});
    Tensor b = add(rng.randn({60, 2}), 0.5);
    const double eab = energy_distance(a, b);
    const double eba = energy_distance(b, a);
    CHECK(eab >= -1e-12);
    CHECK(std::fabs(eab - eba) <= 1e-12);
}

TEST_CASE("energy distance matches the naive double-loop oracle on shifted normals") {
    Rng rng(3);
    const size_t n = 5000;
    Tensor a({n, 1});
    Tensor b({n, 1});
    for (size_t i = 0; i < n; ++i) {
        a.data[i] = rng.normal();
        b.data[i] = rng.normal() + 1.0;
    }
    const double got = energy_distance(a, b);
    const double oracle = naive_energy_distance(a, b);
    CHECK(got == oracle);  // same formula, same order
    // Population value for N(0,1) vs N(1,1) is about 0.5416.
    CHECK(got > 0.48);
    CHECK(got < 0.61);
}

TEST_CASE("sliced wasserstein behaves like a distance on shifted data") {
    Rng rng(4);
    Tensor a = rng.randn({500, 2});
    Tensor b = add(rng.randn({500, 2}), 1.0);
    CHECK(sliced_wasserstein(a, a) <= 1e-12);
    const double d = sliced_wasserstein(a, b);
    CHECK(d > 0.3);
    CHECK(sliced_wasserstein(a, b) == d);  // fixed-seed projections
}

TEST_CASE("dist report fields") {
    Rng rng(5);
    Tensor a = rng.randn({100, 2, 1, 1});
    Tensor b = rng.randn({200, 2, 1, 1});
    DistReport r = make_dist_report(a, b);
    CHECK(r.n == 100);
    CHECK(r.m == 200);
    CHECK(r.mean_gap.size() == 2);
    CHECK(r.energy >= -1e-12);
    const std::string text = dist_report_text(r);
    CHECK(text.find("energy_distance=") != std::string::npos);
    const std::string csv = dist_report_csv(r);
    CHECK(csv.find("energy_distance,") != std::string::npos);
}

TEST_CASE("ablation summary sorts rows and anchors deltas at the baseline") {
    DistReport worst;
    worst.energy = 0.9;
    DistReport mid;
    mid.energy = 0.5;
    DistReport best;
    best.energy = 0.1;
    std::vector<std::pair<std::string, DistReport>> runs = {
        {"baseline", worst}, {"+fix", mid}, {"+fix+more", best}};
    const std::string table = ablation_summary(runs);
    CHECK(table.find("baseline") < table.find("+fix"));
    CHECK(table.find("+fix\n") > table.find("+fix+more") - table.find("+fix+more"));  // both present
    const std::string csv = ablation_csv(runs);
    CHECK(csv.find("baseline,0.9") != std::string::npos);
    CHECK(csv.find("+fix+more,0.1") != std::string::npos);
    CHECK(csv.find("-0.8") != std::string::npos);  // delta vs baseline

    // A single run is its own baseline with delta zero.
    std::vector<std::pair<std::string, DistReport>> one = {{"only", mid}};
    CHECK(ablation_csv(one).find("only,0.5,0,") != std::string::npos);
}

namespace {

struct TraceFixture {
    Schedule schedule = make_linear_schedule(150, 1e-4, 0.02);
    NoiseModel model;

    TraceFixture() {
        Rng rng(70);
        model = make_model(NoiseModel::Arch::mlp, {2, 1, 1}, {.hidden_width = 24, .hidden_layers = 2}, rng);
        for (Param& p : model.params)
            for (double& v : p.value.data) v += 0.08 * rng.normal();
    }
};

}  // namespace

TEST_CASE("trace diagnostics: identical lanes have zero discrepancy") {
    TraceFixture f;
    QuantizedModel qm = quantize_model(f.model, 32, 32);
    TimestepGrid grid = make_ddim_grid(f.schedule.T, 8);
    Rng rng(1);
    PairedTrace trace = run_paired(f.model, qm, f.schedule, grid, 0.0, 3, rng);
    TraceReport rep = trace_diagnostics(trace, f.schedule);
    for (double v : rep.dx_norm) CHECK(v == 0.0);
    for (double v : rep.deps_norm) CHECK(v == 0.0);
    CHECK(rep.final_dx_mean == 0.0);
}

TEST_CASE("trace diagnostics: decomposition identity and bound on a quantized pair") {
    TraceFixture f;
    QuantizedModel qm = quantize_model(f.model, 3, 8);
    TimestepGrid grid = make_ddim_grid(f.schedule.T, 8);
    CalibrationConfig cal;
    cal.n_calib = 32;
    calibrate_activations(qm, f.schedule, grid, cal);

    Rng rng(2);
    PairedTrace trace = run_paired(f.model, qm, f.schedule, grid, 1.0, 6, rng);
    TraceReport rep = trace_diagnostics(trace, f.schedule);
    REQUIRE(rep.identity_checked);
    REQUIRE(rep.identity_residual.size() == 8);
    for (double v : rep.identity_residual) CHECK(v <= 1e-10);
    for (double v : rep.bound_slack) CHECK(v >= -1e-9);
    for (const auto& rq : rep.rqnsr_per_channel)
        for (double v : rq) {
            CHECK(v >= 0.0);
            CHECK(std::isfinite(v));
        }
    CHECK(rep.final_dx_max >= rep.final_dx_mean);
}

TEST_CASE("trace diagnostics refuses unshared-z traces") {
    TraceFixture f;
    QuantizedModel qm = quantize_model(f.model, 32, 32);
    TimestepGrid grid = make_ddim_grid(f.schedule.T, 4);
    Rng rng(3);
    PairedTrace trace = run_paired(f.model, qm, f.schedule, grid, 0.0, 2, rng);
    trace.shared_z = false;
    CHECK_THROWS_AS(trace_diagnostics(trace, f.schedule), ConfigError);
}
