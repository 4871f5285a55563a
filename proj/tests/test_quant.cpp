#include <doctest.h>

#include <cmath>

#include "tacq/quant.hpp"
#include "tacq/schedule.hpp"

using namespace tacq;

namespace {

QuantParams sym8_pm1() {
    // 8-bit grid over [-1,1]: s = 2/255, z = 0.
    QuantParams p;
    p.bits = 8;
    p.scale = 2.0 / 255.0;
    p.zero_point = 0;
    p.q_min = -128;
    p.q_max = 127;
    return p;
}

}  // namespace

TEST_CASE("quantize worked examples") {
    QuantParams p = sym8_pm1();
    CHECK(quantize(0.0, p) == 0.0);
    // 0.5/s = 63.75 rounds to 64.
    CHECK(quantize(0.5, p) == 64.0 * (2.0 / 255.0));
    CHECK(quantize(0.5, p) == doctest::Approx(0.50196).epsilon(1e-4));
    // Far out of range clips to q_max.
    CHECK(quantize(10.0, p) == 127.0 * (2.0 / 255.0));
}

TEST_CASE("quantize is idempotent, monotone and grid-proximal") {
    QuantParams p = sym8_pm1();
    Rng rng(17);
    double prev_x = -3.0, prev_q = quantize(prev_x, p);
    for (int i = 0; i < 2000; ++i) {
        const double x = 6.0 * rng.uniform() - 3.0;
        const double q = quantize(x, p);
        CHECK(quantize(q, p) == q);  // exact idempotence
        const bool clipped = (q == p.scale * static_cast<double>(p.q_max + p.zero_point)) ||
                             (q == p.scale * static_cast<double>(p.q_min + p.zero_point));
        if (!clipped) CHECK(std::fabs(q - x) <= p.scale / 2 + 1e-12);
        if (x >= prev_x) CHECK(q >= prev_q);
        if (x < prev_x) CHECK(q <= prev_q);
        prev_x = x;
        prev_q = q;
    }
}

TEST_CASE("asymmetric calibration anchors the range") {
    QuantParams p = calibrate_range(-3.0, 5.0, 8, QuantScheme::minmax_asymmetric);
    CHECK(p.scale == doctest::Approx(8.0 / 255.0));
    // Clip bounds sit within half a step of the data range; the span is exact.
    const double lo = p.scale * static_cast<double>(p.q_min + p.zero_point);
    const double hi = p.scale * static_cast<double>(p.q_max + p.zero_point);
    CHECK(std::fabs(lo - (-3.0)) <= p.scale / 2 + 1e-12);
    CHECK(std::fabs(hi - 5.0) <= p.scale / 2 + 1e-12);
    CHECK(hi - lo == doctest::Approx(8.0).epsilon(1e-12));

    // Zero maps exactly onto the grid for a [0,1] range.
    QuantParams p01 = calibrate_range(0.0, 1.0, 8, QuantScheme::minmax_asymmetric);
    CHECK(quantize(0.0, p01) == 0.0);
}

TEST_CASE("symmetric weight calibration uses absmax over q_max") {
    Rng rng(4);
    NoiseModel m = make_model(NoiseModel::Arch::mlp, {2, 1, 1}, {.hidden_width = 8, .hidden_layers = 1}, rng);
    // Force a known range on the first weight matrix.
    Tensor& w = m.params[0].value;
    for (double& v : w.data) v = 0.0;
    w.data[0] = 0.5;
    w.data[1] = -0.25;
    auto qp = calibrate_weights(m, QuantScheme::minmax_symmetric, 8);
    CHECK(qp[0][0].scale == doctest::Approx(0.5 / 127.0).epsilon(1e-15));
    CHECK(qp[0][0].zero_point == 0);

    // All-zero tensor hits the scale floor and stays zero after quantization.
    for (double& v : w.data) v = 0.0;
    auto qz = calibrate_weights(m, QuantScheme::minmax_symmetric, 8);
    CHECK(qz[0][0].scale == 1e-8);
    Tensor wq = quantize(w, qz[0][0]);
    for (double v : wq.data) CHECK(v == 0.0);
}

TEST_CASE("degenerate activation range widens by the floor") {
    QuantParams p = calibrate_range(2.5, 2.5, 8, QuantScheme::minmax_asymmetric);
    CHECK(p.scale == doctest::Approx(1e-8 / 255.0));
    CHECK(p.scale > 0.0);
}

TEST_CASE("dequantized weights live on the quantizer grid") {
    Rng rng(9);
    NoiseModel m = make_model(NoiseModel::Arch::mlp, {2, 1, 1}, {.hidden_width = 16, .hidden_layers = 2}, rng);
    QuantizedModel qm = quantize_model(m, 3, 32);
    for (size_t i = 0; i < m.params.size(); ++i) {
        if (!m.params[i].quantizable) continue;
        const QuantParams& p = qm.weight_qparams[i][0];
        for (double v : qm.fq_params[i].data) {
            const double q = v / p.scale - static_cast<double>(p.zero_point);
            CHECK(std::fabs(q - std::round(q)) < 1e-9);
            CHECK(std::round(q) >= static_cast<double>(p.q_min));
            CHECK(std::round(q) <= static_cast<double>(p.q_max));
        }
    }
}

TEST_CASE("per-channel weight quantization calibrates each row") {
    Rng rng(14);
    NoiseModel m = make_model(NoiseModel::Arch::mlp, {2, 1, 1}, {.hidden_width = 4, .hidden_layers = 1}, rng);
    Tensor& w = m.params[0].value;  // [4, in]
    const size_t in = w.shape[1];
    for (size_t r = 0; r < 4; ++r)
        for (size_t c = 0; c < in; ++c) w.data[r * in + c] = (r + 1) * 0.1;
    auto qp = calibrate_weights(m, QuantScheme::minmax_symmetric, 8, true);
    REQUIRE(qp[0].size() == 4);
    for (size_t r = 0; r < 4; ++r)
        CHECK(qp[0][r].scale == doctest::Approx((r + 1) * 0.1 / 127.0).epsilon(1e-12));
}

TEST_CASE("bits validation") {
    CHECK_THROWS_AS(validate_weight_bits(5), ConfigError);
    CHECK_THROWS_AS(validate_act_bits(4), ConfigError);
    CHECK(validate_weight_bits(3) == 3);
    CHECK(validate_act_bits(6) == 6);
}

namespace {

struct QuantFixture {
    Schedule schedule = make_linear_schedule(100, 1e-4, 0.02);
    NoiseModel model;
    TimestepGrid grid = make_ddim_grid(100, 10);

    QuantFixture() {
        Rng rng(40);
        model = make_model(NoiseModel::Arch::mlp, {2, 1, 1}, {.hidden_width = 32, .hidden_layers = 2}, rng);
        for (Param& p : model.params)
            for (double& v : p.value.data) v += 0.05 * rng.normal();
    }

    QuantizedModel quantized(int wb, int ab) const {
        QuantizedModel qm = quantize_model(model, wb, ab);
        CalibrationConfig cal;
        cal.n_calib = 64;
        cal.seed = 5;
        calibrate_activations(qm, schedule, grid, cal);
        return qm;
    }
};

}  // namespace

TEST_CASE("bits=32 passthrough matches the fp forward bit-exactly") {
    QuantFixture f;
    QuantizedModel qm = f.quantized(32, 32);
    Rng rng(2);
    Tensor x = rng.randn({4, 2, 1, 1});
    Tensor a = quantized_forward(qm, x, {1.0, 5.0, 9.0, 50.0});
    Tensor b = forward(f.model, x, {1.0, 5.0, 9.0, 50.0});
    CHECK(a.data == b.data);
}

TEST_CASE("uncalibrated quantized forward is refused") {
    QuantFixture f;
    QuantizedModel qm = quantize_model(f.model, 8, 8);
    CHECK_FALSE(qm.calibrated);
    Rng rng(2);
    Tensor x = rng.randn({1, 2, 1, 1});
    CHECK_THROWS_AS(quantized_forward(qm, x, {1.0}), ConfigError);
    CalibrationConfig empty;
    empty.n_calib = 0;
    CHECK_THROWS_AS(calibrate_activations(qm, f.schedule, f.grid, empty), ConfigError);
}

TEST_CASE("quantization is lossy and coarser grids hurt more") {
    QuantFixture f;
    QuantizedModel q8 = f.quantized(8, 8);
    QuantizedModel q3 = f.quantized(3, 8);
    Rng rng(3);
    Tensor x = rng.randn({64, 2, 1, 1});
    std::vector<double> t(64, 42.0);
    Tensor fp = forward(f.model, x, t);
    Tensor e8 = quantized_forward(q8, x, t);
    Tensor e3 = quantized_forward(q3, x, t);
    double mad8 = 0.0, mad3 = 0.0;
    for (size_t i = 0; i < fp.numel(); ++i) {
        mad8 += std::fabs(e8.data[i] - fp.data[i]);
        mad3 += std::fabs(e3.data[i] - fp.data[i]);
    }
    mad8 /= static_cast<double>(fp.numel());
    mad3 /= static_cast<double>(fp.numel());
    CHECK(mad8 > 0.0);
    CHECK(mad3 >= mad8);
}

TEST_CASE("longer calibration never shrinks the observed ranges") {
    QuantFixture f;
    QuantizedModel a = quantize_model(f.model, 8, 8);
    QuantizedModel b = quantize_model(f.model, 8, 8);
    CalibrationConfig shorter, longer;
    shorter.n_calib = 32;
    shorter.seed = 11;
    longer.n_calib = 96;
    longer.seed = 11;
    calibrate_activations(a, f.schedule, f.grid, shorter);
    calibrate_activations(b, f.schedule, f.grid, longer);
    REQUIRE(a.act_ranges.size() == b.act_ranges.size());
    for (size_t i = 0; i < a.act_ranges.size(); ++i) {
        CHECK(b.act_ranges[i].first <= a.act_ranges[i].first);
        CHECK(b.act_ranges[i].second >= a.act_ranges[i].second);
    }
}
