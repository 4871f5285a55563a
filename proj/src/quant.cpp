#include "tacq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tacq/errors.hpp"

namespace tacq {

void QuantParams::validate() const {
    if (passthrough()) return;
    if (!(scale > 0.0)) throw ConfigError("quant params: scale must be positive");
    if (q_min >= q_max) throw ConfigError("quant params: q_min must be below q_max");
    if (q_max - q_min != (int64_t(1) << bits) - 1)
        throw ConfigError("quant params: grid span does not match bit width");
}

QuantScheme parse_scheme(const std::string& name) {
    if (name == "minmax_symmetric") return QuantScheme::minmax_symmetric;
    if (name == "minmax_asymmetric") return QuantScheme::minmax_asymmetric;
    throw ConfigError("unknown quant scheme '" + name + "'");
}

int validate_weight_bits(int bits) {
    if (bits == 2 || bits == 3 || bits == 4 || bits == 8 || bits == 32) return bits;
    throw ConfigError("weight bits must be one of {2,3,4,8,32}, got " + std::to_string(bits));
}

int validate_act_bits(int bits) {
    if (bits == 6 || bits == 8 || bits == 32) return bits;
    throw ConfigError("activation bits must be one of {6,8,32}, got " + std::to_string(bits));
}

namespace {
// Round half away from zero; the platform-stable mode used everywhere here.
inline double round_half_away(double v) { return std::round(v); }
}  // namespace

QuantParams calibrate_range(double lo, double hi, int bits, QuantScheme scheme) {
    QuantParams p;
    p.bits = bits;
    if (p.passthrough()) return p;
    if (!(std::isfinite(lo) && std::isfinite(hi)) || lo > hi)
        throw NumericError("calibrate_range: invalid range");
    const int64_t levels = (int64_t(1) << bits) - 1;
    if (scheme == QuantScheme::minmax_symmetric) {
        p.q_max = (int64_t(1) << (bits - 1)) - 1;
        p.q_min = p.q_max - levels;
        p.zero_point = 0;
        const double a = std::max(std::fabs(lo), std::fabs(hi));
        p.scale = (a > 0.0) ? a / static_cast<double>(p.q_max) : 1e-8;
    } else {
        p.q_min = 0;
        p.q_max = levels;
        if (hi - lo < 1e-8) hi = lo + 1e-8;
        p.scale = (hi - lo) / static_cast<double>(levels);
        p.zero_point = static_cast<int64_t>(round_half_away(lo / p.scale)) - p.q_min;
    }
    p.validate();
    return p;
}

double quantize(double x, const QuantParams& p) {
    if (p.passthrough()) return x;
    const double q = round_half_away(x / p.scale) - static_cast<double>(p.zero_point);
    const double qc = std::min(static_cast<double>(p.q_max), std::max(static_cast<double>(p.q_min), q));
    return p.scale * (qc + static_cast<double>(p.zero_point));
}

Tensor quantize(const Tensor& x, const QuantParams& p) {
    if (p.passthrough()) return x;
    Tensor out = x;
    for (double& v : out.data) v = quantize(v, p);
    return out;
}

namespace {

std::pair<double, double> tensor_range(const double* data, size_t n) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (size_t i = 0; i < n; ++i) {
        lo = std::min(lo, data[i]);
        hi = std::max(hi, data[i]);
    }
    return {lo, hi};
}

}  // namespace

std::vector<std::vector<QuantParams>> calibrate_weights(const NoiseModel& model, QuantScheme scheme,
                                                        int bits, bool per_channel) {
    validate_weight_bits(bits);
    std::vector<std::vector<QuantParams>> out(model.params.size());
    for (size_t i = 0; i < model.params.size(); ++i) {
        const Param& p = model.params[i];
        if (!p.quantizable || bits >= 32) {
            out[i] = {QuantParams{}};
            continue;
        }
        if (!p.value.all_finite()) throw NumericError("calibrate_weights: non-finite values in " + p.name);
        if (per_channel && p.value.rank() >= 2) {
            const size_t rows = p.value.shape[0];
            const size_t row_n = p.value.numel() / rows;
            out[i].reserve(rows);
            for (size_t r = 0; r < rows; ++r) {
                auto [lo, hi] = tensor_range(p.value.data.data() + r * row_n, row_n);
                out[i].push_back(calibrate_range(lo, hi, bits, scheme));
            }
        } else {
            auto [lo, hi] = tensor_range(p.value.data.data(), p.value.numel());
            out[i] = {calibrate_range(lo, hi, bits, scheme)};
        }
    }
    return out;
}

void QuantizedModel::rebuild_fq_params() {
    fq_params.clear();
    fq_params.reserve(base.params.size());
    for (size_t i = 0; i < base.params.size(); ++i) {
        const Param& p = base.params[i];
        if (!p.quantizable || weight_bits >= 32) {
            fq_params.push_back(p.value);
            continue;
        }
        const std::vector<QuantParams>& qs = weight_qparams[i];
        if (qs.size() == 1) {
            fq_params.push_back(quantize(p.value, qs[0]));
        } else {
            Tensor t = p.value;
            const size_t rows = t.shape[0];
            const size_t row_n = t.numel() / rows;
            for (size_t r = 0; r < rows; ++r)
                for (size_t j = 0; j < row_n; ++j)
                    t.data[r * row_n + j] = quantize(t.data[r * row_n + j], qs[r]);
            fq_params.push_back(std::move(t));
        }
    }
}

QuantizedModel quantize_model(const NoiseModel& model, int weight_bits, int act_bits,
                              QuantScheme weight_scheme, QuantScheme act_scheme,
                              bool per_channel_weights) {
    QuantizedModel qm;
    qm.base = model;
    qm.weight_bits = validate_weight_bits(weight_bits);
    qm.act_bits = validate_act_bits(act_bits);
    qm.weight_scheme = weight_scheme;
    qm.act_scheme = act_scheme;
    qm.per_channel_weights = per_channel_weights;
    qm.weight_qparams = calibrate_weights(model, weight_scheme, weight_bits, per_channel_weights);
    qm.rebuild_fq_params();
    qm.act_qparams.assign(model.n_boundaries(), QuantParams{});
    qm.act_ranges.assign(model.n_boundaries(), {0.0, 0.0});
    // Nothing to observe when activations stay full precision.
    qm.calibrated = (qm.act_bits >= 32);
    return qm;
}

namespace {

struct RangeObserverHook : BoundaryHook {
    std::vector<std::pair<double, double>>* ranges;
    explicit RangeObserverHook(std::vector<std::pair<double, double>>* r) : ranges(r) {}
    Tensor transform(size_t boundary, Tensor v) override {
        auto& [lo, hi] = (*ranges)[boundary];
        for (double x : v.data) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        return v;
    }
};

struct FakeQuantHook : BoundaryHook {
    const std::vector<QuantParams>* qp;
    explicit FakeQuantHook(const std::vector<QuantParams>* q) : qp(q) {}
    Tensor transform(size_t boundary, Tensor v) override { return quantize(v, (*qp)[boundary]); }
};

}  // namespace

void calibrate_activations(QuantizedModel& qmodel, const Schedule& schedule,
                           const TimestepGrid& grid, const CalibrationConfig& cfg) {
    if (cfg.n_calib == 0) throw ConfigError("calibrate_activations: n_calib must be >= 1");
    if (qmodel.act_bits >= 32) {
        qmodel.calibrated = true;
        return;
    }
    grid.validate(schedule.T);
    const size_t steps = grid.main.size();
    const size_t chains = std::max<size_t>(1, (cfg.n_calib + steps - 1) / steps);

    std::vector<std::pair<double, double>> ranges(
        qmodel.base.n_boundaries(),
        {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()});
    RangeObserverHook observer(&ranges);
    ForwardHooks hooks;
    hooks.boundary = &observer;

    // Ranges are observed on the full-precision sampler; chain i draws from
    // its own child stream so enlarging n_calib only appends chains. Each
    // evaluation carries a batch of trajectories so min/max sees the tails.
    const std::vector<StepCoeffs> coeffs = make_step_coeffs(schedule, grid, cfg.eta);
    Rng root(cfg.seed);
    const auto& io = qmodel.base.io_shape;
    const size_t b = std::max<size_t>(1, cfg.chain_batch);
    for (size_t c = 0; c < chains; ++c) {
        Rng rng = root.child(c);
        Tensor x = rng.randn({b, io[0], io[1], io[2]});
        const std::vector<double> tvec(b, 0.0);
        for (size_t i = 0; i < steps; ++i) {
            Tensor eps = forward(qmodel.base, x, std::vector<double>(b, grid.main[i]), hooks);
            Tensor z = (coeffs[i].sigma != 0.0) ? rng.randn(x.shape) : Tensor();
            x = reverse_step(x, eps, coeffs[i], z);
        }
    }

    qmodel.act_ranges = ranges;
    for (size_t b = 0; b < ranges.size(); ++b) {
        if (!(ranges[b].first <= ranges[b].second))
            throw NumericError("calibrate_activations: no observations for boundary " + std::to_string(b));
        qmodel.act_qparams[b] =
            calibrate_range(ranges[b].first, ranges[b].second, qmodel.act_bits, qmodel.act_scheme);
    }
    qmodel.calibrated = true;
}

Tensor quantized_forward(const QuantizedModel& qmodel, const Tensor& x, const std::vector<double>& t) {
    if (!qmodel.calibrated)
        throw ConfigError("quantized_forward: model is not calibrated (activation ranges unknown)");
    ForwardHooks hooks;
    hooks.weight_override = &qmodel.fq_params;
    FakeQuantHook fq(&qmodel.act_qparams);
    if (qmodel.act_bits < 32) hooks.boundary = &fq;
    return forward(qmodel.base, x, t, hooks);
}

}  // namespace tacq
