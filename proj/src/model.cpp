#include "tacq/model.hpp"

#include <cmath>
#include <cstring>

#include "tacq/errors.hpp"

namespace tacq {

namespace {

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
inline double silu(double v) { return v * sigmoid(v); }
inline double silu_grad(double v) {
    const double s = sigmoid(v);
    return s * (1.0 + v * (1.0 - s));
}

Tensor silu(const Tensor& t) {
    Tensor r = t;
    for (double& v : r.data) v = silu(v);
    return r;
}

// y[b,:] = x[b,:] W^T + bias, with W stored [out,in].
Tensor linear(const Tensor& x, const Tensor& W, const Tensor& bias) {
    const size_t B = x.shape[0], in = x.shape[1], out = W.shape[0];
    Tensor y({B, out});
    for (size_t b = 0; b < B; ++b) {
        const double* xb = x.data.data() + b * in;
        double* yb = y.data.data() + b * out;
        for (size_t o = 0; o < out; ++o) {
            const double* w = W.data.data() + o * in;
            double acc = bias.data[o];
            for (size_t i = 0; i < in; ++i) acc += w[i] * xb[i];
            yb[o] = acc;
        }
    }
    return y;
}

// Gradients of linear(): dW += dy^T x, db += sum_b dy, dx = dy W.
void linear_backward(const Tensor& x, const Tensor& W, const Tensor& dy, Tensor& dW, Tensor& db,
                     Tensor* dx) {
    const size_t B = x.shape[0], in = x.shape[1], out = W.shape[0];
    for (size_t b = 0; b < B; ++b) {
        const double* xb = x.data.data() + b * in;
        const double* dyb = dy.data.data() + b * out;
        for (size_t o = 0; o < out; ++o) {
            const double g = dyb[o];
            db.data[o] += g;
            double* dwrow = dW.data.data() + o * in;
            for (size_t i = 0; i < in; ++i) dwrow[i] += g * xb[i];
        }
        if (dx) {
            double* dxb = dx->data.data() + b * in;
            for (size_t o = 0; o < out; ++o) {
                const double g = dyb[o];
                const double* w = W.data.data() + o * in;
                for (size_t i = 0; i < in; ++i) dxb[i] += g * w[i];
            }
        }
    }
}

// 3x3 convolution with zero padding 1, stride 1. W stored [O,I,3,3].
Tensor conv3x3(const Tensor& x, const Tensor& W, const Tensor& bias) {
    const size_t B = x.shape[0], I = x.shape[1], H = x.shape[2], Wd = x.shape[3];
    const size_t O = W.shape[0];
    Tensor y({B, O, H, Wd});
    for (size_t b = 0; b < B; ++b)
        for (size_t o = 0; o < O; ++o)
            for (size_t yy = 0; yy < H; ++yy)
                for (size_t xx = 0; xx < Wd; ++xx) {
                    double acc = bias.data[o];
                    for (size_t i = 0; i < I; ++i)
                        for (size_t ky = 0; ky < 3; ++ky) {
                            const long sy = static_cast<long>(yy) + static_cast<long>(ky) - 1;
                            if (sy < 0 || sy >= static_cast<long>(H)) continue;
                            for (size_t kx = 0; kx < 3; ++kx) {
                                const long sx = static_cast<long>(xx) + static_cast<long>(kx) - 1;
                                if (sx < 0 || sx >= static_cast<long>(Wd)) continue;
                                acc += W.data[((o * I + i) * 3 + ky) * 3 + kx] *
                                       x.at4(b, i, static_cast<size_t>(sy), static_cast<size_t>(sx));
                            }
                        }
                    y.at4(b, o, yy, xx) = acc;
                }
    return y;
}

void conv3x3_backward(const Tensor& x, const Tensor& W, const Tensor& dy, Tensor& dW, Tensor& db,
                      Tensor* dx) {
    const size_t B = x.shape[0], I = x.shape[1], H = x.shape[2], Wd = x.shape[3];
    const size_t O = W.shape[0];
    for (size_t b = 0; b < B; ++b)
        for (size_t o = 0; o < O; ++o)
            for (size_t yy = 0; yy < H; ++yy)
                for (size_t xx = 0; xx < Wd; ++xx) {
                    const double g = dy.at4(b, o, yy, xx);
                    db.data[o] += g;
                    for (size_t i = 0; i < I; ++i)
                        for (size_t ky = 0; ky < 3; ++ky) {
                            const long sy = static_cast<long>(yy) + static_cast<long>(ky) - 1;
                            if (sy < 0 || sy >= static_cast<long>(H)) continue;
                            for (size_t kx = 0; kx < 3; ++kx) {
                                const long sx = static_cast<long>(xx) + static_cast<long>(kx) - 1;
                                if (sx < 0 || sx >= static_cast<long>(Wd)) continue;
                                const double xv = x.at4(b, i, static_cast<size_t>(sy), static_cast<size_t>(sx));
                                dW.data[((o * I + i) * 3 + ky) * 3 + kx] += g * xv;
                                if (dx)
                                    dx->at4(b, i, static_cast<size_t>(sy), static_cast<size_t>(sx)) +=
                                        g * W.data[((o * I + i) * 3 + ky) * 3 + kx];
                            }
                        }
                }
}

Tensor time_feature_batch(const std::vector<double>& t, size_t dim) {
    Tensor f({t.size(), dim});
    for (size_t b = 0; b < t.size(); ++b) {
        const std::vector<double> row = time_features(t[b], dim);
        std::memcpy(f.data.data() + b * dim, row.data(), dim * sizeof(double));
    }
    return f;
}

// Intermediates captured by the forward pass for backprop.
struct MlpTrace {
    std::vector<Tensor> preact;   // z_l per layer
    std::vector<Tensor> act_in;   // input of each layer (u, a_1, ...)
};

struct ConvTrace {
    Tensor x;
    Tensor tf;   // time features
    Tensor temb; // projected embedding [B, conv_width]
    Tensor z1, a1, z2, a2;
};

const Tensor& param_value(const NoiseModel& m, const ForwardHooks& hooks, size_t idx) {
    if (hooks.weight_override) return (*hooks.weight_override)[idx];
    return m.params[idx].value;
}

Tensor boundary(const ForwardHooks& hooks, size_t idx, Tensor v) {
    if (hooks.boundary) return hooks.boundary->transform(idx, std::move(v));
    return v;
}

Tensor mlp_forward(const NoiseModel& m, const Tensor& x, const std::vector<double>& t,
                   const ForwardHooks& hooks, MlpTrace* trace) {
    const size_t B = x.shape[0];
    const size_t D = m.flat_dim();
    const size_t E = m.time_embed_dim;
    Tensor tf = time_feature_batch(t, E);
    Tensor u({B, D + E});
    for (size_t b = 0; b < B; ++b) {
        std::memcpy(u.data.data() + b * (D + E), x.data.data() + b * D, D * sizeof(double));
        std::memcpy(u.data.data() + b * (D + E) + D, tf.data.data() + b * E, E * sizeof(double));
    }
    const size_t layers = m.hidden_layers + 1;
    Tensor h = boundary(hooks, 0, std::move(u));
    for (size_t l = 0; l < layers; ++l) {
        if (trace) trace->act_in.push_back(h);
        const Tensor& W = param_value(m, hooks, 2 * l);
        const Tensor& bias = param_value(m, hooks, 2 * l + 1);
        Tensor z = linear(h, W, bias);
        if (trace) trace->preact.push_back(z);
        if (l + 1 < layers) {
            h = boundary(hooks, l + 1, silu(z));
        } else {
            h = std::move(z);
        }
    }
    Tensor out = std::move(h);
    out.shape = {B, m.io_shape[0], m.io_shape[1], m.io_shape[2]};
    return out;
}

Tensor conv_forward(const NoiseModel& m, const Tensor& x, const std::vector<double>& t,
                    const ForwardHooks& hooks, ConvTrace* trace) {
    const size_t B = x.shape[0];
    const size_t E = m.time_embed_dim;
    const size_t CW = m.conv_width;
    Tensor xin = boundary(hooks, 0, x);
    Tensor tf = boundary(hooks, 1, time_feature_batch(t, E));
    if (trace) {
        trace->x = xin;
        trace->tf = tf;
    }
    Tensor z1 = conv3x3(xin, param_value(m, hooks, 0), param_value(m, hooks, 1));
    Tensor temb = linear(tf, param_value(m, hooks, 2), param_value(m, hooks, 3));
    const size_t HW = m.io_shape[1] * m.io_shape[2];
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < CW; ++c) {
            const double add = temb.data[b * CW + c];
            double* p = z1.data.data() + (b * CW + c) * HW;
            for (size_t i = 0; i < HW; ++i) p[i] += add;
        }
    if (trace) {
        trace->temb = temb;
        trace->z1 = z1;
    }
    Tensor a1 = boundary(hooks, 2, silu(z1));
    if (trace) trace->a1 = a1;
    Tensor z2 = conv3x3(a1, param_value(m, hooks, 4), param_value(m, hooks, 5));
    if (trace) trace->z2 = z2;
    Tensor a2 = boundary(hooks, 3, silu(z2));
    if (trace) trace->a2 = a2;
    return conv3x3(a2, param_value(m, hooks, 6), param_value(m, hooks, 7));
}

}  // namespace

std::vector<double> time_features(double t, size_t dim) {
    std::vector<double> f(dim);
    const size_t half = dim / 2;
    const double denom = (half > 1) ? static_cast<double>(half - 1) : 1.0;
    for (size_t j = 0; j < half; ++j) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / denom);
        f[2 * j] = std::sin(t * freq);
        f[2 * j + 1] = std::cos(t * freq);
    }
    return f;
}

size_t NoiseModel::n_boundaries() const {
    return (arch == Arch::mlp) ? hidden_layers + 1 : 4;
}

NoiseModel::Arch parse_arch(const std::string& name) {
    if (name == "mlp") return NoiseModel::Arch::mlp;
    if (name == "conv") return NoiseModel::Arch::conv;
    throw ConfigError("unknown model arch '" + name + "' (expected mlp or conv)");
}

namespace {

Tensor init_weight(std::vector<size_t> shape, size_t fan_in, Rng& rng) {
    Tensor w = rng.randn(std::move(shape));
    const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : w.data) v *= s;
    return w;
}

}  // namespace

NoiseModel make_model(NoiseModel::Arch arch, std::array<size_t, 3> io_shape,
                      const ModelOptions& opts, Rng& rng) {
    NoiseModel m;
    m.arch = arch;
    m.io_shape = io_shape;
    m.time_embed_dim = opts.time_embed_dim;
    m.hidden_width = opts.hidden_width;
    m.hidden_layers = opts.hidden_layers;
    m.conv_width = opts.conv_width;
    if (m.time_embed_dim < 2 || m.time_embed_dim % 2 != 0)
        throw ConfigError("time_embed_dim must be an even number >= 2");
    const size_t D = m.flat_dim();
    if (arch == NoiseModel::Arch::mlp) {
        size_t in = D + m.time_embed_dim;
        for (size_t l = 0; l < m.hidden_layers; ++l) {
            m.params.push_back({"W" + std::to_string(l), init_weight({m.hidden_width, in}, in, rng), true});
            m.params.push_back({"b" + std::to_string(l), Tensor::zeros({m.hidden_width}), false});
            in = m.hidden_width;
        }
        // Zero-initialized head: the freshly built model predicts zero noise.
        m.params.push_back({"W" + std::to_string(m.hidden_layers), Tensor::zeros({D, in}), true});
        m.params.push_back({"b" + std::to_string(m.hidden_layers), Tensor::zeros({D}), false});
    } else {
        const size_t C = io_shape[0], CW = m.conv_width, E = m.time_embed_dim;
        m.params.push_back({"Wc0", init_weight({CW, C, 3, 3}, 9 * C, rng), true});
        m.params.push_back({"bc0", Tensor::zeros({CW}), false});
        m.params.push_back({"Wt", init_weight({CW, E}, E, rng), true});
        m.params.push_back({"bt", Tensor::zeros({CW}), false});
        m.params.push_back({"Wc1", init_weight({CW, CW, 3, 3}, 9 * CW, rng), true});
        m.params.push_back({"bc1", Tensor::zeros({CW}), false});
        m.params.push_back({"Wc2", Tensor::zeros({C, CW, 3, 3}), true});
        m.params.push_back({"bc2", Tensor::zeros({C}), false});
    }
    return m;
}

Tensor forward(const NoiseModel& model, const Tensor& x, const std::vector<double>& t,
               const ForwardHooks& hooks) {
    if (x.rank() != 4 || x.shape[1] != model.io_shape[0] || x.shape[2] != model.io_shape[1] ||
        x.shape[3] != model.io_shape[2])
        throw ConfigError("forward: input shape " + shape_str(x.shape) + " does not match model io shape");
    if (t.size() != x.shape[0])
        throw ConfigError("forward: batch size " + std::to_string(x.shape[0]) + " vs " +
                          std::to_string(t.size()) + " timesteps");
    if (hooks.weight_override && hooks.weight_override->size() != model.params.size())
        throw ConfigError("forward: weight override size mismatch");
    if (model.arch == NoiseModel::Arch::mlp) {
        Tensor xf = x;
        xf.shape = {x.shape[0], model.flat_dim()};
        return mlp_forward(model, xf, t, hooks, nullptr);
    }
    return conv_forward(model, x, t, hooks, nullptr);
}

LossGrads loss_and_grads(const NoiseModel& model, const Tensor& x0_batch,
                         const std::vector<double>& t_batch, const Tensor& eps_batch,
                         const Schedule& schedule) {
    if (!x0_batch.same_shape(eps_batch))
        throw ConfigError("loss_and_grads: shape mismatch " + shape_str(x0_batch.shape) + " vs " +
                          shape_str(eps_batch.shape));
    const size_t B = x0_batch.shape[0];
    const size_t D = model.flat_dim();

    // x_t = sqrt(abar) x0 + sqrt(1-abar) eps, per-sample timestep.
    Tensor xt = x0_batch;
    for (size_t b = 0; b < B; ++b) {
        const size_t t = static_cast<size_t>(t_batch[b]);
        if (t >= schedule.T) throw ConfigError("loss_and_grads: timestep out of range");
        const double c0 = std::sqrt(schedule.alpha_bar[t]);
        const double c1 = std::sqrt(1.0 - schedule.alpha_bar[t]);
        for (size_t i = 0; i < D; ++i)
            xt.data[b * D + i] = c0 * x0_batch.data[b * D + i] + c1 * eps_batch.data[b * D + i];
    }

    LossGrads out;
    out.grads.reserve(model.params.size());
    for (const Param& p : model.params) out.grads.push_back(Tensor::zeros(p.value.shape));
    const double inv_n = 1.0 / static_cast<double>(B * D);

    if (model.arch == NoiseModel::Arch::mlp) {
        Tensor xf = xt;
        xf.shape = {B, D};
        MlpTrace trace;
        Tensor pred = mlp_forward(model, xf, t_batch, {}, &trace);

        double loss = 0.0;
        Tensor dout({B, D});
        for (size_t i = 0; i < B * D; ++i) {
            const double r = pred.data[i] - eps_batch.data[i];
            loss += r * r;
            dout.data[i] = 2.0 * r * inv_n;
        }
        out.loss = loss * inv_n;
        if (!std::isfinite(out.loss))
            throw NumericError("loss_and_grads: non-finite loss " + std::to_string(out.loss));

        const size_t layers = model.hidden_layers + 1;
        Tensor dz = std::move(dout);
        for (size_t l = layers; l-- > 0;) {
            if (l + 1 < layers) {
                // dz arrived as gradient w.r.t. the activation; fold in SiLU'.
                for (size_t i = 0; i < dz.numel(); ++i) dz.data[i] *= silu_grad(trace.preact[l].data[i]);
            }
            Tensor dx_prev = (l > 0) ? Tensor::zeros(trace.act_in[l].shape) : Tensor();
            linear_backward(trace.act_in[l], model.params[2 * l].value, dz, out.grads[2 * l],
                            out.grads[2 * l + 1], l > 0 ? &dx_prev : nullptr);
            if (l > 0) dz = std::move(dx_prev);
        }
        return out;
    }

    ConvTrace trace;
    Tensor pred = conv_forward(model, xt, t_batch, {}, &trace);
    double loss = 0.0;
    Tensor dout(pred.shape);
    for (size_t i = 0; i < pred.numel(); ++i) {
        const double r = pred.data[i] - eps_batch.data[i];
        loss += r * r;
        dout.data[i] = 2.0 * r * inv_n;
    }
    out.loss = loss * inv_n;
    if (!std::isfinite(out.loss))
        throw NumericError("loss_and_grads: non-finite loss " + std::to_string(out.loss));

    const size_t CW = model.conv_width;
    const size_t HW = model.io_shape[1] * model.io_shape[2];

    Tensor da2 = Tensor::zeros(trace.a2.shape);
    conv3x3_backward(trace.a2, model.params[6].value, dout, out.grads[6], out.grads[7], &da2);
    Tensor dz2 = std::move(da2);
    for (size_t i = 0; i < dz2.numel(); ++i) dz2.data[i] *= silu_grad(trace.z2.data[i]);
    Tensor da1 = Tensor::zeros(trace.a1.shape);
    conv3x3_backward(trace.a1, model.params[4].value, dz2, out.grads[4], out.grads[5], &da1);
    Tensor dz1 = std::move(da1);
    for (size_t i = 0; i < dz1.numel(); ++i) dz1.data[i] *= silu_grad(trace.z1.data[i]);
    // Time-embedding branch: z1 received temb broadcast over H*W.
    Tensor dtemb({B, CW});
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < CW; ++c) {
            double acc = 0.0;
            const double* p = dz1.data.data() + (b * CW + c) * HW;
            for (size_t i = 0; i < HW; ++i) acc += p[i];
            dtemb.data[b * CW + c] = acc;
        }
    linear_backward(trace.tf, model.params[2].value, dtemb, out.grads[2], out.grads[3], nullptr);
    conv3x3_backward(trace.x, model.params[0].value, dz1, out.grads[0], out.grads[1], nullptr);
    return out;
}

void AdamState::init(const std::vector<Param>& params) {
    m.clear();
    v.clear();
    for (const Param& p : params) {
        m.push_back(Tensor::zeros(p.value.shape));
        v.push_back(Tensor::zeros(p.value.shape));
    }
    step = 0;
}

void AdamState::update(std::vector<Param>& params, const std::vector<Tensor>& grads,
                       const TrainConfig& cfg) {
    ++step;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (size_t p = 0; p < params.size(); ++p) {
        Tensor& w = params[p].value;
        for (size_t i = 0; i < w.numel(); ++i) {
            const double g = grads[p].data[i];
            m[p].data[i] = b1 * m[p].data[i] + (1.0 - b1) * g;
            v[p].data[i] = b2 * v[p].data[i] + (1.0 - b2) * g * g;
            const double mh = m[p].data[i] / c1;
            const double vh = v[p].data[i] / c2;
            w.data[i] -= cfg.lr * mh / (std::sqrt(vh) + 1e-8);
        }
    }
}

TrainResult train(NoiseModel model, const Tensor& dataset, const Schedule& schedule,
                  const TrainConfig& cfg) {
    if (cfg.steps < 1) throw ConfigError("train: steps must be >= 1");
    if (cfg.batch < 1) throw ConfigError("train: batch must be >= 1");
    if (!(cfg.lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (dataset.rank() != 4 || dataset.shape[0] == 0) throw ConfigError("train: dataset is empty");

    const size_t n = dataset.shape[0];
    const size_t D = model.flat_dim();
    Rng rng(cfg.seed);
    AdamState adam;
    adam.init(model.params);
    TrainResult result;
    result.loss_curve.reserve(cfg.steps);

    Tensor x0({cfg.batch, model.io_shape[0], model.io_shape[1], model.io_shape[2]});
    std::vector<double> tb(cfg.batch);
    for (size_t s = 0; s < cfg.steps; ++s) {
        for (size_t b = 0; b < cfg.batch; ++b) {
            const size_t idx = rng.uniform_index(n);
            std::memcpy(x0.data.data() + b * D, dataset.data.data() + idx * D, D * sizeof(double));
            tb[b] = static_cast<double>(rng.uniform_index(schedule.T));
        }
        Tensor eps = rng.randn(x0.shape);
        LossGrads lg = loss_and_grads(model, x0, tb, eps, schedule);
        if (lg.loss > 1e6)
            throw NumericError("train: diverged at step " + std::to_string(s) + ", loss " +
                               std::to_string(lg.loss));
        adam.update(model.params, lg.grads, cfg);
        result.loss_curve.push_back(lg.loss);
    }
    for (const Param& p : model.params)
        if (!p.value.all_finite()) throw NumericError("train: non-finite parameter " + p.name);
    result.model = std::move(model);
    return result;
}

std::vector<double> loss_curve_windows(const std::vector<double>& curve) {
    static const double frac[11] = {0, 0.01, 0.025, 0.05, 0.10, 0.18, 0.30, 0.45, 0.65, 0.82, 1.0};
    const size_t n = curve.size();
    std::vector<double> out;
    for (size_t w = 0; w < 10; ++w) {
        size_t lo = static_cast<size_t>(std::llround(frac[w] * static_cast<double>(n)));
        size_t hi = static_cast<size_t>(std::llround(frac[w + 1] * static_cast<double>(n)));
        if (hi <= lo) hi = lo + 1;
        if (hi > n) hi = n;
        if (lo >= n) lo = n - 1;
        double acc = 0.0;
        for (size_t i = lo; i < hi; ++i) acc += curve[i];
        out.push_back(acc / static_cast<double>(hi - lo));
    }
    return out;
}

Tensor make_toy_dataset(const std::string& kind, size_t n, uint64_t seed) {
    if (n < 1) throw ConfigError("make_toy_dataset: n must be >= 1");
    Rng rng(seed);
    if (kind == "gauss2d") {
        // Two-component mixture, means at +-(1,1).
        Tensor d({n, 2, 1, 1});
        for (size_t i = 0; i < n; ++i) {
            const double sgn = (rng.next_u64() & 1) ? 1.0 : -1.0;
            d.data[2 * i] = sgn * 1.0 + 0.35 * rng.normal();
            d.data[2 * i + 1] = sgn * 1.0 + 0.35 * rng.normal();
        }
        return d;
    }
    if (kind == "rings2d") {
        Tensor d({n, 2, 1, 1});
        for (size_t i = 0; i < n; ++i) {
            const double r = ((rng.next_u64() & 1) ? 1.0 : 0.5) + 0.03 * rng.normal();
            const double a = 2.0 * 3.14159265358979323846 * rng.uniform();
            d.data[2 * i] = r * std::cos(a);
            d.data[2 * i + 1] = r * std::sin(a);
        }
        return d;
    }
    if (kind == "blobs8x8") {
        Tensor d({n, 1, 8, 8});
        for (size_t i = 0; i < n; ++i) {
            const size_t bumps = 2 + rng.uniform_index(3);
            for (size_t k = 0; k < bumps; ++k) {
                const double cy = 1.0 + 5.0 * rng.uniform();
                const double cx = 1.0 + 5.0 * rng.uniform();
                const double amp = (rng.next_u64() & 1 ? 1.0 : -1.0) * (0.5 + 0.5 * rng.uniform());
                const double sig = 0.8 + 0.8 * rng.uniform();
                for (size_t y = 0; y < 8; ++y)
                    for (size_t x = 0; x < 8; ++x) {
                        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                        d.data[i * 64 + y * 8 + x] += amp * std::exp(-d2 / (2.0 * sig * sig));
                    }
            }
            for (size_t j = 0; j < 64; ++j) {
                double& v = d.data[i * 64 + j];
                v = std::max(-1.0, std::min(1.0, v));
            }
        }
        return d;
    }
    throw ConfigError("unknown dataset kind '" + kind + "' (expected gauss2d, rings2d or blobs8x8)");
}

}  // namespace tacq
