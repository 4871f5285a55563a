#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>
#include <pybind11/stl.h>

#include "tacq/checkpoint.hpp"
#include "tacq/config.hpp"
#include "tacq/correction.hpp"
#include "tacq/metrics.hpp"
#include "tacq/model.hpp"
#include "tacq/pipeline.hpp"
#include "tacq/quant.hpp"
#include "tacq/sampler.hpp"
#include "tacq/schedule.hpp"
#include "tacq/tensor.hpp"

namespace py = pybind11;
using namespace tacq;

namespace {

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<size_t> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<size_t>(a.shape(i));
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<double> a(shape);
    std::copy(t.data.begin(), t.data.end(), a.mutable_data());
    return a;
}

std::vector<double> timestep_vec(const py::object& t, size_t batch) {
    if (py::isinstance<py::float_>(t) || py::isinstance<py::int_>(t))
        return std::vector<double>(batch, t.cast<double>());
    auto v = t.cast<std::vector<double>>();
    if (v.size() != batch) throw ConfigError("timestep array length does not match the batch");
    return v;
}

}  // namespace

PYBIND11_MODULE(_tacq, m) {
    m.doc() = "Tiny diffusion models with simulated low-bit quantization and "
              "timestep-aware correction (noise estimation reconstruction + "
              "input bias correction)";

    py::register_exception<ConfigError>(m, "TacqConfigError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "TacqNumericError", PyExc_ArithmeticError);

    py::class_<Schedule>(m, "Schedule")
        .def_readonly("T", &Schedule::T)
        .def_property_readonly("beta", [](const Schedule& s) { return to_numpy(Tensor({s.T}, s.beta)); })
        .def_property_readonly("alpha", [](const Schedule& s) { return to_numpy(Tensor({s.T}, s.alpha)); })
        .def_property_readonly("alpha_bar",
                               [](const Schedule& s) { return to_numpy(Tensor({s.T}, s.alpha_bar)); })
        .def_property_readonly("lambda_",
                               [](const Schedule& s) { return to_numpy(Tensor({s.T}, s.lambda)); })
        .def("sigma", &Schedule::sigma, py::arg("t"), py::arg("eta"));

    m.def("make_linear_schedule", &make_linear_schedule, py::arg("T"), py::arg("beta_start"),
          py::arg("beta_end"));

    py::class_<TimestepGrid>(m, "TimestepGrid")
        .def_readonly("main", &TimestepGrid::main)
        .def_readonly("mid", &TimestepGrid::mid);
    m.def("make_ddim_grid", &make_ddim_grid, py::arg("T"), py::arg("steps"));
    m.def("make_dpmpp_grid", &make_dpmpp_grid, py::arg("schedule"), py::arg("steps"));

    m.def(
        "forward_noise",
        [](const Schedule& s, const py::array_t<double>& x0, size_t t, const py::array_t<double>& eps) {
            return to_numpy(forward_noise(s, from_numpy(x0), t, from_numpy(eps)));
        },
        py::arg("schedule"), py::arg("x0"), py::arg("t"), py::arg("eps"));
    m.def(
        "ddpm_step",
        [](const Schedule& s, const py::array_t<double>& x, const py::array_t<double>& eps, size_t t,
           double eta, const py::object& z) {
            Tensor zt;
            if (!z.is_none()) zt = from_numpy(z.cast<py::array_t<double>>());
            return to_numpy(ddpm_step(s, from_numpy(x), from_numpy(eps), t, eta, zt));
        },
        py::arg("schedule"), py::arg("x"), py::arg("eps_hat"), py::arg("t"), py::arg("eta") = 0.0,
        py::arg("z") = py::none());

    m.def(
        "randn",
        [](uint64_t seed, const std::vector<size_t>& shape) {
            Rng rng(seed);
            return to_numpy(rng.randn(shape));
        },
        py::arg("seed"), py::arg("shape"));
    m.def(
        "make_toy_dataset",
        [](const std::string& kind, size_t n, uint64_t seed) {
            return to_numpy(make_toy_dataset(kind, n, seed));
        },
        py::arg("kind"), py::arg("n"), py::arg("seed") = 0);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("steps", &TrainConfig::steps)
        .def_readwrite("batch", &TrainConfig::batch)
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("adam_beta1", &TrainConfig::adam_beta1)
        .def_readwrite("adam_beta2", &TrainConfig::adam_beta2)
        .def_readwrite("seed", &TrainConfig::seed);

    py::class_<NoiseModel>(m, "NoiseModel")
        .def_property_readonly("arch",
                               [](const NoiseModel& mdl) {
                                   return mdl.arch == NoiseModel::Arch::mlp ? "mlp" : "conv";
                               })
        .def_property_readonly("io_shape",
                               [](const NoiseModel& mdl) {
                                   return py::make_tuple(mdl.io_shape[0], mdl.io_shape[1], mdl.io_shape[2]);
                               })
        .def("forward", [](const NoiseModel& mdl, const py::array_t<double>& x, const py::object& t) {
            Tensor xt = from_numpy(x);
            return to_numpy(forward(mdl, xt, timestep_vec(t, xt.shape[0])));
        });

    m.def(
        "make_model",
        [](const std::string& arch, std::array<size_t, 3> io_shape, uint64_t seed, size_t hidden_width,
           size_t hidden_layers, size_t time_embed_dim, size_t conv_width) {
            Rng rng(seed);
            ModelOptions opts{hidden_width, hidden_layers, time_embed_dim, conv_width};
            return make_model(parse_arch(arch), io_shape, opts, rng);
        },
        py::arg("arch"), py::arg("io_shape"), py::arg("seed") = 0, py::arg("hidden_width") = 128,
        py::arg("hidden_layers") = 3, py::arg("time_embed_dim") = 32, py::arg("conv_width") = 32);

    m.def(
        "train",
        [](const NoiseModel& mdl, const py::array_t<double>& dataset, const Schedule& schedule,
           const TrainConfig& cfg) {
            TrainResult r = train(mdl, from_numpy(dataset), schedule, cfg);
            return py::make_tuple(r.model, to_numpy(Tensor({r.loss_curve.size()}, r.loss_curve)));
        },
        py::arg("model"), py::arg("dataset"), py::arg("schedule"), py::arg("config"));

    m.def(
        "loss_and_grads",
        [](const NoiseModel& mdl, const py::array_t<double>& x0, const std::vector<double>& t,
           const py::array_t<double>& eps, const Schedule& schedule) {
            LossGrads lg = loss_and_grads(mdl, from_numpy(x0), t, from_numpy(eps), schedule);
            py::dict grads;
            for (size_t i = 0; i < mdl.params.size(); ++i)
                grads[py::str(mdl.params[i].name)] = to_numpy(lg.grads[i]);
            return py::make_tuple(lg.loss, grads);
        },
        py::arg("model"), py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));

    py::class_<QuantParams>(m, "QuantParams")
        .def(py::init<>())
        .def_readwrite("scale", &QuantParams::scale)
        .def_readwrite("zero_point", &QuantParams::zero_point)
        .def_readwrite("q_min", &QuantParams::q_min)
        .def_readwrite("q_max", &QuantParams::q_max)
        .def_readwrite("bits", &QuantParams::bits);

    m.def("calibrate_range", &calibrate_range, py::arg("lo"), py::arg("hi"), py::arg("bits"),
          py::arg("scheme"));
    py::enum_<QuantScheme>(m, "QuantScheme")
        .value("minmax_symmetric", QuantScheme::minmax_symmetric)
        .value("minmax_asymmetric", QuantScheme::minmax_asymmetric);

    m.def(
        "quantize",
        [](const py::array_t<double>& x, const QuantParams& p) { return to_numpy(quantize(from_numpy(x), p)); },
        py::arg("x"), py::arg("params"));

    py::class_<QuantizedModel>(m, "QuantizedModel")
        .def_readonly("weight_bits", &QuantizedModel::weight_bits)
        .def_readonly("act_bits", &QuantizedModel::act_bits)
        .def_readonly("calibrated", &QuantizedModel::calibrated)
        .def("forward", [](const QuantizedModel& qm, const py::array_t<double>& x, const py::object& t) {
            Tensor xt = from_numpy(x);
            return to_numpy(quantized_forward(qm, xt, timestep_vec(t, xt.shape[0])));
        });

    m.def(
        "quantize_model",
        [](const NoiseModel& mdl, int weight_bits, int act_bits, const Schedule& schedule, size_t steps,
           double eta, size_t n_calib, uint64_t seed, bool per_channel) {
            QuantizedModel qm = quantize_model(mdl, weight_bits, act_bits, QuantScheme::minmax_symmetric,
                                               QuantScheme::minmax_asymmetric, per_channel);
            CalibrationConfig cal;
            cal.n_calib = n_calib;
            cal.eta = eta;
            cal.seed = seed;
            calibrate_activations(qm, schedule, make_ddim_grid(schedule.T, steps), cal);
            return qm;
        },
        py::arg("model"), py::arg("weight_bits"), py::arg("act_bits"), py::arg("schedule"),
        py::arg("steps") = 100, py::arg("eta") = 0.0, py::arg("n_calib") = 256, py::arg("seed") = 0,
        py::arg("per_channel_weights") = false);

    py::class_<CorrectionConfig>(m, "CorrectionConfig")
        .def(py::init<>())
        .def_readwrite("lambda1", &CorrectionConfig::lambda1)
        .def_readwrite("lambda2", &CorrectionConfig::lambda2)
        .def_readwrite("k_threshold", &CorrectionConfig::k_threshold)
        .def_readwrite("calib_batch", &CorrectionConfig::calib_batch)
        .def_readwrite("eps_floor", &CorrectionConfig::eps_floor)
        .def_readwrite("apply_ner", &CorrectionConfig::apply_ner)
        .def_readwrite("apply_ibc", &CorrectionConfig::apply_ibc)
        .def_readwrite("first_step_only", &CorrectionConfig::first_step_only)
        .def_readwrite("estimation_bias_only", &CorrectionConfig::estimation_bias_only)
        .def_readwrite("eq22_literal_placement", &CorrectionConfig::eq22_literal_placement)
        .def_readwrite("signed_mask", &CorrectionConfig::signed_mask)
        .def_readwrite("sequential_coupling", &CorrectionConfig::sequential_coupling);

    py::class_<CorrectionTable>(m, "CorrectionTable")
        .def_property_readonly("K", [](const CorrectionTable& t) { return to_numpy(t.K); })
        .def_property_readonly("B", [](const CorrectionTable& t) { return to_numpy(t.B); })
        .def_readonly("tau", &CorrectionTable::tau)
        .def_readonly("mask_coverage", &CorrectionTable::mask_coverage)
        .def("eval_points", &CorrectionTable::eval_points);

    m.def(
        "rqnsr",
        [](const py::array_t<double>& eps_hat, const py::array_t<double>& eps, size_t channel) {
            return rqnsr(from_numpy(eps_hat), from_numpy(eps), channel);
        },
        py::arg("eps_hat"), py::arg("eps"), py::arg("channel") = 0);
    m.def(
        "reconstruction_loss",
        [](double k, const py::array_t<double>& eps_hat, const py::array_t<double>& eps, size_t channel,
           const CorrectionConfig& cfg, const py::object& mask) {
            if (mask.is_none()) return reconstruction_loss(k, from_numpy(eps_hat), from_numpy(eps), channel, cfg);
            Tensor mt = from_numpy(mask.cast<py::array_t<double>>());
            return reconstruction_loss(k, from_numpy(eps_hat), from_numpy(eps), channel, cfg, &mt);
        },
        py::arg("k"), py::arg("eps_hat"), py::arg("eps"), py::arg("channel"), py::arg("config"),
        py::arg("mask") = py::none());
    m.def(
        "solve_k",
        [](const py::array_t<double>& eps_hat, const py::array_t<double>& eps,
           const py::array_t<double>& mask, const CorrectionConfig& cfg) {
            return solve_k(from_numpy(eps_hat), from_numpy(eps), from_numpy(mask), cfg);
        },
        py::arg("eps_hat"), py::arg("eps"), py::arg("mask"), py::arg("config"));
    m.def(
        "compute_threshold",
        [](const py::array_t<double>& eps, double k_threshold) {
            return compute_threshold(from_numpy(eps), k_threshold);
        },
        py::arg("eps"), py::arg("k_threshold"));
    m.def(
        "build_mask",
        [](const py::array_t<double>& eps, double tau, bool signed_mask) {
            return to_numpy(build_mask(from_numpy(eps), tau, signed_mask));
        },
        py::arg("eps"), py::arg("tau"), py::arg("signed_mask") = false);
    m.def(
        "compute_bias",
        [](const py::array_t<double>& x_hat, const py::array_t<double>& x) {
            return to_numpy(compute_bias(from_numpy(x_hat), from_numpy(x)));
        },
        py::arg("x_hat_batch"), py::arg("x_batch"));

    m.def(
        "precalculate",
        [](const NoiseModel& fp, const QuantizedModel& qm, const Schedule& schedule, size_t steps,
           const std::string& sampler, double eta, const CorrectionConfig& cfg, uint64_t seed) {
            const SamplerKind kind = parse_sampler_kind(sampler);
            const TimestepGrid grid = (kind == SamplerKind::ddim) ? make_ddim_grid(schedule.T, steps)
                                                                  : make_dpmpp_grid(schedule, steps);
            Rng rng(seed);
            return precalculate(fp, qm, schedule, grid, kind, eta, cfg, rng).table;
        },
        py::arg("fp_model"), py::arg("qmodel"), py::arg("schedule"), py::arg("steps") = 100,
        py::arg("sampler") = "ddim", py::arg("eta") = 0.0, py::arg("config") = CorrectionConfig{},
        py::arg("seed") = 0);

    m.def(
        "corrected_eps",
        [](const QuantizedModel& qm, const CorrectionTable& table, const py::array_t<double>& x, double t) {
            return to_numpy(corrected_eps(qm, table, from_numpy(x), t));
        },
        py::arg("qmodel"), py::arg("table"), py::arg("x_hat"), py::arg("t"));

    auto sample_impl = [](const py::object& model, const Schedule& schedule, const std::string& sampler,
                          size_t steps, double eta, size_t n, uint64_t seed, const py::object& table) {
        const SamplerKind kind = parse_sampler_kind(sampler);
        const CorrectionTable* tp = nullptr;
        CorrectionTable tbl;
        if (!table.is_none()) {
            tbl = table.cast<CorrectionTable>();
            tp = &tbl;
        }
        SamplerConfig cfg;
        cfg.kind = kind;
        cfg.steps = steps;
        cfg.eta = eta;
        cfg.grid = (kind == SamplerKind::ddim) ? make_ddim_grid(schedule.T, steps)
                                               : make_dpmpp_grid(schedule, steps);
        cfg.correction = tp;
        Rng rng(seed);
        if (py::isinstance<NoiseModel>(model)) {
            const NoiseModel& mdl = model.cast<const NoiseModel&>();
            FpEvaluator eval(mdl);
            SampleRun run = (kind == SamplerKind::ddim) ? sample_ddim(eval, schedule, cfg, n, rng)
                                                        : sample_dpmpp(eval, schedule, cfg, n, rng);
            return to_numpy(run.samples);
        }
        const QuantizedModel& qm = model.cast<const QuantizedModel&>();
        QuantEvaluator eval(qm);
        SampleRun run = (kind == SamplerKind::ddim) ? sample_ddim(eval, schedule, cfg, n, rng)
                                                    : sample_dpmpp(eval, schedule, cfg, n, rng);
        return to_numpy(run.samples);
    };
    m.def("sample", sample_impl, py::arg("model"), py::arg("schedule"), py::arg("sampler") = "ddim",
          py::arg("steps") = 100, py::arg("eta") = 0.0, py::arg("n") = 16, py::arg("seed") = 0,
          py::arg("table") = py::none());

    m.def(
        "energy_distance",
        [](const py::array_t<double>& a, const py::array_t<double>& b) {
            return energy_distance(flatten_samples(from_numpy(a)), flatten_samples(from_numpy(b)));
        },
        py::arg("a"), py::arg("b"));
    m.def(
        "sliced_wasserstein",
        [](const py::array_t<double>& a, const py::array_t<double>& b, size_t n_proj, uint64_t seed) {
            return sliced_wasserstein(flatten_samples(from_numpy(a)), flatten_samples(from_numpy(b)),
                                      n_proj, seed);
        },
        py::arg("a"), py::arg("b"), py::arg("n_proj") = 128, py::arg("seed") = 7);

    m.def("save_model", [](const std::string& path, const NoiseModel& mdl,
                           const Schedule& s) { write_checkpoint(path, pack_model(mdl, s)); });
    m.def("load_model", [](const std::string& path) {
        const Checkpoint c = read_checkpoint_expect(path, CkptKind::model);
        return py::make_tuple(unpack_model(c), c.schedule);
    });
}
