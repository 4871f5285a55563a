#include "tacq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "tacq/checkpoint.hpp"
#include "tacq/errors.hpp"
#include "tacq/sampler.hpp"

namespace tacq {

namespace {

namespace fs = std::filesystem;

std::string ensure_dir(const std::string& out_dir) {
    fs::create_directories(out_dir);
    return out_dir;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot open '" + path + "' for writing");
    os << text;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Schedule schedule_of(const RunConfig& cfg) {
    return make_linear_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
}

TimestepGrid grid_of(const RunConfig& cfg, const Schedule& schedule) {
    return (parse_sampler_kind(cfg.sampler_kind) == SamplerKind::ddim)
               ? make_ddim_grid(schedule.T, cfg.sampler_steps)
               : make_dpmpp_grid(schedule, cfg.sampler_steps);
}

SampleRun sample_with(const NoiseEvaluator& eval, const Schedule& schedule, const RunConfig& cfg,
                      const CorrectionTable* table, size_t n, Rng rng, bool record = false) {
    SamplerConfig scfg;
    scfg.kind = parse_sampler_kind(cfg.sampler_kind);
    scfg.steps = cfg.sampler_steps;
    scfg.eta = cfg.eta;
    scfg.grid = grid_of(cfg, schedule);
    scfg.correction = table;
    scfg.dpmpp_apply_ibc = cfg.dpmpp_apply_ibc;
    if (scfg.kind == SamplerKind::ddim) return sample_ddim(eval, schedule, scfg, n, rng, record);
    return sample_dpmpp(eval, schedule, scfg, n, rng);
}

}  // namespace

std::string run_train(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    ensure_dir(out_dir);
    const Schedule schedule = schedule_of(cfg);
    Rng root(cfg.seed);

    const Tensor dataset = make_toy_dataset(cfg.dataset_kind, cfg.dataset_n, root.child("data").seed());
    Rng init_rng = root.child("init");
    ModelOptions opts{cfg.hidden_width, cfg.hidden_layers, cfg.time_embed_dim, cfg.conv_width};
    NoiseModel model = make_model(parse_arch(cfg.resolved_arch()), cfg.io_shape(), opts, init_rng);

    TrainConfig tc;
    tc.steps = cfg.train_steps;
    tc.batch = cfg.train_batch;
    tc.lr = cfg.lr;
    tc.adam_beta1 = cfg.adam_beta1;
    tc.adam_beta2 = cfg.adam_beta2;
    tc.seed = root.child("train").seed();
    TrainResult result = train(std::move(model), dataset, schedule, tc);

    std::string curve = "step,loss\n";
    for (size_t i = 0; i < result.loss_curve.size(); ++i)
        curve += std::to_string(i) + "," + fmt(result.loss_curve[i]) + "\n";
    write_text(out_dir + "/loss_curve.csv", curve);
    const std::vector<double> windows = loss_curve_windows(result.loss_curve);
    std::fprintf(stderr, "loss windows:");
    for (double w : windows) std::fprintf(stderr, " %.4f", w);
    std::fprintf(stderr, "\n");

    const std::string path = out_dir + "/model.tacq";
    write_checkpoint(path, pack_model(result.model, schedule));
    return path;
}

std::string run_quantize(const std::string& model_path, const RunConfig& cfg,
                         const std::string& out_dir) {
    cfg.validate();
    ensure_dir(out_dir);
    const Checkpoint mc = read_checkpoint_expect(model_path, CkptKind::model);
    const NoiseModel model = unpack_model(mc);
    const Schedule schedule = mc.schedule;

    QuantizedModel qm = quantize_model(model, cfg.weight_bits, cfg.act_bits,
                                       parse_scheme(cfg.weight_scheme), parse_scheme(cfg.act_scheme),
                                       cfg.per_channel_weights);
    CalibrationConfig cal;
    cal.n_calib = cfg.n_calib;
    cal.eta = cfg.eta;
    cal.seed = Rng(cfg.seed).child("calib").seed();
    calibrate_activations(qm, schedule, grid_of(cfg, schedule), cal);

    const std::string path = out_dir + "/qmodel.tacq";
    write_checkpoint(path, pack_qmodel(qm, schedule));
    return path;
}

std::string run_correct(const std::string& model_path, const std::string& qmodel_path,
                        const RunConfig& cfg, const std::string& out_dir, bool quiet) {
    cfg.validate();
    ensure_dir(out_dir);
    const Checkpoint mc = read_checkpoint_expect(model_path, CkptKind::model);
    const NoiseModel model = unpack_model(mc);
    const QuantizedModel qm = unpack_qmodel(read_checkpoint_expect(qmodel_path, CkptKind::qmodel));
    const Schedule schedule = mc.schedule;
    const TimestepGrid grid = grid_of(cfg, schedule);
    const SamplerKind kind = parse_sampler_kind(cfg.sampler_kind);

    Rng rng = Rng(cfg.seed).child("correct");
    PrecalcResult pre = precalculate(model, qm, schedule, grid, kind, cfg.eta, cfg.correction, rng);

    if (!quiet) {
        const std::vector<double> pts = pre.table.eval_points();
        const size_t C = pre.table.K.shape[1];
        for (size_t i = 0; i < pre.table.rows(); ++i) {
            double klo = pre.table.K.data[i * C], khi = klo;
            for (size_t c = 1; c < C; ++c) {
                klo = std::min(klo, pre.table.K.data[i * C + c]);
                khi = std::max(khi, pre.table.K.data[i * C + c]);
            }
            std::printf("eval %3zu  t=%8.2f  K=[%.4f, %.4f]  tau=%.5f  coverage=%.3f\n", i, pts[i], klo,
                        khi, pre.table.tau[i], pre.table.mask_coverage[i]);
        }
    }

    const std::string path = out_dir + "/table.tacq";
    write_checkpoint(path, pack_table(pre.table, schedule));
    return path;
}

SampleOutputs run_sample(const std::string& model_path, const std::string& qmodel_path,
                         const std::string& table_path, const RunConfig& cfg,
                         const std::string& out_dir, std::optional<size_t> n_override) {
    cfg.validate();
    ensure_dir(out_dir);
    SampleOutputs out;

    NoiseModel model;
    QuantizedModel qmodel;
    Schedule schedule;
    const bool quant = !qmodel_path.empty();
    if (quant) {
        const Checkpoint qc = read_checkpoint_expect(qmodel_path, CkptKind::qmodel);
        qmodel = unpack_qmodel(qc);
        schedule = qc.schedule;
    } else {
        const Checkpoint mc = read_checkpoint_expect(model_path, CkptKind::model);
        model = unpack_model(mc);
        schedule = mc.schedule;
    }

    CorrectionTable table;
    const CorrectionTable* table_ptr = nullptr;
    if (!table_path.empty()) {
        if (!quant) throw ConfigError("run_sample: a correction table requires a quantized model");
        table = unpack_table(read_checkpoint_expect(table_path, CkptKind::table));
        table_ptr = &table;
    }

    const size_t n = n_override.value_or(cfg.sample_n);
    Rng rng = Rng(cfg.seed).child("sample");
    FpEvaluator fp_eval(model);
    QuantEvaluator q_eval(qmodel);
    const NoiseEvaluator& eval = quant ? static_cast<const NoiseEvaluator&>(q_eval) : fp_eval;

    SampleRun run = sample_with(eval, schedule, cfg, table_ptr, n, rng);
    out.samples_path = out_dir + "/samples.tacq";
    write_checkpoint(out.samples_path, pack_samples(run.samples, run.seed, schedule));
    std::fprintf(stderr, "sampled %zu in %.2fs\n", n, run.wall_seconds);

    if (cfg.dump_trajectory) {
        if (parse_sampler_kind(cfg.sampler_kind) != SamplerKind::ddim)
            throw ConfigError("run_sample: trajectory dumps are supported for the ddim sampler");
        Rng dump_rng = Rng(cfg.seed).child("sample");
        SamplerConfig scfg;
        scfg.kind = SamplerKind::ddim;
        scfg.steps = cfg.sampler_steps;
        scfg.eta = cfg.eta;
        scfg.grid = grid_of(cfg, schedule);
        scfg.correction = table_ptr;
        SampleRun dump_run =
            quant ? sample_ddim(q_eval, schedule, scfg, cfg.dump_batch, dump_rng, true)
                  : sample_ddim_with_dump(model, schedule, scfg, cfg.dump_batch, dump_rng);
        out.trace_path = out_dir + "/trace.tacq";
        write_checkpoint(out.trace_path, pack_trajectory(*dump_run.trajectory, schedule));
    }
    return out;
}

EvalOutcome run_eval(const std::string& samples_path, const std::string& reference_path,
                     const std::string& out_dir, std::optional<double> threshold) {
    ensure_dir(out_dir);
    const Checkpoint sc = read_checkpoint_expect(samples_path, CkptKind::samples);
    const Checkpoint rc = read_checkpoint_expect(reference_path, CkptKind::samples);
    EvalOutcome out;
    out.report = make_dist_report(sc.array("samples"), rc.array("samples"));
    out.report_txt_path = out_dir + "/report.txt";
    out.report_csv_path = out_dir + "/report.csv";
    write_text(out.report_txt_path, dist_report_text(out.report));
    write_text(out.report_csv_path, dist_report_csv(out.report));
    if (threshold && out.report.energy > *threshold) out.threshold_exceeded = true;
    return out;
}

namespace {

struct AblateStack {
    Schedule schedule;
    NoiseModel model;
    QuantizedModel qmodel;
    std::string model_path, qmodel_path;
};

AblateStack build_or_load(const RunConfig& cfg, const std::string& out_dir,
                          const std::string& model_path, const std::string& qmodel_path) {
    AblateStack s;
    s.model_path = model_path.empty() ? run_train(cfg, out_dir) : model_path;
    s.qmodel_path = qmodel_path.empty() ? run_quantize(s.model_path, cfg, out_dir) : qmodel_path;
    const Checkpoint mc = read_checkpoint_expect(s.model_path, CkptKind::model);
    s.model = unpack_model(mc);
    s.schedule = mc.schedule;
    s.qmodel = unpack_qmodel(read_checkpoint_expect(s.qmodel_path, CkptKind::qmodel));
    return s;
}

}  // namespace

std::string run_ablate(const RunConfig& cfg, const std::string& out_dir,
                       const std::string& model_path, const std::string& qmodel_path) {
    cfg.validate();
    ensure_dir(out_dir);
    AblateStack s = build_or_load(cfg, out_dir, model_path, qmodel_path);
    const TimestepGrid grid = grid_of(cfg, s.schedule);
    const SamplerKind kind = parse_sampler_kind(cfg.sampler_kind);

    FpEvaluator fp_eval(s.model);
    QuantEvaluator q_eval(s.qmodel);
    const Tensor reference =
        sample_with(fp_eval, s.schedule, cfg, nullptr, cfg.reference_n, Rng(cfg.seed).child("sample")).samples;

    struct Variant {
        std::string label;
        bool corrected;
        bool ner, ibc, first_only;
    };
    const std::vector<Variant> variants = {
        {"baseline", false, false, false, false},
        {"+ibc (first step)", true, false, true, true},
        {"+ner+ibc (first step)", true, true, true, true},
        {"+ner+ibc+timestep-aware", true, true, true, false},
    };

    std::vector<std::pair<std::string, DistReport>> rows;
    for (const Variant& v : variants) {
        CorrectionTable table;
        const CorrectionTable* table_ptr = nullptr;
        if (v.corrected) {
            CorrectionConfig cc = cfg.correction;
            cc.apply_ner = v.ner;
            cc.apply_ibc = v.ibc;
            cc.first_step_only = v.first_only;
            cc.estimation_bias_only = false;
            Rng rng = Rng(cfg.seed).child("correct");
            table = precalculate(s.model, s.qmodel, s.schedule, grid, kind, cfg.eta, cc, rng).table;
            table_ptr = &table;
        }
        const Tensor samples =
            sample_with(q_eval, s.schedule, cfg, table_ptr, cfg.sample_n, Rng(cfg.seed).child("sample"))
                .samples;
        rows.emplace_back(v.label, make_dist_report(samples, reference));
    }

    const std::string text = ablation_summary(rows);
    std::fputs(text.c_str(), stdout);
    write_text(out_dir + "/ablation.txt", text);
    const std::string csv_path = out_dir + "/ablation.csv";
    write_text(csv_path, ablation_csv(rows));
    return csv_path;
}

std::string run_sweep_lambda(const RunConfig& cfg, const std::string& out_dir,
                             const std::vector<double>& lambda1_grid, const std::string& model_path,
                             const std::string& qmodel_path) {
    cfg.validate();
    for (double l : lambda1_grid)
        if (!(l >= 0.0 && l < 1.0))
            throw ConfigError("sweep: lambda1 = " + std::to_string(l) + " outside [0,1)");
    ensure_dir(out_dir);
    AblateStack s = build_or_load(cfg, out_dir, model_path, qmodel_path);
    const TimestepGrid grid = grid_of(cfg, s.schedule);
    const SamplerKind kind = parse_sampler_kind(cfg.sampler_kind);

    FpEvaluator fp_eval(s.model);
    QuantEvaluator q_eval(s.qmodel);
    const Tensor reference =
        sample_with(fp_eval, s.schedule, cfg, nullptr, cfg.reference_n, Rng(cfg.seed).child("sample")).samples;

    std::string csv = "lambda1,energy_distance\n";
    for (double l1 : lambda1_grid) {
        CorrectionConfig cc = cfg.correction;
        cc.lambda1 = l1;
        Rng rng = Rng(cfg.seed).child("correct");
        CorrectionTable table =
            precalculate(s.model, s.qmodel, s.schedule, grid, kind, cfg.eta, cc, rng).table;
        const Tensor samples =
            sample_with(q_eval, s.schedule, cfg, &table, cfg.sample_n, Rng(cfg.seed).child("sample"))
                .samples;
        const Tensor a = flatten_samples(samples);
        const Tensor b = flatten_samples(reference);
        csv += fmt(l1) + "," + fmt(energy_distance(a, b)) + "\n";
    }
    const std::string path = out_dir + "/sweep_lambda1.csv";
    write_text(path, csv);
    return path;
}

std::string run_hist(const std::string& trace_path, size_t boundary, size_t step_index,
                     const std::string& out_dir) {
    ensure_dir(out_dir);
    const TrajectoryDump dump = unpack_trajectory(read_checkpoint(trace_path));
    if (step_index >= dump.eps.size())
        throw ConfigError("hist: step index " + std::to_string(step_index) + " out of range (dump has " +
                          std::to_string(dump.eps.size()) + " evaluations)");
    if (dump.activations.empty() || boundary >= dump.activations[step_index].size())
        throw ConfigError("hist: boundary " + std::to_string(boundary) + " not present in the dump");
    const Tensor& v = dump.activations[step_index][boundary];

    double lo = v.data[0], hi = v.data[0];
    for (double x : v.data) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    const size_t bins = (hi > lo) ? 64 : 1;
    std::vector<size_t> counts(bins, 0);
    for (double x : v.data) {
        size_t b = 0;
        if (bins > 1) {
            b = static_cast<size_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
            if (b >= bins) b = bins - 1;
        }
        ++counts[b];
    }
    std::string csv = "bin_lo,bin_hi,count\n";
    for (size_t b = 0; b < bins; ++b) {
        const double blo = (bins > 1) ? lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins) : lo;
        const double bhi = (bins > 1) ? lo + (hi - lo) * static_cast<double>(b + 1) / static_cast<double>(bins) : hi;
        csv += fmt(blo) + "," + fmt(bhi) + "," + std::to_string(counts[b]) + "\n";
    }
    char namebuf[64];
    std::snprintf(namebuf, sizeof(namebuf), "/hist_step%04zu_layer%02zu.csv", step_index, boundary);
    const std::string path = out_dir + namebuf;
    write_text(path, csv);
    return path;
}

}  // namespace tacq
