#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tacq/checkpoint.hpp"
#include "tacq/pipeline.hpp"
#include "tacq/sampler.hpp"

using namespace tacq;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const char* name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::vector<char>((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

std::string slurp_text(const std::string& path) {
    const std::vector<char> raw = slurp(path);
    return std::string(raw.begin(), raw.end());
}

// Small, fast end-to-end configuration.
RunConfig tiny_config() {
    RunConfig cfg = parse_config_text(
        "dataset.kind=gauss2d\n"
        "dataset.n=256\n"
        "model.hidden_width=16\n"
        "model.hidden_layers=2\n"
        "schedule.steps=64\n"
        "train.steps=150\n"
        "train.batch=32\n"
        "quant.n_calib=24\n"
        "correction.batch=8\n"
        "sampler.steps=6\n"
        "sample.n=48\n"
        "eval.reference_n=96\n"
        "seed=11\n");
    return cfg;
}

struct Stack {
    RunConfig cfg = tiny_config();
    std::string dir;
    std::string model, qmodel;

    explicit Stack(const char* name) : dir(fresh_dir(name)) {
        model = run_train(cfg, dir);
        qmodel = run_quantize(model, cfg, dir);
    }
};

}  // namespace

TEST_CASE("train stage writes a deterministic checkpoint and loss curve") {
    RunConfig cfg = tiny_config();
    const std::string d1 = fresh_dir("tacq_pl_train1");
    const std::string d2 = fresh_dir("tacq_pl_train2");
    const std::string m1 = run_train(cfg, d1);
    const std::string m2 = run_train(cfg, d2);
    CHECK(slurp(m1) == slurp(m2));
    const std::string curve = slurp_text(d1 + "/loss_curve.csv");
    CHECK(curve.rfind("step,loss\n", 0) == 0);
    CHECK(std::count(curve.begin(), curve.end(), '\n') == 151);
}

TEST_CASE("quantize stage records positive scales and passthrough matches fp") {
    Stack s("tacq_pl_quant");
    const Checkpoint qc = read_checkpoint_expect(s.qmodel, CkptKind::qmodel);
    const Tensor& ranges = qc.array("act_ranges");
    for (size_t i = 0; i < ranges.shape[0]; ++i) CHECK(ranges.data[2 * i] <= ranges.data[2 * i + 1]);

    QuantizedModel qm = unpack_qmodel(qc);
    for (const QuantParams& p : qm.act_qparams) CHECK(p.scale > 0.0);

    RunConfig fp_cfg = s.cfg;
    fp_cfg.weight_bits = 32;
    fp_cfg.act_bits = 32;
    const std::string d = fresh_dir("tacq_pl_quant_fp");
    const std::string q32 = run_quantize(s.model, fp_cfg, d);
    QuantizedModel qm32 = unpack_qmodel(read_checkpoint_expect(q32, CkptKind::qmodel));
    NoiseModel m = unpack_model(read_checkpoint_expect(s.model, CkptKind::model));
    Rng rng(5);
    Tensor x = rng.randn({4, 2, 1, 1});
    CHECK(quantized_forward(qm32, x, {1.0, 2.0, 3.0, 5.0}).data ==
          forward(m, x, {1.0, 2.0, 3.0, 5.0}).data);

    // Same inputs, same checkpoint bytes.
    const std::string d2 = fresh_dir("tacq_pl_quant_rep");
    CHECK(slurp(run_quantize(s.model, s.cfg, d2)) == slurp(s.qmodel));
}

TEST_CASE("correct stage emits a round-trippable table with identity rows for passthrough") {
    Stack s("tacq_pl_correct");
    RunConfig fp_cfg = s.cfg;
    fp_cfg.weight_bits = 32;
    fp_cfg.act_bits = 32;
    const std::string d = fresh_dir("tacq_pl_correct_fp");
    const std::string q32 = run_quantize(s.model, fp_cfg, d);
    const std::string t32 = run_correct(s.model, q32, fp_cfg, d, true);
    CorrectionTable ident = unpack_table(read_checkpoint_expect(t32, CkptKind::table));
    for (double v : ident.K.data) CHECK(v == 1.0);
    for (double v : ident.B.data) CHECK(v == 0.0);

    const std::string table = run_correct(s.model, s.qmodel, s.cfg, s.dir, true);
    CorrectionTable t = unpack_table(read_checkpoint_expect(table, CkptKind::table));
    const std::string copy = s.dir + "/table_copy.tacq";
    write_checkpoint(copy, pack_table(t, read_checkpoint(table).schedule));
    CHECK(slurp(copy) == slurp(table));

    // First-step-only tables keep identity rows after the first evaluation.
    RunConfig fs_cfg = s.cfg;
    fs_cfg.correction.first_step_only = true;
    const std::string dfs = fresh_dir("tacq_pl_correct_fs");
    CorrectionTable tfs =
        unpack_table(read_checkpoint_expect(run_correct(s.model, s.qmodel, fs_cfg, dfs, true), CkptKind::table));
    const size_t C = tfs.K.shape[1];
    for (size_t i = 1; i < tfs.rows(); ++i)
        for (size_t c = 0; c < C; ++c) CHECK(tfs.K.data[i * C + c] == 1.0);
}

TEST_CASE("sample stage is deterministic and supports single-sample smoke runs") {
    Stack s("tacq_pl_sample");
    SampleOutputs one = run_sample(s.model, "", "", s.cfg, fresh_dir("tacq_pl_sample_one"), 1);
    const Checkpoint c = read_checkpoint_expect(one.samples_path, CkptKind::samples);
    CHECK(c.array("samples").shape == std::vector<size_t>{1, 2, 1, 1});

    SampleOutputs a = run_sample(s.model, "", "", s.cfg, fresh_dir("tacq_pl_sample_a"));
    SampleOutputs b = run_sample(s.model, "", "", s.cfg, fresh_dir("tacq_pl_sample_b"));
    CHECK(slurp(a.samples_path) == slurp(b.samples_path));

    // Corrected and uncorrected quantized runs both produce artifacts.
    const std::string table = run_correct(s.model, s.qmodel, s.cfg, s.dir, true);
    SampleOutputs plain = run_sample("", s.qmodel, "", s.cfg, fresh_dir("tacq_pl_sample_q"));
    SampleOutputs corr = run_sample("", s.qmodel, table, s.cfg, fresh_dir("tacq_pl_sample_qc"));
    CHECK(slurp(plain.samples_path) != slurp(corr.samples_path));
}

TEST_CASE("eval stage reports zero against itself and honors thresholds") {
    Stack s("tacq_pl_eval");
    SampleOutputs out = run_sample(s.model, "", "", s.cfg, fresh_dir("tacq_pl_eval_s"));
    EvalOutcome self = run_eval(out.samples_path, out.samples_path, fresh_dir("tacq_pl_eval_r"));
    CHECK(self.report.energy <= 1e-12);
    CHECK_FALSE(self.threshold_exceeded);

    // The CSV parses back to the same numbers.
    const std::string csv = slurp_text(self.report_csv_path);
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);  // header
    bool found = false;
    while (std::getline(is, line)) {
        if (line.rfind("energy_distance,", 0) == 0) {
            CHECK(std::stod(line.substr(16)) == self.report.energy);
            found = true;
        }
    }
    CHECK(found);

    RunConfig other = s.cfg;
    other.seed = 1234567;
    SampleOutputs moved = run_sample(s.model, "", "", other, fresh_dir("tacq_pl_eval_m"));
    EvalOutcome gap = run_eval(moved.samples_path, out.samples_path, fresh_dir("tacq_pl_eval_g"), 1e-15);
    CHECK(gap.threshold_exceeded);
}

TEST_CASE("ablation on a passthrough model ties all variants") {
    RunConfig cfg = tiny_config();
    cfg.weight_bits = 32;
    cfg.act_bits = 32;
    cfg.sample_n = 32;
    cfg.reference_n = 64;
    const std::string dir = fresh_dir("tacq_pl_ablate32");
    const std::string csv_path = run_ablate(cfg, dir);
    const std::string csv = slurp_text(csv_path);
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    CHECK(line == "variant,energy_distance,delta_vs_baseline,sliced_w1");
    std::vector<double> energies;
    std::vector<std::string> labels;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const size_t c1 = line.find(',');
        const size_t c2 = line.find(',', c1 + 1);
        labels.push_back(line.substr(0, c1));
        energies.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
    }
    REQUIRE(energies.size() == 4);
    for (size_t i = 1; i < 4; ++i) CHECK(energies[i] == doctest::Approx(energies[0]).epsilon(1e-12));
    // Labels follow the progressive ablation structure.
    bool has_baseline = false, has_full = false;
    for (const std::string& l : labels) {
        if (l == "baseline") has_baseline = true;
        if (l == "+ner+ibc+timestep-aware") has_full = true;
    }
    CHECK(has_baseline);
    CHECK(has_full);
}

TEST_CASE("lambda sweep writes one row per value, rejects bad grids, reruns byte-identical") {
    Stack s("tacq_pl_sweep");
    RunConfig cfg = s.cfg;
    cfg.sample_n = 32;
    cfg.reference_n = 64;
    const std::string d1 = fresh_dir("tacq_pl_sweep1");
    const std::string csv1 = run_sweep_lambda(cfg, d1, {0.0, 0.5}, s.model, s.qmodel);
    const std::string text = slurp_text(csv1);
    CHECK(text.rfind("lambda1,energy_distance\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);

    const std::string d2 = fresh_dir("tacq_pl_sweep2");
    const std::string csv2 = run_sweep_lambda(cfg, d2, {0.0, 0.5}, s.model, s.qmodel);
    CHECK(slurp(csv1) == slurp(csv2));

    CHECK_THROWS_AS(run_sweep_lambda(cfg, d1, {1.0}, s.model, s.qmodel), ConfigError);

    // A single-value sweep equals the correct/sample/eval composition.
    RunConfig one = cfg;
    one.correction.lambda1 = 0.5;
    const std::string dc = fresh_dir("tacq_pl_sweep_comp");
    const std::string table = run_correct(s.model, s.qmodel, one, dc, true);
    SampleOutputs samples = run_sample("", s.qmodel, table, one, dc);
    SampleOutputs ref = run_sample(s.model, "", "", one, fresh_dir("tacq_pl_sweep_ref"), one.reference_n);
    EvalOutcome direct = run_eval(samples.samples_path, ref.samples_path, dc);
    std::istringstream rows(text);
    std::string line;
    std::getline(rows, line);
    double swept = -1.0;
    while (std::getline(rows, line)) {
        if (line.rfind("0.5,", 0) == 0) swept = std::stod(line.substr(4));
    }
    CHECK(swept == direct.report.energy);
}

TEST_CASE("hist stage bins activations from a trajectory dump") {
    Stack s("tacq_pl_hist");
    RunConfig cfg = s.cfg;
    cfg.dump_trajectory = true;
    cfg.dump_batch = 4;
    const std::string d = fresh_dir("tacq_pl_hist_s");
    SampleOutputs out = run_sample(s.model, "", "", cfg, d);
    REQUIRE_FALSE(out.trace_path.empty());

    const std::string hist_path = run_hist(out.trace_path, 1, 2, d);
    const std::string csv = slurp_text(hist_path);
    CHECK(csv.rfind("bin_lo,bin_hi,count\n", 0) == 0);
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    size_t total = 0;
    while (std::getline(is, line)) {
        const size_t c2 = line.rfind(',');
        total += std::stoull(line.substr(c2 + 1));
    }
    const TrajectoryDump dump = unpack_trajectory(read_checkpoint(out.trace_path));
    CHECK(total == dump.activations[2][1].numel());

    // Activation ranges move across timesteps on the fp model.
    double lo0 = dump.activations[0][1].data[0], hi0 = lo0;
    for (double v : dump.activations[0][1].data) {
        lo0 = std::min(lo0, v);
        hi0 = std::max(hi0, v);
    }
    const size_t last = dump.activations.size() - 1;
    double lo1 = dump.activations[last][1].data[0], hi1 = lo1;
    for (double v : dump.activations[last][1].data) {
        lo1 = std::min(lo1, v);
        hi1 = std::max(hi1, v);
    }
    CHECK((lo0 != lo1 || hi0 != hi1));

    CHECK_THROWS_AS(run_hist(out.trace_path, 99, 0, d), ConfigError);
    CHECK_THROWS_AS(run_hist(out.trace_path, 0, 99, d), ConfigError);
}

TEST_SUITE("cli") {
    TEST_CASE("cli pipeline end to end") {
        const char* bin = std::getenv("TACQ_BIN");
        REQUIRE_MESSAGE(bin != nullptr, "TACQ_BIN must point at the cli binary (set by ctest)");
        const std::string dir = fresh_dir("tacq_cli_smoke");
        const std::string cfg_path = dir + "/run.cfg";
        {
            std::ofstream os(cfg_path);
            os << "dataset.kind=gauss2d\ndataset.n=256\nmodel.hidden_width=16\n"
               << "model.hidden_layers=2\nschedule.steps=64\ntrain.steps=120\ntrain.batch=32\n"
               << "quant.n_calib=24\ncorrection.batch=8\nsampler.steps=6\nsample.n=32\n"
               << "eval.reference_n=64\nseed=3\n";
        }
        auto sh = [&](const std::string& args) {
            const std::string cmd = std::string(bin) + " " + args + " >> " + dir + "/log.txt 2>&1";
            return std::system(cmd.c_str());
        };
        CHECK(sh("train --config " + cfg_path + " --out " + dir) == 0);
        CHECK(sh("quantize --model " + dir + "/model.tacq --config " + cfg_path + " --out " + dir) == 0);
        CHECK(sh("correct --model " + dir + "/model.tacq --qmodel " + dir + "/qmodel.tacq --config " +
                 cfg_path + " --out " + dir) == 0);
        CHECK(sh("sample --qmodel " + dir + "/qmodel.tacq --table " + dir + "/table.tacq --config " +
                 cfg_path + " --out " + dir + "/corrected") == 0);
        CHECK(sh("sample --model " + dir + "/model.tacq --config " + cfg_path + " --out " + dir +
                 "/reference --n 64") == 0);
        CHECK(sh("eval --samples " + dir + "/corrected/samples.tacq --reference " + dir +
                 "/reference/samples.tacq --out " + dir + "/report") == 0);
        CHECK(fs::exists(dir + "/report/report.csv"));

        // Usage failures exit with 1, threshold failures with 3.
        CHECK(sh("train --config /nonexistent.cfg --out " + dir) != 0);
        const int rc = sh("eval --samples " + dir + "/corrected/samples.tacq --reference " + dir +
                          "/reference/samples.tacq --out " + dir + "/report2 --threshold 1e-15");
        CHECK(WEXITSTATUS(rc) == 3);
    }

    TEST_CASE("cli rejects unknown variant and missing inputs") {
        const char* bin = std::getenv("TACQ_BIN");
        REQUIRE_MESSAGE(bin != nullptr, "TACQ_BIN must point at the cli binary (set by ctest)");
        const std::string dir = fresh_dir("tacq_cli_err");
        auto sh = [&](const std::string& args) {
            const std::string cmd = std::string(bin) + " " + args + " > /dev/null 2>&1";
            return WEXITSTATUS(std::system(cmd.c_str()));
        };
        CHECK(sh("sample --out " + dir) == 1);                         // no model given
        CHECK(sh("train --variant bogus --out " + dir) == 1);          // unknown variant
        CHECK(sh("quantize --model /missing.tacq --out " + dir) == 1); // missing checkpoint
    }
}
