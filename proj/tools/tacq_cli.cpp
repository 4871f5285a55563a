#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tacq/errors.hpp"
#include "tacq/pipeline.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<uint64_t> seed;
    std::optional<int> bits_w, bits_a;
    std::optional<double> lambda1, lambda2, k_threshold;
    std::string variant;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "experiment config file (key=value)");
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--seed", o.seed, "root seed override");
    cmd->add_option("--bits-w", o.bits_w, "weight bits override {2,3,4,8,32}");
    cmd->add_option("--bits-a", o.bits_a, "activation bits override {6,8,32}");
    cmd->add_option("--lambda1", o.lambda1, "rQNSR penalty weight in [0,1)");
    cmd->add_option("--lambda2", o.lambda2, "regularization coefficient (> 0)");
    cmd->add_option("--k-threshold", o.k_threshold, "mask threshold coefficient");
    cmd->add_option("--variant", o.variant,
                    "correction variant: baseline|ibc|ner-ibc|tac|first-step|est-bias|eq22");
}

tacq::RunConfig load_config(const CommonOpts& o) {
    tacq::RunConfig cfg =
        o.config_path.empty() ? tacq::RunConfig{} : tacq::parse_config_file(o.config_path);
    if (o.seed) cfg.seed = *o.seed;
    if (o.bits_w) cfg.weight_bits = *o.bits_w;
    if (o.bits_a) cfg.act_bits = *o.bits_a;
    if (o.lambda1) cfg.correction.lambda1 = *o.lambda1;
    if (o.lambda2) cfg.correction.lambda2 = *o.lambda2;
    if (o.k_threshold) cfg.correction.k_threshold = *o.k_threshold;
    if (!o.variant.empty()) tacq::apply_variant(cfg, o.variant);
    return cfg;
}

std::vector<double> parse_grid(const std::string& csv) {
    if (csv.empty()) {
        std::vector<double> g;
        for (int i = 0; i <= 9; ++i) g.push_back(0.1 * i);
        return g;
    }
    std::vector<double> g;
    size_t pos = 0;
    while (pos < csv.size()) {
        size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        g.push_back(std::stod(csv.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return g;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale diffusion model quantization with timestep-aware correction"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string model_path, qmodel_path, table_path, samples_path, reference_path, trace_path;
    std::string grid_csv;
    std::optional<size_t> n_samples;
    std::optional<double> threshold;
    size_t hist_layer = 0, hist_step = 0;

    CLI::App* c_train = app.add_subcommand("train", "train a noise model on a toy dataset");
    add_common(c_train, opts);

    CLI::App* c_quant = app.add_subcommand("quantize", "fake-quantize and calibrate a model");
    add_common(c_quant, opts);
    c_quant->add_option("--model", model_path, "model checkpoint")->required();

    CLI::App* c_correct = app.add_subcommand("correct", "pre-calculate correction tables");
    add_common(c_correct, opts);
    c_correct->add_option("--model", model_path, "full-precision model checkpoint")->required();
    c_correct->add_option("--qmodel", qmodel_path, "quantized model checkpoint")->required();

    CLI::App* c_sample = app.add_subcommand("sample", "generate samples");
    add_common(c_sample, opts);
    c_sample->add_option("--model", model_path, "full-precision model checkpoint");
    c_sample->add_option("--qmodel", qmodel_path, "quantized model checkpoint");
    c_sample->add_option("--table", table_path, "correction table checkpoint");
    c_sample->add_option("--n", n_samples, "number of samples");

    CLI::App* c_eval = app.add_subcommand("eval", "compare two sample sets");
    add_common(c_eval, opts);
    c_eval->add_option("--samples", samples_path, "samples checkpoint")->required();
    c_eval->add_option("--reference", reference_path, "reference samples checkpoint")->required();
    c_eval->add_option("--threshold", threshold, "fail (exit 3) if energy distance exceeds this");

    CLI::App* c_ablate = app.add_subcommand("ablate", "run the correction ablation");
    add_common(c_ablate, opts);
    c_ablate->add_option("--model", model_path, "reuse an existing model checkpoint");
    c_ablate->add_option("--qmodel", qmodel_path, "reuse an existing qmodel checkpoint");

    CLI::App* c_sweep = app.add_subcommand("sweep-lambda", "sweep the rQNSR penalty weight");
    add_common(c_sweep, opts);
    c_sweep->add_option("--grid", grid_csv, "comma-separated lambda1 values (default 0.0..0.9)");
    c_sweep->add_option("--model", model_path, "reuse an existing model checkpoint");
    c_sweep->add_option("--qmodel", qmodel_path, "reuse an existing qmodel checkpoint");

    CLI::App* c_hist = app.add_subcommand("hist", "activation histogram from a trajectory dump");
    add_common(c_hist, opts);
    c_hist->add_option("--trace", trace_path, "trajectory dump checkpoint")->required();
    c_hist->add_option("--layer", hist_layer, "boundary (layer) index");
    c_hist->add_option("--timestep", hist_step, "evaluation (grid step) index");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (c_train->parsed()) {
            const std::string path = tacq::run_train(load_config(opts), opts.out_dir);
            std::printf("%s\n", path.c_str());
        } else if (c_quant->parsed()) {
            const std::string path = tacq::run_quantize(model_path, load_config(opts), opts.out_dir);
            std::printf("%s\n", path.c_str());
        } else if (c_correct->parsed()) {
            const std::string path =
                tacq::run_correct(model_path, qmodel_path, load_config(opts), opts.out_dir);
            std::printf("%s\n", path.c_str());
        } else if (c_sample->parsed()) {
            if (model_path.empty() && qmodel_path.empty())
                throw tacq::ConfigError("sample: need --model or --qmodel");
            const auto out =
                tacq::run_sample(model_path, qmodel_path, table_path, load_config(opts), opts.out_dir,
                                 n_samples);
            std::printf("%s\n", out.samples_path.c_str());
            if (!out.trace_path.empty()) std::printf("%s\n", out.trace_path.c_str());
        } else if (c_eval->parsed()) {
            const auto out = tacq::run_eval(samples_path, reference_path, opts.out_dir, threshold);
            std::printf("energy_distance=%.17g\n", out.report.energy);
            if (out.threshold_exceeded) {
                std::fprintf(stderr, "energy distance exceeds threshold\n");
                return 3;
            }
        } else if (c_ablate->parsed()) {
            const std::string path = tacq::run_ablate(load_config(opts), opts.out_dir, model_path, qmodel_path);
            std::printf("%s\n", path.c_str());
        } else if (c_sweep->parsed()) {
            const std::string path = tacq::run_sweep_lambda(load_config(opts), opts.out_dir,
                                                            parse_grid(grid_csv), model_path, qmodel_path);
            std::printf("%s\n", path.c_str());
        } else if (c_hist->parsed()) {
            const std::string path = tacq::run_hist(trace_path, hist_layer, hist_step, opts.out_dir);
            std::printf("%s\n", path.c_str());
        }
    } catch (const tacq::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const tacq::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
