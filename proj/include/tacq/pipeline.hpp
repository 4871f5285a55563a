#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tacq/config.hpp"
#include "tacq/metrics.hpp"

namespace tacq {

/// Library-level bodies of the CLI subcommands. Each stage reads and writes
/// TACQ containers; all randomness is derived from cfg.seed via labeled
/// child streams so stages can be re-run independently and artifacts are
/// byte-deterministic.

std::string run_train(const RunConfig& cfg, const std::string& out_dir);

std::string run_quantize(const std::string& model_path, const RunConfig& cfg,
                         const std::string& out_dir);

std::string run_correct(const std::string& model_path, const std::string& qmodel_path,
                        const RunConfig& cfg, const std::string& out_dir, bool quiet = false);

struct SampleOutputs {
    std::string samples_path;
    std::string trace_path;  // empty unless a trajectory dump was requested
};

SampleOutputs run_sample(const std::string& model_path, const std::string& qmodel_path,
                         const std::string& table_path, const RunConfig& cfg,
                         const std::string& out_dir, std::optional<size_t> n_override = {});

struct EvalOutcome {
    DistReport report;
    bool threshold_exceeded = false;
    std::string report_txt_path;
    std::string report_csv_path;
};

EvalOutcome run_eval(const std::string& samples_path, const std::string& reference_path,
                     const std::string& out_dir, std::optional<double> threshold = {});

/// Four-variant desk ablation (baseline, bias correction at the first step,
/// both corrections at the first step, full correction at every step)
/// against a full-precision reference; emits text + CSV summaries.
std::string run_ablate(const RunConfig& cfg, const std::string& out_dir,
                       const std::string& model_path = "", const std::string& qmodel_path = "");

/// One corrected run per lambda1 value with fixed seeds; emits
/// (lambda1, energy_distance) rows.
std::string run_sweep_lambda(const RunConfig& cfg, const std::string& out_dir,
                             const std::vector<double>& lambda1_grid,
                             const std::string& model_path = "", const std::string& qmodel_path = "");

std::string run_hist(const std::string& trace_path, size_t boundary, size_t step_index,
                     const std::string& out_dir);

}  // namespace tacq
