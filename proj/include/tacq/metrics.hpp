#pragma once

#include <string>
#include <vector>

#include "tacq/correction.hpp"
#include "tacq/schedule.hpp"
#include "tacq/tensor.hpp"

namespace tacq {

/// Per-step discrepancy diagnostics of a paired trace. Norms are Euclidean
/// over flattened per-sample tensors, averaged over the batch.
struct TraceReport {
    std::vector<double> dx_norm;            // per state (evaluations + output)
    std::vector<double> deps_norm;          // per evaluation
    std::vector<double> bound_rhs;          // per step: (1/sqrt(a))|dx| + (b/sqrt(a-a*abar))|deps|
    std::vector<double> bound_slack;        // bound_rhs - |dx_next|
    std::vector<double> identity_residual;  // per step, only when identity_checked
    std::vector<std::vector<double>> rqnsr_per_channel;  // per evaluation
    bool identity_checked = false;
    double final_dx_mean = 0.0;
    double final_dx_max = 0.0;
};

/// Verifies, step by step, that the measured state discrepancy decomposes
/// into the propagated input discrepancy and the estimation discrepancy
/// (shared-z traces only), and reports both sides of the norm bound.
TraceReport trace_diagnostics(const PairedTrace& trace, const Schedule& schedule);

/// Energy distance between two sample sets (rows are samples):
/// 2 E|A-B| - E|A-A'| - E|B-B'| with exact pairwise sums (V-statistics).
double energy_distance(const Tensor& a, const Tensor& b);

/// Secondary metric: sliced Wasserstein-1 over fixed-seed random
/// projections (128 by default).
double sliced_wasserstein(const Tensor& a, const Tensor& b, size_t n_proj = 128, uint64_t seed = 7);

struct DistReport {
    double energy = 0.0;
    double sliced_w1 = 0.0;
    std::vector<double> mean_gap;  // per flattened dimension
    std::vector<double> std_gap;
    size_t n = 0, m = 0;
};

/// Flatten [n,C,H,W] samples to [n, C*H*W].
Tensor flatten_samples(const Tensor& samples);

DistReport make_dist_report(const Tensor& samples, const Tensor& reference);

/// Comparison table for a set of labeled runs: rows sorted by energy
/// distance (descending), deltas against the named baseline (the "baseline"
/// label when present, otherwise the first run).
std::string ablation_summary(const std::vector<std::pair<std::string, DistReport>>& runs);
std::string ablation_csv(const std::vector<std::pair<std::string, DistReport>>& runs);

std::string dist_report_text(const DistReport& r);
std::string dist_report_csv(const DistReport& r);

}  // namespace tacq
