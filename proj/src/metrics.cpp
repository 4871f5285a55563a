#include "tacq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "tacq/errors.hpp"
#include "tacq/rng.hpp"

namespace tacq {

namespace {

// Mean over the batch of per-sample Euclidean norms.
double batch_norm(const Tensor& a, const Tensor& b) {
    const size_t S = a.shape[0];
    const size_t d = a.numel() / S;
    double acc = 0.0;
    for (size_t s = 0; s < S; ++s) {
        double sq = 0.0;
        const double* pa = a.data.data() + s * d;
        const double* pb = b.data.data() + s * d;
        for (size_t i = 0; i < d; ++i) {
            const double v = pa[i] - pb[i];
            sq += v * v;
        }
        acc += std::sqrt(sq);
    }
    return acc / static_cast<double>(S);
}

}  // namespace

TraceReport trace_diagnostics(const PairedTrace& trace, const Schedule& schedule) {
    if (!trace.shared_z)
        throw ConfigError("trace_diagnostics: trace lanes did not share z; the decomposition is invalid");
    if (trace.x_fp.size() != trace.eps_fp.size() + 1)
        throw ConfigError("trace_diagnostics: malformed trace");
    const size_t steps = trace.eps_fp.size();
    const std::vector<StepCoeffs> coeffs = make_step_coeffs(schedule, trace.grid, trace.eta);

    TraceReport r;
    r.identity_checked = !trace.corrected;
    for (size_t i = 0; i <= steps; ++i) r.dx_norm.push_back(batch_norm(trace.x_q[i], trace.x_fp[i]));
    for (size_t i = 0; i < steps; ++i) {
        r.deps_norm.push_back(batch_norm(trace.eps_q[i], trace.eps_fp[i]));
        r.bound_rhs.push_back(coeffs[i].inv_sqrt_alpha * r.dx_norm[i] + coeffs[i].eps_coef * r.deps_norm[i]);
        r.bound_slack.push_back(r.bound_rhs.back() - r.dx_norm[i + 1]);
        const size_t C = trace.eps_fp[i].shape[1];
        const size_t S = trace.eps_fp[i].shape[0];
        const size_t chw = trace.eps_fp[i].numel() / S;
        std::vector<double> rq(C, 0.0);
        // rQNSR averaged over the batch, channel by channel.
        for (size_t s = 0; s < S; ++s) {
            Tensor efp({trace.eps_fp[i].shape[1], trace.eps_fp[i].shape[2], trace.eps_fp[i].shape[3]});
            Tensor eq(efp.shape);
            std::copy_n(trace.eps_fp[i].data.data() + s * chw, chw, efp.data.data());
            std::copy_n(trace.eps_q[i].data.data() + s * chw, chw, eq.data.data());
            for (size_t c = 0; c < C; ++c) rq[c] += rqnsr(eq, efp, c);
        }
        for (double& v : rq) v /= static_cast<double>(S);
        r.rqnsr_per_channel.push_back(std::move(rq));
    }

    if (r.identity_checked) {
        // Reconstruct dx_{next} from the decomposition and compare with the
        // directly measured value, per sample.
        for (size_t i = 0; i < steps; ++i) {
            const Tensor& xf = trace.x_fp[i];
            const size_t S = xf.shape[0];
            const size_t d = xf.numel() / S;
            double worst = 0.0;
            for (size_t s = 0; s < S; ++s) {
                double sq = 0.0;
                for (size_t j = 0; j < d; ++j) {
                    const size_t o = s * d + j;
                    const double dx = trace.x_q[i].data[o] - trace.x_fp[i].data[o];
                    const double de = trace.eps_q[i].data[o] - trace.eps_fp[i].data[o];
                    const double predicted = coeffs[i].inv_sqrt_alpha * dx - coeffs[i].eps_coef * de;
                    const double measured = trace.x_q[i + 1].data[o] - trace.x_fp[i + 1].data[o];
                    const double res = predicted - measured;
                    sq += res * res;
                }
                worst = std::max(worst, std::sqrt(sq));
            }
            r.identity_residual.push_back(worst);
        }
    }

    const Tensor& xf0 = trace.x_fp.back();
    const Tensor& xq0 = trace.x_q.back();
    const size_t S = xf0.shape[0];
    const size_t d = xf0.numel() / S;
    double acc = 0.0, worst = 0.0;
    for (size_t s = 0; s < S; ++s) {
        double sq = 0.0;
        for (size_t j = 0; j < d; ++j) {
            const double v = xq0.data[s * d + j] - xf0.data[s * d + j];
            sq += v * v;
        }
        const double nrm = std::sqrt(sq);
        acc += nrm;
        worst = std::max(worst, nrm);
    }
    r.final_dx_mean = acc / static_cast<double>(S);
    r.final_dx_max = worst;
    return r;
}

Tensor flatten_samples(const Tensor& samples) {
    if (samples.rank() == 2) return samples;
    if (samples.rank() != 4) throw ConfigError("flatten_samples: expected rank-2 or rank-4 tensor");
    Tensor out = samples;
    out.shape = {samples.shape[0], samples.numel() / samples.shape[0]};
    return out;
}

double energy_distance(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
        throw ConfigError("energy_distance: expected [n,d] and [m,d] tensors, got " +
                          shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t n = a.shape[0], m = b.shape[0], d = a.shape[1];
    if (n < 2 || m < 2) throw ConfigError("energy_distance: need at least 2 samples per side");

    auto pair_sum = [d](const Tensor& u, const Tensor& v) {
        const size_t nu = u.shape[0], nv = v.shape[0];
        double acc = 0.0;
        for (size_t i = 0; i < nu; ++i) {
            const double* pu = u.data.data() + i * d;
            for (size_t j = 0; j < nv; ++j) {
                const double* pv = v.data.data() + j * d;
                double sq = 0.0;
                for (size_t k = 0; k < d; ++k) {
                    const double w = pu[k] - pv[k];
                    sq += w * w;
                }
                acc += std::sqrt(sq);
            }
        }
        return acc;
    };

    const double eab = pair_sum(a, b) / (static_cast<double>(n) * static_cast<double>(m));
    const double eaa = pair_sum(a, a) / (static_cast<double>(n) * static_cast<double>(n));
    const double ebb = pair_sum(b, b) / (static_cast<double>(m) * static_cast<double>(m));
    return 2.0 * eab - eaa - ebb;
}

double sliced_wasserstein(const Tensor& a, const Tensor& b, size_t n_proj, uint64_t seed) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
        throw ConfigError("sliced_wasserstein: expected [n,d] and [m,d] tensors");
    const size_t n = a.shape[0], m = b.shape[0], d = a.shape[1];
    if (n < 2 || m < 2) throw ConfigError("sliced_wasserstein: need at least 2 samples per side");
    Rng rng(seed);
    const size_t q = std::min(n, m);
    std::vector<double> pa(n), pb(m);
    double acc = 0.0;
    for (size_t p = 0; p < n_proj; ++p) {
        std::vector<double> dir(d);
        double nrm = 0.0;
        for (double& v : dir) {
            v = rng.normal();
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        for (double& v : dir) v /= nrm;
        for (size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (size_t k = 0; k < d; ++k) s += a.data[i * d + k] * dir[k];
            pa[i] = s;
        }
        for (size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (size_t k = 0; k < d; ++k) s += b.data[i * d + k] * dir[k];
            pb[i] = s;
        }
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());
        // W1 between the empirical quantile functions on a common grid.
        double w = 0.0;
        for (size_t i = 0; i < q; ++i) {
            const double fa = pa[i * n / q];
            const double fb = pb[i * m / q];
            w += std::fabs(fa - fb);
        }
        acc += w / static_cast<double>(q);
    }
    return acc / static_cast<double>(n_proj);
}

DistReport make_dist_report(const Tensor& samples, const Tensor& reference) {
    const Tensor a = flatten_samples(samples);
    const Tensor b = flatten_samples(reference);
    if (a.shape[1] != b.shape[1])
        throw ConfigError("make_dist_report: sample dimensionality mismatch " + shape_str(a.shape) +
                          " vs " + shape_str(b.shape));
    DistReport r;
    r.n = a.shape[0];
    r.m = b.shape[0];
    r.energy = energy_distance(a, b);
    r.sliced_w1 = sliced_wasserstein(a, b);
    const size_t d = a.shape[1];
    r.mean_gap.resize(d);
    r.std_gap.resize(d);
    for (size_t k = 0; k < d; ++k) {
        double ma = 0.0, mb = 0.0;
        for (size_t i = 0; i < r.n; ++i) ma += a.data[i * d + k];
        for (size_t i = 0; i < r.m; ++i) mb += b.data[i * d + k];
        ma /= static_cast<double>(r.n);
        mb /= static_cast<double>(r.m);
        double va = 0.0, vb = 0.0;
        for (size_t i = 0; i < r.n; ++i) va += (a.data[i * d + k] - ma) * (a.data[i * d + k] - ma);
        for (size_t i = 0; i < r.m; ++i) vb += (b.data[i * d + k] - mb) * (b.data[i * d + k] - mb);
        va = std::sqrt(va / static_cast<double>(r.n));
        vb = std::sqrt(vb / static_cast<double>(r.m));
        r.mean_gap[k] = ma - mb;
        r.std_gap[k] = va - vb;
    }
    return r;
}

namespace {
std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace

std::string dist_report_text(const DistReport& r) {
    std::ostringstream os;
    os << "energy_distance=" << fmt(r.energy) << "\n";
    os << "sliced_w1=" << fmt(r.sliced_w1) << "\n";
    os << "n=" << r.n << "\n";
    os << "m=" << r.m << "\n";
    double mg = 0.0, sg = 0.0;
    for (double v : r.mean_gap) mg = std::max(mg, std::fabs(v));
    for (double v : r.std_gap) sg = std::max(sg, std::fabs(v));
    os << "max_abs_mean_gap=" << fmt(mg) << "\n";
    os << "max_abs_std_gap=" << fmt(sg) << "\n";
    return os.str();
}

std::string dist_report_csv(const DistReport& r) {
    std::ostringstream os;
    os << "metric,value\n";
    os << "energy_distance," << fmt(r.energy) << "\n";
    os << "sliced_w1," << fmt(r.sliced_w1) << "\n";
    os << "n," << r.n << "\n";
    os << "m," << r.m << "\n";
    for (size_t k = 0; k < r.mean_gap.size(); ++k) os << "mean_gap_" << k << "," << fmt(r.mean_gap[k]) << "\n";
    for (size_t k = 0; k < r.std_gap.size(); ++k) os << "std_gap_" << k << "," << fmt(r.std_gap[k]) << "\n";
    return os.str();
}

namespace {

std::vector<std::pair<std::string, DistReport>> sorted_with_baseline(
    const std::vector<std::pair<std::string, DistReport>>& runs, double& baseline_energy) {
    if (runs.empty()) throw ConfigError("ablation_summary: no runs");
    baseline_energy = runs.front().second.energy;
    for (const auto& [label, rep] : runs)
        if (label == "baseline") baseline_energy = rep.energy;
    auto sorted = runs;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto& x, const auto& y) { return x.second.energy > y.second.energy; });
    return sorted;
}

}  // namespace

std::string ablation_summary(const std::vector<std::pair<std::string, DistReport>>& runs) {
    double base = 0.0;
    const auto sorted = sorted_with_baseline(runs, base);
    std::ostringstream os;
    os << "variant                          energy_distance   delta_vs_baseline\n";
    for (const auto& [label, rep] : sorted) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%-32s %-17.8g %-+.8g\n", label.c_str(), rep.energy,
                      rep.energy - base);
        os << buf;
    }
    return os.str();
}

std::string ablation_csv(const std::vector<std::pair<std::string, DistReport>>& runs) {
    double base = 0.0;
    const auto sorted = sorted_with_baseline(runs, base);
    std::ostringstream os;
    os << "variant,energy_distance,delta_vs_baseline,sliced_w1\n";
    for (const auto& [label, rep] : sorted)
        os << label << "," << fmt(rep.energy) << "," << fmt(rep.energy - base) << "," << fmt(rep.sliced_w1)
           << "\n";
    return os.str();
}

}  // namespace tacq
