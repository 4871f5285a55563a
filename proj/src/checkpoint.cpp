#include "tacq/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "tacq/errors.hpp"

namespace tacq {

namespace {

constexpr char kMagic[4] = {'T', 'A', 'C', 'Q'};

// Little-endian scalar IO; the build targets little-endian hosts and the
// format pins that byte order.
template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ConfigError("checkpoint: truncated file");
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
    const uint32_t n = get<uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw ConfigError("checkpoint: truncated string");
    return s;
}

void put_tensor(std::ostream& os, const Tensor& t) {
    put<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (size_t d : t.shape) put<uint64_t>(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

Tensor get_tensor(std::istream& is) {
    const uint32_t rank = get<uint32_t>(is);
    std::vector<size_t> shape(rank);
    for (auto& d : shape) d = static_cast<size_t>(get<uint64_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw ConfigError("checkpoint: truncated tensor payload");
    return t;
}

}  // namespace

const Tensor& Checkpoint::array(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ConfigError("checkpoint: missing array '" + name + "'");
    return it->second;
}

int64_t Checkpoint::integer(const std::string& name) const {
    auto it = ints.find(name);
    if (it == ints.end()) throw ConfigError("checkpoint: missing field '" + name + "'");
    return it->second;
}

const std::string& Checkpoint::str(const std::string& name) const {
    auto it = strings.find(name);
    if (it == strings.end()) throw ConfigError("checkpoint: missing field '" + name + "'");
    return it->second;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    put<uint8_t>(os, kCkptVersion);
    put<uint8_t>(os, static_cast<uint8_t>(ckpt.kind));
    put<uint64_t>(os, static_cast<uint64_t>(ckpt.schedule.T));
    os.write(reinterpret_cast<const char*>(ckpt.schedule.beta.data()),
             static_cast<std::streamsize>(ckpt.schedule.beta.size() * sizeof(double)));
    put<uint32_t>(os, static_cast<uint32_t>(ckpt.ints.size()));
    for (const auto& [k, v] : ckpt.ints) {
        put_string(os, k);
        put<int64_t>(os, v);
    }
    put<uint32_t>(os, static_cast<uint32_t>(ckpt.strings.size()));
    for (const auto& [k, v] : ckpt.strings) {
        put_string(os, k);
        put_string(os, v);
    }
    put<uint32_t>(os, static_cast<uint32_t>(ckpt.arrays.size()));
    for (const auto& [k, v] : ckpt.arrays) {
        put_string(os, k);
        put_tensor(os, v);
    }
    if (!os) throw ConfigError("checkpoint: write failed for '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw ConfigError("'" + path + "' is not a TACQ container (bad magic)");
    const uint8_t version = get<uint8_t>(is);
    if (version != kCkptVersion)
        throw ConfigError("'" + path + "' has unsupported container version " + std::to_string(version) +
                          " (expected " + std::to_string(kCkptVersion) + ")");
    Checkpoint ckpt;
    const uint8_t kind = get<uint8_t>(is);
    if (kind < 1 || kind > 5) throw ConfigError("'" + path + "' has unknown payload kind");
    ckpt.kind = static_cast<CkptKind>(kind);
    const uint64_t T = get<uint64_t>(is);
    std::vector<double> beta(T);
    is.read(reinterpret_cast<char*>(beta.data()), static_cast<std::streamsize>(T * sizeof(double)));
    if (!is) throw ConfigError("checkpoint: truncated schedule");
    ckpt.schedule.T = T;
    ckpt.schedule.beta = std::move(beta);
    ckpt.schedule.alpha.resize(T);
    ckpt.schedule.alpha_bar.resize(T);
    ckpt.schedule.lambda.resize(T);
    double prod = 1.0;
    for (size_t t = 0; t < T; ++t) {
        ckpt.schedule.alpha[t] = 1.0 - ckpt.schedule.beta[t];
        prod *= ckpt.schedule.alpha[t];
        ckpt.schedule.alpha_bar[t] = prod;
        ckpt.schedule.lambda[t] = 0.5 * std::log(prod / (1.0 - prod));
    }
    const uint32_t n_ints = get<uint32_t>(is);
    for (uint32_t i = 0; i < n_ints; ++i) {
        std::string k = get_string(is);
        ckpt.ints[k] = get<int64_t>(is);
    }
    const uint32_t n_strings = get<uint32_t>(is);
    for (uint32_t i = 0; i < n_strings; ++i) {
        std::string k = get_string(is);
        ckpt.strings[k] = get_string(is);
    }
    const uint32_t n_arrays = get<uint32_t>(is);
    for (uint32_t i = 0; i < n_arrays; ++i) {
        std::string k = get_string(is);
        ckpt.arrays[k] = get_tensor(is);
    }
    return ckpt;
}

Checkpoint read_checkpoint_expect(const std::string& path, CkptKind kind) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.kind != kind)
        throw ConfigError("'" + path + "' holds a different payload kind than expected");
    return ckpt;
}

namespace {

void pack_arch(Checkpoint& c, const NoiseModel& m, const std::string& prefix) {
    c.ints[prefix + "arch"] = (m.arch == NoiseModel::Arch::mlp) ? 0 : 1;
    c.ints[prefix + "io_c"] = static_cast<int64_t>(m.io_shape[0]);
    c.ints[prefix + "io_h"] = static_cast<int64_t>(m.io_shape[1]);
    c.ints[prefix + "io_w"] = static_cast<int64_t>(m.io_shape[2]);
    c.ints[prefix + "time_embed_dim"] = static_cast<int64_t>(m.time_embed_dim);
    c.ints[prefix + "hidden_width"] = static_cast<int64_t>(m.hidden_width);
    c.ints[prefix + "hidden_layers"] = static_cast<int64_t>(m.hidden_layers);
    c.ints[prefix + "conv_width"] = static_cast<int64_t>(m.conv_width);
    for (const Param& p : m.params) c.arrays[prefix + "param/" + p.name] = p.value;
}

NoiseModel unpack_arch(const Checkpoint& c, const std::string& prefix) {
    NoiseModel m;
    m.arch = (c.integer(prefix + "arch") == 0) ? NoiseModel::Arch::mlp : NoiseModel::Arch::conv;
    m.io_shape = {static_cast<size_t>(c.integer(prefix + "io_c")),
                  static_cast<size_t>(c.integer(prefix + "io_h")),
                  static_cast<size_t>(c.integer(prefix + "io_w"))};
    m.time_embed_dim = static_cast<size_t>(c.integer(prefix + "time_embed_dim"));
    m.hidden_width = static_cast<size_t>(c.integer(prefix + "hidden_width"));
    m.hidden_layers = static_cast<size_t>(c.integer(prefix + "hidden_layers"));
    m.conv_width = static_cast<size_t>(c.integer(prefix + "conv_width"));
    // Rebuild the parameter list in construction order, values from payload.
    Rng dummy(0);
    ModelOptions opts{m.hidden_width, m.hidden_layers, m.time_embed_dim, m.conv_width};
    NoiseModel proto = make_model(m.arch, m.io_shape, opts, dummy);
    m.params = std::move(proto.params);
    for (Param& p : m.params) p.value = c.array(prefix + "param/" + p.name);
    return m;
}

std::string scheme_name(QuantScheme s) {
    return s == QuantScheme::minmax_symmetric ? "minmax_symmetric" : "minmax_asymmetric";
}

}  // namespace

Checkpoint pack_model(const NoiseModel& model, const Schedule& schedule) {
    Checkpoint c;
    c.kind = CkptKind::model;
    c.schedule = schedule;
    pack_arch(c, model, "");
    return c;
}

NoiseModel unpack_model(const Checkpoint& ckpt) {
    if (ckpt.kind != CkptKind::model) throw ConfigError("unpack_model: container is not a model");
    return unpack_arch(ckpt, "");
}

Checkpoint pack_qmodel(const QuantizedModel& qmodel, const Schedule& schedule) {
    Checkpoint c;
    c.kind = CkptKind::qmodel;
    c.schedule = schedule;
    pack_arch(c, qmodel.base, "");
    c.ints["weight_bits"] = qmodel.weight_bits;
    c.ints["act_bits"] = qmodel.act_bits;
    c.ints["per_channel_weights"] = qmodel.per_channel_weights ? 1 : 0;
    c.ints["calibrated"] = qmodel.calibrated ? 1 : 0;
    c.strings["weight_scheme"] = scheme_name(qmodel.weight_scheme);
    c.strings["act_scheme"] = scheme_name(qmodel.act_scheme);
    Tensor ranges({std::max<size_t>(qmodel.act_ranges.size(), 1), 2});
    for (size_t i = 0; i < qmodel.act_ranges.size(); ++i) {
        ranges.data[2 * i] = qmodel.act_ranges[i].first;
        ranges.data[2 * i + 1] = qmodel.act_ranges[i].second;
    }
    c.arrays["act_ranges"] = ranges;
    c.ints["n_boundaries"] = static_cast<int64_t>(qmodel.act_ranges.size());
    return c;
}

QuantizedModel unpack_qmodel(const Checkpoint& ckpt) {
    if (ckpt.kind != CkptKind::qmodel) throw ConfigError("unpack_qmodel: container is not a qmodel");
    NoiseModel base = unpack_arch(ckpt, "");
    QuantizedModel qm = quantize_model(
        base, static_cast<int>(ckpt.integer("weight_bits")), static_cast<int>(ckpt.integer("act_bits")),
        parse_scheme(ckpt.str("weight_scheme")), parse_scheme(ckpt.str("act_scheme")),
        ckpt.integer("per_channel_weights") != 0);
    const size_t nb = static_cast<size_t>(ckpt.integer("n_boundaries"));
    const Tensor& ranges = ckpt.array("act_ranges");
    qm.act_ranges.resize(nb);
    for (size_t i = 0; i < nb; ++i)
        qm.act_ranges[i] = {ranges.data[2 * i], ranges.data[2 * i + 1]};
    if (ckpt.integer("calibrated") != 0 && qm.act_bits < 32) {
        for (size_t b = 0; b < nb; ++b)
            qm.act_qparams[b] =
                calibrate_range(qm.act_ranges[b].first, qm.act_ranges[b].second, qm.act_bits, qm.act_scheme);
        qm.calibrated = true;
    }
    return qm;
}

Checkpoint pack_table(const CorrectionTable& table, const Schedule& schedule) {
    Checkpoint c;
    c.kind = CkptKind::table;
    c.schedule = schedule;
    c.arrays["K"] = table.K;
    c.arrays["B"] = table.B;
    c.arrays["tau"] = Tensor({std::max<size_t>(table.tau.size(), 1)}, [&] {
        std::vector<double> v = table.tau;
        if (v.empty()) v.push_back(0.0);
        return v;
    }());
    c.arrays["mask_coverage"] = Tensor({std::max<size_t>(table.mask_coverage.size(), 1)}, [&] {
        std::vector<double> v = table.mask_coverage;
        if (v.empty()) v.push_back(0.0);
        return v;
    }());
    c.arrays["grid_main"] = Tensor({table.grid.main.size()}, table.grid.main);
    if (!table.grid.mid.empty()) c.arrays["grid_mid"] = Tensor({table.grid.mid.size()}, table.grid.mid);
    c.ints["sampler"] = (table.sampler == SamplerKind::ddim) ? 0 : 1;
    const CorrectionConfig& g = table.config;
    c.arrays["config_real"] = Tensor({4}, {g.lambda1, g.lambda2, g.k_threshold, g.eps_floor});
    c.ints["calib_batch"] = static_cast<int64_t>(g.calib_batch);
    c.ints["apply_ner"] = g.apply_ner;
    c.ints["apply_ibc"] = g.apply_ibc;
    c.ints["first_step_only"] = g.first_step_only;
    c.ints["estimation_bias_only"] = g.estimation_bias_only;
    c.ints["eq22_literal_placement"] = g.eq22_literal_placement;
    c.ints["signed_mask"] = g.signed_mask;
    c.ints["sequential_coupling"] = g.sequential_coupling;
    return c;
}

CorrectionTable unpack_table(const Checkpoint& ckpt) {
    if (ckpt.kind != CkptKind::table) throw ConfigError("unpack_table: container is not a table");
    CorrectionTable t;
    t.K = ckpt.array("K");
    t.B = ckpt.array("B");
    t.tau = ckpt.array("tau").data;
    t.mask_coverage = ckpt.array("mask_coverage").data;
    t.grid.main = ckpt.array("grid_main").data;
    if (ckpt.arrays.count("grid_mid")) t.grid.mid = ckpt.array("grid_mid").data;
    t.sampler = (ckpt.integer("sampler") == 0) ? SamplerKind::ddim : SamplerKind::dpmpp_2s;
    const Tensor& cr = ckpt.array("config_real");
    t.config.lambda1 = cr.data[0];
    t.config.lambda2 = cr.data[1];
    t.config.k_threshold = cr.data[2];
    t.config.eps_floor = cr.data[3];
    t.config.calib_batch = static_cast<size_t>(ckpt.integer("calib_batch"));
    t.config.apply_ner = ckpt.integer("apply_ner") != 0;
    t.config.apply_ibc = ckpt.integer("apply_ibc") != 0;
    t.config.first_step_only = ckpt.integer("first_step_only") != 0;
    t.config.estimation_bias_only = ckpt.integer("estimation_bias_only") != 0;
    t.config.eq22_literal_placement = ckpt.integer("eq22_literal_placement") != 0;
    t.config.signed_mask = ckpt.integer("signed_mask") != 0;
    t.config.sequential_coupling = ckpt.integer("sequential_coupling") != 0;
    return t;
}

Checkpoint pack_samples(const Tensor& samples, uint64_t seed, const Schedule& schedule) {
    Checkpoint c;
    c.kind = CkptKind::samples;
    c.schedule = schedule;
    c.arrays["samples"] = samples;
    c.ints["seed"] = static_cast<int64_t>(seed);
    return c;
}

Checkpoint pack_trajectory(const TrajectoryDump& dump, const Schedule& schedule) {
    Checkpoint c;
    c.kind = CkptKind::trace;
    c.schedule = schedule;
    c.arrays["eval_points"] = Tensor({dump.eval_points.size()}, dump.eval_points);
    auto name = [](const char* base, size_t i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s/%04zu", base, i);
        return std::string(buf);
    };
    for (size_t i = 0; i < dump.x.size(); ++i) c.arrays[name("x", i)] = dump.x[i];
    for (size_t i = 0; i < dump.eps.size(); ++i) c.arrays[name("eps", i)] = dump.eps[i];
    for (size_t i = 0; i < dump.activations.size(); ++i)
        for (size_t b = 0; b < dump.activations[i].size(); ++b) {
            char buf[48];
            std::snprintf(buf, sizeof(buf), "act/%04zu/%02zu", i, b);
            c.arrays[buf] = dump.activations[i][b];
        }
    c.ints["n_evals"] = static_cast<int64_t>(dump.eps.size());
    c.ints["n_boundaries"] =
        static_cast<int64_t>(dump.activations.empty() ? 0 : dump.activations.front().size());
    return c;
}

TrajectoryDump unpack_trajectory(const Checkpoint& ckpt) {
    if (ckpt.kind != CkptKind::trace) throw ConfigError("unpack_trajectory: container is not a trace");
    TrajectoryDump d;
    d.eval_points = ckpt.array("eval_points").data;
    const size_t n = static_cast<size_t>(ckpt.integer("n_evals"));
    const size_t nb = static_cast<size_t>(ckpt.integer("n_boundaries"));
    auto name = [](const char* base, size_t i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s/%04zu", base, i);
        return std::string(buf);
    };
    for (size_t i = 0; i <= n; ++i) d.x.push_back(ckpt.array(name("x", i)));
    for (size_t i = 0; i < n; ++i) d.eps.push_back(ckpt.array(name("eps", i)));
    if (nb > 0) {
        d.activations.resize(n);
        for (size_t i = 0; i < n; ++i)
            for (size_t b = 0; b < nb; ++b) {
                char buf[48];
                std::snprintf(buf, sizeof(buf), "act/%04zu/%02zu", i, b);
                d.activations[i].push_back(ckpt.array(buf));
            }
    }
    return d;
}

}  // namespace tacq
