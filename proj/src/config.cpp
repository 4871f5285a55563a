#include "tacq/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tacq/errors.hpp"

namespace tacq {

std::string RunConfig::resolved_arch() const {
    if (model_arch != "auto") return model_arch;
    return dataset_kind == "blobs8x8" ? "conv" : "mlp";
}

std::array<size_t, 3> RunConfig::io_shape() const {
    return dataset_kind == "blobs8x8" ? std::array<size_t, 3>{1, 8, 8} : std::array<size_t, 3>{2, 1, 1};
}

void RunConfig::validate() const {
    if (dataset_kind.empty())
        throw ConfigError("config: missing required key 'dataset.kind'");
    if (dataset_kind != "gauss2d" && dataset_kind != "rings2d" && dataset_kind != "blobs8x8")
        throw ConfigError("config: dataset.kind must be gauss2d, rings2d or blobs8x8");
    if (model_arch != "auto") parse_arch(model_arch);
    validate_weight_bits(weight_bits);
    validate_act_bits(act_bits);
    parse_scheme(weight_scheme);
    parse_scheme(act_scheme);
    parse_sampler_kind(sampler_kind);
    if (sampler_steps < 1) throw ConfigError("config: sampler.steps must be >= 1");
    if (!(eta >= 0.0)) throw ConfigError("config: sampler.eta must be >= 0");
    correction.validate();
}

namespace {

struct Trim {
    static std::string strip(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        if (a == std::string::npos) return "";
        return s.substr(a, b - a + 1);
    }
};

class Setter {
public:
    explicit Setter(RunConfig& cfg) { bind(cfg); }

    void set(const std::string& key, const std::string& value, size_t line) {
        auto it = setters_.find(key);
        if (it == setters_.end())
            throw ConfigError("config line " + std::to_string(line) + ": unknown key '" + key + "'");
        try {
            it->second(value);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("config line " + std::to_string(line) + ": bad value '" + value +
                              "' for key '" + key + "'");
        }
    }

private:
    std::map<std::string, std::function<void(const std::string&)>> setters_;

    static bool to_bool(const std::string& v) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("expected true/false");
    }

    void bind(RunConfig& c) {
        auto str = [&](const char* k, std::string* p) { setters_[k] = [p](const std::string& v) { *p = v; }; };
        auto u64 = [&](const char* k, size_t* p) {
            setters_[k] = [p](const std::string& v) { *p = std::stoull(v); };
        };
        auto i32 = [&](const char* k, int* p) {
            setters_[k] = [p](const std::string& v) { *p = std::stoi(v); };
        };
        auto f64 = [&](const char* k, double* p) {
            setters_[k] = [p](const std::string& v) { *p = std::stod(v); };
        };
        auto b = [&](const char* k, bool* p) {
            setters_[k] = [p](const std::string& v) { *p = to_bool(v); };
        };

        str("dataset.kind", &c.dataset_kind);
        u64("dataset.n", &c.dataset_n);
        str("model.arch", &c.model_arch);
        u64("model.hidden_width", &c.hidden_width);
        u64("model.hidden_layers", &c.hidden_layers);
        u64("model.time_embed_dim", &c.time_embed_dim);
        u64("model.conv_width", &c.conv_width);
        u64("schedule.steps", &c.schedule_steps);
        f64("schedule.beta_start", &c.beta_start);
        f64("schedule.beta_end", &c.beta_end);
        u64("train.steps", &c.train_steps);
        u64("train.batch", &c.train_batch);
        f64("train.lr", &c.lr);
        f64("train.adam_beta1", &c.adam_beta1);
        f64("train.adam_beta2", &c.adam_beta2);
        i32("quant.weight_bits", &c.weight_bits);
        i32("quant.act_bits", &c.act_bits);
        str("quant.weight_scheme", &c.weight_scheme);
        str("quant.act_scheme", &c.act_scheme);
        u64("quant.n_calib", &c.n_calib);
        b("quant.per_channel_weights", &c.per_channel_weights);
        f64("correction.lambda1", &c.correction.lambda1);
        f64("correction.lambda2", &c.correction.lambda2);
        f64("correction.k_threshold", &c.correction.k_threshold);
        u64("correction.batch", &c.correction.calib_batch);
        f64("correction.eps_floor", &c.correction.eps_floor);
        b("correction.apply_ner", &c.correction.apply_ner);
        b("correction.apply_ibc", &c.correction.apply_ibc);
        b("correction.first_step_only", &c.correction.first_step_only);
        b("correction.estimation_bias_only", &c.correction.estimation_bias_only);
        b("correction.eq22_literal_placement", &c.correction.eq22_literal_placement);
        b("correction.signed_mask", &c.correction.signed_mask);
        b("correction.sequential_coupling", &c.correction.sequential_coupling);
        str("sampler.kind", &c.sampler_kind);
        u64("sampler.steps", &c.sampler_steps);
        f64("sampler.eta", &c.eta);
        b("sampler.dpmpp_apply_ibc", &c.dpmpp_apply_ibc);
        u64("sample.n", &c.sample_n);
        b("sample.dump_trajectory", &c.dump_trajectory);
        u64("sample.dump_batch", &c.dump_batch);
        u64("eval.reference_n", &c.reference_n);
        setters_["seed"] = [&c](const std::string& v) { c.seed = std::stoull(v); };
    }
};

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    Setter setter(cfg);
    std::istringstream is(text);
    std::string raw;
    size_t line_no = 0;
    while (std::getline(is, raw)) {
        ++line_no;
        std::string line = Trim::strip(raw);
        if (line.empty() || line[0] == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                              line + "'");
        const std::string key = Trim::strip(line.substr(0, eq));
        const std::string value = Trim::strip(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        setter.set(key, value, line_no);
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream os;
    os << is.rdbuf();
    return parse_config_text(os.str());
}

void apply_variant(RunConfig& cfg, const std::string& variant) {
    CorrectionConfig& g = cfg.correction;
    g.apply_ner = false;
    g.apply_ibc = false;
    g.first_step_only = false;
    g.estimation_bias_only = false;
    g.eq22_literal_placement = false;
    if (variant == "baseline") return;
    if (variant == "ibc") {
        g.apply_ibc = true;
    } else if (variant == "ner-ibc") {
        g.apply_ner = true;
        g.apply_ibc = true;
        g.first_step_only = true;
    } else if (variant == "first-step") {
        g.apply_ner = true;
        g.apply_ibc = true;
        g.first_step_only = true;
    } else if (variant == "tac") {
        g.apply_ner = true;
        g.apply_ibc = true;
    } else if (variant == "est-bias") {
        g.estimation_bias_only = true;
    } else if (variant == "eq22") {
        g.apply_ner = true;
        g.apply_ibc = true;
        g.eq22_literal_placement = true;
    } else {
        throw ConfigError("unknown variant '" + variant +
                          "' (expected baseline, ibc, ner-ibc, tac, first-step, est-bias or eq22)");
    }
}

}  // namespace tacq
