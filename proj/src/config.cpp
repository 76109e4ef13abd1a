#include "config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace mq {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int edit_distance(const std::string& a, const std::string& b) {
    std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
    for (size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= b.size(); ++j) {
            int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "': expected real number, got '" + v + "'");
    }
}

std::vector<int64_t> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_int(key, item));
    }
    if (out.empty()) throw ConfigError("config key '" + key + "': expected comma-separated integers");
    return out;
}

} // namespace

std::vector<std::string> known_config_keys() {
    return {
        "model.arch",         "model.mlp_hidden",      "model.cnn_channels", "model.cnn_fc_width",
        "model.resnet_blocks", "model.resnet_widths",  "model.num_classes",  "data.source",
        "data.path",          "data.test_path",        "data.subset",        "data.n",
        "data.test_n",        "data.standardize",      "quant.weight_bits",  "quant.act_bits",
        "quant.grad_bits",    "quant.clip",            "quant.percentile",   "quant.fixed_c",
        "quant.skip_first_last", "quant.error_signal", "quant.error_signal_bits", "hyper.design",
        "hyper.hidden",       "hyper.residual",        "hyper.persist_state", "opt.kind",
        "opt.lr",             "opt.momentum",          "opt.beta1",          "opt.beta2",
        "opt.eps",            "opt.lr_decay",          "opt.psi_lr",         "opt.psi_grad_clip",
        "train.epochs",
        "train.batch_size",   "train.precision",       "eval.interval",      "seed",
        "mode",               "out",                   "output.timing",      "reference.fp_summary",
    };
}

namespace {

void apply_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    const auto& known = known_config_keys();
    if (std::find(known.begin(), known.end(), key) == known.end()) {
        std::string best;
        int best_d = 1 << 30;
        for (const auto& k : known) {
            int d = edit_distance(key, k);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        throw ConfigError("unknown config key '" + key + "' (nearest valid key: '" + best + "')");
    }
    try {
        if (key == "model.arch") cfg.arch = arch_from_string(value);
        else if (key == "model.mlp_hidden") cfg.mlp_hidden = parse_int_list(key, value);
        else if (key == "model.cnn_channels") cfg.cnn_channels = parse_int_list(key, value);
        else if (key == "model.cnn_fc_width") cfg.cnn_fc_width = parse_int(key, value);
        else if (key == "model.resnet_blocks") cfg.resnet_blocks = parse_int(key, value);
        else if (key == "model.resnet_widths") cfg.resnet_widths = parse_int_list(key, value);
        else if (key == "model.num_classes") cfg.num_classes = static_cast<int>(parse_int(key, value));
        else if (key == "data.source") cfg.data_source = value;
        else if (key == "data.path") cfg.data_path = value;
        else if (key == "data.test_path") cfg.data_test_path = value;
        else if (key == "data.subset") cfg.data_subset = parse_int(key, value);
        else if (key == "data.n") cfg.synth_n = parse_int(key, value);
        else if (key == "data.test_n") cfg.synth_test_n = parse_int(key, value);
        else if (key == "data.standardize") cfg.standardize = parse_bool(key, value);
        else if (key == "quant.weight_bits") cfg.quant.weight_bits = static_cast<int>(parse_int(key, value));
        else if (key == "quant.act_bits") cfg.quant.act_bits = static_cast<int>(parse_int(key, value));
        else if (key == "quant.grad_bits") cfg.grad_quant.bits = static_cast<int>(parse_int(key, value));
        else if (key == "quant.clip") {
            if (value == "max-abs") cfg.grad_quant.clip = ClipPolicy::max_abs;
            else if (value == "percentile") cfg.grad_quant.clip = ClipPolicy::percentile;
            else if (value == "fixed") cfg.grad_quant.clip = ClipPolicy::fixed;
            else throw ConfigError("quant.clip must be max-abs|percentile|fixed, got '" + value + "'");
        } else if (key == "quant.percentile") cfg.grad_quant.percentile = parse_real(key, value);
        else if (key == "quant.fixed_c") cfg.grad_quant.fixed_c = parse_real(key, value);
        else if (key == "quant.skip_first_last") cfg.quant.skip_first_last = parse_bool(key, value);
        else if (key == "quant.error_signal") cfg.quant.err_quant_enabled = parse_bool(key, value);
        else if (key == "quant.error_signal_bits") cfg.quant.err_quant.bits = static_cast<int>(parse_int(key, value));
        else if (key == "hyper.design") {
            cfg.hyper.design = hyper_design_from_string(value);
            cfg.hyper_section_present = true;
        } else if (key == "hyper.hidden") {
            cfg.hyper.hidden = static_cast<int>(parse_int(key, value));
            cfg.hyper_section_present = true;
        } else if (key == "hyper.residual") {
            cfg.hyper.residual = parse_bool(key, value);
            cfg.hyper_section_present = true;
        } else if (key == "hyper.persist_state") {
            cfg.hyper.persist_state = parse_bool(key, value);
            cfg.hyper_section_present = true;
        } else if (key == "opt.kind") cfg.opt.kind = opt_kind_from_string(value);
        else if (key == "opt.lr") cfg.opt.lr = parse_real(key, value);
        else if (key == "opt.momentum") cfg.opt.momentum_m = parse_real(key, value);
        else if (key == "opt.beta1") cfg.opt.beta1 = parse_real(key, value);
        else if (key == "opt.beta2") cfg.opt.beta2 = parse_real(key, value);
        else if (key == "opt.eps") cfg.opt.adam_eps = parse_real(key, value);
        else if (key == "opt.lr_decay") cfg.opt.lr_decay = parse_real(key, value);
        else if (key == "opt.psi_lr") cfg.opt.psi_lr = parse_real(key, value);
        else if (key == "opt.psi_grad_clip") cfg.opt.psi_grad_clip = parse_real(key, value);
        else if (key == "train.epochs") cfg.epochs = parse_int(key, value);
        else if (key == "train.batch_size") cfg.batch_size = parse_int(key, value);
        else if (key == "train.precision") {
            if (value == "f32") cfg.precision = Precision::f32;
            else if (value == "f64") cfg.precision = Precision::f64;
            else throw ConfigError("train.precision must be f32|f64, got '" + value + "'");
        } else if (key == "eval.interval") cfg.eval_interval = parse_int(key, value);
        else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_int(key, value));
        else if (key == "mode") cfg.mode = train_mode_from_string(value);
        else if (key == "out") cfg.out_dir = value;
        else if (key == "output.timing") cfg.emit_timing = parse_bool(key, value);
        else if (key == "reference.fp_summary") cfg.fp_reference_summary = value;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

} // namespace

void apply_config_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    apply_key(cfg, key, value);
}

void ExperimentConfig::validate() const {
    if (grad_quant.bits < 2 || grad_quant.bits > 16)
        throw ConfigError("quant.grad_bits must be in [2, 16], got " + std::to_string(grad_quant.bits));
    if (quant.weight_bits != 32 && (quant.weight_bits < 2 || quant.weight_bits > 16))
        throw ConfigError("quant.weight_bits must be in [2, 16] or 32 (off)");
    if (quant.act_bits != 32 && (quant.act_bits < 2 || quant.act_bits > 16))
        throw ConfigError("quant.act_bits must be in [2, 16] or 32 (off)");
    if (mode == TrainMode::meta && !hyper_section_present)
        throw ConfigError("mode = meta requires a hyper.* section (at least hyper.design)");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (eval_interval < 1) throw ConfigError("eval.interval must be >= 1");
    if (data_source != "two-gaussians" && data_source != "ring" && data_source != "idx" &&
        data_source != "cifar10")
        throw ConfigError("data.source must be two-gaussians|ring|idx|cifar10, got '" + data_source + "'");
    if ((data_source == "idx" || data_source == "cifar10") && data_path.empty())
        throw ConfigError("data.path is required for data.source = " + data_source);
    try {
        opt.validate();
        grad_quant.validate();
        if (quant.err_quant_enabled) quant.err_quant.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::pair<std::string, std::string>>& overrides,
                                   bool validate) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        apply_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    for (const auto& [k, v] : overrides) apply_key(cfg, k, v);
    if (validate) cfg.validate();
    return cfg;
}

ExperimentConfig parse_config(const std::string& path,
                              const std::vector<std::pair<std::string, std::string>>& overrides,
                              bool validate) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), overrides, validate);
}

} // namespace mq
