#include "metaquant.h"

#include "config.hpp"
#include "experiment.hpp"

#include <cstring>
#include <string>

using namespace mq;

struct mq_config {
    ExperimentConfig cfg;
};

namespace {

thread_local std::string g_last_error;

void set_error(const std::string& msg) { g_last_error = msg; }

void copy_report(const std::string& text, char* report, size_t report_len) {
    if (!report || report_len == 0) return;
    size_t n = std::min(text.size(), report_len - 1);
    std::memcpy(report, text.data(), n);
    report[n] = '\0';
}

template <typename F>
mq_status guarded(F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        set_error(e.what());
        return MQ_CONFIG_ERROR;
    } catch (const std::exception& e) {
        set_error(e.what());
        return MQ_RUNTIME_ABORT;
    }
}

} // namespace

extern "C" {

mq_config* mq_config_new(void) { return new mq_config(); }

void mq_config_free(mq_config* cfg) { delete cfg; }

mq_status mq_config_load(mq_config* cfg, const char* path) {
    if (!cfg || !path) {
        set_error("mq_config_load: NULL argument");
        return MQ_CONFIG_ERROR;
    }
    return guarded([&] {
        // loads replace the config wholesale; validation is deferred to
        // mq_train so that later mq_config_set calls can fix the config
        cfg->cfg = parse_config(path, {}, false);
        return MQ_OK;
    });
}

mq_status mq_config_set(mq_config* cfg, const char* key, const char* value) {
    if (!cfg || !key || !value) {
        set_error("mq_config_set: NULL argument");
        return MQ_CONFIG_ERROR;
    }
    return guarded([&] {
        apply_config_override(cfg->cfg, key, value);
        return MQ_OK;
    });
}

mq_status mq_train(const mq_config* cfg, mq_run_summary* out_summary) {
    if (!cfg) {
        set_error("mq_train: NULL config");
        return MQ_CONFIG_ERROR;
    }
    return guarded([&] {
        RunSummary s = run_experiment(cfg->cfg);
        if (out_summary) {
            out_summary->final_train_loss = s.final_train_loss;
            out_summary->final_test_accuracy = s.final_test_accuracy;
            out_summary->iterations = s.iterations;
            out_summary->has_delta = s.has_delta ? 1 : 0;
            out_summary->delta_vs_fp = s.delta;
        }
        return MQ_OK;
    });
}

mq_status mq_eval_run(const char* run_dir, double* out_accuracy) {
    if (!run_dir) {
        set_error("mq_eval_run: NULL run_dir");
        return MQ_CONFIG_ERROR;
    }
    return guarded([&] {
        double acc = eval_run_dir(run_dir);
        if (out_accuracy) *out_accuracy = acc;
        return MQ_OK;
    });
}

mq_status mq_grad_check(double threshold, char* report, size_t report_len) {
    return guarded([&] {
        GradCheckReport r = grad_check(threshold > 0.0 ? threshold : 1e-4);
        copy_report(r.text, report, report_len);
        if (!r.passed) set_error("grad-check failed");
        return r.passed ? MQ_OK : MQ_VALIDATION_FAILED;
    });
}

mq_status mq_quantizer_check(int64_t cases, uint64_t seed, char* report, size_t report_len) {
    return guarded([&] {
        QuantizerCheckReport r = quantizer_check(cases > 0 ? cases : 100000, seed ? seed : 12345);
        copy_report(r.text, report, report_len);
        if (!r.passed) set_error("quantizer-check failed");
        return r.passed ? MQ_OK : MQ_VALIDATION_FAILED;
    });
}

const char* mq_last_error(void) { return g_last_error.c_str(); }

const char* mq_version(void) { return "0.1.0"; }

} // extern "C"
