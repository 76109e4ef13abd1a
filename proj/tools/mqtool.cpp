#include <CLI11.hpp>
#include <metaquant.h>

#include <cstdio>
#include <string>
#include <vector>

namespace {

int fail(mq_status st) {
    std::fprintf(stderr, "error: %s\n", mq_last_error());
    return static_cast<int>(st);
}

int run_train(const std::string& config_path, long long seed, const std::string& out,
              const std::vector<std::string>& overrides) {
    mq_config* cfg = mq_config_new();
    mq_status st = mq_config_load(cfg, config_path.c_str());
    if (st == MQ_OK && seed >= 0) st = mq_config_set(cfg, "seed", std::to_string(seed).c_str());
    if (st == MQ_OK && !out.empty()) st = mq_config_set(cfg, "out", out.c_str());
    for (const auto& ov : overrides) {
        if (st != MQ_OK) break;
        size_t eq = ov.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "error: override '%s' is not key=value\n", ov.c_str());
            mq_config_free(cfg);
            return MQ_CONFIG_ERROR;
        }
        st = mq_config_set(cfg, ov.substr(0, eq).c_str(), ov.substr(eq + 1).c_str());
    }
    mq_run_summary summary{};
    if (st == MQ_OK) st = mq_train(cfg, &summary);
    mq_config_free(cfg);
    if (st != MQ_OK) return fail(st);
    std::printf("iterations %lld\n", static_cast<long long>(summary.iterations));
    std::printf("final_train_loss %.17g\n", summary.final_train_loss);
    std::printf("final_test_accuracy %.17g\n", summary.final_test_accuracy);
    if (summary.has_delta) std::printf("delta_vs_fp %.17g\n", summary.delta_vs_fp);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantization-aware training with a learned gradient calibrator"};
    app.require_subcommand(1);

    std::string config_path, out_dir, run_dir;
    long long seed = -1;
    std::vector<std::string> overrides;
    double threshold = 1e-4;
    long long cases = 100000;
    unsigned long long qc_seed = 12345;

    auto* train = app.add_subcommand("train", "train per a config file");
    train->add_option("--config", config_path, "config file path")->required();
    train->add_option("--seed", seed, "override the config seed");
    train->add_option("--out", out_dir, "override the output directory");
    train->add_option("--set", overrides, "extra key=value overrides")->take_all();

    auto* eval = app.add_subcommand("eval", "re-evaluate a finished run directory");
    eval->add_option("--run", run_dir, "run directory (config.txt + model.bin)")->required();

    auto* gc = app.add_subcommand("grad-check", "finite-difference check of the meta-gradient path");
    gc->add_option("--threshold", threshold, "max relative error allowed");

    auto* qc = app.add_subcommand("quantizer-check", "quantizer oracle-equivalence sweep");
    qc->add_option("--cases", cases, "number of random cases");
    qc->add_option("--seed", qc_seed, "sweep seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : MQ_CONFIG_ERROR;
    }

    if (train->parsed()) return run_train(config_path, seed, out_dir, overrides);

    if (eval->parsed()) {
        double acc = 0.0;
        mq_status st = mq_eval_run(run_dir.c_str(), &acc);
        if (st != MQ_OK) return fail(st);
        std::printf("test_accuracy %.17g\n", acc);
        return 0;
    }

    char report[4096];
    if (gc->parsed()) {
        mq_status st = mq_grad_check(threshold, report, sizeof(report));
        if (st == MQ_OK || st == MQ_VALIDATION_FAILED) std::fputs(report, stdout);
        else return fail(st);
        return static_cast<int>(st);
    }

    mq_status st = mq_quantizer_check(cases, qc_seed, report, sizeof(report));
    if (st == MQ_OK || st == MQ_VALIDATION_FAILED) std::fputs(report, stdout);
    else return fail(st);
    return static_cast<int>(st);
}
