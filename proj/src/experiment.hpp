#pragma once

#include "config.hpp"
#include "dataset.hpp"
#include "model.hpp"

#include <string>

namespace mq {

struct RunSummary {
    double final_train_loss = 0.0;
    double final_test_accuracy = 0.0;
    int64_t iterations = 0;
    bool has_delta = false;
    double delta = 0.0; // final accuracy minus FP reference accuracy
};

// Trains per config, writes metrics.csv / summary.txt / model.bin /
// config.txt under cfg.out_dir.
RunSummary run_experiment(const ExperimentConfig& cfg);

double eval_accuracy(Model& model, const Dataset& ds, int64_t batch_size = 256);

// Re-evaluates a finished run directory (config.txt + model.bin).
double eval_run_dir(const std::string& run_dir);

struct GradCheckReport {
    double max_rel_err_multifc = 0.0;
    double max_rel_err_lstmfc = 0.0;
    double max_rel_err_duallstmfc = 0.0;
    bool negative_control_flagged = false; // detach removed changes psi-grads
    bool passed = false;
    std::string text;
};

// Finite-difference validation of the psi-gradient path (FP64, quantizer
// bypassed) for all three hypernetwork designs.
GradCheckReport grad_check(double threshold = 1e-4, bool include_negative_control = true);

struct QuantizerCheckReport {
    int64_t cases = 0;
    int64_t mismatches = 0;
    int64_t symmetry_violations = 0;
    int64_t monotonicity_violations = 0;
    bool passed = false;
    std::string text;
};

// Oracle-equivalence sweep of the symmetric uniform quantizer.
QuantizerCheckReport quantizer_check(int64_t cases = 100000, uint64_t seed = 12345);

// Test-visible oracle: nearest representable level of clip(x, c) with ties
// away from zero, by exhaustive scan over the level set.
double nearest_level_oracle(double x, double c, int bits);

RunSummary read_summary(const std::string& path);

} // namespace mq
