#pragma once

#include "hypernet.hpp"
#include "model.hpp"
#include "optimizer.hpp"
#include "quantize.hpp"
#include "trainer.hpp"

#include <map>
#include <string>
#include <vector>

namespace mq {

struct ExperimentConfig {
    // model
    Arch arch = Arch::mlp;
    std::vector<int64_t> mlp_hidden = {32};
    std::vector<int64_t> cnn_channels = {8, 16};
    int64_t cnn_fc_width = 64;
    int64_t resnet_blocks = 1;
    std::vector<int64_t> resnet_widths = {8, 16, 32};
    int num_classes = 0; // 0 = derive from data

    // data
    std::string data_source = "two-gaussians"; // two-gaussians|ring|idx|cifar10
    std::string data_path;                     // idx: directory; cifar10: train .bin
    std::string data_test_path;                // cifar10 test .bin (optional)
    int64_t data_subset = 0;
    int64_t synth_n = 400;
    int64_t synth_test_n = 200;
    bool standardize = true;

    // quantization
    QuantSettings quant; // weight/act bits + error-signal path
    QuantConfig grad_quant;

    // hypernet
    HyperNetConfig hyper;
    bool hyper_section_present = false;

    // optimizer
    OptimizerConfig opt;

    // schedule
    int64_t epochs = 10;
    int64_t batch_size = 32;
    int64_t eval_interval = 1; // epochs
    Precision precision = Precision::f32;

    uint64_t seed = 1;
    TrainMode mode = TrainMode::meta;
    std::string out_dir = "runs/exp";
    bool emit_timing = false;
    std::string fp_reference_summary; // for the delta column

    void validate() const;
};

// `key = value` lines with dotted sections and '#' comments. Overrides are
// applied after the file in order. Unknown keys name the nearest valid key.
ExperimentConfig parse_config(const std::string& path,
                              const std::vector<std::pair<std::string, std::string>>& overrides = {},
                              bool validate = true);
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::pair<std::string, std::string>>& overrides = {},
                                   bool validate = true);

std::vector<std::string> known_config_keys();

// One `key = value` assignment; validation happens at run time.
void apply_config_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

// Config error with distinct handling at the CLI boundary (exit code 3).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace mq
