#pragma once

#include "graph.hpp"
#include "hypernet.hpp"
#include "model.hpp"
#include "optimizer.hpp"
#include "quantize.hpp"

#include <string>
#include <vector>

namespace mq {

enum class TrainMode { meta, plain, fp };

TrainMode train_mode_from_string(const std::string& s);
const char* train_mode_name(TrainMode m);

struct StepMetrics {
    int64_t iteration = 0;
    double loss = 0.0;
    // per quantizable layer, in slot order
    std::vector<double> grad_quant_mse;
    std::vector<double> grad_cosine;
    bool psi_updated = false;
    bool degenerate_grad = false;
};

struct TrainerConfig {
    TrainMode mode = TrainMode::meta;
    QuantConfig grad_quant;       // B and clip policy for gradient quantization
    bool bypass_grad_quant = false; // test mode: skip Q inside f_phi
    HyperNetConfig hyper;
    OptimizerConfig opt;
    Precision precision = Precision::f32;
    bool no_detach = false; // debug: feed the live weight node to f_psi
};

// Runs the delayed-update training loop: the weight update expression built
// at step t stays in the graph so that step t+1's loss trains the shared
// calibration network.
class Trainer {
public:
    Trainer(Model& model, TrainerConfig cfg, uint64_t seed);

    StepMetrics training_step(const Tensor& images, const std::vector<int>& labels);

    // Gradient quantization bit-width <= this is treated as "off" in fp mode.
    void set_epoch(int64_t epoch) { epoch_ = epoch; }
    int64_t steps_done() const { return step_; }

    HyperNet& hypernet() { return hyper_; }
    Model& model() { return model_; }
    Tape& tape() { return tape_; }
    const TrainerConfig& config() const { return cfg_; }

    // Names of the quantizable slots, in metric order.
    std::vector<std::string> quantizable_slot_names() const;

private:
    struct SlotState {
        OptState pi_state;   // differentiable-path optimizer state (meta)
        OptState plain_state; // plain/fp path
        RecurrentState rec;
    };

    void meta_update_slot(size_t slot_idx, SlotState& st, const Tensor& grad, double lr, StepMetrics& m);
    void plain_update_slot(size_t slot_idx, SlotState& st, const Tensor& grad, double lr, StepMetrics& m);

    Model& model_;
    TrainerConfig cfg_;
    Tape tape_;
    HyperNet hyper_;
    std::vector<SlotState> slot_states_;
    std::vector<OptState> psi_states_;
    int64_t step_ = 0;
    int64_t epoch_ = 0;
    bool has_retained_ = false;
};

} // namespace mq
