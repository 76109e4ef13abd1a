#pragma once

#include "graph.hpp"
#include "quantize.hpp"
#include "tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace mq {

enum class Arch { mlp, small_cnn, mini_resnet };

Arch arch_from_string(const std::string& s);

struct ModelSpec {
    Arch arch = Arch::mlp;
    std::vector<int64_t> mlp_widths = {2, 32, 2}; // input .. output
    std::vector<int64_t> cnn_channels = {8, 16};  // conv channels
    int64_t cnn_fc_width = 64;
    int64_t resnet_blocks_per_stage = 1;
    std::vector<int64_t> resnet_widths = {16, 32, 64};
    int num_classes = 2;
    int64_t input_channels = 2; // for mlp: flattened feature count lives in mlp_widths[0]
    int64_t input_hw = 1;

    void validate() const;
};

struct QuantSettings {
    int weight_bits = 32; // 32 = off
    int act_bits = 32;
    bool skip_first_last = true;
    bool err_quant_enabled = false;
    QuantConfig err_quant;
};

// One trainable tensor. `node` is replaced by the trainer as weights move
// through the delayed-update lifecycle (leaf -> retained update -> leaf).
struct ParamSlot {
    std::string name;
    NodePtr node;
    bool quantizable = false; // conv/fc weight: W/A/G quantization applies
    bool boundary = false;    // first or last layer (skip flag target)
};

struct NormLayer {
    int gamma_slot = -1;
    int beta_slot = -1;
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    double eps = 1e-5;
};

class Model {
public:
    virtual ~Model() = default;
    // Builds the forward graph for one batch. `training` updates norm
    // running statistics from the batch.
    virtual NodePtr forward(Tape& tape, const NodePtr& x, bool training) = 0;

    std::vector<ParamSlot> slots;
    std::vector<NormLayer> norms;
    QuantSettings qs;

    ParamSlot& slot(size_t i) { return slots[i]; }
    int64_t param_count() const;

    void save_weights(const std::string& path) const;
    void load_weights(const std::string& path);

protected:
    // Quantized-weight view per the DoReFa scheme; identity when weight
    // quantization is off or the slot is a skipped boundary layer.
    NodePtr quantized_weight(Tape& tape, const ParamSlot& s);
    NodePtr quantized_activation(Tape& tape, const NodePtr& a, bool boundary);
    NodePtr norm_forward(Tape& tape, NormLayer& nl, const NodePtr& x, bool training);
};

std::unique_ptr<Model> build_model(const ModelSpec& spec, uint64_t seed);

} // namespace mq
