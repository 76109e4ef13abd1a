#pragma once

#include "graph.hpp"
#include "quantize.hpp"
#include "tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace mq {

enum class HyperDesign { MultiFC, LSTMFC, DualLSTMFC };

const char* hyper_design_name(HyperDesign d);
HyperDesign hyper_design_from_string(const std::string& s);

struct HyperNetConfig {
    HyperDesign design = HyperDesign::DualLSTMFC;
    int hidden = 8;             // H, width of the recurrent cell / FC stack
    bool residual = false;      // DualLSTMFC only: add the raw gradient to the output
    bool persist_state = false; // carry LSTM state across training iterations
};

// Flattened (gradient, weight) pair fed coordinate-wise to the calibration
// network. The gradient is a detached input; only the weight column and the
// network parameters carry gradient paths.
struct FlattenedPair {
    NodePtr grad;   // N x 1 leaf
    NodePtr weight; // N x 1, differentiable into the weight leaf
    Shape original_shape;
    int64_t count = 0;
};

FlattenedPair flatten_for_hypernet(Tape& tape, const Tensor& grad, const NodePtr& weight_node);
Tensor unflatten_from_hypernet(const Tensor& flat, const Shape& original_shape);

// Per-coordinate LSTM state for one layer, shape N x H each.
struct RecurrentState {
    Tensor h;
    Tensor c;
    bool initialized = false;
};

// Shared calibration-network parameters. One instance serves every
// quantizable layer; size is independent of any layer's element count.
struct HyperNet {
    HyperDesign design = HyperDesign::DualLSTMFC;
    int hidden = 0;
    bool residual = false;
    bool persist_state = false;

    struct Gate {
        NodePtr wx; // in x H
        NodePtr wh; // H x H
        NodePtr b;  // 1 x H (broadcast over coordinates via matmul with ones)
    };
    std::array<Gate, 4> gates{}; // input, forget, output, candidate
    struct FcLayer {
        NodePtr w; // in x out
        NodePtr b; // out
    };
    std::vector<FcLayer> fc;

    std::vector<NodePtr> params() const;
    int64_t param_count() const;
};

HyperNet init_hypernet(const HyperNetConfig& cfg, uint64_t seed);

// f_psi: the calibration network, before quantization.
NodePtr hypernet_fpsi(Tape& tape, const HyperNet& net, const FlattenedPair& p, RecurrentState* state);

// f_phi = Q(f_psi): quantizer last so outputs lie on the (c, B) grid.
// bypass_quant skips Q (grad-check mode).
NodePtr hypernet_apply(Tape& tape, const HyperNet& net, const FlattenedPair& p, const QuantConfig& cfg,
                       bool bypass_quant = false, RecurrentState* state = nullptr, bool* degenerate = nullptr);

} // namespace mq
