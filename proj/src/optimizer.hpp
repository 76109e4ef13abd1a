#pragma once

#include "graph.hpp"
#include "tensor.hpp"

#include <string>

namespace mq {

enum class OptKind { sgd, momentum, adam };

OptKind opt_kind_from_string(const std::string& s);
const char* opt_kind_name(OptKind k);

struct OptimizerConfig {
    OptKind kind = OptKind::momentum;
    double lr = 0.01;
    double momentum_m = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double lr_decay = 0.0; // lr(epoch) = lr / (1 + lr_decay * epoch)
    double psi_lr = 0.001;      // hypernetwork learning rate
    double psi_grad_clip = 1.0; // global-norm clip on the psi gradient, 0 = off

    void validate() const;
    double lr_at_epoch(int64_t epoch) const { return lr / (1.0 + lr_decay * static_cast<double>(epoch)); }
};

// Per-parameter optimizer state. Historical tensors are constants in the
// graph; only the current-step gradient stays differentiable.
struct OptState {
    Tensor velocity; // momentum
    Tensor adam_m;
    Tensor adam_v;
    int64_t step = 0;
    bool initialized = false;

    void ensure(const Shape& shape);
};

// Differentiable refinement pi of the quantized gradient. Updates `state`
// with the values of the new moments as a side effect.
NodePtr optimizer_step_pi(Tape& tape, const NodePtr& g, OptState& state, const OptimizerConfig& cfg);

// Same recurrences on raw tensors (plain / fp modes, psi updates).
Tensor optimizer_step_plain(const Tensor& g, OptState& state, const OptimizerConfig& cfg);

} // namespace mq
