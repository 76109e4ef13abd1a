#pragma once

#include "graph.hpp"
#include "tensor.hpp"

#include <cstdint>
#include <vector>

namespace mq {

enum class ClipPolicy { max_abs, percentile, fixed };

struct QuantConfig {
    int bits = 8; // B, [2, 16]
    ClipPolicy clip = ClipPolicy::max_abs;
    double percentile = 99.0;  // for ClipPolicy::percentile, in (0, 100]
    double fixed_c = 1.0;      // for ClipPolicy::fixed
    double epsilon_floor = 1e-12;

    void validate() const;
    int64_t qmax() const { return (int64_t{1} << (bits - 1)) - 1; }
};

struct ClipResult {
    double c = 0.0;
    bool degenerate = false; // all-zero input, c fell back to epsilon_floor
};

ClipResult select_clip(const Tensor& x, const QuantConfig& cfg);

// Integer codes on the symmetric grid: k in [-(2^{B-1}-1), 2^{B-1}-1].
struct QuantLevels {
    std::vector<int32_t> codes;
    Shape shape;
    double c = 1.0;
    int bits = 8;
};

QuantLevels quantize(const Tensor& x, double c, int bits);
Tensor dequantize(const QuantLevels& q);

// quantize-then-dequantize on the tensor level (no graph involvement)
Tensor fake_quantize_tensor(const Tensor& x, double c, int bits);

// Graph ops. STE backward: upstream gradient passes where |x| <= c.
NodePtr fake_quantize(Tape& tape, const NodePtr& x, const QuantConfig& cfg, bool* degenerate = nullptr);
NodePtr fake_quantize_fixed(Tape& tape, const NodePtr& x, double c, int bits);

// DoReFa forward-pass quantizers, identity-STE backward.
NodePtr dorefa_weight_quantize(Tape& tape, const NodePtr& w, int kbits);
NodePtr dorefa_activation_quantize(Tape& tape, const NodePtr& a, int kbits);

// Plain (non-meta) quantization of an error signal.
Tensor quantize_error_signal(const Tensor& g, const QuantConfig& cfg, bool enabled);

// Identity forward; backward quantizes the incoming activation gradient
// with the plain quantizer before passing it on.
NodePtr error_signal_quant(Tape& tape, const NodePtr& x, QuantConfig cfg, bool enabled);

} // namespace mq
