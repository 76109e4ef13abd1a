#include "quantize.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mq {

void QuantConfig::validate() const {
    if (bits < 2 || bits > 16)
        throw std::invalid_argument("quant bit-width must be in [2, 16], got " + std::to_string(bits));
    if (clip == ClipPolicy::percentile && (percentile <= 0.0 || percentile > 100.0))
        throw std::invalid_argument("clip percentile must be in (0, 100]");
    if (clip == ClipPolicy::fixed && fixed_c <= 0.0)
        throw std::invalid_argument("fixed clip value must be positive");
    if (epsilon_floor <= 0.0) throw std::invalid_argument("epsilon_floor must be positive");
}

ClipResult select_clip(const Tensor& x, const QuantConfig& cfg) {
    cfg.validate();
    if (cfg.clip == ClipPolicy::fixed) return {cfg.fixed_c, false};
    double c = 0.0;
    if (cfg.clip == ClipPolicy::max_abs) {
        for (int64_t i = 0; i < x.size(); ++i) c = std::max(c, std::abs(x[i]));
    } else {
        std::vector<double> mags(static_cast<size_t>(x.size()));
        for (int64_t i = 0; i < x.size(); ++i) mags[static_cast<size_t>(i)] = std::abs(x[i]);
        // rank = ceil(p/100 * n), 1-based
        auto n = static_cast<int64_t>(mags.size());
        int64_t rank = static_cast<int64_t>(std::ceil(cfg.percentile / 100.0 * static_cast<double>(n)));
        rank = std::clamp<int64_t>(rank, 1, n);
        std::nth_element(mags.begin(), mags.begin() + (rank - 1), mags.end());
        c = mags[static_cast<size_t>(rank - 1)];
    }
    if (c <= 0.0) return {cfg.epsilon_floor, true};
    return {c, false};
}

QuantLevels quantize(const Tensor& x, double c, int bits) {
    if (c <= 0.0) throw std::invalid_argument("quantize requires c > 0, got " + std::to_string(c));
    if (bits < 2 || bits > 16) throw std::invalid_argument("quantize bit-width must be in [2, 16]");
    QuantLevels q;
    q.shape = x.shape();
    q.c = c;
    q.bits = bits;
    q.codes.resize(static_cast<size_t>(x.size()));
    const auto qmax = static_cast<double>((int64_t{1} << (bits - 1)) - 1);
    for (int64_t i = 0; i < x.size(); ++i) {
        double v = std::clamp(x[i], -c, c);
        // std::round breaks ties away from zero
        q.codes[static_cast<size_t>(i)] = static_cast<int32_t>(std::round(v * qmax / c));
    }
    return q;
}

Tensor dequantize(const QuantLevels& q) {
    Tensor out(q.shape);
    const double scale = q.c / static_cast<double>((int64_t{1} << (q.bits - 1)) - 1);
    for (size_t i = 0; i < q.codes.size(); ++i) out[static_cast<int64_t>(i)] = q.codes[i] * scale;
    return out;
}

Tensor fake_quantize_tensor(const Tensor& x, double c, int bits) {
    return dequantize(quantize(x, c, bits));
}

namespace {
NodePtr ste_quant_node(Tape& tape, const NodePtr& x, double c, int bits) {
    Tensor out = fake_quantize_tensor(x->value, c, bits);
    return tape.custom(OpKind::fake_quant, std::move(out), {x}, [c](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Tensor& g = *self.grad;
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < g.size(); ++i)
            if (std::abs(p.value[i]) <= c) gp[i] += g[i];
    });
}
} // namespace

NodePtr fake_quantize(Tape& tape, const NodePtr& x, const QuantConfig& cfg, bool* degenerate) {
    ClipResult clip = select_clip(x->value, cfg);
    if (degenerate) *degenerate = clip.degenerate;
    return ste_quant_node(tape, x, clip.c, cfg.bits);
}

NodePtr fake_quantize_fixed(Tape& tape, const NodePtr& x, double c, int bits) {
    if (c <= 0.0) throw std::invalid_argument("fake_quantize requires c > 0");
    return ste_quant_node(tape, x, c, bits);
}

namespace {
// q_k(v) = round(v * (2^k - 1)) / (2^k - 1) on [0, 1]
inline double unit_quant(double v, int kbits) {
    const auto levels = static_cast<double>((int64_t{1} << kbits) - 1);
    return std::round(v * levels) / levels;
}
} // namespace

NodePtr dorefa_weight_quantize(Tape& tape, const NodePtr& w, int kbits) {
    const Tensor& wv = w->value;
    double maxt = 0.0;
    Tensor th(wv.shape());
    for (int64_t i = 0; i < wv.size(); ++i) {
        th[i] = std::tanh(wv[i]);
        maxt = std::max(maxt, std::abs(th[i]));
    }
    Tensor out(wv.shape());
    if (maxt == 0.0) {
        out = wv; // all-zero weights pass through unchanged
    } else {
        for (int64_t i = 0; i < wv.size(); ++i)
            out[i] = 2.0 * unit_quant(th[i] / (2.0 * maxt) + 0.5, kbits) - 1.0;
    }
    return tape.custom(OpKind::dorefa_weight, std::move(out), {w}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Tensor& g = *self.grad;
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    });
}

NodePtr dorefa_activation_quantize(Tape& tape, const NodePtr& a, int kbits) {
    const Tensor& av = a->value;
    Tensor out(av.shape());
    for (int64_t i = 0; i < av.size(); ++i) out[i] = unit_quant(std::clamp(av[i], 0.0, 1.0), kbits);
    return tape.custom(OpKind::dorefa_act, std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Tensor& g = *self.grad;
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < g.size(); ++i)
            if (p.value[i] >= 0.0 && p.value[i] <= 1.0) gp[i] += g[i];
    });
}

Tensor quantize_error_signal(const Tensor& g, const QuantConfig& cfg, bool enabled) {
    if (!enabled) return g;
    ClipResult clip = select_clip(g, cfg);
    if (clip.degenerate) return g; // zeros stay zeros
    return fake_quantize_tensor(g, clip.c, cfg.bits);
}

NodePtr error_signal_quant(Tape& tape, const NodePtr& x, QuantConfig cfg, bool enabled) {
    if (!enabled) return x;
    return tape.custom(OpKind::grad_quant, x->value, {x}, [cfg](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor gq = quantize_error_signal(*self.grad, cfg, true);
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < gq.size(); ++i) gp[i] += gq[i];
    });
}

} // namespace mq
