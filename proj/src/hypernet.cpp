#include "hypernet.hpp"

#include "rng.hpp"

#include <cmath>
#include <stdexcept>

namespace mq {

const char* hyper_design_name(HyperDesign d) {
    switch (d) {
        case HyperDesign::MultiFC: return "multifc";
        case HyperDesign::LSTMFC: return "lstmfc";
        case HyperDesign::DualLSTMFC: return "duallstmfc";
    }
    return "?";
}

HyperDesign hyper_design_from_string(const std::string& s) {
    if (s == "multifc") return HyperDesign::MultiFC;
    if (s == "lstmfc") return HyperDesign::LSTMFC;
    if (s == "duallstmfc") return HyperDesign::DualLSTMFC;
    throw std::invalid_argument("unknown hypernet design '" + s + "' (multifc|lstmfc|duallstmfc)");
}

FlattenedPair flatten_for_hypernet(Tape& tape, const Tensor& grad, const NodePtr& weight_node) {
    if (grad.shape() != weight_node->value.shape())
        throw std::invalid_argument("flatten_for_hypernet: gradient shape " + shape_str(grad.shape()) +
                                    " does not match weight shape " + shape_str(weight_node->value.shape()));
    FlattenedPair p;
    p.original_shape = grad.shape();
    p.count = grad.size();
    p.grad = tape.leaf(grad.reshaped({p.count, 1}), false);
    p.weight = tape.reshape(weight_node, {p.count, 1});
    return p;
}

Tensor unflatten_from_hypernet(const Tensor& flat, const Shape& original_shape) {
    return flat.reshaped(original_shape);
}

std::vector<NodePtr> HyperNet::params() const {
    std::vector<NodePtr> out;
    if (design != HyperDesign::MultiFC) {
        for (const auto& g : gates) {
            out.push_back(g.wx);
            out.push_back(g.wh);
            out.push_back(g.b);
        }
    }
    for (const auto& l : fc) {
        out.push_back(l.w);
        out.push_back(l.b);
    }
    return out;
}

int64_t HyperNet::param_count() const {
    int64_t n = 0;
    for (const auto& p : params()) n += p->value.size();
    return n;
}

namespace {
Tensor random_tensor(Rng& rng, Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}
} // namespace

HyperNet init_hypernet(const HyperNetConfig& cfg, uint64_t seed) {
    if (cfg.hidden < 1) throw std::invalid_argument("hypernet hidden width must be >= 1");
    Tape tape;
    Rng rng(seed);
    HyperNet net;
    net.design = cfg.design;
    net.hidden = cfg.hidden;
    net.residual = cfg.residual;
    net.persist_state = cfg.persist_state;
    const int64_t H = cfg.hidden;

    if (cfg.design == HyperDesign::MultiFC) {
        // FCs(.) ~= 1 at init: tiny final weights, final bias 1
        net.fc.push_back({tape.leaf(random_tensor(rng, {1, H}, 1.0), true), tape.leaf(Tensor({H}), true)});
        Tensor b1({1}, std::vector<double>{1.0});
        net.fc.push_back({tape.leaf(random_tensor(rng, {H, 1}, 0.01), true), tape.leaf(std::move(b1), true)});
        return net;
    }

    const int64_t in = cfg.design == HyperDesign::DualLSTMFC ? 2 : 1;
    const bool dual = cfg.design == HyperDesign::DualLSTMFC;
    const double gain = dual ? 0.1 : 1.0 / std::sqrt(static_cast<double>(H));
    for (auto& g : net.gates) {
        g.wx = tape.leaf(random_tensor(rng, {in, H}, gain), true);
        g.wh = tape.leaf(random_tensor(rng, {H, H}, gain), true);
        g.b = tape.leaf(Tensor({H}), true);
    }
    Tensor fw = random_tensor(rng, {H, 1}, dual ? 0.001 : 0.01);
    Tensor fb({1}, std::vector<double>{dual ? 0.0 : 1.0});
    net.fc.push_back({tape.leaf(std::move(fw), true), tape.leaf(std::move(fb), true)});
    return net;
}

namespace {
NodePtr lstm_cell(Tape& tape, const HyperNet& net, const NodePtr& x, RecurrentState* state) {
    const int64_t N = x->value.dim(0);
    const int64_t H = net.hidden;
    Tensor h0({N, H});
    Tensor c0({N, H});
    if (state && state->initialized && state->h.shape() == Shape{N, H}) {
        h0 = state->h;
        c0 = state->c;
    }
    NodePtr h_prev = tape.constant(std::move(h0));
    NodePtr c_prev = tape.constant(std::move(c0));

    std::array<NodePtr, 4> pre;
    for (int g = 0; g < 4; ++g) {
        const auto& gate = net.gates[static_cast<size_t>(g)];
        pre[static_cast<size_t>(g)] =
            tape.add(tape.add(tape.matmul(x, gate.wx), tape.matmul(h_prev, gate.wh)), gate.b);
    }
    NodePtr i = tape.sigmoid(pre[0]);
    NodePtr f = tape.sigmoid(pre[1]);
    NodePtr o = tape.sigmoid(pre[2]);
    NodePtr cand = tape.tanh(pre[3]);
    NodePtr c_new = tape.add(tape.mul(f, c_prev), tape.mul(i, cand));
    NodePtr h_new = tape.mul(o, tape.tanh(c_new));
    if (state && net.persist_state) {
        state->h = h_new->value;
        state->c = c_new->value;
        state->initialized = true;
    }
    return h_new;
}

NodePtr fc_stack(Tape& tape, const HyperNet& net, NodePtr x) {
    for (size_t l = 0; l < net.fc.size(); ++l) {
        x = tape.add(tape.matmul(x, net.fc[l].w), net.fc[l].b);
        if (l + 1 < net.fc.size()) x = tape.tanh(x);
    }
    return x;
}
} // namespace

NodePtr hypernet_fpsi(Tape& tape, const HyperNet& net, const FlattenedPair& p, RecurrentState* state) {
    switch (net.design) {
        case HyperDesign::MultiFC:
            return tape.mul(p.grad, fc_stack(tape, net, p.weight));
        case HyperDesign::LSTMFC:
            return tape.mul(p.grad, fc_stack(tape, net, lstm_cell(tape, net, p.weight, state)));
        case HyperDesign::DualLSTMFC: {
            NodePtr joint = tape.concat_cols(p.weight, p.grad);
            NodePtr out = fc_stack(tape, net, lstm_cell(tape, net, joint, state));
            if (net.residual) out = tape.add(out, p.grad);
            return out;
        }
    }
    throw std::logic_error("unreachable hypernet design");
}

NodePtr hypernet_apply(Tape& tape, const HyperNet& net, const FlattenedPair& p, const QuantConfig& cfg,
                       bool bypass_quant, RecurrentState* state, bool* degenerate) {
    NodePtr calibrated = hypernet_fpsi(tape, net, p, state);
    if (bypass_quant) {
        if (degenerate) *degenerate = false;
        return calibrated;
    }
    return fake_quantize(tape, calibrated, cfg, degenerate);
}

} // namespace mq
