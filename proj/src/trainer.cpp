#include "trainer.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mq {

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "meta") return TrainMode::meta;
    if (s == "plain") return TrainMode::plain;
    if (s == "fp") return TrainMode::fp;
    throw std::invalid_argument("unknown mode '" + s + "' (meta|plain|fp)");
}

const char* train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::meta: return "meta";
        case TrainMode::plain: return "plain";
        case TrainMode::fp: return "fp";
    }
    return "?";
}

namespace {
double mse(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

double cosine(const Tensor& a, const Tensor& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}
} // namespace

Trainer::Trainer(Model& model, TrainerConfig cfg, uint64_t seed) : model_(model), cfg_(std::move(cfg)) {
    cfg_.grad_quant.validate();
    if (cfg_.opt.lr < 0.0) throw std::invalid_argument("learning rate must be >= 0");
    tape_.precision = cfg_.precision;
    slot_states_.resize(model_.slots.size());
    if (cfg_.mode == TrainMode::meta) {
        hyper_ = init_hypernet(cfg_.hyper, seed);
        psi_states_.resize(hyper_.params().size());
    }
}

std::vector<std::string> Trainer::quantizable_slot_names() const {
    std::vector<std::string> out;
    for (const auto& s : model_.slots)
        if (s.quantizable) out.push_back(s.name);
    return out;
}

StepMetrics Trainer::training_step(const Tensor& images, const std::vector<int>& labels) {
    StepMetrics m;
    m.iteration = step_;

    NodePtr x = tape_.constant(images);
    NodePtr logits = model_.forward(tape_, x, true);
    NodePtr loss = tape_.softmax_xent(logits, labels);
    m.loss = loss->value[0];
    if (!std::isfinite(m.loss)) {
        std::ostringstream os;
        os << "NaN/Inf loss at iteration " << step_ << " (mode " << train_mode_name(cfg_.mode) << ", lr "
           << cfg_.opt.lr_at_epoch(epoch_) << ")";
        throw std::runtime_error(os.str());
    }

    std::vector<NodePtr> retain;
    if (cfg_.no_detach)
        for (auto& s : model_.slots) retain.push_back(s.node);
    tape_.backward(loss, retain);

    // One psi update per step once a retained fragment has been consumed.
    if (cfg_.mode == TrainMode::meta && has_retained_) {
        auto params = hyper_.params();
        // SGD with global-norm clipping; momentum on the meta-gradient is
        // unstable because consecutive fragments are nearly independent.
        double norm2 = 0.0;
        for (const auto& p : params) {
            Tensor g = grad_of(p);
            for (int64_t j = 0; j < g.size(); ++j) norm2 += g[j] * g[j];
        }
        double coef = 1.0;
        if (cfg_.opt.psi_grad_clip > 0.0 && norm2 > cfg_.opt.psi_grad_clip * cfg_.opt.psi_grad_clip)
            coef = cfg_.opt.psi_grad_clip / std::sqrt(norm2);
        for (const auto& p : params) {
            Tensor g = grad_of(p);
            Tensor& v = p->value;
            for (int64_t j = 0; j < v.size(); ++j) v[j] -= cfg_.opt.psi_lr * coef * g[j];
            apply_precision(v, cfg_.precision);
        }
        m.psi_updated = true;
    }

    const double lr = cfg_.opt.lr_at_epoch(epoch_);
    for (size_t i = 0; i < model_.slots.size(); ++i) {
        ParamSlot& slot = model_.slots[i];
        Tensor g = grad_of(slot.node);
        if (!slot.quantizable || cfg_.mode == TrainMode::fp) {
            // full precision, unquantized gradient
            Tensor d = optimizer_step_plain(g, slot_states_[i].plain_state, cfg_.opt);
            Tensor& v = slot.node->value;
            for (int64_t j = 0; j < v.size(); ++j) v[j] -= lr * d[j];
            apply_precision(v, cfg_.precision);
            if (slot.quantizable) {
                m.grad_quant_mse.push_back(0.0);
                m.grad_cosine.push_back(1.0);
            }
        } else if (cfg_.mode == TrainMode::plain) {
            plain_update_slot(i, slot_states_[i], g, lr, m);
        } else {
            meta_update_slot(i, slot_states_[i], g, lr, m);
        }
    }
    ++step_;
    return m;
}

void Trainer::plain_update_slot(size_t slot_idx, SlotState& st, const Tensor& grad, double lr, StepMetrics& m) {
    ParamSlot& slot = model_.slots[slot_idx];
    ClipResult clip = select_clip(grad, cfg_.grad_quant);
    Tensor gq = clip.degenerate || cfg_.bypass_grad_quant
                    ? grad
                    : fake_quantize_tensor(grad, clip.c, cfg_.grad_quant.bits);
    if (clip.degenerate) m.degenerate_grad = true;
    m.grad_quant_mse.push_back(mse(grad, gq));
    m.grad_cosine.push_back(cosine(grad, gq));
    Tensor d = optimizer_step_plain(gq, st.plain_state, cfg_.opt);
    Tensor& v = slot.node->value;
    for (int64_t j = 0; j < v.size(); ++j) v[j] -= lr * d[j];
    apply_precision(v, cfg_.precision);
}

void Trainer::meta_update_slot(size_t slot_idx, SlotState& st, const Tensor& grad, double lr, StepMetrics& m) {
    ParamSlot& slot = model_.slots[slot_idx];
    // W^t becomes an ordinary leaf for the next fragment; keeping the live
    // node instead (no_detach) chains fragments across iterations.
    NodePtr w_input = cfg_.no_detach ? slot.node : Tape::rebase_leaf(slot.node);

    FlattenedPair pair = flatten_for_hypernet(tape_, grad, w_input);
    bool degenerate = false;
    NodePtr out = hypernet_apply(tape_, hyper_, pair, cfg_.grad_quant, cfg_.bypass_grad_quant, &st.rec, &degenerate);
    if (degenerate) m.degenerate_grad = true;

    Tensor gq = unflatten_from_hypernet(out->value, grad.shape());
    m.grad_quant_mse.push_back(mse(grad, gq));
    m.grad_cosine.push_back(cosine(grad, gq));

    NodePtr gq_node = tape_.reshape(out, grad.shape());
    NodePtr pi_out = optimizer_step_pi(tape_, gq_node, st.pi_state, cfg_.opt);
    NodePtr w_next = tape_.sub(w_input, tape_.scale(pi_out, lr));
    slot.node = w_next; // retained until the next backward
    has_retained_ = true;
}

} // namespace mq
