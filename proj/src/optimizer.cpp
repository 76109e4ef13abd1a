#include "optimizer.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace mq {

OptKind opt_kind_from_string(const std::string& s) {
    if (s == "sgd") return OptKind::sgd;
    if (s == "momentum" || s == "sgd-momentum") return OptKind::momentum;
    if (s == "adam") return OptKind::adam;
    throw std::invalid_argument("unknown optimizer '" + s + "' (sgd|momentum|adam)");
}

const char* opt_kind_name(OptKind k) {
    switch (k) {
        case OptKind::sgd: return "sgd";
        case OptKind::momentum: return "momentum";
        case OptKind::adam: return "adam";
    }
    return "?";
}

void OptimizerConfig::validate() const {
    if (lr < 0.0) throw std::invalid_argument("learning rate must be >= 0");
    if (momentum_m < 0.0 || momentum_m >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
        throw std::invalid_argument("adam betas must be in (0, 1)");
    if (psi_lr <= 0.0) throw std::invalid_argument("psi learning rate must be positive");
    if (psi_grad_clip < 0.0) throw std::invalid_argument("psi gradient clip must be >= 0");
    if (lr_decay < 0.0) throw std::invalid_argument("lr decay must be >= 0");
}

void OptState::ensure(const Shape& shape) {
    if (initialized) return;
    velocity = Tensor(shape);
    adam_m = Tensor(shape);
    adam_v = Tensor(shape);
    initialized = true;
}

NodePtr optimizer_step_pi(Tape& tape, const NodePtr& g, OptState& state, const OptimizerConfig& cfg) {
    state.ensure(g->value.shape());
    switch (cfg.kind) {
        case OptKind::sgd:
            return g;
        case OptKind::momentum: {
            NodePtr v_prev = tape.constant(state.velocity);
            NodePtr v_new = tape.add(tape.scale(v_prev, cfg.momentum_m), g);
            state.velocity = v_new->value;
            return v_new;
        }
        case OptKind::adam: {
            state.step += 1;
            const double b1 = cfg.beta1, b2 = cfg.beta2, eps = cfg.adam_eps;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
            auto m_prev = std::make_shared<Tensor>(state.adam_m);
            auto v_prev = std::make_shared<Tensor>(state.adam_v);

            const Tensor& gv = g->value;
            Tensor out(gv.shape());
            Tensor m_new(gv.shape());
            Tensor v_new(gv.shape());
            for (int64_t i = 0; i < gv.size(); ++i) {
                m_new[i] = b1 * (*m_prev)[i] + (1.0 - b1) * gv[i];
                v_new[i] = b2 * (*v_prev)[i] + (1.0 - b2) * gv[i] * gv[i];
                out[i] = (m_new[i] / bc1) / (std::sqrt(v_new[i] / bc2) + eps);
            }
            state.adam_m = m_new;
            state.adam_v = v_new;

            return tape.custom(
                OpKind::scale, std::move(out), {g}, [m_prev, v_prev, b1, b2, eps, bc1, bc2](Node& self) {
                    Node& p = *self.parents[0];
                    if (!p.requires_grad) return;
                    const Tensor& up = *self.grad;
                    Tensor& gp = ensure_grad(p);
                    for (int64_t i = 0; i < up.size(); ++i) {
                        double gi = p.value[i];
                        double mh = (b1 * (*m_prev)[i] + (1.0 - b1) * gi) / bc1;
                        double vh = (b2 * (*v_prev)[i] + (1.0 - b2) * gi * gi) / bc2;
                        double sv = std::sqrt(vh);
                        double denom = sv + eps;
                        double dmh = (1.0 - b1) / bc1;
                        // d sqrt(vh)/d g = (1-b2) * g / bc2 / sqrt(vh)
                        double dsv = sv > 0.0 ? (1.0 - b2) * gi / bc2 / sv : 0.0;
                        gp[i] += up[i] * (dmh * denom - mh * dsv) / (denom * denom);
                    }
                });
        }
    }
    throw std::logic_error("unreachable optimizer kind");
}

Tensor optimizer_step_plain(const Tensor& g, OptState& state, const OptimizerConfig& cfg) {
    state.ensure(g.shape());
    switch (cfg.kind) {
        case OptKind::sgd:
            return g;
        case OptKind::momentum: {
            for (int64_t i = 0; i < g.size(); ++i)
                state.velocity[i] = cfg.momentum_m * state.velocity[i] + g[i];
            return state.velocity;
        }
        case OptKind::adam: {
            state.step += 1;
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
            Tensor out(g.shape());
            for (int64_t i = 0; i < g.size(); ++i) {
                state.adam_m[i] = cfg.beta1 * state.adam_m[i] + (1.0 - cfg.beta1) * g[i];
                state.adam_v[i] = cfg.beta2 * state.adam_v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                out[i] = (state.adam_m[i] / bc1) / (std::sqrt(state.adam_v[i] / bc2) + cfg.adam_eps);
            }
            return out;
        }
    }
    throw std::logic_error("unreachable optimizer kind");
}

} // namespace mq
