#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hypernet.hpp"
#include "model.hpp"
#include "optimizer.hpp"
#include "quantize.hpp"
#include "rng.hpp"
#include "trainer.hpp"

#include <cmath>
#include <vector>

using namespace mq;

namespace {

std::unique_ptr<Model> toy_mlp(uint64_t seed, std::vector<int64_t> widths = {2, 2, 2}) {
    ModelSpec spec;
    spec.arch = Arch::mlp;
    spec.mlp_widths = std::move(widths);
    spec.num_classes = static_cast<int>(spec.mlp_widths.back());
    return build_model(spec, seed);
}

Tensor random_batch(Rng& rng, int64_t n, int64_t feat) {
    Tensor t({n, feat, 1, 1});
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, 1.0);
    return t;
}

} // namespace

TEST_CASE("pi: sgd is the identity") {
    Tape tape;
    OptimizerConfig cfg;
    cfg.kind = OptKind::sgd;
    OptState st;
    NodePtr g = tape.leaf(Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}), true);
    NodePtr out = optimizer_step_pi(tape, g, st, cfg);
    CHECK(out == g);
}

TEST_CASE("pi: momentum recurrence 1 then 1.9") {
    Tape tape;
    OptimizerConfig cfg;
    cfg.kind = OptKind::momentum;
    cfg.momentum_m = 0.9;
    OptState st;
    NodePtr g = tape.leaf(Tensor::scalar(1.0), true);
    NodePtr o1 = optimizer_step_pi(tape, g, st, cfg);
    CHECK(o1->value[0] == doctest::Approx(1.0));
    NodePtr o2 = optimizer_step_pi(tape, g, st, cfg);
    CHECK(o2->value[0] == doctest::Approx(1.9));
}

TEST_CASE("pi: adam first step with defaults is ~1 for g = 0.5") {
    Tape tape;
    OptimizerConfig cfg;
    cfg.kind = OptKind::adam;
    OptState st;
    NodePtr g = tape.leaf(Tensor::scalar(0.5), true);
    NodePtr out = optimizer_step_pi(tape, g, st, cfg);
    CHECK(out->value[0] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("pi: adam custom backward matches finite differences") {
    OptimizerConfig cfg;
    cfg.kind = OptKind::adam;
    const double g0 = 0.37;
    auto forward = [&](double gv, OptState st) {
        Tape tape;
        tape.precision = Precision::f64;
        NodePtr g = tape.leaf(Tensor::scalar(gv), true);
        return optimizer_step_pi(tape, g, st, cfg)->value[0];
    };
    OptState warm;
    {
        // warm up two steps so m/v are nontrivial
        Tape tape;
        NodePtr g = tape.leaf(Tensor::scalar(0.2), true);
        optimizer_step_pi(tape, g, warm, cfg);
        optimizer_step_pi(tape, g, warm, cfg);
    }
    Tape tape;
    tape.precision = Precision::f64;
    NodePtr g = tape.leaf(Tensor::scalar(g0), true);
    OptState st = warm;
    NodePtr out = optimizer_step_pi(tape, g, st, cfg);
    tape.backward(tape.sum(out));
    double ad = grad_of(g)[0];
    double eps = 1e-6;
    double fd = (forward(g0 + eps, warm) - forward(g0 - eps, warm)) / (2.0 * eps);
    CHECK(ad == doctest::Approx(fd).epsilon(1e-5));
}

TEST_CASE("pi differentiable and plain paths agree on values") {
    Rng rng(5);
    for (OptKind k : {OptKind::sgd, OptKind::momentum, OptKind::adam}) {
        OptimizerConfig cfg;
        cfg.kind = k;
        OptState st_pi, st_plain;
        for (int step = 0; step < 4; ++step) {
            Tensor g({6});
            for (int64_t i = 0; i < 6; ++i) g[i] = rng.normal(0.0, 1.0);
            Tape tape;
            NodePtr gn = tape.leaf(g, true);
            Tensor a = optimizer_step_pi(tape, gn, st_pi, cfg)->value;
            Tensor b = optimizer_step_plain(g, st_plain, cfg);
            for (int64_t i = 0; i < 6; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
        }
    }
}

TEST_CASE("delayed update arithmetic") {
    Tape tape;
    NodePtr w = tape.leaf(Tensor::scalar(1.0), true);
    NodePtr pi_out = tape.leaf(Tensor::scalar(0.5), true);
    NodePtr w_next = tape.sub(w, tape.scale(pi_out, 0.1));
    CHECK(w_next->value[0] == doctest::Approx(0.95));
}

TEST_CASE("zero-mu neutrality: weights unchanged and psi-gradients zero") {
    auto model = toy_mlp(3);
    TrainerConfig tc;
    tc.mode = TrainMode::meta;
    tc.bypass_grad_quant = true;
    tc.hyper.design = HyperDesign::MultiFC;
    tc.hyper.hidden = 3;
    tc.opt.kind = OptKind::sgd;
    tc.opt.lr = 0.0;
    tc.precision = Precision::f64;
    Trainer trainer(*model, tc, 4);

    std::vector<Tensor> before;
    for (const auto& s : model->slots) before.push_back(s.node->value);

    Rng rng(5);
    std::vector<int> labels = {0, 1, 1, 0};
    for (int step = 0; step < 3; ++step) trainer.training_step(random_batch(rng, 4, 2), labels);

    for (size_t i = 0; i < model->slots.size(); ++i)
        for (int64_t j = 0; j < before[i].size(); ++j)
            CHECK(model->slots[i].node->value[j] == before[i][j]);
    for (const auto& p : trainer.hypernet().params()) {
        Tensor g = grad_of(p);
        for (int64_t j = 0; j < g.size(); ++j) CHECK(g[j] == 0.0);
    }
}

TEST_CASE("psi receives a nonzero gradient once a fragment is retained") {
    auto model = toy_mlp(6);
    TrainerConfig tc;
    tc.mode = TrainMode::meta;
    tc.bypass_grad_quant = true;
    tc.hyper.design = HyperDesign::MultiFC;
    tc.hyper.hidden = 3;
    tc.opt.kind = OptKind::sgd;
    tc.opt.lr = 0.05;
    tc.precision = Precision::f64;
    Trainer trainer(*model, tc, 7);

    Rng rng(8);
    std::vector<int> labels = {0, 1, 1, 0};
    StepMetrics m0 = trainer.training_step(random_batch(rng, 4, 2), labels);
    CHECK_FALSE(m0.psi_updated); // iteration 0: no fragment yet
    StepMetrics m1 = trainer.training_step(random_batch(rng, 4, 2), labels);
    CHECK(m1.psi_updated);
    double norm = 0.0;
    for (const auto& p : trainer.hypernet().params()) {
        Tensor g = grad_of(p);
        for (int64_t j = 0; j < g.size(); ++j) norm += g[j] * g[j];
    }
    CHECK(norm > 0.0);
}

TEST_CASE("two identical layers double the psi-gradient") {
    // single-slot system: W (1x1), loss_2 = W^{t+1} * upstream; psi-grad from
    // one layer vs two layers with identical inputs
    auto psi_grad_with_layers = [&](int layers) {
        HyperNetConfig hc;
        hc.design = HyperDesign::MultiFC;
        hc.hidden = 2;
        HyperNet net = init_hypernet(hc, 9);
        Tape tape;
        tape.precision = Precision::f64;
        Tensor g({1, 1}, std::vector<double>{0.3});
        NodePtr total;
        for (int l = 0; l < layers; ++l) {
            NodePtr w = tape.leaf(Tensor({1, 1}, std::vector<double>{0.7}), true);
            FlattenedPair p = flatten_for_hypernet(tape, g, w);
            NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
            NodePtr w_next = tape.sub(w, tape.scale(out, 0.1));
            NodePtr term = tape.sum(tape.scale(w_next, 2.0)); // fixed upstream
            total = total ? tape.add(total, term) : term;
        }
        tape.backward(total);
        std::vector<double> out;
        for (const auto& p : net.params())
            for (int64_t j = 0; j < p->value.size(); ++j) out.push_back(grad_of(p)[j]);
        return out;
    };
    auto one = psi_grad_with_layers(1);
    auto two = psi_grad_with_layers(2);
    REQUIRE(one.size() == two.size());
    bool any_nonzero = false;
    for (size_t i = 0; i < one.size(); ++i) {
        CHECK(two[i] == doctest::Approx(2.0 * one[i]).epsilon(1e-10));
        if (one[i] != 0.0) any_nonzero = true;
    }
    CHECK(any_nonzero);
}

TEST_CASE("zero upstream means zero psi-gradient") {
    HyperNetConfig hc;
    hc.design = HyperDesign::DualLSTMFC;
    hc.hidden = 3;
    HyperNet net = init_hypernet(hc, 10);
    Tape tape;
    tape.precision = Precision::f64;
    Tensor g({2, 1}, std::vector<double>{0.3, -0.1});
    NodePtr w = tape.leaf(Tensor({2, 1}, std::vector<double>{0.5, 0.2}), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
    NodePtr w_next = tape.sub(w, tape.scale(out, 0.1));
    NodePtr loss = tape.sum(tape.scale(w_next, 0.0));
    tape.backward(loss);
    for (const auto& pp : net.params()) {
        Tensor gg = grad_of(pp);
        for (int64_t j = 0; j < gg.size(); ++j) CHECK(gg[j] == 0.0);
    }
}

TEST_CASE("toy scalar psi-gradient matches finite differences at 1e-5") {
    // 1 weight, MultiFC with 1 hidden unit, Q bypassed, FP64
    HyperNetConfig hc;
    hc.design = HyperDesign::MultiFC;
    hc.hidden = 1;
    HyperNet net = init_hypernet(hc, 11);
    const Tensor g({1, 1}, std::vector<double>{0.41});
    const double w0 = 0.83, mu = 0.2;

    auto loss2 = [&]() {
        Tape tape;
        tape.precision = Precision::f64;
        NodePtr w = tape.leaf(Tensor({1, 1}, std::vector<double>{w0}), true);
        FlattenedPair p = flatten_for_hypernet(tape, g, w);
        NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
        NodePtr w_next = tape.sub(w, tape.scale(out, mu));
        // next-iteration loss: (w_next - 1)^2
        NodePtr d = tape.sub(w_next, tape.constant(Tensor({1, 1}, std::vector<double>{1.0})));
        return tape.sum(tape.mul(d, d));
    };

    Tape tape;
    tape.precision = Precision::f64;
    NodePtr w = tape.leaf(Tensor({1, 1}, std::vector<double>{w0}), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
    NodePtr w_next = tape.sub(w, tape.scale(out, mu));
    NodePtr d = tape.sub(w_next, tape.constant(Tensor({1, 1}, std::vector<double>{1.0})));
    auto params = net.params();
    tape.backward(tape.sum(tape.mul(d, d)), std::vector<NodePtr>(params.begin(), params.end()));

    for (const auto& pp : params) {
        Tensor ad = grad_of(pp);
        for (int64_t j = 0; j < pp->value.size(); ++j) {
            double orig = pp->value[j];
            double eps = 1e-6 * std::max(1.0, std::abs(orig));
            pp->value[j] = orig + eps;
            double lp = loss2()->value[0];
            pp->value[j] = orig - eps;
            double lm = loss2()->value[0];
            pp->value[j] = orig;
            double fd = (lp - lm) / (2.0 * eps);
            double rel = std::abs(ad[j] - fd) / std::max(1e-8, std::abs(ad[j]) + std::abs(fd));
            CHECK(rel <= 1e-5);
        }
    }
}

TEST_CASE("plain mode reproduces a hand-rolled quantized-SGD reference bitwise") {
    const uint64_t seed = 21;
    auto model = toy_mlp(seed, {2, 3, 2});
    TrainerConfig tc;
    tc.mode = TrainMode::plain;
    tc.grad_quant.bits = 4;
    tc.opt.kind = OptKind::sgd;
    tc.opt.lr = 0.1;
    tc.precision = Precision::f64;
    Trainer trainer(*model, tc, seed);

    // independent reference: same init, manual forward/backward/quantize
    auto ref = toy_mlp(seed, {2, 3, 2});

    Rng rng(22);
    std::vector<int> labels = {0, 1, 1, 0};
    for (int step = 0; step < 2; ++step) {
        Tensor batch = random_batch(rng, 4, 2);
        trainer.training_step(batch, labels);

        Tape tape;
        tape.precision = Precision::f64;
        NodePtr x = tape.constant(batch);
        NodePtr loss = tape.softmax_xent(ref->forward(tape, x, true), labels);
        tape.backward(loss);
        for (auto& s : ref->slots) {
            Tensor g = grad_of(s.node);
            if (s.quantizable) {
                double mx = 0.0;
                for (int64_t i = 0; i < g.size(); ++i) mx = std::max(mx, std::abs(g[i]));
                if (mx > 0.0) {
                    // round(clip(g, c) * 7 / c) * c / 7, ties away from zero
                    double scale = 7.0 / mx;
                    for (int64_t i = 0; i < g.size(); ++i)
                        g[i] = std::round(std::clamp(g[i], -mx, mx) * scale) * (mx / 7.0);
                }
            }
            for (int64_t i = 0; i < g.size(); ++i) s.node->value[i] -= 0.1 * g[i];
        }
    }
    for (size_t i = 0; i < model->slots.size(); ++i) {
        REQUIRE(model->slots[i].name == ref->slots[i].name);
        for (int64_t j = 0; j < model->slots[i].node->value.size(); ++j)
            CHECK(model->slots[i].node->value[j] == ref->slots[i].node->value[j]);
    }
}

TEST_CASE("B=16 identity-init meta run tracks full-precision SGD within 1e-4") {
    const uint64_t seed = 31;
    auto meta_model = toy_mlp(seed, {2, 4, 2});
    auto fp_model = toy_mlp(seed, {2, 4, 2});

    TrainerConfig mc;
    mc.mode = TrainMode::meta;
    mc.bypass_grad_quant = true; // Q bypassed per the side-by-side contract
    mc.hyper.design = HyperDesign::MultiFC;
    mc.hyper.hidden = 3;
    mc.opt.kind = OptKind::sgd;
    mc.opt.lr = 0.05;
    mc.opt.psi_lr = 1e-12; // hold psi still so f_psi stays near identity
    mc.precision = Precision::f64;
    Trainer meta_trainer(*meta_model, mc, seed + 1);
    // exact identity: zero the FC stack, bias 1
    for (const auto& p : meta_trainer.hypernet().params())
        for (int64_t j = 0; j < p->value.size(); ++j) p->value[j] = 0.0;
    meta_trainer.hypernet().fc.back().b->value[0] = 1.0;

    TrainerConfig fc;
    fc.mode = TrainMode::fp;
    fc.opt.kind = OptKind::sgd;
    fc.opt.lr = 0.05;
    fc.precision = Precision::f64;
    Trainer fp_trainer(*fp_model, fc, seed + 1);

    Rng rng(32);
    std::vector<int> labels = {0, 1, 1, 0};
    for (int step = 0; step < 50; ++step) {
        Tensor batch = random_batch(rng, 4, 2);
        meta_trainer.training_step(batch, labels);
        fp_trainer.training_step(batch, labels);
    }
    for (size_t i = 0; i < meta_model->slots.size(); ++i)
        for (int64_t j = 0; j < meta_model->slots[i].node->value.size(); ++j)
            CHECK(std::abs(meta_model->slots[i].node->value[j] - fp_model->slots[i].node->value[j]) <= 1e-4);
}

TEST_CASE("detach is load-bearing: removing it changes psi-gradients") {
    auto run = [&](bool no_detach) {
        auto model = toy_mlp(41);
        TrainerConfig tc;
        tc.mode = TrainMode::meta;
        tc.bypass_grad_quant = true;
        tc.hyper.design = HyperDesign::DualLSTMFC;
        tc.hyper.hidden = 3;
        tc.opt.kind = OptKind::sgd;
        tc.opt.lr = 0.05;
        tc.opt.psi_lr = 0.01;
        tc.precision = Precision::f64;
        tc.no_detach = no_detach;
        Trainer trainer(*model, tc, 42);
        Rng rng(43);
        std::vector<int> labels = {0, 1, 1, 0};
        std::vector<double> grads;
        for (int step = 0; step < 3; ++step) {
            trainer.training_step(random_batch(rng, 4, 2), labels);
            grads.clear();
            for (const auto& p : trainer.hypernet().params())
                for (int64_t j = 0; j < p->value.size(); ++j) grads.push_back(grad_of(p)[j]);
        }
        return grads;
    };
    auto with_detach = run(false);
    auto without = run(true);
    REQUIRE(with_detach.size() == without.size());
    double diff = 0.0;
    for (size_t i = 0; i < with_detach.size(); ++i) diff = std::max(diff, std::abs(with_detach[i] - without[i]));
    CHECK(diff > 1e-9);
}

TEST_CASE("NaN loss aborts with a diagnostic") {
    auto model = toy_mlp(51);
    // poison the output layer so the NaN reaches the loss
    model->slots.back().node->value[0] = std::numeric_limits<double>::quiet_NaN();
    TrainerConfig tc;
    tc.mode = TrainMode::fp;
    tc.opt.lr = 0.1;
    Trainer trainer(*model, tc, 52);
    Rng rng(53);
    std::vector<int> labels = {0, 1, 1, 0};
    CHECK_THROWS_WITH_AS(trainer.training_step(random_batch(rng, 4, 2), labels),
                         doctest::Contains("iteration"), std::runtime_error);
}

TEST_CASE("at most one retained fragment per layer") {
    auto model = toy_mlp(61);
    TrainerConfig tc;
    tc.mode = TrainMode::meta;
    tc.bypass_grad_quant = true;
    tc.hyper.design = HyperDesign::MultiFC;
    tc.hyper.hidden = 2;
    tc.opt.kind = OptKind::sgd;
    tc.opt.lr = 0.05;
    tc.precision = Precision::f64;
    Trainer trainer(*model, tc, 62);
    Rng rng(63);
    std::vector<int> labels = {0, 1, 1, 0};
    int64_t prev = -1;
    for (int step = 0; step < 6; ++step) {
        trainer.training_step(random_batch(rng, 4, 2), labels);
        int64_t live = Node::live_count();
        if (step >= 2) {
            CHECK(std::abs(live - prev) <= 2); // steady state
        }
        prev = live;
    }
}
