#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hypernet.hpp"
#include "quantize.hpp"
#include "rng.hpp"

#include <cmath>

using namespace mq;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

void zero_params(HyperNet& net) {
    for (const auto& p : net.params())
        for (int64_t i = 0; i < p->value.size(); ++i) p->value[i] = 0.0;
}

} // namespace

TEST_CASE("flatten shape contracts and round trip") {
    Tape tape;
    Rng rng(1);
    Tensor g = random_tensor(rng, {2, 3}, 1.0);
    NodePtr w = tape.leaf(random_tensor(rng, {2, 3}, 0.1), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    CHECK(p.count == 6);
    CHECK(p.grad->value.shape() == Shape{6, 1});
    CHECK(p.weight->value.shape() == Shape{6, 1});
    CHECK(p.grad->leaf_flag);
    CHECK(p.grad->parents.empty()); // detached input

    Tensor conv = random_tensor(rng, {4, 3, 3, 3}, 1.0);
    NodePtr wc = tape.leaf(conv, true);
    FlattenedPair pc = flatten_for_hypernet(tape, conv, wc);
    CHECK(pc.count == 108);

    Tensor back = unflatten_from_hypernet(pc.grad->value, {4, 3, 3, 3});
    for (int64_t i = 0; i < conv.size(); ++i) CHECK(back[i] == conv[i]);
}

TEST_CASE("flatten rejects mismatched shapes") {
    Tape tape;
    NodePtr w = tape.leaf(Tensor({2, 2}), true);
    CHECK_THROWS_AS(flatten_for_hypernet(tape, Tensor({3, 2}), w), std::exception);
}

TEST_CASE("multifc: constant-one FC stack is the identity on the gradient") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::MultiFC;
    cfg.hidden = 4;
    HyperNet net = init_hypernet(cfg, 1);
    zero_params(net);
    net.fc.back().b->value[0] = 1.0; // FCs(.) == 1

    Tape tape;
    Rng rng(2);
    Tensor g = random_tensor(rng, {3, 2}, 1.0);
    NodePtr w = tape.leaf(random_tensor(rng, {3, 2}, 0.1), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
    for (int64_t i = 0; i < 6; ++i) CHECK(out->value[i] == doctest::Approx(g.reshaped({6, 1})[i]));
}

TEST_CASE("multifc: hand-computed single linear unit") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::MultiFC;
    cfg.hidden = 1;
    HyperNet net = init_hypernet(cfg, 1);
    // collapse to a single affine unit: W' * 2 + 0.5
    net.fc[0].w->value[0] = 1.0;
    net.fc[0].b->value[0] = 0.0;
    net.fc.back().w->value[0] = 2.0;
    net.fc.back().b->value[0] = 0.5;

    Tape tape;
    Tensor g({2, 1}, std::vector<double>{0.1, 0.2});
    NodePtr w = tape.leaf(Tensor({2, 1}, std::vector<double>{1.0, -1.0}), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
    // tanh between the layers: fc = tanh(W') * 2 + 0.5
    double f0 = std::tanh(1.0) * 2.0 + 0.5;
    double f1 = std::tanh(-1.0) * 2.0 + 0.5;
    CHECK(out->value[0] == doctest::Approx(0.1 * f0));
    CHECK(out->value[1] == doctest::Approx(0.2 * f1));
}

TEST_CASE("multifc and lstmfc: zero gradient forces zero output") {
    for (HyperDesign d : {HyperDesign::MultiFC, HyperDesign::LSTMFC}) {
        HyperNetConfig cfg;
        cfg.design = d;
        cfg.hidden = 5;
        HyperNet net = init_hypernet(cfg, 7);
        Tape tape;
        Rng rng(8);
        NodePtr w = tape.leaf(random_tensor(rng, {4, 1}, 0.5), true);
        FlattenedPair p = flatten_for_hypernet(tape, Tensor({4, 1}), w);
        NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
        for (int64_t i = 0; i < 4; ++i) CHECK(out->value[i] == 0.0);
    }
}

TEST_CASE("lstmfc: zero-parameter cell reduces to the FC bias path") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::LSTMFC;
    cfg.hidden = 3;
    HyperNet net = init_hypernet(cfg, 1);
    zero_params(net);
    net.fc.back().b->value[0] = 1.0;

    Tape tape;
    Rng rng(3);
    Tensor g = random_tensor(rng, {5, 1}, 1.0);
    NodePtr w = tape.leaf(random_tensor(rng, {5, 1}, 0.2), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
    CHECK(out->value.shape() == Shape{5, 1});
    // gates sigma(0)=0.5, candidate tanh(0)=0 -> hidden 0, FCs(0)=1, f = grad
    for (int64_t i = 0; i < 5; ++i) CHECK(out->value[i] == doctest::Approx(g[i]));
}

TEST_CASE("duallstmfc: shape contract and zero-parameter reduction") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::DualLSTMFC;
    cfg.hidden = 4;
    HyperNet net = init_hypernet(cfg, 1);
    zero_params(net);
    net.fc.back().b->value[0] = 0.25;

    Tape tape;
    Rng rng(4);
    Tensor g = random_tensor(rng, {6, 1}, 1.0);
    NodePtr w = tape.leaf(random_tensor(rng, {6, 1}, 0.2), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
    CHECK(out->value.shape() == Shape{6, 1});
    for (int64_t i = 0; i < 6; ++i) CHECK(out->value[i] == doctest::Approx(0.25));
}

TEST_CASE("duallstmfc: output is not forced to zero by a zero gradient") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::DualLSTMFC;
    cfg.hidden = 6;
    HyperNet net = init_hypernet(cfg, 9);
    // random (trained-looking) psi
    Rng prng(10);
    for (const auto& p : net.params())
        for (int64_t i = 0; i < p->value.size(); ++i) p->value[i] = prng.normal(0.0, 0.5);

    Tape tape;
    Rng rng(11);
    NodePtr w = tape.leaf(random_tensor(rng, {8, 1}, 0.5), true);
    FlattenedPair p = flatten_for_hypernet(tape, Tensor({8, 1}), w);
    NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
    double mx = 0.0;
    for (int64_t i = 0; i < 8; ++i) mx = std::max(mx, std::abs(out->value[i]));
    CHECK(mx > 0.0);
}

TEST_CASE("hypernet_apply with identity f_psi equals the plain quantizer") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::MultiFC;
    cfg.hidden = 4;
    HyperNet net = init_hypernet(cfg, 1);
    zero_params(net);
    net.fc.back().b->value[0] = 1.0;

    QuantConfig qc;
    qc.bits = 4;

    Tape tape;
    Rng rng(5);
    Tensor g = random_tensor(rng, {16, 1}, 0.3);
    NodePtr w = tape.leaf(random_tensor(rng, {16, 1}, 0.1), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    NodePtr out = hypernet_apply(tape, net, p, qc);

    ClipResult clip = select_clip(g, qc);
    Tensor ref = fake_quantize_tensor(g, clip.c, qc.bits);
    for (int64_t i = 0; i < 16; ++i) CHECK(out->value[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("hypernet_apply outputs lie on the level grid") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::DualLSTMFC;
    cfg.hidden = 5;
    HyperNet net = init_hypernet(cfg, 12);
    QuantConfig qc;
    qc.bits = 3;

    Tape tape;
    Rng rng(13);
    Tensor g = random_tensor(rng, {32, 1}, 0.5);
    NodePtr w = tape.leaf(random_tensor(rng, {32, 1}, 0.1), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    NodePtr out = hypernet_apply(tape, net, p, qc);
    // every output must be k * c / qmax for integer k in range
    ClipResult clip = select_clip(hypernet_fpsi(tape, net, p, nullptr)->value, qc);
    double scale = clip.c / 3.0;
    for (int64_t i = 0; i < 32; ++i) {
        double k = out->value[i] / scale;
        CHECK(std::abs(k - std::round(k)) < 1e-9);
        CHECK(std::abs(k) <= 3.0 + 1e-9);
    }
}

TEST_CASE("hypernet_apply at B=16 with identity f_psi is within the error bound") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::MultiFC;
    cfg.hidden = 4;
    HyperNet net = init_hypernet(cfg, 1);
    zero_params(net);
    net.fc.back().b->value[0] = 1.0;
    QuantConfig qc;
    qc.bits = 16;

    Tape tape;
    Rng rng(14);
    Tensor g = random_tensor(rng, {64, 1}, 0.2);
    NodePtr w = tape.leaf(random_tensor(rng, {64, 1}, 0.1), true);
    FlattenedPair p = flatten_for_hypernet(tape, g, w);
    NodePtr out = hypernet_apply(tape, net, p, qc);
    ClipResult clip = select_clip(g, qc);
    double bound = clip.c / (2.0 * 32767.0);
    for (int64_t i = 0; i < 64; ++i) CHECK(std::abs(out->value[i] - g[i]) <= bound * (1.0 + 1e-12));
}

TEST_CASE("degenerate all-zero gradient is flagged") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::MultiFC;
    cfg.hidden = 4;
    HyperNet net = init_hypernet(cfg, 1);
    QuantConfig qc;
    Tape tape;
    NodePtr w = tape.leaf(Tensor({4, 1}, 0.1), true);
    FlattenedPair p = flatten_for_hypernet(tape, Tensor({4, 1}), w);
    bool degenerate = false;
    NodePtr out = hypernet_apply(tape, net, p, qc, false, nullptr, &degenerate);
    CHECK(degenerate);
    for (int64_t i = 0; i < 4; ++i) CHECK(out->value[i] == 0.0);
}

TEST_CASE("multifc init is near-identity") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::MultiFC;
    cfg.hidden = 8;
    for (uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
        HyperNet net = init_hypernet(cfg, seed);
        Tape tape;
        Rng rng(seed + 100);
        Tensor g = random_tensor(rng, {64, 1}, 1.0);
        NodePtr w = tape.leaf(random_tensor(rng, {64, 1}, 0.1), true);
        FlattenedPair p = flatten_for_hypernet(tape, g, w);
        NodePtr out = hypernet_fpsi(tape, net, p, nullptr);
        double num = 0.0, den = 0.0;
        for (int64_t i = 0; i < 64; ++i) {
            double d = out->value[i] - g[i];
            num += d * d;
            den += g[i] * g[i];
        }
        CHECK(std::sqrt(num / den) <= 0.05);
    }
}

TEST_CASE("same seed gives bitwise identical parameters") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::DualLSTMFC;
    cfg.hidden = 7;
    HyperNet a = init_hypernet(cfg, 42);
    HyperNet b = init_hypernet(cfg, 42);
    auto pa = a.params(), pb = b.params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i)
        for (int64_t j = 0; j < pa[i]->value.size(); ++j) CHECK(pa[i]->value[j] == pb[i]->value[j]);
}

TEST_CASE("duallstmfc parameter count at H = 11 is 628") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::DualLSTMFC;
    cfg.hidden = 11;
    HyperNet net = init_hypernet(cfg, 1);
    CHECK(net.param_count() == 628);
}

TEST_CASE("parameter count is independent of the layer size") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::LSTMFC;
    cfg.hidden = 6;
    HyperNet net = init_hypernet(cfg, 1);
    int64_t count = net.param_count();
    Tape tape;
    Rng rng(15);
    for (int64_t n : {4, 64, 1024}) {
        NodePtr w = tape.leaf(random_tensor(rng, {n, 1}, 0.1), true);
        FlattenedPair p = flatten_for_hypernet(tape, random_tensor(rng, {n, 1}, 1.0), w);
        hypernet_fpsi(tape, net, p, nullptr);
        CHECK(net.param_count() == count);
    }
}

TEST_CASE("persisted recurrent state carries across calls") {
    HyperNetConfig cfg;
    cfg.design = HyperDesign::LSTMFC;
    cfg.hidden = 4;
    cfg.persist_state = true;
    HyperNet net = init_hypernet(cfg, 20);
    Tape tape;
    Rng rng(21);
    Tensor g = random_tensor(rng, {5, 1}, 1.0);
    NodePtr w = tape.leaf(random_tensor(rng, {5, 1}, 0.3), true);
    RecurrentState st;
    FlattenedPair p1 = flatten_for_hypernet(tape, g, w);
    NodePtr o1 = hypernet_fpsi(tape, net, p1, &st);
    CHECK(st.initialized);
    FlattenedPair p2 = flatten_for_hypernet(tape, g, w);
    NodePtr o2 = hypernet_fpsi(tape, net, p2, &st);
    // same input but warm state: output differs
    double diff = 0.0;
    for (int64_t i = 0; i < 5; ++i) diff = std::max(diff, std::abs(o1->value[i] - o2->value[i]));
    CHECK(diff > 0.0);
}
