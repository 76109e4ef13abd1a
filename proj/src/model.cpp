#include "model.hpp"

#include "rng.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace mq {

Arch arch_from_string(const std::string& s) {
    if (s == "mlp") return Arch::mlp;
    if (s == "small-cnn" || s == "small_cnn") return Arch::small_cnn;
    if (s == "mini-resnet" || s == "mini_resnet") return Arch::mini_resnet;
    throw std::invalid_argument("unknown architecture '" + s + "' (mlp|small-cnn|mini-resnet)");
}

void ModelSpec::validate() const {
    if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    if (arch == Arch::mlp && mlp_widths.size() < 2) throw std::invalid_argument("mlp needs at least 2 widths");
    if (arch == Arch::mlp)
        for (int64_t w : mlp_widths)
            if (w < 1) throw std::invalid_argument("mlp widths must be positive");
    if (arch == Arch::small_cnn && cnn_channels.empty())
        throw std::invalid_argument("small-cnn needs channel counts");
    if (arch == Arch::mini_resnet && resnet_blocks_per_stage < 1)
        throw std::invalid_argument("mini-resnet needs blocks-per-stage >= 1");
}

int64_t Model::param_count() const {
    int64_t n = 0;
    for (const auto& s : slots) n += s.node->value.size();
    return n;
}

NodePtr Model::quantized_weight(Tape& tape, const ParamSlot& s) {
    if (!s.quantizable || qs.weight_bits >= 32) return s.node;
    if (qs.skip_first_last && s.boundary) return s.node;
    return dorefa_weight_quantize(tape, s.node, qs.weight_bits);
}

NodePtr Model::quantized_activation(Tape& tape, const NodePtr& a, bool boundary) {
    if (qs.act_bits >= 32) return a;
    if (qs.skip_first_last && boundary) return a;
    return dorefa_activation_quantize(tape, a, qs.act_bits);
}

NodePtr Model::norm_forward(Tape& tape, NormLayer& nl, const NodePtr& x, bool training) {
    NodePtr out = tape.channel_norm(x, slots[static_cast<size_t>(nl.gamma_slot)].node,
                                    slots[static_cast<size_t>(nl.beta_slot)].node, nl.running_mean,
                                    nl.running_var, nl.eps);
    if (training) {
        const Tensor& xv = x->value;
        int64_t B = xv.dim(0), C = nl.running_mean.dim(0);
        int64_t hw = xv.ndim() == 4 ? xv.dim(2) * xv.dim(3) : 1;
        int64_t cnt = B * hw;
        for (int64_t c = 0; c < C; ++c) {
            double sum = 0.0, sq = 0.0;
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < hw; ++i) {
                    double v = xv[(b * C + c) * hw + i];
                    sum += v;
                    sq += v * v;
                }
            double mean = sum / static_cast<double>(cnt);
            double var = std::max(0.0, sq / static_cast<double>(cnt) - mean * mean);
            nl.running_mean[c] = (1.0 - nl.momentum) * nl.running_mean[c] + nl.momentum * mean;
            nl.running_var[c] = (1.0 - nl.momentum) * nl.running_var[c] + nl.momentum * var;
        }
    }
    return out;
}

void Model::save_weights(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write weights file: " + path);
    auto w64 = [&](int64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    w64(static_cast<int64_t>(slots.size()));
    for (const auto& s : slots) {
        w64(static_cast<int64_t>(s.name.size()));
        f.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
        const Tensor& t = s.node->value;
        w64(t.ndim());
        for (int i = 0; i < t.ndim(); ++i) w64(t.dim(i));
        f.write(reinterpret_cast<const char*>(t.data()), t.size() * 8);
    }
    w64(static_cast<int64_t>(norms.size()));
    for (const auto& nl : norms) {
        w64(nl.running_mean.size());
        f.write(reinterpret_cast<const char*>(nl.running_mean.data()), nl.running_mean.size() * 8);
        f.write(reinterpret_cast<const char*>(nl.running_var.data()), nl.running_var.size() * 8);
    }
}

void Model::load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open weights file: " + path);
    auto r64 = [&]() {
        int64_t v = 0;
        if (!f.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("truncated weights file: " + path);
        return v;
    };
    int64_t nslots = r64();
    if (nslots != static_cast<int64_t>(slots.size()))
        throw std::runtime_error("weights file slot count mismatch in " + path);
    Tape tape;
    for (auto& s : slots) {
        int64_t namelen = r64();
        std::string name(static_cast<size_t>(namelen), '\0');
        f.read(name.data(), namelen);
        if (name != s.name) throw std::runtime_error("weights file slot name mismatch: " + name + " vs " + s.name);
        int64_t ndim = r64();
        Shape shape(static_cast<size_t>(ndim));
        for (auto& d : shape) d = r64();
        Tensor t(shape);
        if (!f.read(reinterpret_cast<char*>(t.data()), t.size() * 8))
            throw std::runtime_error("truncated weights file: " + path);
        s.node = tape.leaf(std::move(t), true);
    }
    int64_t nnorms = r64();
    if (nnorms != static_cast<int64_t>(norms.size()))
        throw std::runtime_error("weights file norm count mismatch in " + path);
    for (auto& nl : norms) {
        int64_t c = r64();
        Tensor mean({c}), var({c});
        f.read(reinterpret_cast<char*>(mean.data()), c * 8);
        if (!f.read(reinterpret_cast<char*>(var.data()), c * 8))
            throw std::runtime_error("truncated weights file: " + path);
        nl.running_mean = std::move(mean);
        nl.running_var = std::move(var);
    }
}

namespace {

Tensor he_init(Rng& rng, Shape shape, int64_t fan_in) {
    Tensor t(std::move(shape));
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

struct MlpModel : Model {
    std::vector<int64_t> widths;

    NodePtr forward(Tape& tape, const NodePtr& x, bool) override {
        int64_t B = x->value.dim(0);
        NodePtr h = tape.reshape(x, {B, widths[0]});
        size_t nlayers = widths.size() - 1;
        for (size_t l = 0; l < nlayers; ++l) {
            h = error_signal_quant(tape, h, qs.err_quant, qs.err_quant_enabled);
            NodePtr w = quantized_weight(tape, slots[2 * l]);
            h = tape.add(tape.matmul(h, w), slots[2 * l + 1].node);
            if (l + 1 < nlayers) {
                h = tape.relu(h);
                h = quantized_activation(tape, h, l + 2 == nlayers);
            }
        }
        return h;
    }
};

struct SmallCnnModel : Model {
    ModelSpec spec;
    int64_t flat_dim = 0;

    NodePtr forward(Tape& tape, const NodePtr& x, bool training) override {
        NodePtr h = x;
        size_t si = 0, ni = 0;
        for (size_t l = 0; l < spec.cnn_channels.size(); ++l) {
            h = error_signal_quant(tape, h, qs.err_quant, qs.err_quant_enabled);
            int stride = l == 0 ? 1 : 2;
            NodePtr w = quantized_weight(tape, slots[si]);
            h = tape.conv2d(h, w, stride, 1);
            h = tape.add(h, slots[si + 1].node);
            si += 2;
            h = norm_forward(tape, norms[ni++], h, training);
            si += 2; // gamma/beta slots
            h = tape.relu(h);
            h = quantized_activation(tape, h, false);
        }
        int64_t B = h->value.dim(0);
        h = tape.reshape(h, {B, flat_dim});
        h = error_signal_quant(tape, h, qs.err_quant, qs.err_quant_enabled);
        h = tape.add(tape.matmul(h, quantized_weight(tape, slots[si])), slots[si + 1].node);
        h = tape.relu(h);
        h = quantized_activation(tape, h, true);
        si += 2;
        h = error_signal_quant(tape, h, qs.err_quant, qs.err_quant_enabled);
        h = tape.add(tape.matmul(h, quantized_weight(tape, slots[si])), slots[si + 1].node);
        return h;
    }
};

struct MiniResNetModel : Model {
    ModelSpec spec;
    struct Block {
        size_t conv1, conv2; // slot indices of conv weights (bias follows each)
        size_t norm1, norm2;
        int proj = -1; // projection conv slot, -1 when identity skip
        size_t proj_norm = 0;
        int stride = 1;
    };
    std::vector<Block> blocks;
    size_t stem_slot = 0, stem_norm = 0, fc_slot = 0;

    NodePtr conv_bn_relu(Tape& tape, const NodePtr& x, size_t slot, size_t norm, int stride, bool training,
                         bool relu_after) {
        NodePtr h = error_signal_quant(tape, x, qs.err_quant, qs.err_quant_enabled);
        h = tape.conv2d(h, quantized_weight(tape, slots[slot]), stride, 1);
        h = tape.add(h, slots[slot + 1].node);
        h = norm_forward(tape, norms[norm], h, training);
        if (relu_after) {
            h = tape.relu(h);
            h = quantized_activation(tape, h, false);
        }
        return h;
    }

    NodePtr forward(Tape& tape, const NodePtr& x, bool training) override {
        NodePtr h = conv_bn_relu(tape, x, stem_slot, stem_norm, 1, training, true);
        for (auto& b : blocks) {
            NodePtr skip = h;
            NodePtr r = conv_bn_relu(tape, h, b.conv1, b.norm1, b.stride, training, true);
            r = conv_bn_relu(tape, r, b.conv2, b.norm2, 1, training, false);
            if (b.proj >= 0) {
                NodePtr p = tape.conv2d(skip, slots[static_cast<size_t>(b.proj)].node, b.stride, 0);
                p = tape.add(p, slots[static_cast<size_t>(b.proj) + 1].node);
                skip = norm_forward(tape, norms[b.proj_norm], p, training);
            }
            h = tape.relu(tape.add(r, skip));
            h = quantized_activation(tape, h, false);
        }
        h = tape.global_avg_pool(h);
        h = error_signal_quant(tape, h, qs.err_quant, qs.err_quant_enabled);
        return tape.add(tape.matmul(h, quantized_weight(tape, slots[fc_slot])), slots[fc_slot + 1].node);
    }
};

size_t add_conv(Model& m, Tape& tape, Rng& rng, const std::string& name, int64_t oc, int64_t ic, int64_t k,
                bool quantizable, bool boundary) {
    size_t idx = m.slots.size();
    m.slots.push_back({name + ".w", tape.leaf(he_init(rng, {oc, ic, k, k}, ic * k * k), true), quantizable, boundary});
    m.slots.push_back({name + ".b", tape.leaf(Tensor({oc}), true), false, boundary});
    return idx;
}

size_t add_fc(Model& m, Tape& tape, Rng& rng, const std::string& name, int64_t in, int64_t out, bool quantizable,
              bool boundary) {
    size_t idx = m.slots.size();
    m.slots.push_back({name + ".w", tape.leaf(he_init(rng, {in, out}, in), true), quantizable, boundary});
    m.slots.push_back({name + ".b", tape.leaf(Tensor({out}), true), false, boundary});
    return idx;
}

size_t add_norm(Model& m, Tape& tape, const std::string& name, int64_t c) {
    NormLayer nl;
    nl.gamma_slot = static_cast<int>(m.slots.size());
    m.slots.push_back({name + ".gamma", tape.leaf(Tensor({c}, 1.0), true), false, false});
    nl.beta_slot = static_cast<int>(m.slots.size());
    m.slots.push_back({name + ".beta", tape.leaf(Tensor({c}), true), false, false});
    nl.running_mean = Tensor({c});
    nl.running_var = Tensor({c}, 1.0);
    m.norms.push_back(nl);
    return m.norms.size() - 1;
}

} // namespace

std::unique_ptr<Model> build_model(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    Tape tape;
    Rng rng(seed);
    if (spec.arch == Arch::mlp) {
        auto m = std::make_unique<MlpModel>();
        m->widths = spec.mlp_widths;
        size_t nlayers = spec.mlp_widths.size() - 1;
        for (size_t l = 0; l < nlayers; ++l)
            add_fc(*m, tape, rng, "fc" + std::to_string(l), spec.mlp_widths[l], spec.mlp_widths[l + 1], true,
                   l == 0 || l + 1 == nlayers);
        return m;
    }
    if (spec.arch == Arch::small_cnn) {
        auto m = std::make_unique<SmallCnnModel>();
        m->spec = spec;
        int64_t c = spec.input_channels;
        int64_t hw = spec.input_hw;
        for (size_t l = 0; l < spec.cnn_channels.size(); ++l) {
            add_conv(*m, tape, rng, "conv" + std::to_string(l), spec.cnn_channels[l], c, 3, true, l == 0);
            add_norm(*m, tape, "norm" + std::to_string(l), spec.cnn_channels[l]);
            c = spec.cnn_channels[l];
            if (l > 0) hw = (hw + 1) / 2; // stride-2 conv with pad 1
        }
        m->flat_dim = c * hw * hw;
        add_fc(*m, tape, rng, "fc0", m->flat_dim, spec.cnn_fc_width, true, false);
        add_fc(*m, tape, rng, "fc1", spec.cnn_fc_width, spec.num_classes, true, true);
        return m;
    }

    auto m = std::make_unique<MiniResNetModel>();
    m->spec = spec;
    int64_t c = spec.resnet_widths[0];
    m->stem_slot = add_conv(*m, tape, rng, "stem", c, spec.input_channels, 3, true, true);
    m->stem_norm = add_norm(*m, tape, "stem.norm", c);
    for (size_t s = 0; s < spec.resnet_widths.size(); ++s) {
        int64_t w = spec.resnet_widths[s];
        for (int64_t b = 0; b < spec.resnet_blocks_per_stage; ++b) {
            MiniResNetModel::Block blk;
            blk.stride = (s > 0 && b == 0) ? 2 : 1;
            std::string base = "stage" + std::to_string(s) + ".block" + std::to_string(b);
            blk.conv1 = add_conv(*m, tape, rng, base + ".conv1", w, c, 3, true, false);
            blk.norm1 = add_norm(*m, tape, base + ".norm1", w);
            blk.conv2 = add_conv(*m, tape, rng, base + ".conv2", w, w, 3, true, false);
            blk.norm2 = add_norm(*m, tape, base + ".norm2", w);
            if (c != w || blk.stride != 1) {
                size_t pidx = m->slots.size();
                m->slots.push_back({base + ".proj.w", tape.leaf(he_init(rng, {w, c, 1, 1}, c), true), false, false});
                m->slots.push_back({base + ".proj.b", tape.leaf(Tensor({w}), true), false, false});
                blk.proj = static_cast<int>(pidx);
                blk.proj_norm = add_norm(*m, tape, base + ".proj.norm", w);
            }
            m->blocks.push_back(blk);
            c = w;
        }
    }
    m->fc_slot = add_fc(*m, tape, rng, "fc", c, spec.num_classes, true, true);
    return m;
}

} // namespace mq
