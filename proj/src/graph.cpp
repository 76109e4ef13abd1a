#include "graph.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace mq {

namespace {
std::atomic<int64_t> g_live_nodes{0};

[[noreturn]] void shape_error(OpKind op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(std::string("shape mismatch in ") + op_name(op) + ": " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
} // namespace

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::matmul: return "matmul";
        case OpKind::conv2d: return "conv2d";
        case OpKind::relu: return "relu";
        case OpKind::tanh_fn: return "tanh";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::reshape: return "reshape";
        case OpKind::concat_cols: return "concat_cols";
        case OpKind::softmax_xent: return "softmax_xent";
        case OpKind::sum_all: return "sum";
        case OpKind::mean_all: return "mean";
        case OpKind::scale: return "scale";
        case OpKind::channel_norm: return "channel_norm";
        case OpKind::global_avg_pool: return "global_avg_pool";
        case OpKind::fake_quant: return "fake_quant";
        case OpKind::dorefa_weight: return "dorefa_weight";
        case OpKind::dorefa_act: return "dorefa_act";
        case OpKind::grad_quant: return "grad_quant";
    }
    return "?";
}

Node::Node() { ++g_live_nodes; }
Node::~Node() { --g_live_nodes; }
int64_t Node::live_count() { return g_live_nodes.load(); }

Tensor& ensure_grad(Node& n) {
    if (!n.grad) n.grad.emplace(n.value.shape());
    return *n.grad;
}

Tensor grad_of(const NodePtr& n) {
    if (!n->grad) return Tensor(n->value.shape());
    return *n->grad;
}

void gemm_acc(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n,
              bool transA, bool transB) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t t = 0; t < k; ++t) {
                double a = transA ? A[t * m + i] : A[i * k + t];
                double b = transB ? B[j * k + t] : B[t * n + j];
                acc += a * b;
            }
            C[i * n + j] += acc;
        }
    }
}

NodePtr Tape::leaf(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

NodePtr Tape::finish(NodePtr n) {
    apply_precision(n->value, precision);
    if (check_finite && !n->value.all_finite())
        throw std::runtime_error(std::string("non-finite value produced by ") + op_name(n->op));
    return n;
}

NodePtr Tape::custom(OpKind op, Tensor value, std::vector<NodePtr> parents,
                     std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->value = std::move(value);
    n->parents = std::move(parents);
    n->leaf_flag = false;
    n->backward_fn = std::move(backward_fn);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return finish(std::move(n));
}

NodePtr Tape::detach(const NodePtr& n) {
    auto out = std::make_shared<Node>();
    out->value = n->value;
    out->detached = true;
    return out;
}

NodePtr Tape::rebase_leaf(const NodePtr& n) {
    auto out = std::make_shared<Node>();
    out->value = n->value;
    out->requires_grad = true;
    return out;
}

NodePtr Tape::add(const NodePtr& a, const NodePtr& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    Tensor out(av.shape());
    enum class Mode { same, row_bias, chan_bias } mode;
    if (av.same_shape(bv)) {
        mode = Mode::same;
        for (int64_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    } else if (av.ndim() == 2 && bv.ndim() == 1 && bv.dim(0) == av.dim(1)) {
        mode = Mode::row_bias;
        int64_t m = av.dim(0), n = av.dim(1);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
    } else if (av.ndim() == 4 && bv.ndim() == 1 && bv.dim(0) == av.dim(1)) {
        mode = Mode::chan_bias;
        int64_t B = av.dim(0), C = av.dim(1), hw = av.dim(2) * av.dim(3);
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < hw; ++i) {
                    int64_t idx = (bi * C + c) * hw + i;
                    out[idx] = av[idx] + bv[c];
                }
    } else {
        shape_error(OpKind::add, av, bv);
    }
    return custom(OpKind::add, std::move(out), {a, b}, [mode](Node& self) {
        const Tensor& g = *self.grad;
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            Tensor& ga = ensure_grad(pa);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (!pb.requires_grad) return;
        Tensor& gb = ensure_grad(pb);
        if (mode == Mode::same) {
            for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        } else if (mode == Mode::row_bias) {
            int64_t m = g.dim(0), n = g.dim(1);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        } else {
            int64_t B = g.dim(0), C = g.dim(1), hw = g.dim(2) * g.dim(3);
            for (int64_t bi = 0; bi < B; ++bi)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < hw; ++i) gb[c] += g[(bi * C + c) * hw + i];
        }
    });
}

NodePtr Tape::sub(const NodePtr& a, const NodePtr& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (!av.same_shape(bv)) shape_error(OpKind::sub, av, bv);
    Tensor out(av.shape());
    for (int64_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    return custom(OpKind::sub, std::move(out), {a, b}, [](Node& self) {
        const Tensor& g = *self.grad;
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            Tensor& ga = ensure_grad(pa);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (pb.requires_grad) {
            Tensor& gb = ensure_grad(pb);
            for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

NodePtr Tape::mul(const NodePtr& a, const NodePtr& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (!av.same_shape(bv)) shape_error(OpKind::mul, av, bv);
    Tensor out(av.shape());
    for (int64_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return custom(OpKind::mul, std::move(out), {a, b}, [](Node& self) {
        const Tensor& g = *self.grad;
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            Tensor& ga = ensure_grad(pa);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            Tensor& gb = ensure_grad(pb);
            for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa.value[i];
        }
    });
}

NodePtr Tape::matmul(const NodePtr& a, const NodePtr& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) shape_error(OpKind::matmul, av, bv);
    int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    gemm_acc(av.data(), bv.data(), out.data(), m, k, n, false, false);
    return custom(OpKind::matmul, std::move(out), {a, b}, [m, k, n](Node& self) {
        const Tensor& g = *self.grad;
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) // dA = g * B^T
            gemm_acc(g.data(), pb.value.data(), ensure_grad(pa).data(), m, n, k, false, true);
        if (pb.requires_grad) // dB = A^T * g
            gemm_acc(pa.value.data(), g.data(), ensure_grad(pb).data(), k, m, n, true, false);
    });
}

NodePtr Tape::scale(const NodePtr& a, double kfac) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * kfac;
    return custom(OpKind::scale, std::move(out), {a}, [kfac](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Tensor& g = *self.grad;
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < g.size(); ++i) gp[i] += g[i] * kfac;
    });
}

NodePtr Tape::relu(const NodePtr& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
    return custom(OpKind::relu, std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Tensor& g = *self.grad;
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < g.size(); ++i)
            if (p.value[i] > 0.0) gp[i] += g[i];
    });
}

NodePtr Tape::tanh(const NodePtr& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a->value[i]);
    return custom(OpKind::tanh_fn, std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Tensor& g = *self.grad;
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < g.size(); ++i) gp[i] += g[i] * (1.0 - self.value[i] * self.value[i]);
    });
}

NodePtr Tape::sigmoid(const NodePtr& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a->value[i]));
    return custom(OpKind::sigmoid, std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Tensor& g = *self.grad;
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < g.size(); ++i) gp[i] += g[i] * self.value[i] * (1.0 - self.value[i]);
    });
}

NodePtr Tape::reshape(const NodePtr& a, Shape new_shape) {
    Tensor out = a->value.reshaped(std::move(new_shape));
    return custom(OpKind::reshape, std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Tensor& g = *self.grad;
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    });
}

NodePtr Tape::concat_cols(const NodePtr& a, const NodePtr& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(0) != bv.dim(0)) shape_error(OpKind::concat_cols, av, bv);
    int64_t n = av.dim(0), ka = av.dim(1), kb = bv.dim(1);
    Tensor out({n, ka + kb});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < ka; ++j) out[i * (ka + kb) + j] = av[i * ka + j];
        for (int64_t j = 0; j < kb; ++j) out[i * (ka + kb) + ka + j] = bv[i * kb + j];
    }
    return custom(OpKind::concat_cols, std::move(out), {a, b}, [n, ka, kb](Node& self) {
        const Tensor& g = *self.grad;
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            Tensor& ga = ensure_grad(pa);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < ka; ++j) ga[i * ka + j] += g[i * (ka + kb) + j];
        }
        if (pb.requires_grad) {
            Tensor& gb = ensure_grad(pb);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < kb; ++j) gb[i * kb + j] += g[i * (ka + kb) + ka + j];
        }
    });
}

NodePtr Tape::sum(const NodePtr& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
    return custom(OpKind::sum_all, Tensor::scalar(s), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        double g = (*self.grad)[0];
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < gp.size(); ++i) gp[i] += g;
    });
}

NodePtr Tape::mean(const NodePtr& a) {
    double s = 0.0;
    int64_t n = a->value.size();
    for (int64_t i = 0; i < n; ++i) s += a->value[i];
    return custom(OpKind::mean_all, Tensor::scalar(s / static_cast<double>(n)), {a}, [n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        double g = (*self.grad)[0] / static_cast<double>(n);
        Tensor& gp = ensure_grad(p);
        for (int64_t i = 0; i < gp.size(); ++i) gp[i] += g;
    });
}

NodePtr Tape::softmax_xent(const NodePtr& logits, std::vector<int> labels) {
    const Tensor& lv = logits->value;
    if (lv.ndim() != 2 || static_cast<size_t>(lv.dim(0)) != labels.size())
        throw std::invalid_argument("softmax_xent: logits " + shape_str(lv.shape()) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    int64_t B = lv.dim(0), K = lv.dim(1);
    // probs saved for backward
    auto probs = std::make_shared<Tensor>(Shape{B, K});
    double loss = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        double mx = lv[b * K];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, lv[b * K + k]);
        double z = 0.0;
        for (int64_t k = 0; k < K; ++k) z += std::exp(lv[b * K + k] - mx);
        double logz = std::log(z) + mx;
        for (int64_t k = 0; k < K; ++k) (*probs)[b * K + k] = std::exp(lv[b * K + k] - logz);
        loss += logz - lv[b * K + labels[static_cast<size_t>(b)]];
    }
    loss /= static_cast<double>(B);
    return custom(OpKind::softmax_xent, Tensor::scalar(loss), {logits},
                  [probs, labels = std::move(labels), B, K](Node& self) {
                      Node& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      double g = (*self.grad)[0] / static_cast<double>(B);
                      Tensor& gp = ensure_grad(p);
                      for (int64_t b = 0; b < B; ++b)
                          for (int64_t k = 0; k < K; ++k) {
                              double onehot = (k == labels[static_cast<size_t>(b)]) ? 1.0 : 0.0;
                              gp[b * K + k] += g * ((*probs)[b * K + k] - onehot);
                          }
                  });
}

namespace {
struct ConvDims {
    int64_t B, C, H, W, OC, KH, KW, OH, OW;
    int stride, pad;
};

void im2col(const double* x, const ConvDims& d, int64_t b, double* col) {
    // col: [C*KH*KW, OH*OW]
    int64_t plane = d.H * d.W;
    for (int64_t c = 0; c < d.C; ++c)
        for (int64_t kh = 0; kh < d.KH; ++kh)
            for (int64_t kw = 0; kw < d.KW; ++kw) {
                int64_t row = (c * d.KH + kh) * d.KW + kw;
                for (int64_t oh = 0; oh < d.OH; ++oh) {
                    int64_t ih = oh * d.stride + kh - d.pad;
                    for (int64_t ow = 0; ow < d.OW; ++ow) {
                        int64_t iw = ow * d.stride + kw - d.pad;
                        double v = 0.0;
                        if (ih >= 0 && ih < d.H && iw >= 0 && iw < d.W)
                            v = x[(b * d.C + c) * plane + ih * d.W + iw];
                        col[row * (d.OH * d.OW) + oh * d.OW + ow] = v;
                    }
                }
            }
}

void col2im_acc(const double* col, const ConvDims& d, int64_t b, double* dx) {
    int64_t plane = d.H * d.W;
    for (int64_t c = 0; c < d.C; ++c)
        for (int64_t kh = 0; kh < d.KH; ++kh)
            for (int64_t kw = 0; kw < d.KW; ++kw) {
                int64_t row = (c * d.KH + kh) * d.KW + kw;
                for (int64_t oh = 0; oh < d.OH; ++oh) {
                    int64_t ih = oh * d.stride + kh - d.pad;
                    if (ih < 0 || ih >= d.H) continue;
                    for (int64_t ow = 0; ow < d.OW; ++ow) {
                        int64_t iw = ow * d.stride + kw - d.pad;
                        if (iw < 0 || iw >= d.W) continue;
                        dx[(b * d.C + c) * plane + ih * d.W + iw] += col[row * (d.OH * d.OW) + oh * d.OW + ow];
                    }
                }
            }
}
} // namespace

NodePtr Tape::conv2d(const NodePtr& x, const NodePtr& w, int stride, int pad) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (xv.ndim() != 4 || wv.ndim() != 4 || xv.dim(1) != wv.dim(1)) shape_error(OpKind::conv2d, xv, wv);
    ConvDims d{};
    d.B = xv.dim(0);
    d.C = xv.dim(1);
    d.H = xv.dim(2);
    d.W = xv.dim(3);
    d.OC = wv.dim(0);
    d.KH = wv.dim(2);
    d.KW = wv.dim(3);
    d.stride = stride;
    d.pad = pad;
    d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
    d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
    if (d.OH <= 0 || d.OW <= 0) shape_error(OpKind::conv2d, xv, wv);

    int64_t ck = d.C * d.KH * d.KW;
    int64_t ohw = d.OH * d.OW;
    Tensor out({d.B, d.OC, d.OH, d.OW});
    std::vector<double> col(static_cast<size_t>(ck * ohw));
    for (int64_t b = 0; b < d.B; ++b) {
        im2col(xv.data(), d, b, col.data());
        std::fill_n(out.data() + b * d.OC * ohw, d.OC * ohw, 0.0);
        gemm_acc(wv.data(), col.data(), out.data() + b * d.OC * ohw, d.OC, ck, ohw, false, false);
    }
    return custom(OpKind::conv2d, std::move(out), {x, w}, [d, ck, ohw](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        const Tensor& g = *self.grad;
        std::vector<double> col(static_cast<size_t>(ck * ohw));
        std::vector<double> dcol(static_cast<size_t>(ck * ohw));
        for (int64_t b = 0; b < d.B; ++b) {
            const double* gb = g.data() + b * d.OC * ohw;
            if (pw.requires_grad) {
                im2col(px.value.data(), d, b, col.data());
                gemm_acc(gb, col.data(), ensure_grad(pw).data(), d.OC, ohw, ck, false, true);
            }
            if (px.requires_grad) {
                std::fill(dcol.begin(), dcol.end(), 0.0);
                gemm_acc(pw.value.data(), gb, dcol.data(), ck, d.OC, ohw, true, false);
                col2im_acc(dcol.data(), d, b, ensure_grad(px).data());
            }
        }
    });
}

NodePtr Tape::channel_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                           Tensor mu, Tensor var, double eps) {
    const Tensor& xv = x->value;
    int64_t C = gamma->value.dim(0);
    bool conv = xv.ndim() == 4;
    if ((conv && xv.dim(1) != C) || (!conv && (xv.ndim() != 2 || xv.dim(1) != C)))
        shape_error(OpKind::channel_norm, xv, gamma->value);
    int64_t B = xv.dim(0), hw = conv ? xv.dim(2) * xv.dim(3) : 1;
    auto inv_std = std::make_shared<Tensor>(Shape{C});
    for (int64_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + eps);
    auto mu_p = std::make_shared<Tensor>(std::move(mu));
    Tensor out(xv.shape());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < hw; ++i) {
                int64_t idx = (b * C + c) * hw + i;
                out[idx] = gamma->value[c] * (xv[idx] - (*mu_p)[c]) * (*inv_std)[c] + beta->value[c];
            }
    return custom(OpKind::channel_norm, std::move(out), {x, gamma, beta},
                  [mu_p, inv_std, B, C, hw](Node& self) {
                      Node& px = *self.parents[0];
                      Node& pg = *self.parents[1];
                      Node& pb = *self.parents[2];
                      const Tensor& g = *self.grad;
                      for (int64_t b = 0; b < B; ++b)
                          for (int64_t c = 0; c < C; ++c)
                              for (int64_t i = 0; i < hw; ++i) {
                                  int64_t idx = (b * C + c) * hw + i;
                                  double xhat = (px.value[idx] - (*mu_p)[c]) * (*inv_std)[c];
                                  if (px.requires_grad)
                                      ensure_grad(px)[idx] += g[idx] * pg.value[c] * (*inv_std)[c];
                                  if (pg.requires_grad) ensure_grad(pg)[c] += g[idx] * xhat;
                                  if (pb.requires_grad) ensure_grad(pb)[c] += g[idx];
                              }
                  });
}

NodePtr Tape::global_avg_pool(const NodePtr& x) {
    const Tensor& xv = x->value;
    if (xv.ndim() != 4) throw std::invalid_argument("global_avg_pool expects 4-d input, got " + shape_str(xv.shape()));
    int64_t B = xv.dim(0), C = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor out({B, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (int64_t i = 0; i < hw; ++i) s += xv[(b * C + c) * hw + i];
            out[b * C + c] = s / static_cast<double>(hw);
        }
    return custom(OpKind::global_avg_pool, std::move(out), {x}, [B, C, hw](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Tensor& g = *self.grad;
        Tensor& gp = ensure_grad(p);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                double gv = g[b * C + c] / static_cast<double>(hw);
                for (int64_t i = 0; i < hw; ++i) gp[(b * C + c) * hw + i] += gv;
            }
    });
}

void Tape::backward(const NodePtr& loss, const std::vector<NodePtr>& retain) {
    if (loss->value.size() != 1)
        throw std::invalid_argument("backward requires a scalar loss, got " + shape_str(loss->value.shape()));
    if (!loss->requires_grad) return;

    // Iterative post-order DFS over the requires_grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (n->freed)
            throw std::runtime_error("backward through a freed (non-retained) graph fragment");
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (Node* n : order) n->grad.reset();
    ensure_grad(*loss)[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad) {
            n->backward_fn(*n);
            if (precision == Precision::f32)
                for (const auto& p : n->parents)
                    if (p->grad) apply_precision(*p->grad, precision);
        }
    }

    // Free visited interior nodes that are not reachable from a retain root.
    std::unordered_set<Node*> retained;
    std::vector<Node*> work;
    for (const auto& r : retain) {
        if (retained.insert(r.get()).second) work.push_back(r.get());
    }
    while (!work.empty()) {
        Node* n = work.back();
        work.pop_back();
        for (const auto& p : n->parents)
            if (retained.insert(p.get()).second) work.push_back(p.get());
    }
    for (Node* n : order) {
        if (n->leaf_flag || retained.count(n)) continue;
        n->freed = true;
        n->parents.clear();
        n->backward_fn = nullptr;
    }
}

} // namespace mq
