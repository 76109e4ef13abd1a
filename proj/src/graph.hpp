#pragma once

#include "tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace mq {

enum class OpKind {
    leaf,
    add,
    sub,
    mul,
    matmul,
    conv2d,
    relu,
    tanh_fn,
    sigmoid,
    reshape,
    concat_cols,
    softmax_xent,
    sum_all,
    mean_all,
    scale,
    channel_norm,
    global_avg_pool,
    fake_quant,
    dorefa_weight,
    dorefa_act,
    grad_quant,
};

const char* op_name(OpKind k);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One recorded expression. Parents keep the upstream graph alive; a
// detached or rebased node has no parents, so gradient flow (and
// ownership) stops there.
struct Node {
    Tensor value;
    OpKind op = OpKind::leaf;
    std::vector<NodePtr> parents;
    std::optional<Tensor> grad;
    bool leaf_flag = true;
    bool detached = false;
    bool freed = false;
    bool requires_grad = false;
    // Accumulates into parents' grad slots given this->grad.
    std::function<void(Node&)> backward_fn;

    Node();
    ~Node();
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;

    // Number of Node objects currently alive (memory-bound instrumentation).
    static int64_t live_count();
};

Tensor& ensure_grad(Node& n);

// Records ops eagerly (forward value computed at record time) and runs
// reverse-mode backward. Single-threaded; deterministic for fixed inputs.
class Tape {
public:
    Precision precision = Precision::f64;
    bool check_finite = false;

    NodePtr leaf(Tensor v, bool requires_grad = false);
    NodePtr constant(Tensor v) { return leaf(std::move(v), false); }

    NodePtr add(const NodePtr& a, const NodePtr& b);
    NodePtr sub(const NodePtr& a, const NodePtr& b);
    NodePtr mul(const NodePtr& a, const NodePtr& b);
    NodePtr matmul(const NodePtr& a, const NodePtr& b);
    NodePtr scale(const NodePtr& a, double k);
    NodePtr relu(const NodePtr& a);
    NodePtr tanh(const NodePtr& a);
    NodePtr sigmoid(const NodePtr& a);
    NodePtr reshape(const NodePtr& a, Shape new_shape);
    NodePtr concat_cols(const NodePtr& a, const NodePtr& b);
    NodePtr sum(const NodePtr& a);
    NodePtr mean(const NodePtr& a);
    NodePtr softmax_xent(const NodePtr& logits, std::vector<int> labels);
    NodePtr conv2d(const NodePtr& x, const NodePtr& w, int stride, int pad);
    // y = gamma * (x - mu) / sqrt(var + eps) + beta; mu/var are constants
    // (running statistics), so backward is a plain affine rule.
    NodePtr channel_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                         Tensor mu, Tensor var, double eps);
    NodePtr global_avg_pool(const NodePtr& x);

    // Escape hatch for quantizer ops with hand-written backward rules.
    NodePtr custom(OpKind op, Tensor value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward_fn);

    // Reverse pass from a scalar loss. Grads land in node->grad for every
    // visited node with requires_grad. Visited interior nodes not reachable
    // from a retain root are freed (structure cleared); a later backward
    // touching a freed node is an error.
    void backward(const NodePtr& loss, const std::vector<NodePtr>& retain = {});

    // New leaf sharing the value; gradients stop here.
    static NodePtr detach(const NodePtr& n);
    // Fresh trainable leaf with a copied value; releases the old fragment
    // once callers drop their references.
    static NodePtr rebase_leaf(const NodePtr& n);

private:
    NodePtr finish(NodePtr n);
};

// Grads of `wrt` as (node, tensor) pairs after a backward pass.
Tensor grad_of(const NodePtr& n);

// Plain triple-loop gemm: C (m x n) += op(A) * op(B).
void gemm_acc(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n,
              bool transA, bool transB);

} // namespace mq
