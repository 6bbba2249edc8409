#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "i2a/tensor.hpp"

namespace i2a::ad {

// Eager reverse-mode tape. Every op computes its value when the node is
// created, so a graph is also a record of one concrete forward evaluation;
// backward() walks the tape in reverse. Graphs are built fresh per
// evaluation and are not thread-safe; share nothing across workers.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
  public:
    Var constant(Tensor value);
    Var constant_scalar(double v) { return constant(Tensor({1}, {v})); }
    Var leaf(Tensor value);  // differentiable input

    const Tensor& value(Var v) const;
    const Tensor& grad(Var v) const;  // valid after backward()
    bool requires_grad(Var v) const;
    size_t size() const { return nodes_.size(); }

    // Elementwise arithmetic.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var neg(Var a);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);

    // Elementwise nonlinearities.
    Var relu(Var a);
    Var tanh(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var square(Var a);
    Var clamp01(Var a);  // subgradient 0 outside (0, 1)

    // Reductions and shape ops.
    Var sum(Var a);              // -> scalar
    Var pick(Var a, int index);  // -> scalar a[index]
    Var dot(Var a, Var b);       // -> scalar
    Var l2norm(Var a);           // sqrt(sum(a^2)); subgradient 0 at 0
    Var concat(const std::vector<Var>& parts);  // flat 1-D concat

    // Linear maps with constant parameters.
    Var matvec(const Tensor& w, Var x, const Shape& out_shape);  // w: (out x in), row-major
    Var conv2d(const Tensor& w, const Tensor& bias, Var x, int stride, int pad);  // w: kh x kw... see impl
    Var channel_affine(Var x, const std::vector<double>& scl, const std::vector<double>& shift);
    Var channel_unit_norm(Var x, double eps = 1e-10);  // HWC: unit L2 across channels
    Var resize_bilinear(Var x, int out_h, int out_w);

    // Numerically stable -log softmax(logits)[label].
    Var cross_entropy(Var logits, int label);

    // Straight-through node: forward takes the supplied value, backward
    // passes gradients to x unchanged.
    Var bpda(Var x, Tensor forward_value);

    // Accumulates d(root)/d(node) into grads; root must be scalar.
    void backward(Var root);

  private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Graph&)> backprop;  // adds into parents' grads
    };

    std::deque<Node> nodes_;

    Node& node(Var v);
    const Node& node(Var v) const;
    Var make(Tensor val, bool req, std::function<void(Graph&)> backprop);
    Tensor& grad_buf(int id);

    friend struct GradAccess;
};

}  // namespace i2a::ad
