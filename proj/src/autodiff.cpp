#include "i2a/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace i2a::ad {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape == b.shape, std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace

Graph::Node& Graph::node(Var v) {
    require(v.valid() && static_cast<size_t>(v.id) < nodes_.size(), "invalid Var handle");
    return nodes_[static_cast<size_t>(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
    require(v.valid() && static_cast<size_t>(v.id) < nodes_.size(), "invalid Var handle");
    return nodes_[static_cast<size_t>(v.id)];
}

Var Graph::make(Tensor val, bool req, std::function<void(Graph&)> backprop) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = req;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.val.shape);
    return n.grad;
}

Var Graph::constant(Tensor value) {
    return make(std::move(value), false, nullptr);
}

Var Graph::leaf(Tensor value) {
    return make(std::move(value), true, nullptr);
}

const Tensor& Graph::value(Var v) const {
    return node(v).val;
}

const Tensor& Graph::grad(Var v) const {
    const Node& n = node(v);
    require(!n.grad.data.empty(), "grad requested before backward()");
    return n.grad;
}

bool Graph::requires_grad(Var v) const {
    return node(v).requires_grad;
}

// Backprop closures capture the ids of self and parents; ids stay stable
// because nodes are only ever appended.
Var Graph::add(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    check_same_shape(va, vb, "add");
    Tensor out = va;
    for (int i = 0; i < out.size(); ++i) out[i] += vb[i];
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), req, [self, ia, ib](Graph& g) {
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        if (g.nodes_[static_cast<size_t>(ia)].requires_grad) {
            Tensor& ga = g.grad_buf(ia);
            for (int i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (g.nodes_[static_cast<size_t>(ib)].requires_grad) {
            Tensor& gb = g.grad_buf(ib);
            for (int i = 0; i < go.size(); ++i) gb[i] += go[i];
        }
    });
}

Var Graph::sub(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    check_same_shape(va, vb, "sub");
    Tensor out = va;
    for (int i = 0; i < out.size(); ++i) out[i] -= vb[i];
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), req, [self, ia, ib](Graph& g) {
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        if (g.nodes_[static_cast<size_t>(ia)].requires_grad) {
            Tensor& ga = g.grad_buf(ia);
            for (int i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (g.nodes_[static_cast<size_t>(ib)].requires_grad) {
            Tensor& gb = g.grad_buf(ib);
            for (int i = 0; i < go.size(); ++i) gb[i] -= go[i];
        }
    });
}

Var Graph::mul(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    check_same_shape(va, vb, "mul");
    Tensor out = va;
    for (int i = 0; i < out.size(); ++i) out[i] *= vb[i];
    bool req = requires_grad(a) || requires_grad(b);
    int ia = a.id, ib = b.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), req, [self, ia, ib](Graph& g) {
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        const Tensor& va = g.nodes_[static_cast<size_t>(ia)].val;
        const Tensor& vb = g.nodes_[static_cast<size_t>(ib)].val;
        if (g.nodes_[static_cast<size_t>(ia)].requires_grad) {
            Tensor& ga = g.grad_buf(ia);
            for (int i = 0; i < go.size(); ++i) ga[i] += go[i] * vb[i];
        }
        if (g.nodes_[static_cast<size_t>(ib)].requires_grad) {
            Tensor& gb = g.grad_buf(ib);
            for (int i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
        }
    });
}

Var Graph::neg(Var a) {
    return scale(a, -1.0);
}

Var Graph::scale(Var a, double s) {
    Tensor out = value(a);
    for (double& v : out.data) v *= s;
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(a), [self, ia, s](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
    });
}

Var Graph::add_scalar(Var a, double s) {
    Tensor out = value(a);
    for (double& v : out.data) v += s;
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(a), [self, ia](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
}

Var Graph::relu(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(a), [self, ia](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        const Tensor& va = g.nodes_[static_cast<size_t>(ia)].val;
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < go.size(); ++i)
            if (va[i] > 0.0) ga[i] += go[i];
    });
}

Var Graph::tanh(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::tanh(v);
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(a), [self, ia](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        const Tensor& vo = g.nodes_[static_cast<size_t>(self)].val;
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < go.size(); ++i) ga[i] += go[i] * (1.0 - vo[i] * vo[i]);
    });
}

Var Graph::exp(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::exp(v);
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(a), [self, ia](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        const Tensor& vo = g.nodes_[static_cast<size_t>(self)].val;
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < go.size(); ++i) ga[i] += go[i] * vo[i];
    });
}

Var Graph::log(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::log(v);
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(a), [self, ia](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        const Tensor& va = g.nodes_[static_cast<size_t>(ia)].val;
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < go.size(); ++i) ga[i] += go[i] / va[i];
    });
}

Var Graph::square(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = v * v;
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(a), [self, ia](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        const Tensor& va = g.nodes_[static_cast<size_t>(ia)].val;
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < go.size(); ++i) ga[i] += go[i] * 2.0 * va[i];
    });
}

Var Graph::clamp01(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::min(1.0, std::max(0.0, v));
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(a), [self, ia](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        const Tensor& va = g.nodes_[static_cast<size_t>(ia)].val;
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < go.size(); ++i)
            if (va[i] > 0.0 && va[i] < 1.0) ga[i] += go[i];
    });
}

Var Graph::sum(Var a) {
    double s = 0.0;
    for (double v : value(a).data) s += v;
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(Tensor({1}, {s}), requires_grad(a), [self, ia](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        double go = g.nodes_[static_cast<size_t>(self)].grad[0];
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < ga.size(); ++i) ga[i] += go;
    });
}

Var Graph::pick(Var a, int index) {
    const Tensor& va = value(a);
    require(index >= 0 && index < va.size(), "pick: index out of range");
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(Tensor({1}, {va[index]}), requires_grad(a), [self, ia, index](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        g.grad_buf(ia)[index] += g.nodes_[static_cast<size_t>(self)].grad[0];
    });
}

Var Graph::dot(Var a, Var b) {
    return sum(mul(a, b));
}

Var Graph::l2norm(Var a) {
    double s = 0.0;
    for (double v : value(a).data) s += v * v;
    double n = std::sqrt(s);
    int ia = a.id;
    int self = static_cast<int>(nodes_.size());
    return make(Tensor({1}, {n}), requires_grad(a), [self, ia](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ia)].requires_grad) return;
        double n = g.nodes_[static_cast<size_t>(self)].val[0];
        if (n <= 1e-300) return;  // subgradient 0 at the origin
        double go = g.nodes_[static_cast<size_t>(self)].grad[0];
        const Tensor& va = g.nodes_[static_cast<size_t>(ia)].val;
        Tensor& ga = g.grad_buf(ia);
        for (int i = 0; i < ga.size(); ++i) ga[i] += go * va[i] / n;
    });
}

Var Graph::concat(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat: empty part list");
    int total = 0;
    bool req = false;
    for (Var p : parts) {
        total += value(p).size();
        req = req || requires_grad(p);
    }
    Tensor out = Tensor::zeros({total});
    int off = 0;
    std::vector<int> ids;
    std::vector<int> offsets;
    for (Var p : parts) {
        const Tensor& v = value(p);
        std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
        ids.push_back(p.id);
        offsets.push_back(off);
        off += v.size();
    }
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), req, [self, ids, offsets](Graph& g) {
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        for (size_t k = 0; k < ids.size(); ++k) {
            if (!g.nodes_[static_cast<size_t>(ids[k])].requires_grad) continue;
            Tensor& ga = g.grad_buf(ids[k]);
            for (int i = 0; i < ga.size(); ++i) ga[i] += go[offsets[k] + i];
        }
    });
}

Var Graph::matvec(const Tensor& w, Var x, const Shape& out_shape) {
    const Tensor& vx = value(x);
    int in = vx.size();
    int out = numel(out_shape);
    require(w.shape.size() == 2 && w.shape[0] == out && w.shape[1] == in,
            "matvec: weight shape " + shape_str(w.shape) + " incompatible with input " +
                shape_str(vx.shape) + " and output " + shape_str(out_shape));
    Tensor o = Tensor::zeros(out_shape);
    for (int r = 0; r < out; ++r) {
        double s = 0.0;
        const double* wr = &w.data[static_cast<size_t>(r) * in];
        for (int c = 0; c < in; ++c) s += wr[c] * vx[c];
        o[r] = s;
    }
    int ix = x.id;
    int self = static_cast<int>(nodes_.size());
    Tensor wcopy = w;
    return make(std::move(o), requires_grad(x), [self, ix, wcopy = std::move(wcopy), in, out](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ix)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        Tensor& gx = g.grad_buf(ix);
        for (int r = 0; r < out; ++r) {
            const double* wr = &wcopy.data[static_cast<size_t>(r) * in];
            double gr = go[r];
            if (gr == 0.0) continue;
            for (int c = 0; c < in; ++c) gx[c] += gr * wr[c];
        }
    });
}

// x: H x W x Cin. w: {kh, kw, cin, cout}. bias: {cout} (may be empty).
Var Graph::conv2d(const Tensor& w, const Tensor& bias, Var x, int stride, int pad) {
    const Tensor& vx = value(x);
    require(vx.shape.size() == 3, "conv2d: input must be rank-3 HWC");
    require(w.shape.size() == 4, "conv2d: weights must be rank-4 {kh,kw,cin,cout}");
    int H = vx.shape[0], W = vx.shape[1], Cin = vx.shape[2];
    int kh = w.shape[0], kw = w.shape[1], wcin = w.shape[2], Cout = w.shape[3];
    require(wcin == Cin, "conv2d: channel mismatch");
    require(stride >= 1, "conv2d: stride must be >= 1");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    require(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");
    if (!bias.data.empty())
        require(bias.size() == Cout, "conv2d: bias size mismatch");

    auto widx = [&](int a, int b, int ci, int co) {
        return ((a * kw + b) * Cin + ci) * Cout + co;
    };
    Tensor out = Tensor::zeros({Ho, Wo, Cout});
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            for (int co = 0; co < Cout; ++co) {
                double s = bias.data.empty() ? 0.0 : bias[co];
                for (int a = 0; a < kh; ++a) {
                    int iy = oy * stride + a - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int b = 0; b < kw; ++b) {
                        int ix = ox * stride + b - pad;
                        if (ix < 0 || ix >= W) continue;
                        for (int ci = 0; ci < Cin; ++ci)
                            s += w[widx(a, b, ci, co)] * vx.at(iy, ix, ci);
                    }
                }
                out.at(oy, ox, co) = s;
            }
        }
    }
    int idx = x.id;
    int self = static_cast<int>(nodes_.size());
    Tensor wc = w;
    return make(std::move(out), requires_grad(x),
                [self, idx, wc = std::move(wc), H, W, Cin, kh, kw, Cout, stride, pad](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(idx)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        Tensor& gx = g.grad_buf(idx);
        int Ho = go.shape[0], Wo = go.shape[1];
        auto widx = [&](int a, int b, int ci, int co) {
            return ((a * kw + b) * Cin + ci) * Cout + co;
        };
        for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
                for (int co = 0; co < Cout; ++co) {
                    double gr = go.at(oy, ox, co);
                    if (gr == 0.0) continue;
                    for (int a = 0; a < kh; ++a) {
                        int iy = oy * stride + a - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int b = 0; b < kw; ++b) {
                            int ix = ox * stride + b - pad;
                            if (ix < 0 || ix >= W) continue;
                            for (int ci = 0; ci < Cin; ++ci)
                                gx.at(iy, ix, ci) += gr * wc[widx(a, b, ci, co)];
                        }
                    }
                }
            }
        }
    });
}

Var Graph::channel_affine(Var x, const std::vector<double>& scl, const std::vector<double>& shift) {
    const Tensor& vx = value(x);
    require(vx.shape.size() == 3, "channel_affine: input must be rank-3 HWC");
    int C = vx.shape[2];
    require(static_cast<int>(scl.size()) == C && static_cast<int>(shift.size()) == C,
            "channel_affine: per-channel parameter size mismatch");
    Tensor out = vx;
    for (int i = 0; i < out.size(); ++i) {
        int c = i % C;
        out[i] = out[i] * scl[c] + shift[c];
    }
    int ix = x.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(x), [self, ix, scl, C](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ix)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        Tensor& gx = g.grad_buf(ix);
        for (int i = 0; i < go.size(); ++i) gx[i] += go[i] * scl[i % C];
    });
}

Var Graph::channel_unit_norm(Var x, double eps) {
    const Tensor& vx = value(x);
    require(vx.shape.size() == 3, "channel_unit_norm: input must be rank-3 HWC");
    int H = vx.shape[0], W = vx.shape[1], C = vx.shape[2];
    Tensor out = vx;
    Tensor norms = Tensor::zeros({H, W, 1});
    for (int y = 0; y < H; ++y) {
        for (int xpos = 0; xpos < W; ++xpos) {
            double s = 0.0;
            for (int c = 0; c < C; ++c) {
                double v = vx.at(y, xpos, c);
                s += v * v;
            }
            double n = std::sqrt(s + eps);
            norms.at(y, xpos, 0) = n;
            for (int c = 0; c < C; ++c) out.at(y, xpos, c) = vx.at(y, xpos, c) / n;
        }
    }
    int ix = x.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(x),
                [self, ix, norms = std::move(norms), H, W, C](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ix)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        const Tensor& vo = g.nodes_[static_cast<size_t>(self)].val;
        Tensor& gx = g.grad_buf(ix);
        for (int y = 0; y < H; ++y) {
            for (int xpos = 0; xpos < W; ++xpos) {
                double n = norms.at(y, xpos, 0);
                double dotp = 0.0;
                for (int c = 0; c < C; ++c) dotp += go.at(y, xpos, c) * vo.at(y, xpos, c);
                for (int c = 0; c < C; ++c)
                    gx.at(y, xpos, c) += (go.at(y, xpos, c) - vo.at(y, xpos, c) * dotp) / n;
            }
        }
    });
}

Var Graph::resize_bilinear(Var x, int out_h, int out_w) {
    const Tensor& vx = value(x);
    require(vx.shape.size() == 3, "resize_bilinear: input must be rank-3 HWC");
    require(out_h >= 1 && out_w >= 1, "resize_bilinear: output size must be positive");
    int H = vx.shape[0], W = vx.shape[1], C = vx.shape[2];

    struct Tap {
        int y0, y1, x0, x1;
        double wy, wx;
    };
    std::vector<Tap> taps(static_cast<size_t>(out_h) * out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        double sy = (oy + 0.5) * static_cast<double>(H) / out_h - 0.5;
        sy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
        int y0 = static_cast<int>(std::floor(sy));
        int y1 = std::min(y0 + 1, H - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            double sx = (ox + 0.5) * static_cast<double>(W) / out_w - 0.5;
            sx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
            int x0 = static_cast<int>(std::floor(sx));
            int x1 = std::min(x0 + 1, W - 1);
            taps[static_cast<size_t>(oy) * out_w + ox] = {y0, y1, x0, x1, sy - y0, sx - x0};
        }
    }
    Tensor out = Tensor::zeros({out_h, out_w, C});
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
            const Tap& t = taps[static_cast<size_t>(oy) * out_w + ox];
            for (int c = 0; c < C; ++c) {
                double top = vx.at(t.y0, t.x0, c) * (1.0 - t.wx) + vx.at(t.y0, t.x1, c) * t.wx;
                double bot = vx.at(t.y1, t.x0, c) * (1.0 - t.wx) + vx.at(t.y1, t.x1, c) * t.wx;
                out.at(oy, ox, c) = top * (1.0 - t.wy) + bot * t.wy;
            }
        }
    }
    int ix = x.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(out), requires_grad(x),
                [self, ix, taps = std::move(taps), out_h, out_w, C](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ix)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        Tensor& gx = g.grad_buf(ix);
        for (int oy = 0; oy < out_h; ++oy) {
            for (int ox = 0; ox < out_w; ++ox) {
                const Tap& t = taps[static_cast<size_t>(oy) * out_w + ox];
                for (int c = 0; c < C; ++c) {
                    double gr = go.at(oy, ox, c);
                    if (gr == 0.0) continue;
                    gx.at(t.y0, t.x0, c) += gr * (1.0 - t.wy) * (1.0 - t.wx);
                    gx.at(t.y0, t.x1, c) += gr * (1.0 - t.wy) * t.wx;
                    gx.at(t.y1, t.x0, c) += gr * t.wy * (1.0 - t.wx);
                    gx.at(t.y1, t.x1, c) += gr * t.wy * t.wx;
                }
            }
        }
    });
}

Var Graph::cross_entropy(Var logits, int label) {
    const Tensor& vl = value(logits);
    int K = vl.size();
    require(label >= 0 && label < K, "cross_entropy: label out of range");
    double m = vl[0];
    for (int k = 1; k < K; ++k) m = std::max(m, vl[k]);
    double lse = 0.0;
    for (int k = 0; k < K; ++k) lse += std::exp(vl[k] - m);
    double ce = std::log(lse) + m - vl[label];
    int il = logits.id;
    int self = static_cast<int>(nodes_.size());
    return make(Tensor({1}, {ce}), requires_grad(logits), [self, il, label, m](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(il)].requires_grad) return;
        double go = g.nodes_[static_cast<size_t>(self)].grad[0];
        const Tensor& vl = g.nodes_[static_cast<size_t>(il)].val;
        Tensor& gl = g.grad_buf(il);
        double lse = 0.0;
        for (int k = 0; k < vl.size(); ++k) lse += std::exp(vl[k] - m);
        for (int k = 0; k < vl.size(); ++k) {
            double p = std::exp(vl[k] - m) / lse;
            gl[k] += go * (p - (k == label ? 1.0 : 0.0));
        }
    });
}

Var Graph::bpda(Var x, Tensor forward_value) {
    check_same_shape(value(x), forward_value, "bpda");
    int ix = x.id;
    int self = static_cast<int>(nodes_.size());
    return make(std::move(forward_value), requires_grad(x), [self, ix](Graph& g) {
        if (!g.nodes_[static_cast<size_t>(ix)].requires_grad) return;
        const Tensor& go = g.nodes_[static_cast<size_t>(self)].grad;
        Tensor& gx = g.grad_buf(ix);
        for (int i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
}

void Graph::backward(Var root) {
    Node& r = node(root);
    require(r.val.size() == 1, "backward: root must be scalar");
    // Zero all gradient buffers from a previous backward pass.
    for (Node& n : nodes_) n.grad.data.clear();
    // A root that depends on no leaf has zero gradient everywhere.
    if (r.requires_grad) {
        grad_buf(root.id)[0] = 1.0;
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.requires_grad || n.grad.data.empty() || !n.backprop) continue;
            n.backprop(*this);
        }
    }
    // Leaves the walk never reached get zero gradients.
    for (auto& n : nodes_) {
        if (n.requires_grad && n.grad.data.empty()) n.grad = Tensor::zeros(n.val.shape);
    }
}

}  // namespace i2a::ad
