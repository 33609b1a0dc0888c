#include "dq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace dq {

namespace {

void check_same_shape(const NdTensor& a, const NdTensor& b, const char* op) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

struct ConvDims {
    std::size_t batch, in_ch, in_h, in_w;
    std::size_t out_ch, ksize, stride, pad;
    std::size_t out_h, out_w;
};

ConvDims conv_dims(const NdTensor& x, const NdTensor& w, std::size_t stride, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: rank-4 x/w expected");
    ConvDims d;
    d.batch = x.extent(0);
    d.in_ch = x.extent(1);
    d.in_h = x.extent(2);
    d.in_w = x.extent(3);
    d.out_ch = w.extent(0);
    d.ksize = w.extent(2);
    d.stride = stride;
    d.pad = pad;
    if (w.extent(1) != d.in_ch) throw std::invalid_argument("conv2d: channel mismatch");
    if (w.extent(3) != d.ksize) throw std::invalid_argument("conv2d: square kernels only");
    if (d.in_h + 2 * pad < d.ksize || d.in_w + 2 * pad < d.ksize)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    d.out_h = (d.in_h + 2 * pad - d.ksize) / stride + 1;
    d.out_w = (d.in_w + 2 * pad - d.ksize) / stride + 1;
    return d;
}

void conv2d_forward(const ConvDims& d, const double* x, const double* w, const double* bias,
                    double* out) {
#pragma omp parallel for collapse(2) schedule(static)
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t co = 0; co < d.out_ch; ++co) {
            double* plane = out + (b * d.out_ch + co) * d.out_h * d.out_w;
            for (std::size_t oh = 0; oh < d.out_h; ++oh)
                for (std::size_t ow = 0; ow < d.out_w; ++ow) {
                    double acc = bias ? bias[co] : 0.0;
                    for (std::size_t ci = 0; ci < d.in_ch; ++ci) {
                        const double* xp = x + (b * d.in_ch + ci) * d.in_h * d.in_w;
                        const double* wp = w + ((co * d.in_ch + ci) * d.ksize) * d.ksize;
                        for (std::size_t kh = 0; kh < d.ksize; ++kh) {
                            const std::ptrdiff_t ih =
                                static_cast<std::ptrdiff_t>(oh * d.stride + kh) -
                                static_cast<std::ptrdiff_t>(d.pad);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
                            for (std::size_t kw = 0; kw < d.ksize; ++kw) {
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * d.stride + kw) -
                                    static_cast<std::ptrdiff_t>(d.pad);
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
                                acc += xp[ih * static_cast<std::ptrdiff_t>(d.in_w) + iw] *
                                       wp[kh * d.ksize + kw];
                            }
                        }
                    }
                    plane[oh * d.out_w + ow] = acc;
                }
        }
    }
}

// dL/dx; each thread owns a batch sample, writes are disjoint.
void conv2d_backward_x(const ConvDims& d, const double* g, const double* w, double* gx) {
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t co = 0; co < d.out_ch; ++co) {
            const double* gplane = g + (b * d.out_ch + co) * d.out_h * d.out_w;
            for (std::size_t oh = 0; oh < d.out_h; ++oh)
                for (std::size_t ow = 0; ow < d.out_w; ++ow) {
                    const double gv = gplane[oh * d.out_w + ow];
                    if (gv == 0.0) continue;
                    for (std::size_t ci = 0; ci < d.in_ch; ++ci) {
                        double* gxp = gx + (b * d.in_ch + ci) * d.in_h * d.in_w;
                        const double* wp = w + ((co * d.in_ch + ci) * d.ksize) * d.ksize;
                        for (std::size_t kh = 0; kh < d.ksize; ++kh) {
                            const std::ptrdiff_t ih =
                                static_cast<std::ptrdiff_t>(oh * d.stride + kh) -
                                static_cast<std::ptrdiff_t>(d.pad);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
                            for (std::size_t kw = 0; kw < d.ksize; ++kw) {
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * d.stride + kw) -
                                    static_cast<std::ptrdiff_t>(d.pad);
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
                                gxp[ih * static_cast<std::ptrdiff_t>(d.in_w) + iw] +=
                                    gv * wp[kh * d.ksize + kw];
                            }
                        }
                    }
                }
        }
    }
}

// dL/dw; each thread owns an output channel, writes are disjoint.
void conv2d_backward_w(const ConvDims& d, const double* g, const double* x, double* gw,
                       double* gb) {
#pragma omp parallel for schedule(static)
    for (std::size_t co = 0; co < d.out_ch; ++co) {
        for (std::size_t b = 0; b < d.batch; ++b) {
            const double* gplane = g + (b * d.out_ch + co) * d.out_h * d.out_w;
            for (std::size_t oh = 0; oh < d.out_h; ++oh)
                for (std::size_t ow = 0; ow < d.out_w; ++ow) {
                    const double gv = gplane[oh * d.out_w + ow];
                    if (gv == 0.0) continue;
                    if (gb) gb[co] += gv;
                    for (std::size_t ci = 0; ci < d.in_ch; ++ci) {
                        const double* xp = x + (b * d.in_ch + ci) * d.in_h * d.in_w;
                        double* gwp = gw + ((co * d.in_ch + ci) * d.ksize) * d.ksize;
                        for (std::size_t kh = 0; kh < d.ksize; ++kh) {
                            const std::ptrdiff_t ih =
                                static_cast<std::ptrdiff_t>(oh * d.stride + kh) -
                                static_cast<std::ptrdiff_t>(d.pad);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
                            for (std::size_t kw = 0; kw < d.ksize; ++kw) {
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * d.stride + kw) -
                                    static_cast<std::ptrdiff_t>(d.pad);
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
                                gwp[kh * d.ksize + kw] +=
                                    gv * xp[ih * static_cast<std::ptrdiff_t>(d.in_w) + iw];
                            }
                        }
                    }
                }
        }
    }
}

}  // namespace

int Tape::push(NdTensor value, bool wants_grad, std::function<void(Tape&, int)> backprop) {
    nodes_.push_back(Node{std::move(value), NdTensor{}, wants_grad, std::move(backprop)});
    return static_cast<int>(nodes_.size()) - 1;
}

NdTensor& Tape::grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = NdTensor::zeros(n.value.shape());
    return n.grad;
}

void Tape::accumulate(int id, const double* g, std::size_t n) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.wants_grad) return;  // constants and anything behind stop_gradient
    NdTensor& buf = grad_buffer(id);
    for (std::size_t i = 0; i < n; ++i) buf[i] += g[i];
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
        throw std::invalid_argument("Tape: invalid Var");
    return nodes_[static_cast<std::size_t>(v.id)];
}

const NdTensor& Tape::value(Var v) const { return node(v).value; }

NdTensor Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) return NdTensor::zeros(n.value.shape());
    return n.grad;
}

Var Tape::constant(NdTensor value) { return {push(std::move(value), false, nullptr)}; }

Var Tape::param(NdTensor value) { return {push(std::move(value), true, nullptr)}; }

Var Tape::add(Var a, Var b) {
    const NdTensor& av = value(a);
    const NdTensor& bv = value(b);
    check_same_shape(av, bv, "add");
    NdTensor out = NdTensor::zeros(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    const bool wg = node(a).wants_grad || node(b).wants_grad;
    const int ai = a.id, bi = b.id;
    return {push(std::move(out), wg, [ai, bi](Tape& t, int self) {
        const NdTensor& g = t.nodes_[self].grad;
        t.accumulate(ai, g.data(), g.size());
        t.accumulate(bi, g.data(), g.size());
    })};
}

Var Tape::sub(Var a, Var b) {
    const NdTensor& av = value(a);
    const NdTensor& bv = value(b);
    check_same_shape(av, bv, "sub");
    NdTensor out = NdTensor::zeros(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    const bool wg = node(a).wants_grad || node(b).wants_grad;
    const int ai = a.id, bi = b.id;
    return {push(std::move(out), wg, [ai, bi](Tape& t, int self) {
        const NdTensor& g = t.nodes_[self].grad;
        t.accumulate(ai, g.data(), g.size());
        if (t.nodes_[bi].wants_grad) {
            NdTensor neg = NdTensor::zeros(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
            t.accumulate(bi, neg.data(), neg.size());
        }
    })};
}

Var Tape::mul(Var a, Var b) {
    const NdTensor& av = value(a);
    const NdTensor& bv = value(b);
    check_same_shape(av, bv, "mul");
    NdTensor out = NdTensor::zeros(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const bool wg = node(a).wants_grad || node(b).wants_grad;
    const int ai = a.id, bi = b.id;
    return {push(std::move(out), wg, [ai, bi](Tape& t, int self) {
        const NdTensor& g = t.nodes_[self].grad;
        const NdTensor& av2 = t.nodes_[ai].value;
        const NdTensor& bv2 = t.nodes_[bi].value;
        if (t.nodes_[ai].wants_grad) {
            NdTensor ga = NdTensor::zeros(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv2[i];
            t.accumulate(ai, ga.data(), ga.size());
        }
        if (t.nodes_[bi].wants_grad) {
            NdTensor gb = NdTensor::zeros(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av2[i];
            t.accumulate(bi, gb.data(), gb.size());
        }
    })};
}

Var Tape::scale(Var a, double s) {
    const NdTensor& av = value(a);
    NdTensor out = NdTensor::zeros(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    const int ai = a.id;
    return {push(std::move(out), node(a).wants_grad, [ai, s](Tape& t, int self) {
        const NdTensor& g = t.nodes_[self].grad;
        if (!t.nodes_[ai].wants_grad) return;
        NdTensor ga = NdTensor::zeros(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
        t.accumulate(ai, ga.data(), ga.size());
    })};
}

Var Tape::add_scalar(Var a, double s) {
    const NdTensor& av = value(a);
    NdTensor out = NdTensor::zeros(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
    const int ai = a.id;
    return {push(std::move(out), node(a).wants_grad, [ai](Tape& t, int self) {
        const NdTensor& g = t.nodes_[self].grad;
        t.accumulate(ai, g.data(), g.size());
    })};
}

Var Tape::relu(Var a) {
    const NdTensor& av = value(a);
    NdTensor out = NdTensor::zeros(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    const int ai = a.id;
    return {push(std::move(out), node(a).wants_grad, [ai](Tape& t, int self) {
        if (!t.nodes_[ai].wants_grad) return;
        const NdTensor& g = t.nodes_[self].grad;
        const NdTensor& av2 = t.nodes_[ai].value;
        NdTensor ga = NdTensor::zeros(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = av2[i] > 0.0 ? g[i] : 0.0;
        t.accumulate(ai, ga.data(), ga.size());
    })};
}

Var Tape::dense(Var x, Var w, Var b) {
    const NdTensor& xv = value(x);
    const NdTensor& wv = value(w);
    const NdTensor& bv = value(b);
    if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1)
        throw std::invalid_argument("dense: x [P,in], w [in,out], b [out] expected");
    const std::size_t p = xv.extent(0), in = xv.extent(1), out_dim = wv.extent(1);
    if (wv.extent(0) != in || bv.extent(0) != out_dim)
        throw std::invalid_argument("dense: dimension mismatch");

    NdTensor out = NdTensor::zeros({p, out_dim});
    for (std::size_t r = 0; r < p; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) {
            double acc = bv[o];
            for (std::size_t i = 0; i < in; ++i) acc += xv[r * in + i] * wv[i * out_dim + o];
            out[r * out_dim + o] = acc;
        }

    const bool wg = node(x).wants_grad || node(w).wants_grad || node(b).wants_grad;
    const int xi = x.id, wi = w.id, bi = b.id;
    return {push(std::move(out), wg, [xi, wi, bi, p, in, out_dim](Tape& t, int self) {
        const NdTensor& g = t.nodes_[self].grad;
        const NdTensor& xv2 = t.nodes_[xi].value;
        const NdTensor& wv2 = t.nodes_[wi].value;
        if (t.nodes_[xi].wants_grad) {
            NdTensor gx = NdTensor::zeros({p, in});
            for (std::size_t r = 0; r < p; ++r)
                for (std::size_t i = 0; i < in; ++i) {
                    double acc = 0.0;
                    for (std::size_t o = 0; o < out_dim; ++o)
                        acc += g[r * out_dim + o] * wv2[i * out_dim + o];
                    gx[r * in + i] = acc;
                }
            t.accumulate(xi, gx.data(), gx.size());
        }
        if (t.nodes_[wi].wants_grad) {
            NdTensor gw = NdTensor::zeros({in, out_dim});
            for (std::size_t r = 0; r < p; ++r)
                for (std::size_t i = 0; i < in; ++i)
                    for (std::size_t o = 0; o < out_dim; ++o)
                        gw[i * out_dim + o] += xv2[r * in + i] * g[r * out_dim + o];
            t.accumulate(wi, gw.data(), gw.size());
        }
        if (t.nodes_[bi].wants_grad) {
            NdTensor gb = NdTensor::zeros({out_dim});
            for (std::size_t r = 0; r < p; ++r)
                for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
            t.accumulate(bi, gb.data(), gb.size());
        }
    })};
}

Var Tape::conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
    const NdTensor& xv = value(x);
    const NdTensor& wv = value(w);
    const NdTensor& bv = value(b);
    const ConvDims d = conv_dims(xv, wv, stride, pad);
    if (bv.rank() != 1 || bv.extent(0) != d.out_ch)
        throw std::invalid_argument("conv2d: bias shape mismatch");

    NdTensor out = NdTensor::zeros({d.batch, d.out_ch, d.out_h, d.out_w});
    conv2d_forward(d, xv.data(), wv.data(), bv.data(), out.data());

    const bool wg = node(x).wants_grad || node(w).wants_grad || node(b).wants_grad;
    const int xi = x.id, wi = w.id, bi = b.id;
    return {push(std::move(out), wg, [xi, wi, bi, d](Tape& t, int self) {
        const NdTensor& g = t.nodes_[self].grad;
        const NdTensor& xv2 = t.nodes_[xi].value;
        const NdTensor& wv2 = t.nodes_[wi].value;
        if (t.nodes_[xi].wants_grad) {
            NdTensor gx = NdTensor::zeros(xv2.shape());
            conv2d_backward_x(d, g.data(), wv2.data(), gx.data());
            t.accumulate(xi, gx.data(), gx.size());
        }
        if (t.nodes_[wi].wants_grad || t.nodes_[bi].wants_grad) {
            NdTensor gw = NdTensor::zeros(wv2.shape());
            NdTensor gb = NdTensor::zeros({d.out_ch});
            conv2d_backward_w(d, g.data(), xv2.data(), gw.data(),
                              t.nodes_[bi].wants_grad ? gb.data() : nullptr);
            t.accumulate(wi, gw.data(), gw.size());
            t.accumulate(bi, gb.data(), gb.size());
        }
    })};
}

Var Tape::upsample2_nearest(Var x) {
    const NdTensor& xv = value(x);
    if (xv.rank() != 4) throw std::invalid_argument("upsample2_nearest: rank-4 expected");
    const std::size_t batch = xv.extent(0), ch = xv.extent(1), h = xv.extent(2), w = xv.extent(3);
    NdTensor out = NdTensor::zeros({batch, ch, h * 2, w * 2});
    for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        const double* src = xv.data() + bc * h * w;
        double* dst = out.data() + bc * h * w * 4;
        for (std::size_t i = 0; i < 2 * h; ++i)
            for (std::size_t j = 0; j < 2 * w; ++j)
                dst[i * 2 * w + j] = src[(i / 2) * w + (j / 2)];
    }
    const int xi = x.id;
    return {push(std::move(out), node(x).wants_grad, [xi, batch, ch, h, w](Tape& t, int self) {
        if (!t.nodes_[xi].wants_grad) return;
        const NdTensor& g = t.nodes_[self].grad;
        NdTensor gx = NdTensor::zeros({batch, ch, h, w});
        for (std::size_t bc = 0; bc < batch * ch; ++bc) {
            const double* gp = g.data() + bc * h * w * 4;
            double* gxp = gx.data() + bc * h * w;
            for (std::size_t i = 0; i < 2 * h; ++i)
                for (std::size_t j = 0; j < 2 * w; ++j)
                    gxp[(i / 2) * w + (j / 2)] += gp[i * 2 * w + j];
        }
        t.accumulate(xi, gx.data(), gx.size());
    })};
}

Var Tape::concat_channels(Var a, Var b) {
    const NdTensor& av = value(a);
    const NdTensor& bv = value(b);
    if (av.rank() != 4 || bv.rank() != 4)
        throw std::invalid_argument("concat_channels: rank-4 expected");
    if (av.extent(0) != bv.extent(0) || av.extent(2) != bv.extent(2) ||
        av.extent(3) != bv.extent(3))
        throw std::invalid_argument("concat_channels: non-channel extents differ");
    const std::size_t batch = av.extent(0), ca = av.extent(1), cb = bv.extent(1);
    const std::size_t hw = av.extent(2) * av.extent(3);
    NdTensor out = NdTensor::zeros({batch, ca + cb, av.extent(2), av.extent(3)});
    for (std::size_t n = 0; n < batch; ++n) {
        std::memcpy(out.data() + n * (ca + cb) * hw, av.data() + n * ca * hw,
                    ca * hw * sizeof(double));
        std::memcpy(out.data() + (n * (ca + cb) + ca) * hw, bv.data() + n * cb * hw,
                    cb * hw * sizeof(double));
    }
    const bool wg = node(a).wants_grad || node(b).wants_grad;
    const int ai = a.id, bi = b.id;
    return {push(std::move(out), wg, [ai, bi, batch, ca, cb, hw](Tape& t, int self) {
        const NdTensor& g = t.nodes_[self].grad;
        if (t.nodes_[ai].wants_grad) {
            NdTensor ga = NdTensor::zeros(t.nodes_[ai].value.shape());
            for (std::size_t n = 0; n < batch; ++n)
                std::memcpy(ga.data() + n * ca * hw, g.data() + n * (ca + cb) * hw,
                            ca * hw * sizeof(double));
            t.accumulate(ai, ga.data(), ga.size());
        }
        if (t.nodes_[bi].wants_grad) {
            NdTensor gb = NdTensor::zeros(t.nodes_[bi].value.shape());
            for (std::size_t n = 0; n < batch; ++n)
                std::memcpy(gb.data() + n * cb * hw, g.data() + (n * (ca + cb) + ca) * hw,
                            cb * hw * sizeof(double));
            t.accumulate(bi, gb.data(), gb.size());
        }
    })};
}

Var Tape::sum(Var a) {
    const NdTensor& av = value(a);
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
    const int ai = a.id;
    return {push(NdTensor::from_data_unchecked({1}, {acc}), node(a).wants_grad,
                 [ai](Tape& t, int self) {
                     if (!t.nodes_[ai].wants_grad) return;
                     const double g = t.nodes_[self].grad[0];
                     const std::size_t n = t.nodes_[ai].value.size();
                     NdTensor ga = NdTensor::full(t.nodes_[ai].value.shape(), g);
                     t.accumulate(ai, ga.data(), n);
                 })};
}

Var Tape::mean(Var a) {
    const std::size_t n = value(a).size();
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var Tape::mse_loss(Var pred, Var target) {
    const NdTensor& pv = value(pred);
    const NdTensor& tv = value(target);
    check_same_shape(pv, tv, "mse_loss");
    const std::size_t n = pv.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = pv[i] - tv[i];
        acc += diff * diff;
    }
    acc /= static_cast<double>(n);
    const bool wg = node(pred).wants_grad || node(target).wants_grad;
    const int pi = pred.id, ti = target.id;
    return {push(NdTensor::from_data_unchecked({1}, {acc}), wg, [pi, ti, n](Tape& t, int self) {
        const double g = t.nodes_[self].grad[0];
        const NdTensor& pv2 = t.nodes_[pi].value;
        const NdTensor& tv2 = t.nodes_[ti].value;
        const double s = 2.0 * g / static_cast<double>(n);
        if (t.nodes_[pi].wants_grad) {
            NdTensor gp = NdTensor::zeros(pv2.shape());
            for (std::size_t i = 0; i < n; ++i) gp[i] = s * (pv2[i] - tv2[i]);
            t.accumulate(pi, gp.data(), n);
        }
        if (t.nodes_[ti].wants_grad) {
            NdTensor gt = NdTensor::zeros(tv2.shape());
            for (std::size_t i = 0; i < n; ++i) gt[i] = -s * (pv2[i] - tv2[i]);
            t.accumulate(ti, gt.data(), n);
        }
    })};
}

Var Tape::softmax_ce_loss(Var logits, const CodeTensor& targets, std::size_t bins) {
    const NdTensor& lv = value(logits);
    if (lv.rank() != 4) throw std::invalid_argument("softmax_ce_loss: rank-4 logits expected");
    if (targets.shape.size() != 4)
        throw std::invalid_argument("softmax_ce_loss: rank-4 targets expected");
    const std::size_t batch = lv.extent(0), ch = targets.shape[1];
    const std::size_t h = lv.extent(2), w = lv.extent(3);
    if (lv.extent(1) != ch * bins || targets.shape[0] != batch || targets.shape[2] != h ||
        targets.shape[3] != w)
        throw std::invalid_argument("softmax_ce_loss: logits/targets mismatch");

    const std::size_t n = batch * ch * h * w;
    const std::size_t hw = h * w;
    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t p = 0; p < hw; ++p) {
                const std::int32_t tgt = targets.data[(b * ch + c) * hw + p];
                if (tgt < 0 || static_cast<std::size_t>(tgt) >= bins)
                    throw std::invalid_argument("softmax_ce_loss: target bin out of range");
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t k = 0; k < bins; ++k)
                    mx = std::max(mx, lv[((b * ch + c) * bins + k) * hw + p]);
                double lse = 0.0;
                for (std::size_t k = 0; k < bins; ++k)
                    lse += std::exp(lv[((b * ch + c) * bins + k) * hw + p] - mx);
                lse = mx + std::log(lse);
                acc += lse - lv[((b * ch + c) * bins + static_cast<std::size_t>(tgt)) * hw + p];
            }
    acc /= static_cast<double>(n);

    const int li = logits.id;
    CodeTensor tcopy = targets;
    return {push(NdTensor::from_data_unchecked({1}, {acc}), node(logits).wants_grad,
                 [li, tcopy = std::move(tcopy), bins, batch, ch, hw](Tape& t, int self) {
                     if (!t.nodes_[li].wants_grad) return;
                     const double g = t.nodes_[self].grad[0];
                     const NdTensor& lv2 = t.nodes_[li].value;
                     NdTensor gl = NdTensor::zeros(lv2.shape());
                     const double s = g / static_cast<double>(batch * ch * hw);
                     std::vector<double> prob(bins);
                     for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t c = 0; c < ch; ++c)
                             for (std::size_t p = 0; p < hw; ++p) {
                                 double mx = -std::numeric_limits<double>::infinity();
                                 for (std::size_t k = 0; k < bins; ++k)
                                     mx = std::max(mx, lv2[((b * ch + c) * bins + k) * hw + p]);
                                 double z = 0.0;
                                 for (std::size_t k = 0; k < bins; ++k) {
                                     prob[k] = std::exp(lv2[((b * ch + c) * bins + k) * hw + p] - mx);
                                     z += prob[k];
                                 }
                                 const std::size_t tgt = static_cast<std::size_t>(
                                     tcopy.data[(b * ch + c) * hw + p]);
                                 for (std::size_t k = 0; k < bins; ++k) {
                                     const double soft = prob[k] / z;
                                     gl[((b * ch + c) * bins + k) * hw + p] =
                                         s * (soft - (k == tgt ? 1.0 : 0.0));
                                 }
                             }
                     t.accumulate(li, gl.data(), gl.size());
                 })};
}

Var Tape::stop_gradient(Var a) {
    // forward copy, no backward rule, and wants_grad off so nothing upstream
    // of the boundary ever accumulates
    return {push(value(a), false, nullptr)};
}

Tape::StraightThrough Tape::straight_through_quantize(Var z, const DepthwiseQuantizer& q,
                                                      double beta,
                                                      const std::vector<Var>& code_vars,
                                                      const CodeTensor* frozen_codes) {
    // copy: push() below may reallocate the node storage behind value(z)
    const NdTensor zv = value(z);
    StraightThrough st;
    if (frozen_codes)
        st.result = dq_apply_codes(q, zv, *frozen_codes, &st.detail);
    else
        st.result = dq_forward(q, zv, &st.detail);
    const NdTensor& zhat = st.result.quantized;
    const std::size_t n = zv.size();

    // quantized surrogate: value z_hat, backward identity into z
    const int zi = z.id;
    st.quantized = {push(zhat, node(z).wants_grad, [zi](Tape& t, int self) {
        const NdTensor& g = t.nodes_[self].grad;
        t.accumulate(zi, g.data(), g.size());
    })};

    double mse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = zv[i] - zhat[i];
        mse += diff * diff;
    }
    mse /= static_cast<double>(n);

    // codebook term: gradient reaches the codes only when they are tape
    // params (EMA training leaves it as a metric)
    if (code_vars.empty()) {
        st.codebook_term = constant(NdTensor::from_data_unchecked({1}, {mse}));
    } else {
        if (code_vars.size() != q.num_books())
            throw std::invalid_argument("straight_through_quantize: one code var per book");
        std::vector<int> cids(code_vars.size());
        for (std::size_t i = 0; i < code_vars.size(); ++i) {
            cids[i] = code_vars[i].id;
            const NdTensor& cv = value(code_vars[i]);
            if (cv.rank() != 2 || cv.extent(0) != q.book(i).num_codes() ||
                cv.extent(1) != q.book(i).dim())
                throw std::invalid_argument("straight_through_quantize: code var shape mismatch");
        }
        // snapshot of the per-slice views for the backward rule
        auto slice_vectors = st.detail.slice_vectors;
        auto slice_codes = st.detail.slice_codes;
        const AxisDecomposition decomp = st.detail.decomposition;
        const bool shared = q.shared_codebook();
        const std::size_t dim = q.code_dim();
        st.codebook_term = {
            push(NdTensor::from_data_unchecked({1}, {mse}), true,
                 [cids, slice_vectors, slice_codes, decomp, shared, dim, n](Tape& t, int self) {
                     const double g = t.nodes_[self].grad[0];
                     const double s = 2.0 * g / static_cast<double>(n);
                     for (std::size_t m = 0; m < slice_vectors.size(); ++m) {
                         const int cid = cids[shared ? 0 : m];
                         if (!t.nodes_[cid].wants_grad) continue;
                         const NdTensor& codes = t.nodes_[cid].value;
                         NdTensor gc = NdTensor::zeros(codes.shape());
                         const std::size_t valid = decomp.valid_extent(m);
                         const NdTensor& vecs = slice_vectors[m];
                         for (std::size_t p = 0; p < vecs.extent(0); ++p) {
                             const auto k = static_cast<std::size_t>(slice_codes[m][p]);
                             for (std::size_t x = 0; x < valid; ++x)
                                 gc[k * dim + x] +=
                                     s * (codes[k * dim + x] - vecs[p * dim + x]);
                         }
                         t.accumulate(cid, gc.data(), gc.size());
                     }
                 })};
    }

    // commitment term: beta * mean((z - sg(z_hat))^2); gradient 2 beta (z - z_hat) / n
    NdTensor zhat_copy = zhat;
    st.commitment_term = {
        push(NdTensor::from_data_unchecked({1}, {beta * mse}), node(z).wants_grad,
             [zi, zhat_copy = std::move(zhat_copy), beta, n](Tape& t, int self) {
                 if (!t.nodes_[zi].wants_grad) return;
                 const double g = t.nodes_[self].grad[0];
                 const NdTensor& zv2 = t.nodes_[zi].value;
                 const double s = 2.0 * beta * g / static_cast<double>(n);
                 NdTensor gz = NdTensor::zeros(zv2.shape());
                 for (std::size_t i = 0; i < n; ++i) gz[i] = s * (zv2[i] - zhat_copy[i]);
                 t.accumulate(zi, gz.data(), gz.size());
             })};
    return st;
}

void Tape::backward(Var loss) {
    const Node& ln = node(loss);
    if (ln.value.size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    if (!ln.wants_grad) return;  // no parameters reachable
    grad_buffer(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0 || !n.backprop) continue;
        n.backprop(*this, id);
    }
}

}  // namespace dq
