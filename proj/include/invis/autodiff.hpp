// Tape-based reverse-mode differentiation over Tensor-valued nodes.
// A Tape records one forward pass; backward() replays adjoints in reverse
// recording order and accumulates into bound Parameter gradients.
#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "invis/common.hpp"
#include "invis/tensor.hpp"

namespace invis {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape, 0.0) {}

    void zero_grad() { grad.fill(0.0); }
    size_t numel() const { return value.numel(); }
};

namespace detail {

// C[MxN] = A[MxK] * B[KxN]; accumulate when acc is true.
inline void matmul(const double* A, const double* B, double* C, size_t M, size_t K, size_t N,
                   bool acc = false) {
    if (!acc) std::memset(C, 0, sizeof(double) * M * N);
    for (size_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (size_t k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + k * N;
            for (size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[MxN] = A^T[MxK as KxM] * B[KxN]
inline void matmul_at(const double* A, const double* B, double* C, size_t M, size_t K, size_t N,
                      bool acc = false) {
    if (!acc) std::memset(C, 0, sizeof(double) * M * N);
    for (size_t k = 0; k < K; ++k) {
        const double* a = A + k * M;
        const double* b = B + k * N;
        for (size_t i = 0; i < M; ++i) {
            const double av = a[i];
            double* c = C + i * N;
            for (size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[MxN] = A[MxK] * B^T[KxN as NxK]
inline void matmul_bt(const double* A, const double* B, double* C, size_t M, size_t K, size_t N,
                      bool acc = false) {
    if (!acc) std::memset(C, 0, sizeof(double) * M * N);
    for (size_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (size_t j = 0; j < N; ++j) {
            const double* b = B + j * K;
            double s = 0.0;
            for (size_t k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] += s;
        }
    }
}

struct ConvGeom {
    size_t cin, h, w, cout, k, ho, wo;
    int stride, pad;
};

// Unpack conv patches: cols is [cin*k*k] x [ho*wo].
inline void im2col(const double* x, const ConvGeom& g, double* cols) {
    const size_t patch = g.k * g.k;
    for (size_t c = 0; c < g.cin; ++c) {
        const double* xc = x + c * g.h * g.w;
        for (size_t ky = 0; ky < g.k; ++ky) {
            for (size_t kx = 0; kx < g.k; ++kx) {
                double* row = cols + (c * patch + ky * g.k + kx) * (g.ho * g.wo);
                for (size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::memset(row + oy * g.wo, 0, sizeof(double) * g.wo);
                        continue;
                    }
                    const double* xrow = xc + static_cast<size_t>(iy) * g.w;
                    double* orow = row + oy * g.wo;
                    for (size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
                        orow[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0
                                                                            : xrow[static_cast<size_t>(ix)];
                    }
                }
            }
        }
    }
}

// Scatter-add of column gradients back to input layout.
inline void col2im(const double* cols, const ConvGeom& g, double* dx) {
    const size_t patch = g.k * g.k;
    for (size_t c = 0; c < g.cin; ++c) {
        double* xc = dx + c * g.h * g.w;
        for (size_t ky = 0; ky < g.k; ++ky) {
            for (size_t kx = 0; kx < g.k; ++kx) {
                const double* row = cols + (c * patch + ky * g.k + kx) * (g.ho * g.wo);
                for (size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    double* xrow = xc + static_cast<size_t>(iy) * g.w;
                    const double* orow = row + oy * g.wo;
                    for (size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
                        if (ix >= 0 && ix < static_cast<long>(g.w)) xrow[static_cast<size_t>(ix)] += orow[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

class Tape;

struct Var {
    Tape* tape = nullptr;
    size_t id = 0;
    const Tensor& val() const;
    const std::vector<size_t>& shape() const { return val().shape; }
};

class Tape {
public:
    explicit Tape(bool record_grads = true) : record_(record_grads) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Tracked leaf bound to a parameter; backward() accumulates into p.grad.
    Var leaf(Parameter& p) {
        size_t id = push(Tensor(p.value), record_);
        nodes_[id].param = &p;
        if (record_) leaves_.push_back(id);
        return Var{this, id};
    }

    // Untracked input (images, targets rendered into the graph).
    Var input(Tensor t) { return Var{this, push(std::move(t), false)}; }

    const Tensor& value(size_t id) const { return nodes_[id].value; }
    Tensor& grad(size_t id) { return nodes_[id].grad; }
    size_t size() const { return nodes_.size(); }
    size_t ops_recorded() const { return ops_recorded_; }
    size_t ops_replayed() const { return ops_replayed_; }

    // Populates gradients of every tracked leaf with d(loss)/d(leaf).
    void backward(Var loss) {
        if (loss.tape != this) fail(ErrorCategory::internal, "backward: loss from another tape");
        if (nodes_[loss.id].value.numel() != 1)
            fail(ErrorCategory::shape, "backward requires a scalar loss, got shape " +
                                           shape_string(nodes_[loss.id].value.shape));
        if (ran_backward_) fail(ErrorCategory::internal, "backward already ran on this tape");
        ran_backward_ = true;
        for (auto& n : nodes_)
            if (n.tracked) n.grad = Tensor(n.value.shape, 0.0);
        nodes_[loss.id].grad.data[0] = 1.0;
        for (size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].backprop) {
                nodes_[i].backprop();
                ++ops_replayed_;
            }
        }
        for (size_t id : leaves_) {
            Parameter* p = nodes_[id].param;
            const Tensor& g = nodes_[id].grad;
            for (size_t i = 0; i < g.numel(); ++i) p->grad.data[i] += g.data[i];
        }
    }

    bool recording() const { return record_; }

    // -- op construction internals (used by the free-function ops) ----------
    size_t push(Tensor value, bool tracked) {
        nodes_.push_back(Node{std::move(value), Tensor(), nullptr, {}, tracked});
        return nodes_.size() - 1;
    }
    void set_backprop(size_t id, std::function<void()> fn) {
        nodes_[id].backprop = std::move(fn);
        ++ops_recorded_;
    }
    bool tracked(size_t id) const { return nodes_[id].tracked; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        Parameter* param = nullptr;
        std::function<void()> backprop;
        bool tracked = false;
    };
    std::vector<Node> nodes_;
    std::vector<size_t> leaves_;
    bool record_ = true;
    bool ran_backward_ = false;
    size_t ops_recorded_ = 0;
    size_t ops_replayed_ = 0;
};

inline const Tensor& Var::val() const { return tape->value(id); }

namespace detail {
inline bool want_grad(const Var& v) { return v.tape->recording() && v.tape->tracked(v.id); }
}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

// Standard cross-correlation. input [Cin,H,W], kernel [Cout,Cin,k,k],
// bias [Cout]; output [Cout,H',W'] with H' = (H + 2*pad - k)/stride + 1.
inline Var conv2d(Var x, Var w, Var b, int stride = 1, int pad = 0) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    const Tensor& bv = b.val();
    if (xv.rank() != 3) fail(ErrorCategory::shape, "conv2d: input must be [Cin,H,W], got " + shape_string(xv.shape));
    if (wv.rank() != 4) fail(ErrorCategory::shape, "conv2d: kernel must be [Cout,Cin,k,k], got " + shape_string(wv.shape));
    detail::ConvGeom g;
    g.cin = xv.shape[0];
    g.h = xv.shape[1];
    g.w = xv.shape[2];
    g.cout = wv.shape[0];
    g.k = wv.shape[2];
    g.stride = stride;
    g.pad = pad;
    if (wv.shape[1] != g.cin)
        fail(ErrorCategory::shape, "conv2d: kernel input-channel dim (" + std::to_string(wv.shape[1]) +
                                       ") does not match input channel dim (" + std::to_string(g.cin) + ")");
    if (wv.shape[2] != wv.shape[3])
        fail(ErrorCategory::shape, "conv2d: kernel must be square, got k_h=" + std::to_string(wv.shape[2]) +
                                       " k_w=" + std::to_string(wv.shape[3]));
    if (g.k % 2 == 0) fail(ErrorCategory::shape, "conv2d: kernel size must be odd, got " + std::to_string(g.k));
    if (stride < 1) fail(ErrorCategory::shape, "conv2d: stride must be >= 1, got " + std::to_string(stride));
    if (pad < 0) fail(ErrorCategory::shape, "conv2d: pad must be >= 0, got " + std::to_string(pad));
    if (bv.rank() != 1 || bv.shape[0] != g.cout)
        fail(ErrorCategory::shape, "conv2d: bias dim (" + shape_string(bv.shape) + ") does not match Cout=" +
                                       std::to_string(g.cout));
    const long hnum = static_cast<long>(g.h) + 2 * pad - static_cast<long>(g.k);
    const long wnum = static_cast<long>(g.w) + 2 * pad - static_cast<long>(g.k);
    if (hnum < 0 || hnum % stride != 0)
        fail(ErrorCategory::shape, "conv2d: height " + std::to_string(g.h) + " incompatible with k=" +
                                       std::to_string(g.k) + " stride=" + std::to_string(stride) +
                                       " pad=" + std::to_string(pad));
    if (wnum < 0 || wnum % stride != 0)
        fail(ErrorCategory::shape, "conv2d: width " + std::to_string(g.w) + " incompatible with k=" +
                                       std::to_string(g.k) + " stride=" + std::to_string(stride) +
                                       " pad=" + std::to_string(pad));
    g.ho = static_cast<size_t>(hnum / stride) + 1;
    g.wo = static_cast<size_t>(wnum / stride) + 1;

    const size_t krows = g.cin * g.k * g.k;
    const size_t ncols = g.ho * g.wo;
    auto cols = std::make_shared<std::vector<double>>(krows * ncols);
    detail::im2col(xv.data.data(), g, cols->data());

    Tensor out({g.cout, g.ho, g.wo});
    detail::matmul(wv.data.data(), cols->data(), out.data.data(), g.cout, krows, ncols);
    for (size_t c = 0; c < g.cout; ++c) {
        double* o = out.data.data() + c * ncols;
        const double bias = bv.data[c];
        for (size_t i = 0; i < ncols; ++i) o[i] += bias;
    }

    const bool track = detail::want_grad(x) || detail::want_grad(w) || detail::want_grad(b);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, wid = w.id, bid = b.id, oid = id;
        tape.set_backprop(oid, [tp, xid, wid, bid, oid, g, cols, krows, ncols]() {
            const Tensor& dy = tp->grad(oid);
            if (tp->tracked(bid)) {
                Tensor& db = tp->grad(bid);
                for (size_t c = 0; c < g.cout; ++c) {
                    const double* r = dy.data.data() + c * ncols;
                    double s = 0.0;
                    for (size_t i = 0; i < ncols; ++i) s += r[i];
                    db.data[c] += s;
                }
            }
            if (tp->tracked(wid)) {
                // dW = dY * cols^T
                detail::matmul_bt(dy.data.data(), cols->data(), tp->grad(wid).data.data(), g.cout,
                                  ncols, krows, /*acc=*/true);
            }
            if (tp->tracked(xid)) {
                // dcols = W^T * dY, then scatter back
                std::vector<double> dcols(krows * ncols);
                detail::matmul_at(tp->value(wid).data.data(), dy.data.data(), dcols.data(), krows,
                                  g.cout, ncols);
                detail::col2im(dcols.data(), g, tp->grad(xid).data.data());
            }
        });
    }
    return Var{&tape, id};
}

inline Var leaky_relu(Var x, double slope = 0.1) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    Tensor out(xv.shape);
    for (size_t i = 0; i < xv.numel(); ++i) {
        const double v = xv.data[i];
        out.data[i] = v > 0.0 ? v : slope * v;
    }
    const bool track = detail::want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        tape.set_backprop(oid, [tp, xid, oid, slope]() {
            const Tensor& dy = tp->grad(oid);
            const Tensor& xin = tp->value(xid);
            Tensor& dx = tp->grad(xid);
            for (size_t i = 0; i < dy.numel(); ++i)
                dx.data[i] += dy.data[i] * (xin.data[i] > 0.0 ? 1.0 : slope);
        });
    }
    return Var{&tape, id};
}

inline Var sigmoid(Var x) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    Tensor out(xv.shape);
    for (size_t i = 0; i < xv.numel(); ++i) out.data[i] = 1.0 / (1.0 + std::exp(-xv.data[i]));
    const bool track = detail::want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        tape.set_backprop(oid, [tp, xid, oid]() {
            const Tensor& dy = tp->grad(oid);
            const Tensor& y = tp->value(oid);
            Tensor& dx = tp->grad(xid);
            for (size_t i = 0; i < dy.numel(); ++i)
                dx.data[i] += dy.data[i] * y.data[i] * (1.0 - y.data[i]);
        });
    }
    return Var{&tape, id};
}

namespace detail {
// align-corners-false source coordinate with edge clamping
struct LerpAxis {
    size_t i0, i1;
    double w0, w1;
};
inline LerpAxis lerp_axis(size_t dst, size_t factor, size_t src_len) {
    const double s = (static_cast<double>(dst) + 0.5) / static_cast<double>(factor) - 0.5;
    double sc = s < 0.0 ? 0.0 : s;
    const double max_c = static_cast<double>(src_len - 1);
    if (sc > max_c) sc = max_c;
    const size_t i0 = static_cast<size_t>(sc);
    const size_t i1 = i0 + 1 < src_len ? i0 + 1 : i0;
    const double w1 = sc - static_cast<double>(i0);
    return {i0, i1, 1.0 - w1, w1};
}
}  // namespace detail

// align-corners-false bilinear interpolation by an integer factor.
inline Var bilinear_upsample(Var x, int factor) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    if (xv.rank() != 3)
        fail(ErrorCategory::shape, "bilinear_upsample: input must be [C,H,W], got " + shape_string(xv.shape));
    if (factor < 1) fail(ErrorCategory::shape, "bilinear_upsample: factor must be >= 1, got " + std::to_string(factor));
    const size_t C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    const size_t HO = H * static_cast<size_t>(factor), WO = W * static_cast<size_t>(factor);
    std::vector<detail::LerpAxis> ay(HO), ax(WO);
    for (size_t i = 0; i < HO; ++i) ay[i] = detail::lerp_axis(i, factor, H);
    for (size_t j = 0; j < WO; ++j) ax[j] = detail::lerp_axis(j, factor, W);
    Tensor out({C, HO, WO});
    for (size_t c = 0; c < C; ++c) {
        const double* src = xv.data.data() + c * H * W;
        double* dst = out.data.data() + c * HO * WO;
        for (size_t i = 0; i < HO; ++i) {
            const auto& ry = ay[i];
            const double* r0 = src + ry.i0 * W;
            const double* r1 = src + ry.i1 * W;
            double* d = dst + i * WO;
            for (size_t j = 0; j < WO; ++j) {
                const auto& rx = ax[j];
                d[j] = ry.w0 * (rx.w0 * r0[rx.i0] + rx.w1 * r0[rx.i1]) +
                       ry.w1 * (rx.w0 * r1[rx.i0] + rx.w1 * r1[rx.i1]);
            }
        }
    }
    const bool track = detail::want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        tape.set_backprop(oid, [tp, xid, oid, C, H, W, HO, WO, ay, ax]() {
            const Tensor& dy = tp->grad(oid);
            Tensor& dx = tp->grad(xid);
            for (size_t c = 0; c < C; ++c) {
                double* dsrc = dx.data.data() + c * H * W;
                const double* ddst = dy.data.data() + c * HO * WO;
                for (size_t i = 0; i < HO; ++i) {
                    const auto& ry = ay[i];
                    for (size_t j = 0; j < WO; ++j) {
                        const auto& rx = ax[j];
                        const double g = ddst[i * WO + j];
                        dsrc[ry.i0 * W + rx.i0] += g * ry.w0 * rx.w0;
                        dsrc[ry.i0 * W + rx.i1] += g * ry.w0 * rx.w1;
                        dsrc[ry.i1 * W + rx.i0] += g * ry.w1 * rx.w0;
                        dsrc[ry.i1 * W + rx.i1] += g * ry.w1 * rx.w1;
                    }
                }
            }
        });
    }
    return Var{&tape, id};
}

// 2x2 stride-2 max pooling; ties resolve to the first element in scan order.
inline Var max_pool2d(Var x) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    if (xv.rank() != 3)
        fail(ErrorCategory::shape, "max_pool2d: input must be [C,H,W], got " + shape_string(xv.shape));
    const size_t C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    if (H % 2 != 0 || W % 2 != 0)
        fail(ErrorCategory::shape, "max_pool2d: spatial dims must be even, got H=" + std::to_string(H) +
                                       " W=" + std::to_string(W));
    const size_t HO = H / 2, WO = W / 2;
    Tensor out({C, HO, WO});
    auto argmax = std::make_shared<std::vector<size_t>>(C * HO * WO);
    for (size_t c = 0; c < C; ++c) {
        const double* src = xv.data.data() + c * H * W;
        for (size_t i = 0; i < HO; ++i) {
            for (size_t j = 0; j < WO; ++j) {
                const size_t base = (2 * i) * W + 2 * j;
                size_t best = base;
                double bv = src[base];
                const size_t cand[3] = {base + 1, base + W, base + W + 1};
                for (size_t t = 0; t < 3; ++t)
                    if (src[cand[t]] > bv) {
                        bv = src[cand[t]];
                        best = cand[t];
                    }
                out.data[(c * HO + i) * WO + j] = bv;
                (*argmax)[(c * HO + i) * WO + j] = c * H * W + best;
            }
        }
    }
    const bool track = detail::want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        tape.set_backprop(oid, [tp, xid, oid, argmax]() {
            const Tensor& dy = tp->grad(oid);
            Tensor& dx = tp->grad(xid);
            for (size_t i = 0; i < dy.numel(); ++i) dx.data[(*argmax)[i]] += dy.data[i];
        });
    }
    return Var{&tape, id};
}

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        fail(ErrorCategory::shape, std::string(op) + ": shape mismatch " + shape_string(a.shape) +
                                       " vs " + shape_string(b.shape));
}

template <typename Fwd, typename Bwd>
Var binary_elementwise(Var a, Var b, const char* name, Fwd fwd, Bwd bwd) {
    Tape& tape = *a.tape;
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    check_same_shape(av, bv, name);
    Tensor out(av.shape);
    for (size_t i = 0; i < av.numel(); ++i) out.data[i] = fwd(av.data[i], bv.data[i]);
    const bool track = want_grad(a) || want_grad(b);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t aid = a.id, bid = b.id, oid = id;
        tape.set_backprop(oid, [tp, aid, bid, oid, bwd]() {
            const Tensor& dy = tp->grad(oid);
            const Tensor& avv = tp->value(aid);
            const Tensor& bvv = tp->value(bid);
            const bool ta = tp->tracked(aid), tb = tp->tracked(bid);
            for (size_t i = 0; i < dy.numel(); ++i) {
                auto [da, db] = bwd(avv.data[i], bvv.data[i]);
                if (ta) tp->grad(aid).data[i] += dy.data[i] * da;
                if (tb) tp->grad(bid).data[i] += dy.data[i] * db;
            }
        });
    }
    return Var{&tape, id};
}
}  // namespace detail

inline Var add(Var a, Var b) {
    return detail::binary_elementwise(a, b, "add", [](double x, double y) { return x + y; },
                                      [](double, double) { return std::pair<double, double>(1.0, 1.0); });
}
inline Var sub(Var a, Var b) {
    return detail::binary_elementwise(a, b, "sub", [](double x, double y) { return x - y; },
                                      [](double, double) { return std::pair<double, double>(1.0, -1.0); });
}
inline Var mul(Var a, Var b) {
    return detail::binary_elementwise(a, b, "mul", [](double x, double y) { return x * y; },
                                      [](double x, double y) { return std::pair<double, double>(y, x); });
}

inline Var scale(Var x, double c) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    Tensor out(xv.shape);
    for (size_t i = 0; i < xv.numel(); ++i) out.data[i] = c * xv.data[i];
    const bool track = detail::want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        tape.set_backprop(oid, [tp, xid, oid, c]() {
            const Tensor& dy = tp->grad(oid);
            Tensor& dx = tp->grad(xid);
            for (size_t i = 0; i < dy.numel(); ++i) dx.data[i] += c * dy.data[i];
        });
    }
    return Var{&tape, id};
}

// Concatenate [C,H,W] tensors along the channel axis.
inline Var concat_channels(Var a, Var b) {
    Tape& tape = *a.tape;
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 3 || bv.rank() != 3)
        fail(ErrorCategory::shape, "concat_channels: inputs must be [C,H,W]");
    if (av.shape[1] != bv.shape[1] || av.shape[2] != bv.shape[2])
        fail(ErrorCategory::shape, "concat_channels: spatial dims differ, " + shape_string(av.shape) +
                                       " vs " + shape_string(bv.shape));
    const size_t Ca = av.shape[0], Cb = bv.shape[0], H = av.shape[1], W = av.shape[2];
    Tensor out({Ca + Cb, H, W});
    std::memcpy(out.data.data(), av.data.data(), sizeof(double) * av.numel());
    std::memcpy(out.data.data() + av.numel(), bv.data.data(), sizeof(double) * bv.numel());
    const bool track = detail::want_grad(a) || detail::want_grad(b);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t aid = a.id, bid = b.id, oid = id;
        const size_t na = av.numel();
        tape.set_backprop(oid, [tp, aid, bid, oid, na]() {
            const Tensor& dy = tp->grad(oid);
            if (tp->tracked(aid)) {
                Tensor& da = tp->grad(aid);
                for (size_t i = 0; i < na; ++i) da.data[i] += dy.data[i];
            }
            if (tp->tracked(bid)) {
                Tensor& db = tp->grad(bid);
                for (size_t i = 0; i < db.numel(); ++i) db.data[i] += dy.data[na + i];
            }
        });
    }
    return Var{&tape, id};
}

namespace detail {
inline Var reduce(Var x, bool average) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    const double n = static_cast<double>(xv.numel());
    const double denom = average ? n : 1.0;
    Tensor out({1});
    out.data[0] = xv.sum() / denom;
    const bool track = want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        tape.set_backprop(oid, [tp, xid, oid, denom]() {
            const double g = tp->grad(oid).data[0] / denom;
            Tensor& dx = tp->grad(xid);
            for (size_t i = 0; i < dx.numel(); ++i) dx.data[i] += g;
        });
    }
    return Var{&tape, id};
}
}  // namespace detail

inline Var sum(Var x) { return detail::reduce(x, false); }
inline Var mean(Var x) { return detail::reduce(x, true); }

// Mean squared error against a constant target.
inline Var mse_loss(Var x, const Tensor& target) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    detail::check_same_shape(xv, target, "mse_loss");
    const double n = static_cast<double>(xv.numel());
    double acc = 0.0;
    for (size_t i = 0; i < xv.numel(); ++i) {
        const double d = xv.data[i] - target.data[i];
        acc += d * d;
    }
    Tensor out({1});
    out.data[0] = acc / n;
    const bool track = detail::want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        auto tgt = std::make_shared<Tensor>(target);
        tape.set_backprop(oid, [tp, xid, oid, tgt, n]() {
            const double g = tp->grad(oid).data[0] * 2.0 / n;
            const Tensor& xin = tp->value(xid);
            Tensor& dx = tp->grad(xid);
            for (size_t i = 0; i < dx.numel(); ++i) dx.data[i] += g * (xin.data[i] - tgt->data[i]);
        });
    }
    return Var{&tape, id};
}

// Mean absolute error against a constant target (subgradient 0 at zero).
inline Var l1_loss(Var x, const Tensor& target) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    detail::check_same_shape(xv, target, "l1_loss");
    const double n = static_cast<double>(xv.numel());
    double acc = 0.0;
    for (size_t i = 0; i < xv.numel(); ++i) acc += std::abs(xv.data[i] - target.data[i]);
    Tensor out({1});
    out.data[0] = acc / n;
    const bool track = detail::want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        auto tgt = std::make_shared<Tensor>(target);
        tape.set_backprop(oid, [tp, xid, oid, tgt, n]() {
            const double g = tp->grad(oid).data[0] / n;
            const Tensor& xin = tp->value(xid);
            Tensor& dx = tp->grad(xid);
            for (size_t i = 0; i < dx.numel(); ++i) {
                const double d = xin.data[i] - tgt->data[i];
                dx.data[i] += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
            }
        });
    }
    return Var{&tape, id};
}

// Numerically stable binary cross entropy on logits, mean over elements.
inline Var bce_with_logits(Var x, const Tensor& target) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    detail::check_same_shape(xv, target, "bce_with_logits");
    const double n = static_cast<double>(xv.numel());
    double acc = 0.0;
    for (size_t i = 0; i < xv.numel(); ++i) {
        const double z = xv.data[i], t = target.data[i];
        acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor out({1});
    out.data[0] = acc / n;
    const bool track = detail::want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        auto tgt = std::make_shared<Tensor>(target);
        tape.set_backprop(oid, [tp, xid, oid, tgt, n]() {
            const double g = tp->grad(oid).data[0] / n;
            const Tensor& xin = tp->value(xid);
            Tensor& dx = tp->grad(xid);
            for (size_t i = 0; i < dx.numel(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-xin.data[i]));
                dx.data[i] += g * (s - tgt->data[i]);
            }
        });
    }
    return Var{&tape, id};
}

// L1 restricted to mask>0 elements, normalized by the active count.
inline Var masked_l1(Var x, const Tensor& target, const Tensor& mask) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.val();
    detail::check_same_shape(xv, target, "masked_l1");
    detail::check_same_shape(xv, mask, "masked_l1(mask)");
    double count = 0.0;
    for (double m : mask.data)
        if (m > 0.0) count += 1.0;
    const double denom = count > 0.0 ? count : 1.0;
    double acc = 0.0;
    for (size_t i = 0; i < xv.numel(); ++i)
        if (mask.data[i] > 0.0) acc += std::abs(xv.data[i] - target.data[i]);
    Tensor out({1});
    out.data[0] = acc / denom;
    const bool track = detail::want_grad(x);
    size_t id = tape.push(std::move(out), track);
    if (track) {
        Tape* tp = &tape;
        size_t xid = x.id, oid = id;
        auto tgt = std::make_shared<Tensor>(target);
        auto msk = std::make_shared<Tensor>(mask);
        tape.set_backprop(oid, [tp, xid, oid, tgt, msk, denom]() {
            const double g = tp->grad(oid).data[0] / denom;
            const Tensor& xin = tp->value(xid);
            Tensor& dx = tp->grad(xid);
            for (size_t i = 0; i < dx.numel(); ++i) {
                if (msk->data[i] <= 0.0) continue;
                const double d = xin.data[i] - tgt->data[i];
                dx.data[i] += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
            }
        });
    }
    return Var{&tape, id};
}

}  // namespace invis
