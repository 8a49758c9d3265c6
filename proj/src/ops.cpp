#include "owps/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace owps::ops {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;
using MatRM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using MapA = Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>>;
using CMapA = Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>;

bool needs(const ImplPtr& p) { return p && p->requires_grad; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw Error(ErrorKind::ShapeMismatch, std::string(what) + ": " + shape_str(a.shape()) + " vs " +
                                                  shape_str(b.shape()));
    }
}

void require_rank(const Tensor& x, std::size_t rank, const char* what) {
    if (x.rank() != rank) {
        throw Error(ErrorKind::InvalidShape, std::string(what) + " expects rank " + std::to_string(rank) +
                                                 ", got " + shape_str(x.shape()));
    }
}

constexpr Real kSigmoidLo = std::numeric_limits<Real>::min();
const Real kSigmoidHi = std::nextafter(1.0f, 0.0f);

}  // namespace

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "elementwise");
    const std::size_t n = a.numel();
    const Real* pa = a.data().data();
    const Real* pb = b.data().data();
    Buffer out(n);
    switch (op) {
        case BinaryOp::Add:
            for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
            break;
        case BinaryOp::Sub:
            for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
            break;
        case BinaryOp::Mul:
            for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
            break;
        case BinaryOp::Div:
            for (std::size_t i = 0; i < n; ++i) {
                if (std::fabs(pb[i]) < 1e-12f) {
                    throw Error(ErrorKind::Domain, "division by ~0 at flat index " + std::to_string(i));
                }
                out[i] = pa[i] / pb[i];
            }
            break;
    }
    Tensor y = make_result(a.shape(), std::move(out));
    ImplPtr ia = a.impl(), ib = b.impl();
    Tape::current().record({a, b}, y, [op, ia, ib, n](std::span<const Real> g) {
        const Real* va = ia->data.data();
        const Real* vb = ib->data.data();
        if (needs(ia)) {
            Real* ga = ia->grad_buffer();
            switch (op) {
                case BinaryOp::Add:
                case BinaryOp::Sub:
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                    break;
                case BinaryOp::Mul:
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
                    break;
                case BinaryOp::Div:
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / vb[i];
                    break;
            }
        }
        if (needs(ib)) {
            Real* gb = ib->grad_buffer();
            switch (op) {
                case BinaryOp::Add:
                    for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                    break;
                case BinaryOp::Sub:
                    for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                    break;
                case BinaryOp::Mul:
                    for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
                    break;
                case BinaryOp::Div:
                    for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    break;
            }
        }
    });
    return y;
}

Tensor elementwise(UnaryOp op, const Tensor& x) {
    const std::size_t n = x.numel();
    const Real* px = x.data().data();
    Buffer out(n);
    switch (op) {
        case UnaryOp::Relu:
            for (std::size_t i = 0; i < n; ++i) out[i] = px[i] > 0.0f ? px[i] : 0.0f;
            break;
        case UnaryOp::Sigmoid: {
            MapA o(out.data(), static_cast<Eigen::Index>(n));
            o = CMapA(px, static_cast<Eigen::Index>(n)).logistic().max(kSigmoidLo).min(kSigmoidHi);
            break;
        }
        case UnaryOp::Log:
            for (std::size_t i = 0; i < n; ++i) {
                if (!(px[i] > 0.0f)) {
                    throw Error(ErrorKind::Domain, "log of non-positive value at flat index " + std::to_string(i));
                }
                out[i] = std::log(px[i]);
            }
            break;
        case UnaryOp::Square:
            for (std::size_t i = 0; i < n; ++i) out[i] = px[i] * px[i];
            break;
        case UnaryOp::Negate:
            for (std::size_t i = 0; i < n; ++i) out[i] = -px[i];
            break;
    }
    Tensor y = make_result(x.shape(), std::move(out));
    ImplPtr ix = x.impl();
    std::weak_ptr<TensorImpl> wy = y.impl();
    Tape::current().record({x}, y, [op, ix, wy, n](std::span<const Real> g) {
        if (!needs(ix)) return;
        Real* gx = ix->grad_buffer();
        const Real* vx = ix->data.data();
        switch (op) {
            case UnaryOp::Relu:
                for (std::size_t i = 0; i < n; ++i) gx[i] += vx[i] > 0.0f ? g[i] : 0.0f;
                break;
            case UnaryOp::Sigmoid: {
                const Real* vy = wy.lock()->data.data();
                for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * vy[i] * (1.0f - vy[i]);
                break;
            }
            case UnaryOp::Log:
                for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / vx[i];
                break;
            case UnaryOp::Square:
                for (std::size_t i = 0; i < n; ++i) gx[i] += 2.0f * vx[i] * g[i];
                break;
            case UnaryOp::Negate:
                for (std::size_t i = 0; i < n; ++i) gx[i] -= g[i];
                break;
        }
    });
    return y;
}

Tensor affine_scalar(const Tensor& x, Real scale, Real shift) {
    const std::size_t n = x.numel();
    Buffer out(n);
    const Real* px = x.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = px[i] * scale + shift;
    Tensor y = make_result(x.shape(), std::move(out));
    ImplPtr ix = x.impl();
    Tape::current().record({x}, y, [ix, scale, n](std::span<const Real> g) {
        if (!needs(ix)) return;
        Real* gx = ix->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * scale;
    });
    return y;
}

Tensor pow_scalar(const Tensor& x, Real exponent) {
    const std::size_t n = x.numel();
    Buffer out(n);
    const Real* px = x.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        if (px[i] < 0.0f || (px[i] == 0.0f && exponent < 1.0f)) {
            throw Error(ErrorKind::Domain, "pow of value " + std::to_string(px[i]) + " with exponent " +
                                               std::to_string(exponent));
        }
        out[i] = std::pow(px[i], exponent);
    }
    Tensor y = make_result(x.shape(), std::move(out));
    ImplPtr ix = x.impl();
    Tape::current().record({x}, y, [ix, exponent, n](std::span<const Real> g) {
        if (!needs(ix)) return;
        Real* gx = ix->grad_buffer();
        const Real* vx = ix->data.data();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * exponent * std::pow(vx[i], exponent - 1.0f);
    });
    return y;
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
    const std::size_t n = x.numel();
    Buffer out(n);
    const Real* px = x.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = std::clamp(px[i], lo, hi);
    Tensor y = make_result(x.shape(), std::move(out));
    ImplPtr ix = x.impl();
    Tape::current().record({x}, y, [ix, lo, hi, n](std::span<const Real> g) {
        if (!needs(ix)) return;
        Real* gx = ix->grad_buffer();
        const Real* vx = ix->data.data();
        for (std::size_t i = 0; i < n; ++i) {
            if (vx[i] >= lo && vx[i] <= hi) gx[i] += g[i];
        }
    });
    return y;
}

Tensor scale(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw Error(ErrorKind::InvalidShape, "scale factor must have one element");
    const Real k = s.item();
    const std::size_t n = x.numel();
    Buffer out(n);
    const Real* px = x.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = px[i] * k;
    Tensor y = make_result(x.shape(), std::move(out));
    ImplPtr ix = x.impl(), is = s.impl();
    Tape::current().record({x, s}, y, [ix, is, n](std::span<const Real> g) {
        if (needs(ix)) {
            const Real k = is->data[0];
            Real* gx = ix->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * k;
        }
        if (needs(is)) {
            const Real* vx = ix->data.data();
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(g[i]) * vx[i];
            is->grad_buffer()[0] += static_cast<Real>(acc);
        }
    });
    return y;
}

Tensor reduce_sum(const Tensor& x) {
    double acc = 0.0;
    for (Real v : x.data()) acc += v;
    Tensor y = make_result({1}, {static_cast<Real>(acc)});
    ImplPtr ix = x.impl();
    Tape::current().record({x}, y, [ix](std::span<const Real> g) {
        if (!needs(ix)) return;
        Real* gx = ix->grad_buffer();
        const std::size_t n = ix->data.size();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
    });
    return y;
}

Tensor mean(const Tensor& x) { return mul_scalar(reduce_sum(x), 1.0f / static_cast<Real>(x.numel())); }

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
        throw Error(ErrorKind::InvalidShape, "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    Tensor y = make_result(shape, Buffer(x.data().begin(), x.data().end()));
    ImplPtr ix = x.impl();
    Tape::current().record({x}, y, [ix](std::span<const Real> g) {
        if (!needs(ix)) return;
        Real* gx = ix->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return y;
}

// --- convolution -------------------------------------------------------------

namespace {

struct ConvGeom {
    std::int64_t c, h, w, k, stride, pad, ho, wo;
    std::int64_t rows() const { return c * k * k; }
    std::int64_t cols() const { return ho * wo; }
};

void im2col(const Real* x, const ConvGeom& g, Real* cols) {
    const std::int64_t plane = g.ho * g.wo;
    for (std::int64_t c = 0; c < g.c; ++c) {
        for (std::int64_t ki = 0; ki < g.k; ++ki) {
            for (std::int64_t kj = 0; kj < g.k; ++kj) {
                Real* row = cols + ((c * g.k + ki) * g.k + kj) * plane;
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ki;
                    Real* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, 0.0f);
                        continue;
                    }
                    const Real* src = x + (c * g.h + iy) * g.w;
                    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kj;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im(const Real* cols, const ConvGeom& g, Real* dx) {
    const std::int64_t plane = g.ho * g.wo;
    for (std::int64_t c = 0; c < g.c; ++c) {
        for (std::int64_t ki = 0; ki < g.k; ++ki) {
            for (std::int64_t kj = 0; kj < g.k; ++kj) {
                const Real* row = cols + ((c * g.k + ki) * g.k + kj) * plane;
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.h) continue;
                    Real* dst = dx + (c * g.h + iy) * g.w;
                    const Real* src = row + oy * g.wo;
                    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kj;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
    require_rank(x, 4, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    if (stride < 1 || padding < 0) throw Error(ErrorKind::InvalidShape, "conv2d stride/padding");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t o = kernel.dim(0), k = kernel.dim(2);
    if (kernel.dim(1) != c) {
        throw Error(ErrorKind::ShapeMismatch, "conv2d kernel expects " + std::to_string(kernel.dim(1)) +
                                                  " channels, input has " + std::to_string(c));
    }
    if (kernel.dim(3) != k) throw Error(ErrorKind::InvalidShape, "conv2d kernel must be square");
    if (bias.defined() && (bias.numel() != static_cast<std::size_t>(o))) {
        throw Error(ErrorKind::ShapeMismatch, "conv2d bias extent");
    }
    const ConvGeom g{c, h, w, k, stride, padding, (h + 2 * padding - k) / stride + 1,
                     (w + 2 * padding - k) / stride + 1};
    if (g.ho < 1 || g.wo < 1 || h + 2 * padding < k || w + 2 * padding < k) {
        throw Error(ErrorKind::InvalidShape, "conv2d output extent < 1");
    }
    const bool direct = (k == 1 && stride == 1 && padding == 0);
    const std::int64_t rows = g.rows(), plane = g.cols();

    Buffer out(static_cast<std::size_t>(n * o * plane));
    Buffer cols(direct ? 0 : static_cast<std::size_t>(rows * plane));
    CMapM wmat(kernel.data().data(), o, rows);
    for (std::int64_t b = 0; b < n; ++b) {
        const Real* xb = x.data().data() + b * c * h * w;
        const Real* src = xb;
        if (!direct) {
            im2col(xb, g, cols.data());
            src = cols.data();
        }
        MapM(out.data() + b * o * plane, o, plane).noalias() = wmat * CMapM(src, rows, plane);
        if (bias.defined()) {
            for (std::int64_t oc = 0; oc < o; ++oc) {
                Real* dst = out.data() + (b * o + oc) * plane;
                const Real bv = bias.data()[static_cast<std::size_t>(oc)];
                for (std::int64_t i = 0; i < plane; ++i) dst[i] += bv;
            }
        }
    }

    Tensor y = make_result({n, o, g.ho, g.wo}, std::move(out));
    ImplPtr ix = x.impl(), ik = kernel.impl(), ib = bias.defined() ? bias.impl() : nullptr;
    Tape::current().record({x, kernel, bias}, y, [ix, ik, ib, g, n, o, direct](std::span<const Real> gout) {
        const std::int64_t rows = g.rows(), plane = g.cols();
        Buffer cols(direct ? 0 : static_cast<std::size_t>(rows * plane));
        Buffer dcols(static_cast<std::size_t>(rows * plane));
        CMapM wmat(ik->data.data(), o, rows);
        for (std::int64_t b = 0; b < n; ++b) {
            CMapM gb(gout.data() + b * o * plane, o, plane);
            if (needs(ik)) {
                const Real* src = ix->data.data() + b * g.c * g.h * g.w;
                if (!direct) {
                    im2col(src, g, cols.data());
                    src = cols.data();
                }
                MapM(ik->grad_buffer(), o, rows).noalias() += gb * CMapM(src, rows, plane).transpose();
            }
            if (ib && ib->requires_grad) {
                Real* gbias = ib->grad_buffer();
                for (std::int64_t oc = 0; oc < o; ++oc) {
                    double acc = 0.0;
                    const Real* row = gout.data() + (b * o + oc) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) acc += row[i];
                    gbias[oc] += static_cast<Real>(acc);
                }
            }
            if (needs(ix)) {
                Real* dxb = ix->grad_buffer() + b * g.c * g.h * g.w;
                if (direct) {
                    MapM(dxb, rows, plane).noalias() += wmat.transpose() * gb;
                } else {
                    MapM(dcols.data(), rows, plane).noalias() = wmat.transpose() * gb;
                    col2im(dcols.data(), g, dxb);
                }
            }
        }
    });
    return y;
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride) {
    require_rank(x, 4, "transposed_conv2d input");
    require_rank(kernel, 4, "transposed_conv2d kernel");
    if (stride != 2 || kernel.dim(2) != 2 || kernel.dim(3) != 2) {
        throw Error(ErrorKind::InvalidShape, "transposed_conv2d supports only stride 2 with a 2x2 kernel");
    }
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (kernel.dim(0) != c) throw Error(ErrorKind::ShapeMismatch, "transposed_conv2d channel mismatch");
    const std::int64_t o = kernel.dim(1);
    if (bias.defined() && bias.numel() != static_cast<std::size_t>(o)) {
        throw Error(ErrorKind::ShapeMismatch, "transposed_conv2d bias extent");
    }
    const std::int64_t hw = h * w, oh = 2 * h, ow = 2 * w;
    Buffer out(static_cast<std::size_t>(n * o * oh * ow));
    Buffer ymat(static_cast<std::size_t>(o * 4 * hw));
    CMapM kmat(kernel.data().data(), c, o * 4);
    for (std::int64_t b = 0; b < n; ++b) {
        MapM(ymat.data(), o * 4, hw).noalias() = kmat.transpose() * CMapM(x.data().data() + b * c * hw, c, hw);
        for (std::int64_t oc = 0; oc < o; ++oc) {
            const Real bv = bias.defined() ? bias.data()[static_cast<std::size_t>(oc)] : 0.0f;
            Real* dst = out.data() + (b * o + oc) * oh * ow;
            for (int t = 0; t < 4; ++t) {
                const int di = t / 2, dj = t % 2;
                const Real* src = ymat.data() + (oc * 4 + t) * hw;
                for (std::int64_t i = 0; i < h; ++i) {
                    for (std::int64_t j = 0; j < w; ++j) dst[(2 * i + di) * ow + 2 * j + dj] = src[i * w + j] + bv;
                }
            }
        }
    }
    Tensor y = make_result({n, o, oh, ow}, std::move(out));
    ImplPtr ix = x.impl(), ik = kernel.impl(), ib = bias.defined() ? bias.impl() : nullptr;
    Tape::current().record({x, kernel, bias}, y, [ix, ik, ib, n, c, h, w, o](std::span<const Real> gout) {
        const std::int64_t hw = h * w, oh = 2 * h, ow = 2 * w;
        Buffer dy(static_cast<std::size_t>(o * 4 * hw));
        for (std::int64_t b = 0; b < n; ++b) {
            for (std::int64_t oc = 0; oc < o; ++oc) {
                const Real* src = gout.data() + (b * o + oc) * oh * ow;
                for (int t = 0; t < 4; ++t) {
                    const int di = t / 2, dj = t % 2;
                    Real* dst = dy.data() + (oc * 4 + t) * hw;
                    for (std::int64_t i = 0; i < h; ++i) {
                        for (std::int64_t j = 0; j < w; ++j) dst[i * w + j] = src[(2 * i + di) * ow + 2 * j + dj];
                    }
                }
                if (ib && ib->requires_grad) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < oh * ow; ++i) acc += src[i];
                    ib->grad_buffer()[oc] += static_cast<Real>(acc);
                }
            }
            CMapM dym(dy.data(), o * 4, hw);
            if (needs(ik)) {
                MapM(ik->grad_buffer(), c, o * 4).noalias() +=
                    CMapM(ix->data.data() + b * c * hw, c, hw) * dym.transpose();
            }
            if (needs(ix)) {
                MapM(ix->grad_buffer() + b * c * hw, c, hw).noalias() += CMapM(ik->data.data(), c, o * 4) * dym;
            }
        }
    });
    return y;
}

Tensor maxpool2d(const Tensor& x, int window, int stride) {
    require_rank(x, 4, "maxpool2d input");
    if (window < 1 || stride != window) throw Error(ErrorKind::InvalidShape, "maxpool2d needs window == stride");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % window != 0 || w % window != 0) {
        throw Error(ErrorKind::InvalidShape, "maxpool2d extents " + shape_str(x.shape()) +
                                                 " not divisible by " + std::to_string(window));
    }
    const std::int64_t oh = h / window, ow = w / window;
    Buffer out(static_cast<std::size_t>(n * c * oh * ow));
    auto argmax = std::make_shared<std::vector<std::int32_t>>(out.size());
    const Real* px = x.data().data();
    for (std::int64_t p = 0; p < n * c; ++p) {
        const Real* plane = px + p * h * w;
        for (std::int64_t i = 0; i < oh; ++i) {
            for (std::int64_t j = 0; j < ow; ++j) {
                std::int64_t best = (i * window) * w + j * window;
                for (int di = 0; di < window; ++di) {
                    for (int dj = 0; dj < window; ++dj) {
                        const std::int64_t idx = (i * window + di) * w + j * window + dj;
                        if (plane[idx] > plane[best]) best = idx;  // strict: first index wins ties
                    }
                }
                const std::size_t o = static_cast<std::size_t>((p * oh + i) * ow + j);
                out[o] = plane[best];
                (*argmax)[o] = static_cast<std::int32_t>(best);
            }
        }
    }
    Tensor y = make_result({n, c, oh, ow}, std::move(out));
    ImplPtr ix = x.impl();
    Tape::current().record({x}, y, [ix, argmax, n, c, h, w, oh, ow](std::span<const Real> g) {
        if (!needs(ix)) return;
        Real* gx = ix->grad_buffer();
        for (std::int64_t p = 0; p < n * c; ++p) {
            for (std::int64_t q = 0; q < oh * ow; ++q) {
                const std::size_t o = static_cast<std::size_t>(p * oh * ow + q);
                gx[p * h * w + (*argmax)[o]] += g[o];
            }
        }
    });
    return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (!b.defined()) return a;
    if (!a.defined()) return b;
    require_rank(a, 4, "concat_channels");
    require_rank(b, 4, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw Error(ErrorKind::ShapeMismatch, "concat_channels " + shape_str(a.shape()) + " with " +
                                                  shape_str(b.shape()));
    }
    const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Buffer out(static_cast<std::size_t>(n * (ca + cb) * hw));
    for (std::int64_t s = 0; s < n; ++s) {
        std::copy_n(a.data().data() + s * ca * hw, ca * hw, out.data() + s * (ca + cb) * hw);
        std::copy_n(b.data().data() + s * cb * hw, cb * hw, out.data() + (s * (ca + cb) + ca) * hw);
    }
    Tensor y = make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out));
    ImplPtr ia = a.impl(), ib = b.impl();
    Tape::current().record({a, b}, y, [ia, ib, n, ca, cb, hw](std::span<const Real> g) {
        for (std::int64_t s = 0; s < n; ++s) {
            const Real* src = g.data() + s * (ca + cb) * hw;
            if (needs(ia)) {
                Real* dst = ia->grad_buffer() + s * ca * hw;
                for (std::int64_t i = 0; i < ca * hw; ++i) dst[i] += src[i];
            }
            if (needs(ib)) {
                Real* dst = ib->grad_buffer() + s * cb * hw;
                for (std::int64_t i = 0; i < cb * hw; ++i) dst[i] += src[ca * hw + i];
            }
        }
    });
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
    require_rank(a, 3, "matmul");
    require_rank(b, 3, "matmul");
    if (a.dim(0) != b.dim(0)) throw Error(ErrorKind::ShapeMismatch, "matmul batch extents");
    const std::int64_t batch = a.dim(0);
    const std::int64_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
    const std::int64_t m = transpose_a ? ac : ar, ka = transpose_a ? ar : ac;
    const std::int64_t kb = transpose_b ? bc : br, nn = transpose_b ? br : bc;
    if (ka != kb) {
        throw Error(ErrorKind::ShapeMismatch, "matmul inner extents " + shape_str(a.shape()) + " x " +
                                                  shape_str(b.shape()));
    }
    Buffer out(static_cast<std::size_t>(batch * m * nn));
    for (std::int64_t s = 0; s < batch; ++s) {
        CMapM am(a.data().data() + s * ar * ac, ar, ac);
        CMapM bm(b.data().data() + s * br * bc, br, bc);
        MapM om(out.data() + s * m * nn, m, nn);
        if (transpose_a && transpose_b) om.noalias() = am.transpose() * bm.transpose();
        else if (transpose_a) om.noalias() = am.transpose() * bm;
        else if (transpose_b) om.noalias() = am * bm.transpose();
        else om.noalias() = am * bm;
    }
    Tensor y = make_result({batch, m, nn}, std::move(out));
    ImplPtr ia = a.impl(), ib = b.impl();
    Tape::current().record({a, b}, y, [=](std::span<const Real> g) {
        for (std::int64_t s = 0; s < batch; ++s) {
            CMapM gm(g.data() + s * m * nn, m, nn);
            CMapM am(ia->data.data() + s * ar * ac, ar, ac);
            CMapM bm(ib->data.data() + s * br * bc, br, bc);
            if (needs(ia)) {
                MapM ga(ia->grad_buffer() + s * ar * ac, ar, ac);
                // d(op(A)) = G * op(B)^T
                if (!transpose_a && !transpose_b) ga.noalias() += gm * bm.transpose();
                else if (!transpose_a && transpose_b) ga.noalias() += gm * bm;
                else if (transpose_a && !transpose_b) ga.noalias() += bm * gm.transpose();
                else ga.noalias() += bm.transpose() * gm.transpose();
            }
            if (needs(ib)) {
                MapM gb(ib->grad_buffer() + s * br * bc, br, bc);
                // d(op(B)) = op(A)^T * G
                if (!transpose_a && !transpose_b) gb.noalias() += am.transpose() * gm;
                else if (transpose_a && !transpose_b) gb.noalias() += am * gm;
                else if (!transpose_a && transpose_b) gb.noalias() += gm.transpose() * am;
                else gb.noalias() += gm.transpose() * am.transpose();
            }
        }
    });
    return y;
}

Tensor softmax_lastdim(const Tensor& x) {
    const std::int64_t len = x.shape().back();
    const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / len;
    Buffer out(x.numel());
    for (std::int64_t r = 0; r < rows; ++r) {
        CMapA src(x.data().data() + r * len, len);
        MapA dst(out.data() + r * len, len);
        const Real mx = src.maxCoeff();
        dst = (src - mx).exp();
        const double total = dst.cast<double>().sum();
        dst *= static_cast<Real>(1.0 / total);
    }
    Tensor y = make_result(x.shape(), std::move(out));
    ImplPtr ix = x.impl();
    std::weak_ptr<TensorImpl> wy = y.impl();
    Tape::current().record({x}, y, [ix, wy, rows, len](std::span<const Real> g) {
        if (!needs(ix)) return;
        const Real* vy = wy.lock()->data.data();
        Real* gx = ix->grad_buffer();
        for (std::int64_t r = 0; r < rows; ++r) {
            CMapA yr(vy + r * len, len);
            CMapA gr(g.data() + r * len, len);
            const Real dot = static_cast<Real>((yr * gr).cast<double>().sum());
            MapA(gx + r * len, len) += yr * (gr - dot);
        }
    });
    return y;
}

}  // namespace owps::ops

namespace owps::ops {

namespace {

// Scores of query position i against every key position: s_j = q_i . k_j,
// with keys in their native d x len layout.
void attention_scores(const Real* q, const Real* k, std::int64_t d, std::int64_t len, std::int64_t i,
                      Real* scores) {
    MapA s(scores, len);
    s = q[i] * CMapA(k, len);
    for (std::int64_t a = 1; a < d; ++a) s += q[a * len + i] * CMapA(k + a * len, len);
}

}  // namespace

// Row-at-a-time kernel: the per-row working set (one score row plus the key
// and value planes) stays in cache for the small d and c used by the network.
Tensor fused_attention(const Tensor& query, const Tensor& key, const Tensor& value) {
    require_rank(query, 3, "fused_attention query");
    require_rank(key, 3, "fused_attention key");
    require_rank(value, 3, "fused_attention value");
    const std::int64_t n = query.dim(0), d = query.dim(1), len = query.dim(2), c = value.dim(1);
    if (key.shape() != query.shape() || value.dim(0) != n || value.dim(2) != len) {
        throw Error(ErrorKind::ShapeMismatch, "fused_attention " + shape_str(query.shape()) + ", " +
                                                  shape_str(key.shape()) + ", " + shape_str(value.shape()));
    }
    Buffer out(static_cast<std::size_t>(n * c * len));
    auto lse = std::make_shared<Buffer>(static_cast<std::size_t>(n * len));
    Buffer probs(static_cast<std::size_t>(len));
    MapA p(probs.data(), len);
    Eigen::Matrix<Real, Eigen::Dynamic, 1> acc(c);
    for (std::int64_t s = 0; s < n; ++s) {
        const Real* q = query.data().data() + s * d * len;
        const Real* k = key.data().data() + s * d * len;
        const Real* v = value.data().data() + s * c * len;
        Real* o = out.data() + s * c * len;
        for (std::int64_t i = 0; i < len; ++i) {
            attention_scores(q, k, d, len, i, probs.data());
            const Real mx = p.maxCoeff();
            p = (p - mx).exp();
            const Real total = p.sum();
            acc.noalias() = CMapM(v, c, len) * p.matrix();
            for (std::int64_t ch = 0; ch < c; ++ch) o[ch * len + i] = acc[ch] / total;
            (*lse)[static_cast<std::size_t>(s * len + i)] = mx + std::log(total);
        }
    }
    Tensor y = make_result({n, c, len}, std::move(out));
    ImplPtr iq = query.impl(), ik = key.impl(), iv = value.impl();
    std::weak_ptr<TensorImpl> wy = y.impl();
    Tape::current().record({query, key, value}, y, [=](std::span<const Real> g) {
        const Real* vy = wy.lock()->data.data();
        Buffer probs(static_cast<std::size_t>(len)), dscores(static_cast<std::size_t>(len));
        Buffer dk(static_cast<std::size_t>(d * len)), dv(static_cast<std::size_t>(c * len));
        Buffer dq(static_cast<std::size_t>(d * len));
        MapA p(probs.data(), len), ds(dscores.data(), len);
        Eigen::Matrix<Real, Eigen::Dynamic, 1> gcol(c);
        for (std::int64_t s = 0; s < n; ++s) {
            const Real* q = iq->data.data() + s * d * len;
            const Real* k = ik->data.data() + s * d * len;
            const Real* v = iv->data.data() + s * c * len;
            const Real* go = g.data() + s * c * len;
            const Real* yo = vy + s * c * len;
            std::fill(dk.begin(), dk.end(), 0.0f);
            std::fill(dv.begin(), dv.end(), 0.0f);
            for (std::int64_t i = 0; i < len; ++i) {
                attention_scores(q, k, d, len, i, probs.data());
                p = (p - (*lse)[static_cast<std::size_t>(s * len + i)]).exp();
                // dP_j = sum_c g_ci v_cj ; sum_j dP_j P_j = g_i . out_i
                Real dot = 0.0f;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    gcol[ch] = go[ch * len + i];
                    dot += gcol[ch] * yo[ch * len + i];
                }
                ds.matrix().noalias() = CMapM(v, c, len).transpose() * gcol;
                MapM(dv.data(), c, len).noalias() += gcol * p.matrix().transpose();
                ds = p * (ds - dot);
                for (std::int64_t a = 0; a < d; ++a) {
                    dq[a * len + i] = (ds * CMapA(k + a * len, len)).sum();
                    MapA(dk.data() + a * len, len) += q[a * len + i] * ds;
                }
            }
            auto accumulate = [&](const ImplPtr& impl, const Buffer& src, std::int64_t ch) {
                if (!needs(impl)) return;
                Real* dst = impl->grad_buffer() + s * ch * len;
                for (std::int64_t i = 0; i < ch * len; ++i) dst[i] += src[i];
            };
            accumulate(iq, dq, d);
            accumulate(ik, dk, d);
            accumulate(iv, dv, c);
        }
    });
    return y;
}

}  // namespace owps::ops
