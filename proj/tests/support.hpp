#pragma once

// Shared generators and independent reference implementations for tests.

#include <cmath>
#include <cstdint>
#include <deque>
#include <random>
#include <vector>

#include "owps/gradcheck.hpp"
#include "owps/image.hpp"
#include "owps/tensor.hpp"

namespace testing_support {

// Finite-difference settings. The float64 build checks at h = 1e-3 to 1e-4;
// single precision carries rounding noise near eps * |f| / h, so it uses a
// wider step and a tolerance above that floor.
#ifdef OWPS_DOUBLE
inline constexpr double kFdStep = 1e-3;
inline constexpr double kFdTol = 1e-4;
#else
inline constexpr double kFdStep = 1e-2;
inline constexpr double kFdTol = 1e-3;
#endif

inline owps::GradCheckOptions fd_options() {
    owps::GradCheckOptions o;
    o.h = kFdStep;
    return o;
}

class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
    bool coin(double p = 0.5) { return real(0.0, 1.0) < p; }
    std::uint64_t bits() { return rng_(); }

    std::vector<owps::Real> floats(std::size_t n, double lo, double hi) {
        std::vector<owps::Real> v(n);
        for (auto& x : v) x = static_cast<owps::Real>(real(lo, hi));
        return v;
    }
    owps::Tensor tensor(const owps::Shape& shape, double lo, double hi) {
        return owps::Tensor::from_data(shape, floats(static_cast<std::size_t>(owps::shape_numel(shape)), lo, hi));
    }
    owps::BinaryMask mask(int h, int w, double density) {
        owps::BinaryMask m(h, w);
        for (auto& v : m.data) v = coin(density) ? 1 : 0;
        return m;
    }
    // Union of random axis-aligned rectangles: blobby masks for morphology.
    owps::BinaryMask blobs(int h, int w, int count) {
        owps::BinaryMask m(h, w);
        for (int i = 0; i < count; ++i) {
            const int y0 = integer(0, h - 1), x0 = integer(0, w - 1);
            const int y1 = std::min(h - 1, y0 + integer(0, h / 3)), x1 = std::min(w - 1, x0 + integer(0, w / 3));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) m.at(y, x) = 1;
            }
        }
        return m;
    }

private:
    std::mt19937_64 rng_;
};

// Direct nested-loop cross-correlation, accumulated in double.
inline std::vector<double> naive_conv2d(const owps::Tensor& x, const owps::Tensor& k, const owps::Tensor& bias,
                                        int stride, int pad, owps::Shape& out_shape) {
    const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto o = k.dim(0), ks = k.dim(2);
    const auto oh = (h + 2 * pad - ks) / stride + 1, ow = (w + 2 * pad - ks) / stride + 1;
    out_shape = {n, o, oh, ow};
    std::vector<double> out(static_cast<std::size_t>(n * o * oh * ow), 0.0);
    const auto xd = x.data();
    const auto kd = k.data();
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oc = 0; oc < o; ++oc)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xx = 0; xx < ow; ++xx) {
                    double acc = bias.defined() ? bias.data()[static_cast<std::size_t>(oc)] : 0.0;
                    for (std::int64_t ic = 0; ic < c; ++ic)
                        for (std::int64_t ky = 0; ky < ks; ++ky)
                            for (std::int64_t kx = 0; kx < ks; ++kx) {
                                const auto iy = y * stride + ky - pad, ix = xx * stride + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += static_cast<double>(xd[static_cast<std::size_t>(((b * c + ic) * h + iy) * w + ix)]) *
                                       kd[static_cast<std::size_t>(((oc * c + ic) * ks + ky) * ks + kx)];
                            }
                    out[static_cast<std::size_t>(((b * o + oc) * oh + y) * ow + xx)] = acc;
                }
    return out;
}

// Breadth-first flood fill labelling (4-connectivity), raster-order seeds.
inline owps::InstanceMap flood_fill_labels(const owps::BinaryMask& m) {
    owps::InstanceMap out(m.height, m.width);
    int next = 0;
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            if (!m.at(y, x) || out.at(y, x)) continue;
            ++next;
            std::deque<std::pair<int, int>> queue{{y, x}};
            out.at(y, x) = static_cast<std::uint16_t>(next);
            while (!queue.empty()) {
                auto [cy, cx] = queue.front();
                queue.pop_front();
                const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
                for (int d = 0; d < 4; ++d) {
                    const int ny = cy + dy[d], nx = cx + dx[d];
                    if (ny < 0 || ny >= m.height || nx < 0 || nx >= m.width) continue;
                    if (!m.at(ny, nx) || out.at(ny, nx)) continue;
                    out.at(ny, nx) = static_cast<std::uint16_t>(next);
                    queue.emplace_back(ny, nx);
                }
            }
        }
    }
    out.count = next;
    return out;
}

// Erosion/dilation straight from the definition over the in-bounds window.
inline owps::BinaryMask brute_morph(const owps::BinaryMask& m, int size, bool erode) {
    const int r = size / 2;
    owps::BinaryMask out(m.height, m.width);
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            bool all = true, any = false;
            for (int dy = -r; dy <= r; ++dy) {
                for (int dx = -r; dx <= r; ++dx) {
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= m.height || nx < 0 || nx >= m.width) continue;
                    all = all && m.at(ny, nx);
                    any = any || m.at(ny, nx);
                }
            }
            out.at(y, x) = (erode ? all : any) ? 1 : 0;
        }
    }
    return out;
}

inline double brute_dice(const owps::BinaryMask& p, const owps::BinaryMask& t) {
    double inter = 0, sp = 0, st = 0;
    for (int y = 0; y < p.height; ++y) {
        for (int x = 0; x < p.width; ++x) {
            inter += (p.at(y, x) == 1 && t.at(y, x) == 1) ? 1 : 0;
            sp += p.at(y, x);
            st += t.at(y, x);
        }
    }
    return (2 * inter + 1e-6) / (sp + st + 1e-6);
}

}  // namespace testing_support
