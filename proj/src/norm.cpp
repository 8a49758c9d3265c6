#include "owps/norm.hpp"

#include <cmath>

namespace owps::norm {

std::string to_string(Variant v) {
    switch (v) {
        case Variant::None: return "none";
        case Variant::BN: return "BN";
        case Variant::IN: return "IN";
        case Variant::IN_BN: return "IN-BN";
        case Variant::BN_IN: return "BN-IN";
    }
    return "none";
}

Variant parse_variant(const std::string& name) {
    if (name == "none") return Variant::None;
    if (name == "BN") return Variant::BN;
    if (name == "IN") return Variant::IN;
    if (name == "IN-BN") return Variant::IN_BN;
    if (name == "BN-IN") return Variant::BN_IN;
    throw Error(ErrorKind::InvalidConfig, "norm: unknown variant '" + name + "'");
}

void NormConfig::validate() const {
    if (!(eps > 0.0f)) throw Error(ErrorKind::InvalidConfig, "norm.eps must be > 0");
    if (!(momentum > 0.0f && momentum < 1.0f)) throw Error(ErrorKind::InvalidConfig, "norm.momentum must be in (0,1)");
}

RunningStats RunningStats::create(std::int64_t channels) {
    return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0f), Tensor::zeros({1})};
}

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

void require_nchw(const Tensor& x, const char* what) {
    if (x.rank() != 4) throw Error(ErrorKind::InvalidShape, std::string(what) + " expects NCHW, got " + shape_str(x.shape()));
}

// Normalizes groups of elements. Group g covers, for each sample n in
// [0, outer), the contiguous run at offset (n * stride + g * len).
struct Grouping {
    std::int64_t groups, outer, stride, len;
    std::int64_t count() const { return outer * len; }
};

Grouping per_channel(const Tensor& x) {
    const std::int64_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
    return {c, x.dim(0), c * hw, hw};
}

Grouping per_plane(const Tensor& x) {
    const std::int64_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    return {planes, 1, 0, hw};
}

template <typename Fn>
void for_group(const Grouping& g, std::int64_t group, Fn&& fn) {
    for (std::int64_t n = 0; n < g.outer; ++n) {
        const std::int64_t base = n * g.stride + group * g.len;
        for (std::int64_t i = 0; i < g.len; ++i) fn(base + i);
    }
}

// y = (x - mean) * invstd per group. With `batch_stats` false, mean/invstd
// are fixed constants and the backward pass is a plain rescale.
Tensor normalize_groups(const Tensor& x, const Grouping& g, Buffer mean, Buffer invstd,
                        bool batch_stats) {
    const Real* px = x.data().data();
    Buffer out(x.numel());
    for (std::int64_t k = 0; k < g.groups; ++k) {
        const Real m = mean[k], s = invstd[k];
        for_group(g, k, [&](std::int64_t i) { out[i] = (px[i] - m) * s; });
    }
    Tensor y = make_result(x.shape(), std::move(out));
    ImplPtr ix = x.impl();
    std::weak_ptr<TensorImpl> wy = y.impl();
    Tape::current().record({x}, y, [ix, wy, g, invstd = std::move(invstd), batch_stats](std::span<const Real> dy) {
        if (!ix->requires_grad) return;
        Real* dx = ix->grad_buffer();
        const Real* xhat = wy.lock()->data.data();
        const double count = static_cast<double>(g.count());
        for (std::int64_t k = 0; k < g.groups; ++k) {
            const double s = invstd[k];
            if (!batch_stats) {
                for_group(g, k, [&](std::int64_t i) { dx[i] += static_cast<Real>(dy[i] * s); });
                continue;
            }
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for_group(g, k, [&](std::int64_t i) {
                sum_dy += dy[i];
                sum_dy_xhat += static_cast<double>(dy[i]) * xhat[i];
            });
            const double mean_dy = sum_dy / count, mean_dy_xhat = sum_dy_xhat / count;
            for_group(g, k, [&](std::int64_t i) {
                dx[i] += static_cast<Real>(s * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat));
            });
        }
    });
    return y;
}

struct Moments {
    std::vector<double> mean, var;  // biased variance
};

Moments moments(const Tensor& x, const Grouping& g) {
    const Real* px = x.data().data();
    Moments m{std::vector<double>(g.groups), std::vector<double>(g.groups)};
    const double count = static_cast<double>(g.count());
    for (std::int64_t k = 0; k < g.groups; ++k) {
        double sum = 0.0;
        for_group(g, k, [&](std::int64_t i) { sum += px[i]; });
        const double mu = sum / count;
        double sq = 0.0;
        for_group(g, k, [&](std::int64_t i) {
            const double d = px[i] - mu;
            sq += d * d;
        });
        m.mean[k] = mu;
        m.var[k] = sq / count;
    }
    return m;
}

}  // namespace

Tensor batch_normalize(const Tensor& x, const NormConfig& cfg, Mode mode, RunningStats& stats) {
    require_nchw(x, "batch_normalize");
    const Grouping g = per_channel(x);
    if (stats.mean.numel() != static_cast<std::size_t>(g.groups)) {
        throw Error(ErrorKind::ShapeMismatch, "running stats have " + std::to_string(stats.mean.numel()) +
                                                  " channels, input has " + std::to_string(g.groups));
    }
    Buffer mean(g.groups), invstd(g.groups);
    if (mode == Mode::Eval) {
        if (stats.updates.item() < 1.0f) {
            throw Error(ErrorKind::State, "batch norm in eval mode before any running-stat update");
        }
        for (std::int64_t k = 0; k < g.groups; ++k) {
            mean[k] = stats.mean.data()[k];
            invstd[k] = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(stats.var.data()[k]) + cfg.eps));
        }
        return normalize_groups(x, g, std::move(mean), std::move(invstd), false);
    }
    if (g.count() < 2) throw Error(ErrorKind::InvalidShape, "batch norm needs N*H*W >= 2 per channel in train mode");
    const Moments m = moments(x, g);
    const double unbias = static_cast<double>(g.count()) / static_cast<double>(g.count() - 1);
    auto rm = stats.mean.mutable_data();
    auto rv = stats.var.mutable_data();
    for (std::int64_t k = 0; k < g.groups; ++k) {
        mean[k] = static_cast<Real>(m.mean[k]);
        invstd[k] = static_cast<Real>(1.0 / std::sqrt(m.var[k] + cfg.eps));
        rm[k] = static_cast<Real>((1.0 - cfg.momentum) * rm[k] + cfg.momentum * m.mean[k]);
        rv[k] = static_cast<Real>((1.0 - cfg.momentum) * rv[k] + cfg.momentum * m.var[k] * unbias);
    }
    stats.updates.mutable_data()[0] += 1.0f;
    return normalize_groups(x, g, std::move(mean), std::move(invstd), true);
}

Tensor instance_normalize(const Tensor& x, const NormConfig& cfg) {
    require_nchw(x, "instance_normalize");
    const Grouping g = per_plane(x);
    if (g.count() < 2) throw Error(ErrorKind::InvalidShape, "instance norm needs H*W >= 2");
    const Moments m = moments(x, g);
    Buffer mean(g.groups), invstd(g.groups);
    for (std::int64_t k = 0; k < g.groups; ++k) {
        mean[k] = static_cast<Real>(m.mean[k]);
        invstd[k] = static_cast<Real>(1.0 / std::sqrt(m.var[k] + cfg.eps));
    }
    return normalize_groups(x, g, std::move(mean), std::move(invstd), true);
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    require_nchw(x, "channel_affine");
    if (!gamma.defined() && !beta.defined()) return x;
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if ((gamma.defined() && gamma.numel() != static_cast<std::size_t>(c)) ||
        (beta.defined() && beta.numel() != static_cast<std::size_t>(c))) {
        throw Error(ErrorKind::ShapeMismatch, "affine parameters must have one entry per channel");
    }
    const Real* px = x.data().data();
    Buffer out(x.numel());
    for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t k = 0; k < c; ++k) {
            const Real a = gamma.defined() ? gamma.data()[k] : 1.0f;
            const Real b = beta.defined() ? beta.data()[k] : 0.0f;
            const std::int64_t base = (s * c + k) * hw;
            for (std::int64_t i = 0; i < hw; ++i) out[base + i] = px[base + i] * a + b;
        }
    }
    Tensor y = make_result(x.shape(), std::move(out));
    ImplPtr ix = x.impl();
    ImplPtr ig = gamma.defined() ? gamma.impl() : nullptr;
    ImplPtr ib = beta.defined() ? beta.impl() : nullptr;
    Tape::current().record({x, gamma, beta}, y, [ix, ig, ib, n, c, hw](std::span<const Real> dy) {
        const Real* px = ix->data.data();
        for (std::int64_t k = 0; k < c; ++k) {
            const Real a = ig ? ig->data[k] : 1.0f;
            double sg = 0.0, sb = 0.0;
            for (std::int64_t s = 0; s < n; ++s) {
                const std::int64_t base = (s * c + k) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    sg += static_cast<double>(dy[base + i]) * px[base + i];
                    sb += dy[base + i];
                }
                if (ix->requires_grad) {
                    Real* dx = ix->grad_buffer();
                    for (std::int64_t i = 0; i < hw; ++i) dx[base + i] += dy[base + i] * a;
                }
            }
            if (ig && ig->requires_grad) ig->grad_buffer()[k] += static_cast<Real>(sg);
            if (ib && ib->requires_grad) ib->grad_buffer()[k] += static_cast<Real>(sb);
        }
    });
    return y;
}

Tensor batch_norm(const Tensor& x, const NormConfig& cfg, Mode mode, RunningStats& stats, const Tensor& gamma,
                  const Tensor& beta) {
    return channel_affine(batch_normalize(x, cfg, mode, stats), gamma, beta);
}

Tensor instance_norm(const Tensor& x, const NormConfig& cfg, const Tensor& gamma, const Tensor& beta) {
    return channel_affine(instance_normalize(x, cfg), gamma, beta);
}

Tensor composite_norm(const Tensor& x, const NormConfig& cfg, Mode mode, RunningStats& stats,
                      const Tensor& gamma, const Tensor& beta) {
    switch (cfg.variant) {
        case Variant::None:
            return x;
        case Variant::IN_BN:
            return channel_affine(batch_normalize(instance_normalize(x, cfg), cfg, mode, stats), gamma, beta);
        case Variant::BN_IN:
            return channel_affine(instance_normalize(batch_normalize(x, cfg, mode, stats), cfg), gamma, beta);
        default:
            throw Error(ErrorKind::InvalidConfig, "composite_norm needs IN-BN or BN-IN, got " + to_string(cfg.variant));
    }
}

Tensor apply(const Tensor& x, const NormConfig& cfg, Mode mode, RunningStats& stats, const Tensor& gamma,
             const Tensor& beta) {
    switch (cfg.variant) {
        case Variant::None: return x;
        case Variant::BN: return batch_norm(x, cfg, mode, stats, gamma, beta);
        case Variant::IN: return instance_norm(x, cfg, gamma, beta);
        case Variant::IN_BN:
        case Variant::BN_IN: return composite_norm(x, cfg, mode, stats, gamma, beta);
    }
    return x;
}

}  // namespace owps::norm
