#include "owps/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "owps/ops.hpp"

namespace owps::losses {

std::string to_string(Kind kind) {
    switch (kind) {
        case Kind::CE: return "CE";
        case Kind::Dice: return "dice";
        case Kind::SquareDice: return "square-dice";
        case Kind::ExpLogDice: return "exp-log-dice";
        case Kind::ExpSquareDice: return "exp-square-dice";
    }
    return "CE";
}

Kind parse_kind(const std::string& name) {
    if (name == "CE") return Kind::CE;
    if (name == "dice") return Kind::Dice;
    if (name == "square-dice") return Kind::SquareDice;
    if (name == "exp-log-dice") return Kind::ExpLogDice;
    if (name == "exp-square-dice") return Kind::ExpSquareDice;
    throw Error(ErrorKind::InvalidConfig, "loss: unknown kind '" + name + "'");
}

void LossConfig::validate() const {
    if (!(gamma > 0.0f)) throw Error(ErrorKind::InvalidConfig, "loss.gamma must be > 0");
    if (!(smooth_eps > 0.0f)) throw Error(ErrorKind::InvalidConfig, "loss.smooth_eps must be > 0");
}

namespace {

void require_pair(const Tensor& p, const Tensor& t) {
    if (p.shape() != t.shape()) {
        throw Error(ErrorKind::ShapeMismatch, "prediction " + shape_str(p.shape()) + " vs label " + shape_str(t.shape()));
    }
}

// (numerator_sum * 2 + eps) / (sum p^2 + sum t^2 + eps)
Tensor smoothed_ratio(const Tensor& numerator_terms, const Tensor& p, const Tensor& t, Real eps) {
    Tensor num = ops::affine_scalar(ops::reduce_sum(numerator_terms), 2.0f, eps);
    Tensor den = ops::add_scalar(ops::add(ops::reduce_sum(ops::square(p)), ops::reduce_sum(ops::square(t))), eps);
    return ops::div(num, den);
}

Tensor one_minus(const Tensor& x) { return ops::affine_scalar(x, -1.0f, 1.0f); }

// [-log r]^gamma; the base is floored so a perfect ratio stays finite.
Tensor exp_log(const Tensor& ratio, Real gamma) {
    Tensor neg_log = ops::clamp(ops::negate(ops::log(ratio)), 1e-20f, 3.0e38f);
    return ops::pow_scalar(neg_log, gamma);
}

}  // namespace

Tensor ce_loss(const Tensor& p, const Tensor& t) {
    require_pair(p, t);
    Tensor pc = ops::clamp(p, 1e-7f, 1.0f - 1e-7f);
    Tensor pos = ops::mul(t, ops::log(pc));
    Tensor neg = ops::mul(one_minus(t), ops::log(one_minus(pc)));
    return ops::negate(ops::mean(ops::add(pos, neg)));
}

Tensor dice_loss(const Tensor& p, const Tensor& t, Real smooth_eps) {
    require_pair(p, t);
    return one_minus(smoothed_ratio(ops::mul(p, t), p, t, smooth_eps));
}

Tensor square_dice_loss(const Tensor& p, const Tensor& t, Real smooth_eps) {
    require_pair(p, t);
    return one_minus(smoothed_ratio(ops::square(ops::mul(p, t)), p, t, smooth_eps));
}

Tensor exp_log_dice_loss(const Tensor& p, const Tensor& t, Real gamma, Real smooth_eps) {
    require_pair(p, t);
    return exp_log(smoothed_ratio(ops::mul(p, t), p, t, smooth_eps), gamma);
}

Tensor exp_square_dice_loss(const Tensor& p, const Tensor& t, Real gamma, Real smooth_eps) {
    require_pair(p, t);
    return exp_log(smoothed_ratio(ops::square(ops::mul(p, t)), p, t, smooth_eps), gamma);
}

Tensor loss(Kind kind, const Tensor& p, const Tensor& t, Real gamma, Real smooth_eps) {
    switch (kind) {
        case Kind::CE: return ce_loss(p, t);
        case Kind::Dice: return dice_loss(p, t, smooth_eps);
        case Kind::SquareDice: return square_dice_loss(p, t, smooth_eps);
        case Kind::ExpLogDice: return exp_log_dice_loss(p, t, gamma, smooth_eps);
        case Kind::ExpSquareDice: return exp_square_dice_loss(p, t, gamma, smooth_eps);
    }
    throw Error(ErrorKind::InvalidConfig, "unknown loss kind");
}

std::vector<double> analytic_grad(Kind kind, std::span<const Real> p, std::span<const Real> t) {
    if (p.size() != t.size()) throw Error(ErrorKind::ShapeMismatch, "analytic_grad: p and t lengths differ");
    if (kind != Kind::Dice && kind != Kind::SquareDice) {
        throw Error(ErrorKind::InvalidConfig, "analytic_grad supports dice and square-dice only");
    }
    double sum_sq = 0.0, overlap = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = p[i], ti = t[i];
        sum_sq += pi * pi + ti * ti;
        overlap += kind == Kind::Dice ? pi * ti : (pi * ti) * (pi * ti);
    }
    if (sum_sq == 0.0) throw Error(ErrorKind::Domain, "analytic_grad: degenerate denominator (p and t all zero)");
    const double denom = sum_sq * sum_sq;
    std::vector<double> grad(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) {
        const double pj = p[j], tj = t[j];
        if (kind == Kind::Dice) {
            grad[j] = -(2.0 * tj * sum_sq - 4.0 * pj * overlap) / denom;
        } else {
            grad[j] = -4.0 * (pj * tj * tj * sum_sq - pj * overlap) / denom;
        }
    }
    return grad;
}

Tensor total_loss(const Tensor& region_loss, const Tensor& edge_loss) { return ops::add(region_loss, edge_loss); }

namespace {

// Single-pixel losses in double precision, matching the tensor versions.
std::array<double, 5> pixel_losses(double p, double t, double gamma, double eps) {
    const double pc = std::clamp(p, 1e-7, 1.0 - 1e-7);
    const double den = p * p + t * t + eps;
    const double ratio = (2.0 * p * t + eps) / den;
    const double square_ratio = (2.0 * (p * t) * (p * t) + eps) / den;
    return {-(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc)), 1.0 - ratio, 1.0 - square_ratio,
            std::pow(std::max(-std::log(ratio), 1e-20), gamma), std::pow(std::max(-std::log(square_ratio), 1e-20), gamma)};
}

}  // namespace

void emit_loss_curves(const std::filesystem::path& path, Real gamma, Real smooth_eps) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << "p,ce,dice,square_dice,exp_log_dice,exp_square_dice\n";
    for (int step = 1; step <= 99; ++step) {
        const double p = step / 100.0;
        const auto v = pixel_losses(p, 1.0, gamma, smooth_eps);
        char line[160];
        std::snprintf(line, sizeof line, "%.2f,%.6f,%.6f,%.6f,%.6f,%.6f\n", p, v[0], v[1], v[2], v[3], v[4]);
        out << line;
    }
    if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace owps::losses
