#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "owps/tensor.hpp"

namespace owps::losses {

enum class Kind { CE, Dice, SquareDice, ExpLogDice, ExpSquareDice };

std::string to_string(Kind kind);  // "CE", "dice", "square-dice", "exp-log-dice", "exp-square-dice"
Kind parse_kind(const std::string& name);

struct LossConfig {
    Kind region_kind = Kind::SquareDice;
    Kind edge_kind = Kind::SquareDice;
    Real gamma = 0.3f;
    Real smooth_eps = 1e-6f;

    void validate() const;
};

// Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7].
Tensor ce_loss(const Tensor& p, const Tensor& t);
// 1 - (2 sum(p t) + eps) / (sum p^2 + sum t^2 + eps)
Tensor dice_loss(const Tensor& p, const Tensor& t, Real smooth_eps);
// 1 - (2 sum((p t)^2) + eps) / (sum p^2 + sum t^2 + eps)
Tensor square_dice_loss(const Tensor& p, const Tensor& t, Real smooth_eps);
// (-log(dice ratio))^gamma
Tensor exp_log_dice_loss(const Tensor& p, const Tensor& t, Real gamma, Real smooth_eps);
// (-log(square-dice ratio))^gamma
Tensor exp_square_dice_loss(const Tensor& p, const Tensor& t, Real gamma, Real smooth_eps);

Tensor loss(Kind kind, const Tensor& p, const Tensor& t, Real gamma, Real smooth_eps);

// Closed-form dL/dp_j of the unsmoothed dice (Kind::Dice) or square dice
// (Kind::SquareDice) loss. Evaluated in double precision.
std::vector<double> analytic_grad(Kind kind, std::span<const Real> p, std::span<const Real> t);

// Unweighted sum of the region and edge terms.
Tensor total_loss(const Tensor& region_loss, const Tensor& edge_loss);

// Single-pixel (t = 1) loss curves for p = 0.01 .. 0.99, one CSV row per p.
void emit_loss_curves(const std::filesystem::path& path, Real gamma = 0.3f, Real smooth_eps = 1e-6f);

}  // namespace owps::losses
