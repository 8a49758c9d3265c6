#pragma once

#include <string>

#include "owps/tensor.hpp"

namespace owps::norm {

enum class Variant { None, BN, IN, IN_BN, BN_IN };

enum class Mode { Train, Eval };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);  // "BN", "IN", "IN-BN", "BN-IN", "none"

struct NormConfig {
    Variant variant = Variant::IN_BN;
    Real eps = 1e-5f;
    Real momentum = 0.1f;

    void validate() const;
};

// Per-channel running statistics for the batch-norm stage. `updates` is a
// one-element counter of training-mode batches seen.
struct RunningStats {
    Tensor mean;
    Tensor var;
    Tensor updates;

    static RunningStats create(std::int64_t channels);
};

// Pre-affine stages.
Tensor batch_normalize(const Tensor& x, const NormConfig& cfg, Mode mode, RunningStats& stats);
Tensor instance_normalize(const Tensor& x, const NormConfig& cfg);
// y = gamma_c * x + beta_c; undefined gamma/beta act as 1/0.
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);

Tensor batch_norm(const Tensor& x, const NormConfig& cfg, Mode mode, RunningStats& stats, const Tensor& gamma,
                  const Tensor& beta);
Tensor instance_norm(const Tensor& x, const NormConfig& cfg, const Tensor& gamma, const Tensor& beta);
// IN-BN / BN-IN: the two stages in name order, one shared affine at the end.
Tensor composite_norm(const Tensor& x, const NormConfig& cfg, Mode mode, RunningStats& stats,
                      const Tensor& gamma, const Tensor& beta);

// Dispatches on cfg.variant; None returns x unchanged.
Tensor apply(const Tensor& x, const NormConfig& cfg, Mode mode, RunningStats& stats, const Tensor& gamma,
             const Tensor& beta);

}  // namespace owps::norm
