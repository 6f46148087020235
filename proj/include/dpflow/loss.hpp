#pragma once

#include <vector>

#include "dpflow/core.hpp"
#include "dpflow/decoder.hpp"

namespace dpflow {

struct LossConfig {
    double gamma = 0.8;
    int n_scales = 3;
    int n_iters = 4;

    /// Throws std::invalid_argument unless 0 < gamma < 1 and both counts are positive.
    void validate() const;

    /// gamma^(n_iters*s - k); s = 1 is the finest scale.
    double weight(int scale, int iteration) const;
};

struct LossValue {
    double value = 0.0;
    /// Set when the mask had no valid pixel; the value is then 0.
    bool empty_mask = false;
};

/// Mixture-of-Laplace negative log-likelihood averaged over valid pixels and both axes.
LossValue mol_nll(const MixturePrediction& pred, const FlowField& gt, const ValidityMask& mask);

template <class T>
nn::Var<T> mol_nll(const ScalePrediction<T>& pred, const nn::Tensor<T>& gt, const ValidityMask& mask);

/// Weighted sum over every (s, k) prediction. The predictions must cover s = 1..n_scales and
/// k = 1..n_iters exactly once each; their order does not matter.
LossValue multiscale_loss(const std::vector<MixturePrediction>& preds, const FlowField& gt, const ValidityMask& mask,
                          const LossConfig& cfg);

template <class T>
nn::Var<T> multiscale_loss(const std::vector<ScalePrediction<T>>& preds, const FlowField& gt,
                           const ValidityMask& mask, const LossConfig& cfg);

}  // namespace dpflow
