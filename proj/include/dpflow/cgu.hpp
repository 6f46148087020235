#pragma once

#include "dpflow/params.hpp"

namespace dpflow {

/// Cross-Gated Unit parameters.
///
///   value = Conv1(x)
///   gate  = GELU(ConvDW(Conv1(y)))
///   out   = x + lambda * Conv1(value * gate)
///
/// With no y the unit gates x by itself. All 1x1 convolutions keep the channel count, so the
/// output always has the input's shape.
template <class T>
struct CGUParams {
    Conv<T> value;
    Conv<T> gate;
    nn::Var<T> dw_weight;  // [C, k, k]
    nn::Var<T> dw_bias;    // [C]
    Conv<T> out;
    nn::Var<T> layer_scale;  // [C]

    static constexpr int kDefaultKernel = 7;
    static constexpr double kDefaultLayerScale = 1e-2;

    static CGUParams make(Initializer& init, int channels, int kernel = kDefaultKernel,
                          double layer_scale = kDefaultLayerScale);

    int channels() const { return layer_scale->value.dim(0); }
    int kernel() const { return dw_weight->value.dim(1); }

    template <class F>
    void visit(const std::string& prefix, F&& f) const {
        value.visit(prefix + ".value", f);
        gate.visit(prefix + ".gate", f);
        f(prefix + ".dw.weight", dw_weight);
        f(prefix + ".dw.bias", dw_bias);
        out.visit(prefix + ".out", f);
        f(prefix + ".layer_scale", layer_scale);
    }
};

/// Self-gate when y is null, cross-gate otherwise. Throws std::invalid_argument when y's shape
/// differs from x's.
template <class T>
nn::Var<T> cgu_forward(const CGUParams<T>& params, const nn::Var<T>& x, const nn::Var<T>& y = nullptr);

extern template struct CGUParams<float>;
extern template struct CGUParams<double>;
extern template nn::Var<float> cgu_forward(const CGUParams<float>&, const nn::Var<float>&, const nn::Var<float>&);
extern template nn::Var<double> cgu_forward(const CGUParams<double>&, const nn::Var<double>&,
                                            const nn::Var<double>&);

}  // namespace dpflow
