#include "dpflow/cgu.hpp"

#include <cmath>
#include <stdexcept>

namespace dpflow {

template <class T>
CGUParams<T> CGUParams<T>::make(Initializer& init, int channels, int kernel, double layer_scale) {
    if (channels < 1) throw std::invalid_argument("CGU needs at least one channel");
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("CGU depthwise kernel must be odd");
    CGUParams p;
    p.value = Conv<T>::make(init, channels, channels, 1);
    p.gate = Conv<T>::make(init, channels, channels, 1);
    const double dw_bound = 1.0 / kernel;
    p.dw_weight = nn::parameter(init.uniform_tensor<T>({channels, kernel, kernel}, dw_bound));
    p.dw_bias = nn::parameter(init.uniform_tensor<T>({channels}, dw_bound));
    p.out = Conv<T>::make(init, channels, channels, 1);
    p.layer_scale = nn::parameter(nn::Tensor<T>({channels}, static_cast<T>(layer_scale)));
    return p;
}

template <class T>
nn::Var<T> cgu_forward(const CGUParams<T>& params, const nn::Var<T>& x, const nn::Var<T>& y) {
    const nn::Var<T>& source = y ? y : x;
    if (!source->value.same_shape(x->value)) {
        throw std::invalid_argument("cgu_forward: gate input " + source->value.shape_string() +
                                    " does not match " + x->value.shape_string());
    }
    if (x->value.rank() != 3 || x->value.channels() != params.channels()) {
        throw std::invalid_argument("cgu_forward: expected " + std::to_string(params.channels()) +
                                    " channels, got " + x->value.shape_string());
    }
    auto value = params.value(x);
    auto gate = nn::gelu(nn::depthwise_conv2d(params.gate(source), params.dw_weight, params.dw_bias));
    auto fused = params.out(nn::mul(value, gate));
    return nn::add(x, nn::mul_channel(fused, params.layer_scale));
}

template struct CGUParams<float>;
template struct CGUParams<double>;
template nn::Var<float> cgu_forward(const CGUParams<float>&, const nn::Var<float>&, const nn::Var<float>&);
template nn::Var<double> cgu_forward(const CGUParams<double>&, const nn::Var<double>&, const nn::Var<double>&);

}  // namespace dpflow
