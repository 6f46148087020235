#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <string>

#include "dpflow/nn/ops.hpp"

namespace dpflow {

/// Deterministic parameter initializer. Values depend only on the seed and the call order.
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    double uniform(double lo, double hi) {
        const double unit = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
        return lo + (hi - lo) * unit;
    }

    template <class T>
    nn::Tensor<T> uniform_tensor(std::vector<int> shape, double bound) {
        nn::Tensor<T> t(std::move(shape));
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(uniform(-bound, bound));
        return t;
    }

private:
    std::mt19937_64 rng_;
};

/// Plain convolution layer with bias.
template <class T>
struct Conv {
    nn::Var<T> weight;
    nn::Var<T> bias;
    int stride = 1;

    static Conv make(Initializer& init, int in, int out, int kernel, int stride = 1) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
        Conv c;
        c.weight = nn::parameter(init.uniform_tensor<T>({out, in, kernel, kernel}, bound));
        c.bias = nn::parameter(init.uniform_tensor<T>({out}, bound));
        c.stride = stride;
        return c;
    }

    nn::Var<T> operator()(const nn::Var<T>& x) const { return nn::conv2d(x, weight, bias, stride); }

    template <class F>
    void visit(const std::string& prefix, F&& f) const {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

/// Standard convolutional GRU cell with 3x3 gates:
/// z, r = sigmoid(conv([h, x])), q = tanh(conv([r*h, x])), h' = (1-z) h + z q.
template <class T>
struct ConvGRUParams {
    Conv<T> zr;
    Conv<T> q;

    static ConvGRUParams make(Initializer& init, int hidden, int input) {
        return {Conv<T>::make(init, hidden + input, 2 * hidden, 3), Conv<T>::make(init, hidden + input, hidden, 3)};
    }

    int hidden() const { return q.weight->value.dim(0); }

    template <class F>
    void visit(const std::string& prefix, F&& f) const {
        zr.visit(prefix + ".zr", f);
        q.visit(prefix + ".q", f);
    }
};

template <class T>
nn::Var<T> convgru_forward(const ConvGRUParams<T>& p, const nn::Var<T>& h, const nn::Var<T>& x);

/// h + z * (q - h)
template <class T>
nn::Var<T> gru_blend(const nn::Var<T>& h, const nn::Var<T>& z, const nn::Var<T>& q) {
    return nn::add(h, nn::mul(z, nn::sub(q, h)));
}

extern template nn::Var<float> convgru_forward(const ConvGRUParams<float>&, const nn::Var<float>&,
                                               const nn::Var<float>&);
extern template nn::Var<double> convgru_forward(const ConvGRUParams<double>&, const nn::Var<double>&,
                                                const nn::Var<double>&);

}  // namespace dpflow
