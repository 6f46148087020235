#include "dpflow/params.hpp"

#include <stdexcept>

namespace dpflow {

template <class T>
nn::Var<T> convgru_forward(const ConvGRUParams<T>& p, const nn::Var<T>& h, const nn::Var<T>& x) {
    const int hidden = p.hidden();
    if (h->value.channels() != hidden) throw std::invalid_argument("convgru: hidden width mismatch");
    auto hx = nn::concat<T>({h, x});
    auto zr = nn::sigmoid(p.zr(hx));
    auto z = nn::slice_channels(zr, 0, hidden);
    auto r = nn::slice_channels(zr, hidden, 2 * hidden);
    auto q = nn::tanh(p.q(nn::concat<T>({nn::mul(r, h), x})));
    return gru_blend(h, z, q);
}

template nn::Var<float> convgru_forward(const ConvGRUParams<float>&, const nn::Var<float>&, const nn::Var<float>&);
template nn::Var<double> convgru_forward(const ConvGRUParams<double>&, const nn::Var<double>&,
                                         const nn::Var<double>&);

}  // namespace dpflow
