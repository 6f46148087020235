#include "dpflow/decoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dpflow {

template <class T>
DecoderParams<T> DecoderParams<T>::make(Initializer& init, int width, int radius, int upsample_factor) {
    if (width < 3) throw std::invalid_argument("decoder width must be at least 3");
    if (radius < 1) throw std::invalid_argument("correlation radius must be at least 1");
    if (upsample_factor < 1) throw std::invalid_argument("upsample factor must be positive");
    const int corr = (2 * radius + 1) * (2 * radius + 1);
    DecoderParams p;
    p.context = Conv<T>::make(init, width, 2 * width, 1);
    p.motion1 = Conv<T>::make(init, corr + 2, width, 1);
    p.motion2 = Conv<T>::make(init, width, width - 2, 3);
    p.gru_zr = Conv<T>::make(init, 3 * width, 2 * width, 3);
    p.gru_q = Conv<T>::make(init, 2 * width, width, 1);
    p.gru_cgu = CGUParams<T>::make(init, width);
    p.head = Conv<T>::make(init, width, width, 3);
    p.flow_head = Conv<T>::make(init, width, 2, 3);
    // small initial updates keep the first iterations near the incoming flow
    for (auto* t : {&p.flow_head.weight->value, &p.flow_head.bias->value})
        for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] *= T(0.1);
    p.mixture_head = Conv<T>::make(init, width, 3, 1);
    p.mask_head = Conv<T>::make(init, width, width, 3);
    p.mask_out = Conv<T>::make(init, width, 9 * upsample_factor * upsample_factor, 1);
    return p;
}

template <class T>
int DecoderParams<T>::radius() const {
    const int side = static_cast<int>(std::lround(std::sqrt(motion1.weight->value.dim(1) - 2)));
    return (side - 1) / 2;
}

template <class T>
int DecoderParams<T>::upsample_factor() const {
    return static_cast<int>(std::lround(std::sqrt(mask_out.weight->value.dim(0) / 9)));
}

template <class T>
nn::Var<T> correlation_volume(const nn::Var<T>& f1, const nn::Var<T>& f2, const nn::Tensor<T>& flow, int radius) {
    if (!f1->value.same_shape(f2->value)) {
        throw std::invalid_argument("correlation_volume: feature shapes " + f1->value.shape_string() + " and " +
                                    f2->value.shape_string() + " differ");
    }
    if (radius < 1) throw std::invalid_argument("correlation_volume: radius must be at least 1");
    return nn::local_correlation(f1, nn::warp(f2, flow), radius);
}

template <class T>
nn::Var<T> mixture_activation(const nn::Var<T>& raw) {
    auto alpha = nn::sigmoid(nn::slice_channels(raw, 0, 1));
    auto b1 = nn::add_scalar(nn::softplus(nn::slice_channels(raw, 1, 2)), T(kScaleFloor));
    auto b2 = nn::add_scalar(nn::softplus(nn::slice_channels(raw, 2, 3)), T(kScaleFloor));
    return nn::concat<T>({alpha, b1, b2});
}

template <class T>
std::pair<RefinementState<T>, StepOutput<T>> refine_step(const DecoderParams<T>& params,
                                                         const RefinementState<T>& state,
                                                         const nn::Var<T>& corr, const nn::Var<T>& context,
                                                         bool isolate_mixture) {
    const auto& fv = state.flow->value;
    const int C = params.width();
    const int D = (2 * params.radius() + 1) * (2 * params.radius() + 1);
    if (fv.rank() != 3 || fv.channels() != 2) throw std::invalid_argument("refine_step: flow must be [2,h,w]");
    auto same_plane = [&](const nn::Tensor<T>& t) { return t.height() == fv.height() && t.width() == fv.width(); };
    if (!same_plane(corr->value) || corr->value.channels() != D) {
        throw std::invalid_argument("refine_step: correlation " + corr->value.shape_string() +
                                    " does not match flow " + fv.shape_string());
    }
    if (!same_plane(context->value) || context->value.channels() != C || !same_plane(state.hidden->value) ||
        state.hidden->value.channels() != C) {
        throw std::invalid_argument("refine_step: hidden/context shape mismatch");
    }

    auto m = nn::gelu(params.motion1(nn::concat<T>({corr, state.flow})));
    m = nn::gelu(params.motion2(m));
    auto motion = nn::concat<T>({m, state.flow});

    auto zr = nn::sigmoid(params.gru_zr(nn::concat<T>({state.hidden, motion, context})));
    auto z = nn::slice_channels(zr, 0, C);
    auto r = nn::slice_channels(zr, C, 2 * C);
    auto q_in = params.gru_q(nn::concat<T>({nn::mul(r, state.hidden), motion}));
    auto q = nn::tanh(cgu_forward(params.gru_cgu, q_in, context));
    auto h = gru_blend(state.hidden, z, q);

    auto feat = nn::gelu(params.head(h));
    auto flow = nn::add(state.flow, params.flow_head(feat));
    auto mixture = mixture_activation(params.mixture_head(isolate_mixture ? nn::detach(feat) : feat));

    RefinementState<T> next{h, flow, state.level, state.iteration + 1};
    return {next, {flow, mixture}};
}

namespace {

// Bilinear resample of a flow map with per-axis magnitude scaling.
template <class T>
nn::Var<T> resize_flow_var(const nn::Var<T>& flow, int height, int width) {
    const auto& v = flow->value;
    if (v.height() == height && v.width() == width) return flow;
    auto r = nn::resize_bilinear(flow, height, width, nn::ResampleBorder::Extrapolate);
    return nn::scale_channels(r, std::vector<T>{T(double(width) / v.width()), T(double(height) / v.height())});
}

}  // namespace

template <class T>
std::vector<ScalePrediction<T>> decode(const DecoderParams<T>& params, const PyramidFeatures<T>& pyr1,
                                       const PyramidFeatures<T>& pyr2, int out_height, int out_width,
                                       const DecodeOptions& options) {
    const int N = pyr1.count();
    if (N < 1) throw std::invalid_argument("decode: empty pyramid");
    if (pyr2.count() != N) {
        throw std::invalid_argument("decode: pyramids have " + std::to_string(N) + " and " +
                                    std::to_string(pyr2.count()) + " levels");
    }
    if (options.iters < 1) throw std::invalid_argument("decode: iters_per_level must be at least 1");
    const int C = params.width();
    const int f = params.upsample_factor();
    const int radius = params.radius();

    std::vector<ScalePrediction<T>> preds;
    preds.reserve(static_cast<std::size_t>(N * options.iters));
    nn::Tensor<T> carried;
    for (int s = N; s >= 1; --s) {
        const auto& f1 = pyr1.level(s);
        const auto& f2 = pyr2.level(s);
        if (!f1->value.same_shape(f2->value) || f1->value.channels() != C) {
            throw std::invalid_argument("decode: level " + std::to_string(s) + " features do not match");
        }
        const int h = f1->value.height(), w = f1->value.width();
        if (s == 1 && (f * h < out_height || f * w < out_width)) {
            throw std::invalid_argument("decode: finest level too small for the output size");
        }

        // matching features are standardised per channel so correlation magnitudes stay bounded
        const auto m1 = nn::instance_norm(f1), m2 = nn::instance_norm(f2);
        auto ctx_all = params.context(f1);
        RefinementState<T> state;
        state.hidden = nn::tanh(nn::slice_channels(ctx_all, 0, C));
        auto context = nn::relu(nn::slice_channels(ctx_all, C, 2 * C));
        state.level = s;
        if (carried.empty()) {
            state.flow = nn::constant(nn::Tensor<T>({2, h, w}));
        } else {
            nn::NoGradGuard guard;
            state.flow = resize_flow_var(nn::constant(carried), h, w);
        }

        for (int k = 1; k <= options.iters; ++k) {
            auto corr = correlation_volume(m1, m2, state.flow->value, radius);
            auto [next, out] = refine_step(params, state, corr, context, true);
            const bool keep = options.all_predictions || (s == 1 && k == options.iters);
            if (keep) {
                ScalePrediction<T> p;
                p.level = s;
                p.iteration = k;
                if (s == 1) {
                    auto mask = nn::scale(params.mask_out(nn::gelu(params.mask_head(next.hidden))), T(0.25));
                    p.flow = nn::convex_upsample(out.flow, mask, f, out_height, out_width);
                } else {
                    p.flow = resize_flow_var(out.flow, out_height, out_width);
                }
                p.mixture = nn::resize_bilinear(out.mixture, out_height, out_width, nn::ResampleBorder::Clamp);
                preds.push_back(std::move(p));
            }
            state = next;
            state.flow = nn::detach(next.flow);
        }
        carried = state.flow->value;
    }
    return preds;
}

template <class T>
nn::Tensor<T> flow_to_tensor(const FlowField& flow) {
    nn::Tensor<T> t({2, flow.height(), flow.width()});
    const auto u = flow.u_plane();
    const auto v = flow.v_plane();
    for (std::size_t i = 0; i < u.size(); ++i) {
        t[i] = static_cast<T>(u[i]);
        t[u.size() + i] = static_cast<T>(v[i]);
    }
    return t;
}

template <class T>
FlowField tensor_to_flow(const nn::Tensor<T>& t) {
    if (t.rank() != 3 || t.channels() != 2) throw std::invalid_argument("tensor_to_flow: expected [2,H,W]");
    FlowField flow(t.height(), t.width());
    auto u = flow.u_plane();
    auto v = flow.v_plane();
    for (std::size_t i = 0; i < u.size(); ++i) {
        u[i] = static_cast<double>(t[i]);
        v[i] = static_cast<double>(t[u.size() + i]);
    }
    return flow;
}

template <class T>
MixturePrediction to_mixture_prediction(const ScalePrediction<T>& pred) {
    MixturePrediction out;
    out.level = pred.level;
    out.iteration = pred.iteration;
    out.flow = tensor_to_flow(pred.flow->value);
    const auto& m = pred.mixture->value;
    const std::size_t n = m.plane();
    out.alpha.resize(n);
    out.b1.resize(n);
    out.b2.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.alpha[i] = m[i];
        out.b1[i] = m[n + i];
        out.b2[i] = m[2 * n + i];
    }
    return out;
}

template <class T>
ScalePrediction<T> from_mixture_prediction(const MixturePrediction& pred, bool requires_grad) {
    const std::size_t n = pred.flow.size();
    if (pred.alpha.size() != n || pred.b1.size() != n || pred.b2.size() != n) {
        throw std::invalid_argument("mixture parameters do not match the flow size");
    }
    nn::Tensor<T> m({3, pred.height(), pred.width()});
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = static_cast<T>(pred.alpha[i]);
        m[n + i] = static_cast<T>(pred.b1[i]);
        m[2 * n + i] = static_cast<T>(pred.b2[i]);
    }
    ScalePrediction<T> out;
    out.level = pred.level;
    out.iteration = pred.iteration;
    out.flow = requires_grad ? nn::parameter(flow_to_tensor<T>(pred.flow)) : nn::constant(flow_to_tensor<T>(pred.flow));
    out.mixture = requires_grad ? nn::parameter(std::move(m)) : nn::constant(std::move(m));
    return out;
}

#define DPFLOW_INSTANTIATE_DECODER(T)                                                                           \
    template struct DecoderParams<T>;                                                                           \
    template nn::Var<T> correlation_volume(const nn::Var<T>&, const nn::Var<T>&, const nn::Tensor<T>&, int);    \
    template nn::Var<T> mixture_activation(const nn::Var<T>&);                                                  \
    template std::pair<RefinementState<T>, StepOutput<T>> refine_step(                                          \
        const DecoderParams<T>&, const RefinementState<T>&, const nn::Var<T>&, const nn::Var<T>&, bool);        \
    template std::vector<ScalePrediction<T>> decode(const DecoderParams<T>&, const PyramidFeatures<T>&,         \
                                                    const PyramidFeatures<T>&, int, int, const DecodeOptions&); \
    template MixturePrediction to_mixture_prediction(const ScalePrediction<T>&);                                \
    template ScalePrediction<T> from_mixture_prediction<T>(const MixturePrediction&, bool);                     \
    template nn::Tensor<T> flow_to_tensor<T>(const FlowField&);                                                 \
    template FlowField tensor_to_flow(const nn::Tensor<T>&);

DPFLOW_INSTANTIATE_DECODER(float)
DPFLOW_INSTANTIATE_DECODER(double)

}  // namespace dpflow
