#pragma once

#include <vector>

#include "dpflow/cgu.hpp"
#include "dpflow/core.hpp"
#include "dpflow/encoder.hpp"

namespace dpflow {

/// Refinement weights, shared by every level and iteration.
template <class T>
struct DecoderParams {
    Conv<T> context;       // 1x1, C -> 2C: hidden init and context features
    Conv<T> motion1;       // 1x1, (2r+1)^2 + 2 -> C
    Conv<T> motion2;       // 3x3, C -> C - 2 (flow is appended afterwards)
    Conv<T> gru_zr;        // 3x3, [h, motion, context] -> 2C
    Conv<T> gru_q;         // 1x1, [r*h, motion] -> C
    CGUParams<T> gru_cgu;  // candidate block, gated by context
    Conv<T> head;          // 3x3, C -> C
    Conv<T> flow_head;     // 3x3, C -> 2
    Conv<T> mixture_head;  // 1x1, C -> 3
    Conv<T> mask_head;     // 3x3, C -> C
    Conv<T> mask_out;      // 1x1, C -> 9 f^2

    static constexpr int kDefaultRadius = 4;
    static constexpr int kUpsampleFactor = 4;

    static DecoderParams make(Initializer& init, int width, int radius = kDefaultRadius,
                              int upsample_factor = kUpsampleFactor);

    int width() const { return head.weight->value.dim(0); }
    int radius() const;
    int upsample_factor() const;

    template <class F>
    void visit(const std::string& prefix, F&& f) const {
        context.visit(prefix + ".context", f);
        motion1.visit(prefix + ".motion1", f);
        motion2.visit(prefix + ".motion2", f);
        gru_zr.visit(prefix + ".gru_zr", f);
        gru_q.visit(prefix + ".gru_q", f);
        gru_cgu.visit(prefix + ".gru_cgu", f);
        head.visit(prefix + ".head", f);
        flow_head.visit(prefix + ".flow_head", f);
        mixture_head.visit(prefix + ".mixture_head", f);
        mask_head.visit(prefix + ".mask_head", f);
        mask_out.visit(prefix + ".mask_out", f);
    }
};

template <class T>
struct RefinementState {
    nn::Var<T> hidden;  // [C,h,w]
    nn::Var<T> flow;    // [2,h,w], level resolution
    int level = 0;
    int iteration = 0;
};

/// Output of one refinement step at level resolution. mixture is [alpha, b1, b2].
template <class T>
struct StepOutput {
    nn::Var<T> flow;
    nn::Var<T> mixture;
};

/// One (s, k) prediction resampled to the input resolution.
template <class T>
struct ScalePrediction {
    int level = 0;
    int iteration = 0;
    nn::Var<T> flow;     // [2,H,W]
    nn::Var<T> mixture;  // [3,H,W]
};

/// Plain-value view of a prediction.
struct MixturePrediction {
    int level = 0;
    int iteration = 0;
    FlowField flow;
    std::vector<double> alpha;
    std::vector<double> b1;
    std::vector<double> b2;

    int height() const { return flow.height(); }
    int width() const { return flow.width(); }
};

constexpr double kScaleFloor = 1e-3;

/// Correlation of f1 with f2 backward-warped by flow; (2r+1)^2 channels.
template <class T>
nn::Var<T> correlation_volume(const nn::Var<T>& f1, const nn::Var<T>& f2, const nn::Tensor<T>& flow, int radius);

/// Maps raw head outputs to alpha = sigmoid, b = softplus + floor.
template <class T>
nn::Var<T> mixture_activation(const nn::Var<T>& raw);

/// With isolate_mixture the mixture head reads the trunk features through a stop-gradient, so
/// the likelihood scales train only their own head.
template <class T>
std::pair<RefinementState<T>, StepOutput<T>> refine_step(const DecoderParams<T>& params,
                                                         const RefinementState<T>& state,
                                                         const nn::Var<T>& corr, const nn::Var<T>& context,
                                                         bool isolate_mixture = false);

struct DecodeOptions {
    int iters = 4;
    /// When false only the final (s=1, k=iters) prediction is produced.
    bool all_predictions = true;
};

/// Coarse-to-fine decoding; predictions are ordered from the deepest level to s = 1.
template <class T>
std::vector<ScalePrediction<T>> decode(const DecoderParams<T>& params, const PyramidFeatures<T>& pyr1,
                                       const PyramidFeatures<T>& pyr2, int out_height, int out_width,
                                       const DecodeOptions& options = {});

template <class T>
MixturePrediction to_mixture_prediction(const ScalePrediction<T>& pred);

/// Packs plain values back into constant tensors.
template <class T>
ScalePrediction<T> from_mixture_prediction(const MixturePrediction& pred, bool requires_grad = false);

template <class T>
nn::Tensor<T> flow_to_tensor(const FlowField& flow);
template <class T>
FlowField tensor_to_flow(const nn::Tensor<T>& t);

}  // namespace dpflow
